//! Synthetic multimodal scene generation and dataset ingestion.
//!
//! The generator renders label maps plus paired grayscale images whose
//! scene labels follow one of three rules: a graph motif (classes 1 and 2
//! touching), a global image brightness band, or the XOR of the two — the
//! last forces both streams to matter.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{load_image, load_label_map, save_imgt, save_lmap, ImageTensor};
use crate::scenegraph::{
    brute_force_adjacency_oracle, build_scene_graph, extract_regions, ExtractionOptions, LabelMap,
};
use crate::train::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Scene label 1 iff a class-1 region touches a class-2 region.
    Motif,
    /// Scene label 1 iff the image's mean brightness exceeds 0.5.
    ImagePattern,
    /// XOR of the motif and brightness predicates.
    Xor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Object classes on the canvas, including background class 0.
    pub num_object_classes: usize,
    /// Scene labels; the built-in rules are binary.
    pub num_scene_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Uniform per-pixel noise amplitude added to the rendered image.
    pub noise_level: f64,
    pub label_rule: LabelRule,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 32,
            width: 32,
            num_object_classes: 6,
            num_scene_classes: 2,
            min_objects: 1,
            max_objects: 4,
            noise_level: 0.05,
            label_rule: LabelRule::Xor,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_scene_classes < 2 {
            return Err(Error::Config("need at least 2 scene classes".into()));
        }
        if self.num_object_classes < 3 {
            return Err(Error::Config("need at least 3 object classes".into()));
        }
        if self.num_scene_classes != 2 {
            return Err(Error::Config(
                "built-in label rules are binary; num_scene_classes must be 2".into(),
            ));
        }
        if self.max_objects < self.min_objects || self.max_objects == 0 {
            return Err(Error::Config("invalid objects-per-scene range".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("canvas must be at least 8x8".into()));
        }
        if !(0.0..0.15).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must be in [0, 0.15)".into()));
        }
        Ok(())
    }

    /// Stable content hash recorded as dataset provenance.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub map: String,
    pub image: String,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub num_object_classes: usize,
    pub num_scene_classes: usize,
    /// Generator spec hash, or "external" for ingested data.
    pub provenance: String,
    pub samples: Vec<ManifestEntry>,
}

// ---------------------------------------------------------------------------
// Predicates
// ---------------------------------------------------------------------------

/// Ground-truth motif check used to certify generated labels: region
/// classes come from extraction, edges from the independent pixel-pair
/// oracle.
pub fn motif_present(map: &LabelMap) -> bool {
    let opts = ExtractionOptions::default();
    let regions = extract_regions(map, &opts);
    let edges = brute_force_adjacency_oracle(map, &opts);
    edges.iter().any(|&(a, b)| {
        let (ca, cb) = (regions[a].class_id, regions[b].class_id);
        (ca == 1 && cb == 2) || (ca == 2 && cb == 1)
    })
}

/// Brightness predicate matching the generator's band assignment.
pub fn bright_image(img: &ImageTensor) -> bool {
    img.mean() > 0.5
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Disc,
}

fn paint_rect(map: &mut LabelMap, r0: usize, c0: usize, h: usize, w: usize, class: u16) {
    for r in r0..(r0 + h).min(map.height()) {
        for c in c0..(c0 + w).min(map.width()) {
            map.set(r, c, class).expect("class validated");
        }
    }
}

fn paint_disc(map: &mut LabelMap, cr: usize, cc: usize, radius: usize, class: u16) {
    let r2 = (radius * radius) as isize;
    for r in cr.saturating_sub(radius)..(cr + radius + 1).min(map.height()) {
        for c in cc.saturating_sub(radius)..(cc + radius + 1).min(map.width()) {
            let dr = r as isize - cr as isize;
            let dc = c as isize - cc as isize;
            if dr * dr + dc * dc <= r2 {
                map.set(r, c, class).expect("class validated");
            }
        }
    }
}

/// Renders one label map whose motif predicate equals `want_motif`.
/// Later shapes occlude earlier ones; the motif pair (or its single decoy)
/// is painted last so occlusion cannot erase it.
fn render_map(spec: &SyntheticSpec, want_motif: bool, rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let (h, w, c) = (spec.height, spec.width, spec.num_object_classes);
    for _attempt in 0..64 {
        let mut map = LabelMap::filled(h, w, c, 0)?;
        // filler objects from the non-motif classes when available
        let n = rng.gen_range(spec.min_objects..=spec.max_objects);
        for _ in 0..n {
            let class = if c > 3 {
                rng.gen_range(3..c) as u16
            } else {
                0
            };
            let kind = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Disc };
            match kind {
                Shape::Rect => {
                    let rh = rng.gen_range(2..=h / 2);
                    let rw = rng.gen_range(2..=w / 2);
                    let r0 = rng.gen_range(0..h - 1);
                    let c0 = rng.gen_range(0..w - 1);
                    paint_rect(&mut map, r0, c0, rh, rw, class);
                }
                Shape::Disc => {
                    let radius = rng.gen_range(1..=h.min(w) / 4);
                    let cr = rng.gen_range(0..h);
                    let cc = rng.gen_range(0..w);
                    paint_disc(&mut map, cr, cc, radius, class);
                }
            }
        }
        // motif pair: two side-by-side rectangles of classes 1 and 2
        let rh = rng.gen_range(3..=h / 3);
        let rw = rng.gen_range(3..=w / 4);
        let r0 = rng.gen_range(0..h - rh);
        let c0 = rng.gen_range(0..w - 2 * rw);
        if want_motif {
            paint_rect(&mut map, r0, c0, rh, rw, 1);
            paint_rect(&mut map, r0, c0 + rw, rh, rw, 2);
        } else {
            // only one of the pair appears, far from any partner
            let class = if rng.gen_bool(0.5) { 1 } else { 2 };
            paint_rect(&mut map, r0, c0, rh, rw, class);
        }
        if motif_present(&map) == want_motif {
            return Ok(map);
        }
        // filler occlusion broke the predicate; redraw
    }
    Err(Error::Data(
        "could not satisfy motif predicate after 64 attempts".into(),
    ))
}

/// Renders the paired image: per-class base gray, seeded noise, and a
/// global brightness offset that realizes the `want_bright` band.
fn render_image(
    spec: &SyntheticSpec,
    map: &LabelMap,
    want_bright: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let (h, w, c) = (spec.height, spec.width, spec.num_object_classes);
    for _attempt in 0..64 {
        let offset = if want_bright {
            rng.gen_range(0.15..0.3)
        } else {
            rng.gen_range(-0.3..-0.15)
        };
        let mut data = Vec::with_capacity(h * w);
        for &pixel in map.pixels() {
            let base = 0.4 + 0.2 * pixel as f64 / (c - 1) as f64;
            let noise = rng.gen_range(-spec.noise_level..=spec.noise_level);
            data.push((base + noise + offset).clamp(0.0, 1.0));
        }
        let img = ImageTensor::new(h, w, 1, data)?;
        // re-check after clamping and f32 storage rounding, with a margin
        let stored_mean = img
            .data()
            .iter()
            .map(|&v| v as f32 as f64)
            .sum::<f64>()
            / (h * w) as f64;
        if (stored_mean > 0.52) == want_bright && (stored_mean < 0.48) == !want_bright {
            return Ok(img);
        }
    }
    Err(Error::Data(
        "could not satisfy brightness predicate after 64 attempts".into(),
    ))
}

fn derive_seed(root: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One generated sample before serialization.
pub struct GeneratedSample {
    pub map: LabelMap,
    pub image: ImageTensor,
    pub label: usize,
}

/// Deterministically generates sample `index` of a split. Each sample has
/// its own derived seed, so generation order (or parallelism) cannot change
/// the output.
pub fn gen_sample(spec: &SyntheticSpec, split: &str, index: usize) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split, index));
    let motif = rng.gen_bool(0.5);
    let bright = rng.gen_bool(0.5);
    let map = render_map(spec, motif, &mut rng)?;
    let image = render_image(spec, &map, bright, &mut rng)?;
    let label = match spec.label_rule {
        LabelRule::Motif => motif as usize,
        LabelRule::ImagePattern => bright as usize,
        LabelRule::Xor => (motif ^ bright) as usize,
    };
    Ok(GeneratedSample { map, image, label })
}

/// Writes `count` samples plus `manifest_<split>.json` and
/// `labels_<split>.csv` into `dir`. Byte-identical under the same spec.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    split: &str,
    count: usize,
    dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(count);
    let mut csv = String::from("sample_id,label\n");
    for i in 0..count {
        let generated = gen_sample(spec, split, i)?;
        let id = format!("{split}_{i:05}");
        let map_name = format!("{id}.lmap");
        let img_name = format!("{id}.imgt");
        save_lmap(&generated.map, &dir.join(&map_name))?;
        save_imgt(&generated.image, &dir.join(&img_name))?;
        csv.push_str(&format!("{id},{}\n", generated.label));
        samples.push(ManifestEntry {
            id,
            map: map_name,
            image: img_name,
            label: generated.label,
        });
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        num_object_classes: spec.num_object_classes,
        num_scene_classes: spec.num_scene_classes,
        provenance: spec.content_hash(),
        samples,
    };
    fs::write(
        dir.join(format!("manifest_{split}.json")),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    fs::write(dir.join(format!("labels_{split}.csv")), csv)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn sample_err(id: &str, what: impl std::fmt::Display) -> Error {
    Error::Data(format!("sample '{id}': {what}"))
}

/// Loads every sample referenced by a manifest, extracting its scene graph.
/// Paths in the manifest are relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path, opts: &ExtractionOptions) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_manifest_samples(&manifest, base, opts)
}

pub fn load_manifest_samples(
    manifest: &DatasetManifest,
    base: &Path,
    opts: &ExtractionOptions,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if entry.label >= manifest.num_scene_classes {
            return Err(sample_err(
                &entry.id,
                format!(
                    "label {} out of range for {} scene classes",
                    entry.label, manifest.num_scene_classes
                ),
            ));
        }
        let map = load_label_map(&base.join(&entry.map), manifest.num_object_classes)
            .map_err(|e| sample_err(&entry.id, e))?;
        let image = load_image(&base.join(&entry.image)).map_err(|e| sample_err(&entry.id, e))?;
        if image.height() != map.height() || image.width() != map.width() {
            return Err(sample_err(
                &entry.id,
                format!(
                    "image {}x{} does not match map {}x{}",
                    image.height(),
                    image.width(),
                    map.height(),
                    map.width()
                ),
            ));
        }
        let graph = build_scene_graph(&map, opts).map_err(|e| sample_err(&entry.id, e))?;
        out.push(Sample {
            graph,
            image,
            label: entry.label,
        });
    }
    Ok(out)
}

/// Ingests an external folder layout: `maps/<id>.png`, `images/<id>.png`,
/// and `labels.csv` with `sample_id,label` rows.
pub fn load_folder(
    dir: &Path,
    num_object_classes: usize,
    num_scene_classes: usize,
    opts: &ExtractionOptions,
) -> Result<Vec<Sample>> {
    let csv_path = dir.join("labels.csv");
    let text = fs::read_to_string(&csv_path)
        .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line.starts_with("sample_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("labels.csv line {}: missing comma", lineno + 1)))?;
        let label: usize = label.trim().parse().map_err(|e| {
            Error::Parse(format!("labels.csv line {}: bad label: {e}", lineno + 1))
        })?;
        entries.push(ManifestEntry {
            id: id.trim().to_string(),
            map: format!("maps/{}.png", id.trim()),
            image: format!("images/{}.png", id.trim()),
            label,
        });
    }
    let manifest = DatasetManifest {
        split: "external".into(),
        num_object_classes,
        num_scene_classes,
        provenance: "external".into(),
        samples: entries,
    };
    load_manifest_samples(&manifest, dir, opts)
}

/// Convenience used by manifests written next to each other by
/// [`gen_synthetic`].
pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("manifest_{split}.json"))
}
