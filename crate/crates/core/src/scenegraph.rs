//! Scene graph extraction from semantic label maps: regions become nodes
//! (one-hot class features), pixel-boundary adjacency becomes edges.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor2D};

/// H x W raster of class indices in [0, C).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    pixels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, pixels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data("label map must have at least one pixel".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::Data(format!(
                "label map data length {} does not match {height}x{width}",
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|&&p| (p as usize) >= classes) {
            return Err(Error::Data(format!(
                "pixel class {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, class: u16) -> Result<Self> {
        Self::new(height, width, classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, class: u16) -> Result<()> {
        if (class as usize) >= self.classes {
            return Err(Error::Data(format!(
                "pixel class {class} out of range for {} classes",
                self.classes
            )));
        }
        self.pixels[r * self.width + c] = class;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            // Forward half-neighborhood; each unordered pixel pair is
            // visited exactly once.
            Connectivity::Four => &[(0, 1), (1, 0)],
            Connectivity::Eight => &[(0, 1), (1, 0), (1, 1), (1, -1)],
        }
    }
}

/// Whether disconnected same-class regions share a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMode {
    /// One node per maximal connected same-class region.
    Component,
    /// One node per class present in the map.
    Class,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionOptions {
    pub connectivity: Connectivity,
    pub node_mode: NodeMode,
    pub min_region_pixels: usize,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        ExtractionOptions {
            connectivity: Connectivity::Four,
            node_mode: NodeMode::Component,
            min_region_pixels: 0,
        }
    }
}

/// A labeled region of the map: the unit that becomes a graph node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub id: usize,
    pub class_id: u16,
    pub pixel_count: usize,
    /// Raster-order (row, col) membership.
    pub pixels: Vec<(usize, usize)>,
}

/// Connected-component (or per-class) region extraction. Regions are
/// ordered by the raster position of their first pixel; ids are contiguous
/// after the `min_region_pixels` filter.
pub fn extract_regions(map: &LabelMap, opts: &ExtractionOptions) -> Vec<Region> {
    let (h, w) = (map.height, map.width);
    let mut label = vec![usize::MAX; h * w];
    let mut next = 0usize;
    match opts.node_mode {
        NodeMode::Component => {
            // Union-find over raster cells of equal class.
            let mut parent: Vec<usize> = (0..h * w).collect();
            fn find(parent: &mut [usize], mut x: usize) -> usize {
                while parent[x] != x {
                    parent[x] = parent[parent[x]];
                    x = parent[x];
                }
                x
            }
            for r in 0..h {
                for c in 0..w {
                    let here = r * w + c;
                    for &(dr, dc) in opts.connectivity.offsets() {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                            continue;
                        }
                        let there = nr as usize * w + nc as usize;
                        if map.pixels[here] == map.pixels[there] {
                            let (a, b) = (find(&mut parent, here), find(&mut parent, there));
                            if a != b {
                                parent[b.max(a)] = b.min(a);
                            }
                        }
                    }
                }
            }
            for i in 0..h * w {
                let root = find(&mut parent, i);
                if label[root] == usize::MAX {
                    label[root] = next;
                    next += 1;
                }
                label[i] = label[root];
            }
        }
        NodeMode::Class => {
            let mut class_region = vec![usize::MAX; map.classes];
            for i in 0..h * w {
                let cls = map.pixels[i] as usize;
                if class_region[cls] == usize::MAX {
                    class_region[cls] = next;
                    next += 1;
                }
                label[i] = class_region[cls];
            }
        }
    }

    let mut regions: Vec<Region> = Vec::with_capacity(next);
    for _ in 0..next {
        regions.push(Region {
            id: 0,
            class_id: 0,
            pixel_count: 0,
            pixels: Vec::new(),
        });
    }
    for r in 0..h {
        for c in 0..w {
            let reg = &mut regions[label[r * w + c]];
            reg.class_id = map.get(r, c);
            reg.pixel_count += 1;
            reg.pixels.push((r, c));
        }
    }
    regions.retain(|r| r.pixel_count >= opts.min_region_pixels.max(1));
    for (i, r) in regions.iter_mut().enumerate() {
        r.id = i;
    }
    regions
}

fn region_lookup(map: &LabelMap, regions: &[Region]) -> Vec<Option<usize>> {
    let mut lut = vec![None; map.height * map.width];
    for reg in regions {
        for &(r, c) in &reg.pixels {
            lut[r * map.width + c] = Some(reg.id);
        }
    }
    lut
}

/// Boundary scan: rows for horizontal neighbors, columns for vertical
/// neighbors, plus the two diagonals under 8-connectivity. Emits each
/// unordered region pair once.
pub fn extract_adjacency(
    map: &LabelMap,
    regions: &[Region],
    opts: &ExtractionOptions,
) -> BTreeSet<(usize, usize)> {
    let lut = region_lookup(map, regions);
    let (h, w) = (map.height, map.width);
    let mut edges = BTreeSet::new();
    let mut consider = |a: Option<usize>, b: Option<usize>| {
        if let (Some(a), Some(b)) = (a, b) {
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    };
    // Row-by-row: horizontal pairs.
    for r in 0..h {
        for c in 0..w.saturating_sub(1) {
            consider(lut[r * w + c], lut[r * w + c + 1]);
        }
    }
    // Column-by-column: vertical pairs.
    for c in 0..w {
        for r in 0..h.saturating_sub(1) {
            consider(lut[r * w + c], lut[(r + 1) * w + c]);
        }
    }
    if opts.connectivity == Connectivity::Eight {
        for r in 0..h.saturating_sub(1) {
            for c in 0..w {
                if c + 1 < w {
                    consider(lut[r * w + c], lut[(r + 1) * w + c + 1]);
                }
                if c > 0 {
                    consider(lut[r * w + c], lut[(r + 1) * w + c - 1]);
                }
            }
        }
    }
    edges
}

/// Independent oracle: enumerate every neighboring pixel pair directly on
/// the raster, with its own flood-fill region labeling. Used to validate
/// [`extract_adjacency`]; deliberately shares no code with it.
pub fn brute_force_adjacency_oracle(
    map: &LabelMap,
    opts: &ExtractionOptions,
) -> BTreeSet<(usize, usize)> {
    let (h, w) = (map.height, map.width);
    // Region ids via BFS flood fill in raster order (component mode) or
    // first-appearance class order (class mode).
    let mut label = vec![usize::MAX; h * w];
    let mut counts = Vec::new();
    let mut next = 0usize;
    match opts.node_mode {
        NodeMode::Component => {
            let full: Vec<(isize, isize)> = match opts.connectivity {
                Connectivity::Four => vec![(0, 1), (0, -1), (1, 0), (-1, 0)],
                Connectivity::Eight => vec![
                    (0, 1),
                    (0, -1),
                    (1, 0),
                    (-1, 0),
                    (1, 1),
                    (1, -1),
                    (-1, 1),
                    (-1, -1),
                ],
            };
            for start in 0..h * w {
                if label[start] != usize::MAX {
                    continue;
                }
                let mut queue = std::collections::VecDeque::from([start]);
                label[start] = next;
                let mut count = 0usize;
                while let Some(i) = queue.pop_front() {
                    count += 1;
                    let (r, c) = (i / w, i % w);
                    for &(dr, dc) in &full {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                            continue;
                        }
                        let j = nr as usize * w + nc as usize;
                        if label[j] == usize::MAX && map.pixels[j] == map.pixels[i] {
                            label[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
                counts.push(count);
                next += 1;
            }
        }
        NodeMode::Class => {
            let mut class_region = vec![usize::MAX; map.classes];
            for i in 0..h * w {
                let cls = map.pixels[i] as usize;
                if class_region[cls] == usize::MAX {
                    class_region[cls] = next;
                    counts.push(0);
                    next += 1;
                }
                label[i] = class_region[cls];
                counts[class_region[cls]] += 1;
            }
        }
    }
    // Drop small regions, renumber survivors in first-pixel order.
    let min = opts.min_region_pixels.max(1);
    let mut renumber = vec![None; next];
    let mut kept = 0usize;
    for i in 0..h * w {
        let old = label[i];
        if counts[old] >= min && renumber[old].is_none() {
            renumber[old] = Some(kept);
            kept += 1;
        }
    }
    let ids: Vec<Option<usize>> = label.iter().map(|&l| renumber[l]).collect();

    let offsets: Vec<(isize, isize)> = match opts.connectivity {
        Connectivity::Four => vec![(0, 1), (0, -1), (1, 0), (-1, 0)],
        Connectivity::Eight => vec![
            (0, 1),
            (0, -1),
            (1, 0),
            (-1, 0),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    let mut edges = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let Some(a) = ids[r * w + c] else { continue };
            for &(dr, dc) in &offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                    continue;
                }
                if let Some(b) = ids[nr as usize * w + nc as usize] {
                    if a != b {
                        edges.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    edges
}

/// A graph node: region id, its class, and its size in pixels. The one-hot
/// feature vector is derived from `class_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneNode {
    pub id: usize,
    pub class_id: u16,
    pub pixel_count: usize,
}

/// Nodes plus undirected adjacency edges over node ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGraph {
    pub num_classes: usize,
    pub nodes: Vec<SceneNode>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl SceneGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// One-hot node feature matrix, n x C.
    pub fn node_features<T: Scalar>(&self) -> Tensor2D<T> {
        let mut f = Tensor2D::zeros(self.nodes.len(), self.num_classes);
        for (i, node) in self.nodes.iter().enumerate() {
            f.set(i, node.class_id as usize, T::one());
        }
        f
    }
}

/// Region extraction plus adjacency, as one scene graph.
pub fn build_scene_graph(map: &LabelMap, opts: &ExtractionOptions) -> Result<SceneGraph> {
    let regions = extract_regions(map, opts);
    if regions.is_empty() {
        return Err(Error::Data(
            "no regions survive extraction (min_region_pixels too large?)".into(),
        ));
    }
    let edges = extract_adjacency(map, &regions, opts);
    let nodes = regions
        .iter()
        .map(|r| SceneNode {
            id: r.id,
            class_id: r.class_id,
            pixel_count: r.pixel_count,
        })
        .collect();
    Ok(SceneGraph {
        num_classes: map.classes,
        nodes,
        edges,
    })
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    class: u16,
    pixels: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneGraphDoc {
    num_classes: usize,
    nodes: Vec<NodeDoc>,
    edges: Vec<[usize; 2]>,
}

/// Serialize a graph as JSON with edges sorted (a < b, ascending pairs).
pub fn graph_to_json(graph: &SceneGraph) -> String {
    let doc = SceneGraphDoc {
        num_classes: graph.num_classes,
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                class: n.class_id,
                pixels: n.pixel_count,
            })
            .collect(),
        edges: graph.edges.iter().map(|&(a, b)| [a, b]).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("graph serialization")
}

/// Parse and validate the JSON graph document. Rejects duplicate or
/// self edges, non-contiguous node ids, and out-of-range classes.
pub fn graph_from_json(text: &str) -> Result<SceneGraph> {
    let doc: SceneGraphDoc = serde_json::from_str(text).map_err(|e| {
        Error::Parse(format!(
            "scene graph JSON at line {} column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    let n = doc.nodes.len();
    if n == 0 {
        return Err(Error::Parse("scene graph has no nodes".into()));
    }
    for (i, node) in doc.nodes.iter().enumerate() {
        if node.id != i {
            return Err(Error::Parse(format!(
                "node ids must be contiguous 0..n-1; node at index {i} has id {}",
                node.id
            )));
        }
        if node.class as usize >= doc.num_classes {
            return Err(Error::Parse(format!(
                "node {i}: class {} out of range for {} classes",
                node.class, doc.num_classes
            )));
        }
    }
    let mut edges = BTreeSet::new();
    for (i, &[a, b]) in doc.edges.iter().enumerate() {
        if a == b {
            return Err(Error::Parse(format!("edge {i}: self-edge on node {a}")));
        }
        if a >= n || b >= n {
            return Err(Error::Parse(format!(
                "edge {i}: endpoint out of range for {n} nodes"
            )));
        }
        if !edges.insert((a.min(b), a.max(b))) {
            return Err(Error::Parse(format!("edge {i}: duplicate edge [{a},{b}]")));
        }
    }
    Ok(SceneGraph {
        num_classes: doc.num_classes,
        nodes: doc
            .nodes
            .into_iter()
            .map(|n| SceneNode {
                id: n.id,
                class_id: n.class,
                pixel_count: n.pixels,
            })
            .collect(),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(classes: usize, rows: &[&[u16]]) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        LabelMap::new(h, w, classes, rows.concat()).unwrap()
    }

    #[test]
    fn uniform_map_is_one_region_no_edges() {
        let m = LabelMap::filled(3, 4, 6, 5).unwrap();
        let opts = ExtractionOptions::default();
        let regions = extract_regions(&m, &opts);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].class_id, 5);
        assert_eq!(regions[0].pixel_count, 12);
        assert!(extract_adjacency(&m, &regions, &opts).is_empty());
    }

    #[test]
    fn two_band_map() {
        let m = map(6, &[&[1, 1], &[2, 2]]);
        let opts = ExtractionOptions::default();
        let regions = extract_regions(&m, &opts);
        assert_eq!(regions.len(), 2);
        let edges = extract_adjacency(&m, &regions, &opts);
        assert_eq!(edges, BTreeSet::from([(0, 1)]));
        assert_eq!(edges, brute_force_adjacency_oracle(&m, &opts));
    }

    #[test]
    fn checkerboard_connectivity() {
        let m = map(6, &[&[1, 0], &[0, 1]]);
        let four = ExtractionOptions::default();
        assert_eq!(extract_regions(&m, &four).len(), 4);
        let eight = ExtractionOptions {
            connectivity: Connectivity::Eight,
            ..Default::default()
        };
        assert_eq!(extract_regions(&m, &eight).len(), 2);
    }

    #[test]
    fn triangle_adjacency() {
        let m = map(6, &[&[1, 1, 2], &[1, 3, 2], &[1, 3, 3]]);
        let opts = ExtractionOptions::default();
        let regions = extract_regions(&m, &opts);
        assert_eq!(regions.len(), 3);
        let edges = extract_adjacency(&m, &regions, &opts);
        assert_eq!(edges, BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
        assert_eq!(edges, brute_force_adjacency_oracle(&m, &opts));
    }

    #[test]
    fn class_mode_merges_disconnected_regions() {
        let m = map(6, &[&[1, 0, 1]]);
        let opts = ExtractionOptions {
            node_mode: NodeMode::Class,
            ..Default::default()
        };
        let regions = extract_regions(&m, &opts);
        assert_eq!(regions.len(), 2);
        let component = extract_regions(&m, &ExtractionOptions::default());
        assert!(component.len() >= regions.len());
    }

    #[test]
    fn min_region_filter_renumbers_ids() {
        let m = map(6, &[&[1, 1, 1, 2], &[1, 1, 1, 3]]);
        let opts = ExtractionOptions {
            min_region_pixels: 2,
            ..Default::default()
        };
        let regions = extract_regions(&m, &opts);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].id, 0);
        assert_eq!(regions[0].class_id, 1);
    }

    #[test]
    fn scene_graph_uniform_map() {
        let m = LabelMap::filled(2, 2, 6, 3).unwrap();
        let g = build_scene_graph(&m, &ExtractionOptions::default()).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert!(g.edges.is_empty());
        let f = g.node_features::<f64>();
        assert_eq!(f.shape(), (1, 6));
        assert_eq!(f.get(0, 3), 1.0);
        assert_eq!(f.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn banded_map_is_a_path_graph() {
        // sky / tree / grass horizontal bands -> path sky-tree-grass
        let m = map(
            4,
            &[&[1, 1, 1], &[1, 1, 1], &[2, 2, 2], &[3, 3, 3]],
        );
        let g = build_scene_graph(&m, &ExtractionOptions::default()).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges, BTreeSet::from([(0, 1), (1, 2)]));
    }

    #[test]
    fn json_round_trip() {
        let m = map(6, &[&[1, 1, 2], &[1, 3, 2], &[1, 3, 3]]);
        for opts in [
            ExtractionOptions::default(),
            ExtractionOptions {
                node_mode: NodeMode::Class,
                connectivity: Connectivity::Eight,
                min_region_pixels: 0,
            },
        ] {
            let g = build_scene_graph(&m, &opts).unwrap();
            let text = graph_to_json(&g);
            assert_eq!(graph_from_json(&text).unwrap(), g);
        }
        let g = build_scene_graph(&LabelMap::filled(1, 1, 2, 0).unwrap(), &Default::default())
            .unwrap();
        assert!(graph_to_json(&g).contains("\"edges\": []"));
    }

    #[test]
    fn duplicate_edge_rejected_on_parse() {
        let text = r#"{"num_classes":4,"nodes":[{"id":0,"class":1,"pixels":2},
            {"id":1,"class":2,"pixels":2}],"edges":[[0,1],[1,0]]}"#;
        let err = graph_from_json(text).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn translation_invariance_under_border_padding() {
        let m = map(8, &[&[1, 1, 2], &[1, 3, 2], &[1, 3, 3]]);
        let opts = ExtractionOptions::default();
        let base = build_scene_graph(&m, &opts).unwrap();
        // Pad with a fresh class 7 border.
        let (h, w) = (m.height() + 2, m.width() + 2);
        let mut pixels = vec![7u16; h * w];
        for r in 0..m.height() {
            for c in 0..m.width() {
                pixels[(r + 1) * w + c + 1] = m.get(r, c);
            }
        }
        let padded = LabelMap::new(h, w, 8, pixels).unwrap();
        let pg = build_scene_graph(&padded, &opts).unwrap();
        assert_eq!(pg.num_nodes(), base.num_nodes() + 1);
        // Border node is id 0 (first raster pixel); interior edges shifted by 1.
        let shifted: BTreeSet<(usize, usize)> =
            base.edges.iter().map(|&(a, b)| (a + 1, b + 1)).collect();
        let interior: BTreeSet<(usize, usize)> = pg
            .edges
            .iter()
            .copied()
            .filter(|&(a, _)| a != 0)
            .collect();
        assert_eq!(interior, shifted);
    }
}
