//! Raster ingestion: label maps from PNG / PGM / raw "LMAP" binaries,
//! images from PNG / raw "IMGT" binaries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scenegraph::LabelMap;
use crate::tensor::{Scalar, Tensor2D};

pub const LMAP_MAGIC: &[u8; 4] = b"LMAP";
pub const IMGT_MAGIC: &[u8; 4] = b"IMGT";

/// An H x W x C image with values in [0, 1]. Channels are 1 (gray) or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    /// Row-major, channel-interleaved: data[(r*W + c)*C + ch].
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Data(format!(
                "invalid image shape {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Data("image data length mismatch".into()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Split an image into raster-order patch tokens. Each token flattens its
/// patch spatial-row-major within a channel, channels stacked
/// channel-major, giving length P*P*channels.
pub fn patchify<T: Scalar>(img: &ImageTensor, patch: usize) -> Result<Tensor2D<T>> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::Data(format!(
            "image {}x{} not divisible by patch size {patch}",
            img.height, img.width
        )));
    }
    let (ph, pw) = (img.height / patch, img.width / patch);
    let token_len = patch * patch * img.channels;
    let mut data = Vec::with_capacity(ph * pw * token_len);
    for pr in 0..ph {
        for pc in 0..pw {
            for ch in 0..img.channels {
                for r in 0..patch {
                    for c in 0..patch {
                        data.push(T::from_f64(img.get(pr * patch + r, pc * patch + c, ch)));
                    }
                }
            }
        }
    }
    Tensor2D::new(ph * pw, token_len, data)
}

// ---------------------------------------------------------------------------
// Label map formats

/// Raw binary label map: magic "LMAP", u32 H, u32 W, u32 C, row-major u16
/// class indices, all little-endian.
pub fn write_lmap<W: Write>(map: &LabelMap, w: &mut W) -> Result<()> {
    w.write_all(LMAP_MAGIC)?;
    w.write_all(&(map.height() as u32).to_le_bytes())?;
    w.write_all(&(map.width() as u32).to_le_bytes())?;
    w.write_all(&(map.classes() as u32).to_le_bytes())?;
    for &p in map.pixels() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_lmap<R: Read>(r: &mut R) -> Result<LabelMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LMAP_MAGIC {
        return Err(Error::Parse("bad LMAP magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let h = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let w = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let c = u32::from_le_bytes(b4) as usize;
    let mut pixels = Vec::with_capacity(h * w);
    let mut b2 = [0u8; 2];
    for _ in 0..h.checked_mul(w).ok_or_else(|| Error::Parse("LMAP size overflow".into()))? {
        r.read_exact(&mut b2)?;
        pixels.push(u16::from_le_bytes(b2));
    }
    LabelMap::new(h, w, c, pixels)
}

/// Single-channel 8/16-bit PNG of class indices.
pub fn load_label_map_png(path: &Path, classes: usize) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<u16> = match img {
        image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as u16).collect(),
        image::DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0]).collect(),
        other => other
            .to_luma16()
            .pixels()
            .map(|p| p.0[0])
            .collect(),
    };
    LabelMap::new(h, w, classes, pixels)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Binary PGM (P5); maxval > 255 means two-byte big-endian samples.
pub fn load_label_map_pgm(path: &Path, classes: usize) -> Result<LabelMap> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Parse("not a P5 PGM".into()));
    }
    fn token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("malformed PGM header".into()))
    }
    let mut pos = 2usize;
    let w = token(&bytes, &mut pos)?;
    let h = token(&bytes, &mut pos)?;
    let maxval = token(&bytes, &mut pos)?;
    pos += 1; // single whitespace after maxval
    let mut pixels = Vec::with_capacity(h * w);
    if maxval > 255 {
        for i in 0..h * w {
            let o = pos + 2 * i;
            if o + 1 >= bytes.len() {
                return Err(Error::Parse("PGM truncated".into()));
            }
            pixels.push(u16::from_be_bytes([bytes[o], bytes[o + 1]]));
        }
    } else {
        if pos + h * w > bytes.len() {
            return Err(Error::Parse("PGM truncated".into()));
        }
        pixels.extend(bytes[pos..pos + h * w].iter().map(|&b| b as u16));
    }
    LabelMap::new(h, w, classes, pixels)
}

/// Load a label map by extension: .png, .pgm, or .lmap.
pub fn load_label_map(path: &Path, classes: usize) -> Result<LabelMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_label_map_png(path, classes),
        Some("pgm") => load_label_map_pgm(path, classes),
        Some("lmap") => read_lmap(&mut BufReader::new(File::open(path)?)),
        other => Err(Error::Data(format!(
            "unsupported label map extension {other:?} for {}",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Image formats

/// Raw binary image: magic "IMGT", u32 H, u32 W, u32 C, f32 LE values in
/// [0, 1], row-major channel-interleaved.
pub fn write_imgt<W: Write>(img: &ImageTensor, w: &mut W) -> Result<()> {
    w.write_all(IMGT_MAGIC)?;
    w.write_all(&(img.height as u32).to_le_bytes())?;
    w.write_all(&(img.width as u32).to_le_bytes())?;
    w.write_all(&(img.channels as u32).to_le_bytes())?;
    for &v in &img.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_imgt<R: Read>(r: &mut R) -> Result<ImageTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IMGT_MAGIC {
        return Err(Error::Parse("bad IMGT magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let h = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let w = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let c = u32::from_le_bytes(b4) as usize;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::Parse("IMGT size overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    ImageTensor::new(h, w, c, data)
}

/// 8-bit gray or RGB PNG, normalized to [0, 1].
pub fn load_image_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            ImageTensor::new(h, w, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let mut data = Vec::with_capacity(h * w * 3);
            for p in rgb.pixels() {
                data.extend(p.0.iter().map(|&v| v as f64 / 255.0));
            }
            ImageTensor::new(h, w, 3, data)
        }
    }
}

/// Load an image by extension: .png or .imgt.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_image_png(path),
        Some("imgt") => read_imgt(&mut BufReader::new(File::open(path)?)),
        other => Err(Error::Data(format!(
            "unsupported image extension {other:?} for {}",
            path.display()
        ))),
    }
}

pub fn save_lmap(map: &LabelMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lmap(map, &mut w)
}

pub fn save_imgt(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_imgt(img, &mut w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lmap_round_trip() {
        let m = LabelMap::new(2, 3, 5, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let mut buf = Vec::new();
        write_lmap(&m, &mut buf).unwrap();
        assert_eq!(read_lmap(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn imgt_round_trip() {
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_imgt(&img, &mut buf).unwrap();
        assert_eq!(read_imgt(&mut buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn pgm_parses_8bit() {
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend([0u8, 1, 2, 3, 4, 5]);
        let tmp = std::env::temp_dir().join("tsg_test_p5.pgm");
        std::fs::write(&tmp, &bytes).unwrap();
        let m = load_label_map_pgm(&tmp, 6).unwrap();
        assert_eq!((m.height(), m.width()), (2, 3));
        assert_eq!(m.get(1, 2), 5);
        std::fs::remove_file(&tmp).ok();
    }

    #[test]
    fn patchify_shapes_and_layout() {
        // 4x4 gray image with distinct values 0..16 (scaled into [0,1]).
        let data: Vec<f64> = (0..16).map(|v| v as f64 / 16.0).collect();
        let img = ImageTensor::new(4, 4, 1, data).unwrap();
        let tokens = patchify::<f64>(&img, 2).unwrap();
        assert_eq!(tokens.shape(), (4, 4));
        // token 0 = pixels (0,0),(0,1),(1,0),(1,1); indices 0,1,4,5
        assert_eq!(
            tokens.row(0),
            &[0.0, 1.0 / 16.0, 4.0 / 16.0, 5.0 / 16.0]
        );
        // token 3 = bottom-right patch: indices 10,11,14,15
        assert_eq!(
            tokens.row(3),
            &[10.0 / 16.0, 11.0 / 16.0, 14.0 / 16.0, 15.0 / 16.0]
        );
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = ImageTensor::new(3, 4, 1, vec![0.0; 12]).unwrap();
        assert!(patchify::<f64>(&img, 2).is_err());
    }

    #[test]
    fn patchify_constant_image() {
        let img = ImageTensor::new(8, 8, 1, vec![0.7; 64]).unwrap();
        let tokens = patchify::<f64>(&img, 4).unwrap();
        assert_eq!(tokens.shape(), (4, 16));
        assert!(tokens.data().iter().all(|&v| v == 0.7));
    }
}
