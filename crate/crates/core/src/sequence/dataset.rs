//! Per-sequence directories: binary arrays, cameras and ground-truth frames.
//!
//! Array files are little-endian: 8-byte magic, `u64 N`, `u64 D`, `f64 rate`,
//! then `N·D` `f64` values.

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::raster::{load_png, save_png_rgba, Camera};

pub const SEQ_MAGIC_FEAT: [u8; 8] = *b"SRFEAT01";
pub const SEQ_MAGIC_VERT: [u8; 8] = *b"SRVERT01";
pub const SEQ_MAGIC_EXPR: [u8; 8] = *b"SREXPR01";
const HEADER: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub rows: usize,
    pub cols: usize,
    pub rate: f64,
    pub data: Vec<f64>,
}

pub fn write_array(path: &Path, magic: [u8; 8], a: &ArrayFile) -> Result<()> {
    if a.data.len() != a.rows * a.cols {
        return Err(Error::shape("write_array", format!("{} values for {}×{}", a.data.len(), a.rows, a.cols)));
    }
    let mut buf = Vec::with_capacity(HEADER + 8 * a.data.len());
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&(a.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(a.cols as u64).to_le_bytes());
    buf.extend_from_slice(&a.rate.to_le_bytes());
    for v in &a.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path, magic: [u8; 8]) -> Result<ArrayFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format { what: path.display().to_string(), detail };
    if bytes.len() < HEADER || bytes[..8] != magic {
        return Err(bad("missing or wrong magic".into()));
    }
    let word = |i: usize| <[u8; 8]>::try_from(&bytes[i..i + 8]).expect("8 bytes");
    let rows = u64::from_le_bytes(word(8)) as usize;
    let cols = u64::from_le_bytes(word(16)) as usize;
    let rate = f64::from_le_bytes(word(24));
    let want = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(HEADER));
    if want != Some(bytes.len()) {
        return Err(bad(format!("{} bytes for a {rows}×{cols} array", bytes.len())));
    }
    let data = bytes[HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(ArrayFile { rows, cols, rate, data })
}

/// One recorded sequence: audio-rate features, per-frame vertices and expressions,
/// cameras and the ground-truth frames as `images[camera][frame] = (rgb, alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub features: FeatureSequence,
    pub frames: usize,
    pub vertex_count: usize,
    /// `T×3V`.
    pub vertices: Vec<f64>,
    pub expr_dim: usize,
    /// `T×E`.
    pub expr: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

pub fn frame_name(camera: usize, frame: usize) -> String {
    format!("cam{camera:02}_{frame:04}.png")
}

impl SequenceData {
    pub fn vertex_row(&self, t: usize) -> &[f64] {
        let v3 = 3 * self.vertex_count;
        &self.vertices[t * v3..(t + 1) * v3]
    }

    pub fn expr_row(&self, t: usize) -> &[f64] {
        &self.expr[t * self.expr_dim..(t + 1) * self.expr_dim]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = &self.features;
        write_array(&dir.join("features.bin"), SEQ_MAGIC_FEAT, &ArrayFile { rows: f.frames, cols: f.dim, rate: f.rate, data: f.data.clone() })?;
        write_array(
            &dir.join("vertices.bin"),
            SEQ_MAGIC_VERT,
            &ArrayFile { rows: self.frames, cols: 3 * self.vertex_count, rate: super::FRAME_RATE, data: self.vertices.clone() },
        )?;
        write_array(
            &dir.join("expressions.bin"),
            SEQ_MAGIC_EXPR,
            &ArrayFile { rows: self.frames, cols: self.expr_dim, rate: super::FRAME_RATE, data: self.expr.clone() },
        )?;
        let cams = serde_json::to_string_pretty(&self.cameras).map_err(|e| Error::Format { what: "cameras".into(), detail: e.to_string() })?;
        let cam_path = dir.join("cameras.json");
        fs::write(&cam_path, cams).map_err(|e| Error::io(&cam_path, e))?;
        for (c, (cam, imgs)) in self.cameras.iter().zip(&self.images).enumerate() {
            for (t, (rgb, alpha)) in imgs.iter().enumerate() {
                save_png_rgba(&dir.join(frame_name(c, t)), rgb, alpha, cam.width, cam.height)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = read_array(&dir.join("features.bin"), SEQ_MAGIC_FEAT)?;
        let features = FeatureSequence::new(f.data, f.rows, f.cols, f.rate)?;
        let v = read_array(&dir.join("vertices.bin"), SEQ_MAGIC_VERT)?;
        let e = read_array(&dir.join("expressions.bin"), SEQ_MAGIC_EXPR)?;
        if v.cols % 3 != 0 || e.rows != v.rows {
            return Err(Error::Format { what: dir.display().to_string(), detail: "vertex and expression files disagree".into() });
        }
        let cam_path = dir.join("cameras.json");
        let text = fs::read_to_string(&cam_path).map_err(|err| Error::io(&cam_path, err))?;
        let cameras: Vec<Camera> =
            serde_json::from_str(&text).map_err(|err| Error::Format { what: cam_path.display().to_string(), detail: err.to_string() })?;
        let mut images = Vec::with_capacity(cameras.len());
        for (c, cam) in cameras.iter().enumerate() {
            cam.validate()?;
            let mut per = Vec::with_capacity(v.rows);
            for t in 0..v.rows {
                let (w, h, rgb, alpha) = load_png(&dir.join(frame_name(c, t)))?;
                if (w, h) != (cam.width, cam.height) {
                    return Err(Error::Format { what: frame_name(c, t), detail: format!("{w}×{h} image for a {}×{} camera", cam.width, cam.height) });
                }
                per.push((rgb, alpha));
            }
            images.push(per);
        }
        Ok(Self {
            features,
            frames: v.rows,
            vertex_count: v.cols / 3,
            vertices: v.data,
            expr_dim: e.cols,
            expr: e.data,
            cameras,
            images,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = ArrayFile { rows: 2, cols: 3, rate: 50.0, data: vec![0.1, -2.0, 3.5, f64::MIN_POSITIVE, 1e300, 0.0] };
        write_array(&p, SEQ_MAGIC_FEAT, &a).unwrap();
        assert_eq!(read_array(&p, SEQ_MAGIC_FEAT).unwrap(), a);
        assert!(read_array(&p, SEQ_MAGIC_VERT).is_err());
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_array(&p, SEQ_MAGIC_FEAT), Err(Error::Format { .. })));
    }
}
