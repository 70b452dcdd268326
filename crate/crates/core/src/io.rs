//! KITTI-style `.bin` point files and CSV box labels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::beams::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Detection, Point};

const RECORD: usize = 16;

/// Reads little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn read_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() % RECORD != 0 {
        return Err(Error::MalformedBin { path: path.to_path_buf(), len: bytes.len() as u64 });
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    let points = bytes
        .chunks_exact(RECORD)
        .map(|r| Point::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16])))
        .collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PointCloud::new(points, id))
}

/// Writes the cloud as little-endian `f32` quadruples, no header.
pub fn write_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    fs::write(path, bin_bytes(cloud))?;
    Ok(())
}

pub fn bin_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// One label line: a box and, for detections, a confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRow {
    pub bbox: Box3D,
    pub confidence: Option<f64>,
}

impl From<Box3D> for LabelRow {
    fn from(bbox: Box3D) -> Self {
        Self { bbox, confidence: None }
    }
}

impl From<Detection> for LabelRow {
    fn from(d: Detection) -> Self {
        Self { bbox: d.bbox, confidence: Some(d.confidence) }
    }
}

pub fn labels_csv(rows: &[LabelRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let b = &r.bbox;
        write!(s, "{},{},{},{},{},{},{}", b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw)
            .unwrap();
        if let Some(c) = r.confidence {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `cx,cy,cz,l,w,h,yaw[,confidence]` lines.
pub fn write_labels(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    fs::write(path, labels_csv(rows))?;
    Ok(())
}

/// Parses label lines. Blank lines, `#` comments and a leading `cx,...`
/// header are skipped.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("cx") {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| err(i + 1, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 7 && vals.len() != 8 {
            return Err(err(i + 1, format!("expected 7 or 8 fields, found {}", vals.len())));
        }
        let bbox = Box3D::try_new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], vals[6])
            .map_err(|e| err(i + 1, e.to_string()))?;
        rows.push(LabelRow { bbox, confidence: vals.get(7).copied() });
    }
    Ok(rows)
}
