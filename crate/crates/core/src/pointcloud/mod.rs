//! Point cloud containers, frame-sequence I/O, exact L1 nearest-neighbour
//! search, Chamfer distance and bounding-box statistics.

mod kdtree;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::SpatialIndex;

use crate::error::{Error, Result};
use crate::geometry::{Transform3D, Vec3};

/// Bounding boxes with a diagonal below this are considered degenerate.
pub const MIN_DIAGONAL: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    pub fn transformed(&self, t: &Transform3D) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| t.apply(p)).collect())
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned `(min, max)` corners.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

impl From<Vec<Vec3>> for PointCloud {
    fn from(points: Vec<Vec3>) -> Self {
        PointCloud::new(points)
    }
}

/// An ordered list of whole-body frames sharing one world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<PointCloud>,
    pub source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<PointCloud>, source_id: impl Into<String>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::EmptySequence(frames.len()));
        }
        if frames.iter().any(|f| f.is_empty()) {
            return Err(Error::EmptyCloud);
        }
        Ok(FrameSequence {
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.xyz")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".xyz")?;
    if digits.len() != 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn parse_xyz(text: &str, file: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            file: file.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 numbers, found {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (slot, field) in xyz.iter_mut().zip(&fields) {
            let v: f64 = field
                .parse()
                .map_err(|_| err(format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("`{field}` is not finite")));
            }
            *slot = v;
        }
        points.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(PointCloud::new(points))
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// Writes one point per line as `x y z`, shortest round-trip decimal form.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads `frame_0000.xyz, frame_0001.xyz, ...` from a directory.
pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    for (expected, &found) in indices.iter().enumerate() {
        if found != expected {
            return Err(Error::MissingFrame(expected));
        }
    }
    if indices.len() < 2 {
        return Err(Error::EmptySequence(indices.len()));
    }
    let frames = indices
        .iter()
        .map(|&i| {
            let path = dir.join(frame_file_name(i));
            let cloud = read_xyz(&path)?;
            if cloud.is_empty() {
                return Err(Error::Parse {
                    file: path,
                    line: 0,
                    message: "frame has no points".into(),
                });
            }
            Ok(cloud)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, dir.display().to_string())
}

pub fn write_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_xyz(&dir.join(frame_file_name(i)), frame)?;
    }
    Ok(())
}

/// Reads a `sequences.txt` manifest: one directory per line, relative paths
/// resolved against the manifest's directory. `#` starts a comment.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn nn_index(c: &PointCloud) -> SpatialIndex {
    SpatialIndex::new(&c.points)
}

pub fn nn_query(idx: &SpatialIndex, p: &Vec3) -> (usize, f64) {
    idx.nearest(p)
}

/// Sum over `from` of the L1 distance to the nearest point in `to`.
fn directed_sum(from: &[Vec3], to: &SpatialIndex) -> f64 {
    let dists: Vec<f64> = from.par_iter().map(|p| to.nearest(p).1).collect();
    dists.iter().sum()
}

/// Bi-directional L1 Chamfer distance, averaged over `|a| + |b|` points.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ia = nn_index(a);
    let ib = nn_index(b);
    Ok(chamfer_l1_indexed(&a.points, &ia, &b.points, &ib))
}

/// Chamfer with prebuilt indices (`ia` over `a`, `ib` over `b`).
pub fn chamfer_l1_indexed(a: &[Vec3], ia: &SpatialIndex, b: &[Vec3], ib: &SpatialIndex) -> f64 {
    let total = directed_sum(a, ib) + directed_sum(b, ia);
    total / (a.len() + b.len()) as f64
}

pub fn bbox_diagonal(c: &PointCloud) -> Result<f64> {
    let (lo, hi) = c.bounds().ok_or(Error::EmptyCloud)?;
    let d = (hi - lo).norm();
    if d < MIN_DIAGONAL {
        return Err(Error::DegenerateCloud(d));
    }
    Ok(d)
}

/// Scale that maps the bounding-box diagonal onto `pi`, so positional
/// distances are commensurate with geodesic rotation distances.
pub fn alpha_scale(c: &PointCloud) -> Result<f64> {
    Ok(std::f64::consts::PI / bbox_diagonal(c)?)
}

/// Uniform sample without replacement, preserving the original point order.
pub fn downsample(c: &PointCloud, n: usize, seed: u64) -> PointCloud {
    assert!(n >= 1, "downsample target must be at least 1");
    if c.len() <= n {
        return c.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, c.len(), n).into_vec();
    picked.sort_unstable();
    PointCloud::new(picked.into_iter().map(|i| c.points[i]).collect())
}
