//! Dense link clouds, truncated distance grids and marching cubes.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Transform3D, Vec3};
use crate::joints::LinkPoseTrack;
use crate::pointcloud::{FrameSequence, PointCloud, SpatialIndex};
use crate::registration::ClusterTrack;
use crate::segmentation::PartLabeling;

pub const DEFAULT_RESOLUTION: usize = 64;
/// Grid padding around the cloud bounds, in cells.
pub const PADDING_CELLS: usize = 3;
pub const DEFAULT_TRUNCATION_CELLS: f64 = 1.5;
pub const DEFAULT_ISO_CELLS: f64 = 1.0;

/// Points of `link` from every frame, expressed in the link's local frame.
pub fn accumulate_link_cloud(
    seq: &FrameSequence,
    track: &ClusterTrack,
    labels: &PartLabeling,
    lp: &LinkPoseTrack,
    link: usize,
) -> PointCloud {
    let mut points = Vec::new();
    for (t, frame) in seq.frames.iter().enumerate().take(track.num_frames()) {
        let to_local = lp.poses[link][t].to_transform().inverse();
        let membership = &track.memberships[t].labels;
        points.extend(
            frame
                .points
                .iter()
                .zip(membership)
                .filter(|(_, &c)| labels.part_of[c] == link)
                .map(|(p, _)| to_local.apply(p)),
        );
    }
    PointCloud::new(points)
}

/// Scalar field sampled on grid nodes, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub cell_size: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn from_fn(origin: Vec3, cell_size: f64, dims: [usize; 3], f: impl Fn(&Vec3) -> f64 + Sync) -> Self {
        let values = (0..dims[0] * dims[1] * dims[2])
            .into_par_iter()
            .map(|idx| {
                let i = idx % dims[0];
                let j = (idx / dims[0]) % dims[1];
                let k = idx / (dims[0] * dims[1]);
                f(&(origin + Vec3::new(i as f64, j as f64, k as f64) * cell_size))
            })
            .collect();
        VoxelGrid {
            origin,
            cell_size,
            dims,
            values,
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.cell_size
    }

    pub fn upper_corner(&self) -> Vec3 {
        self.node(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }
}

/// Truncated unsigned distance on a grid with a given cell size.
pub fn distance_grid_with_cell(c: &PointCloud, cell: f64, truncation: f64) -> Result<VoxelGrid> {
    distance_grid_padded(c, cell, truncation, PADDING_CELLS)
}

fn distance_grid_padded(c: &PointCloud, cell: f64, truncation: f64, padding: usize) -> Result<VoxelGrid> {
    let (lo, hi) = c.bounds().ok_or(Error::EmptyCloud)?;
    if !(cell > 0.0) || !(truncation > 0.0) {
        return Err(Error::InvalidArgument("cell size and truncation must be positive".into()));
    }
    let origin = lo - Vec3::repeat(padding as f64 * cell);
    let extent = hi - lo;
    let mut dims = [0; 3];
    for a in 0..3 {
        dims[a] = (extent[a] / cell).ceil() as usize + 1 + 2 * padding;
    }
    let mut values = vec![truncation; dims[0] * dims[1] * dims[2]];
    let reach = (truncation / cell).ceil() as isize;
    for p in &c.points {
        let g = (p - origin) / cell;
        let base = [g.x.round() as isize, g.y.round() as isize, g.z.round() as isize];
        for dk in -reach..=reach {
            let k = base[2] + dk;
            if k < 0 || k >= dims[2] as isize {
                continue;
            }
            for dj in -reach..=reach {
                let j = base[1] + dj;
                if j < 0 || j >= dims[1] as isize {
                    continue;
                }
                for di in -reach..=reach {
                    let i = base[0] + di;
                    if i < 0 || i >= dims[0] as isize {
                        continue;
                    }
                    let node = origin + Vec3::new(i as f64, j as f64, k as f64) * cell;
                    let d = (node - p).norm();
                    let idx = i as usize + dims[0] * (j as usize + dims[1] * k as usize);
                    if d < values[idx] {
                        values[idx] = d;
                    }
                }
            }
        }
    }
    Ok(VoxelGrid {
        origin,
        cell_size: cell,
        dims,
        values,
    })
}

/// Grid with `resolution` cells along the longest bounding-box axis.
pub fn distance_grid(c: &PointCloud, resolution: usize, truncation_cells: f64) -> Result<VoxelGrid> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!("mesh resolution must be at least 8, got {resolution}")));
    }
    let (lo, hi) = c.bounds().ok_or(Error::EmptyCloud)?;
    let longest = (hi - lo).max();
    if longest < crate::pointcloud::MIN_DIAGONAL {
        return Err(Error::DegenerateCloud(longest));
    }
    let cell = longest / resolution as f64;
    distance_grid_with_cell(c, cell, truncation_cells * cell)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn transformed(&self, t: &Transform3D) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z).unwrap();
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    /// Reads `v` and triangular `f` records; other records are ignored.
    pub fn parse_obj(text: &str, file: &Path) -> Result<TriangleMesh> {
        let mut mesh = TriangleMesh::default();
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let bad = |message: &str| Error::Parse {
                file: file.to_path_buf(),
                line: n + 1,
                message: message.to_string(),
            };
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("invalid vertex"))?;
                    if xyz.len() != 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    mesh.vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|s| s.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("invalid face"))?;
                    if idx.len() < 3 || idx.iter().any(|&i| i == 0) {
                        return Err(bad("face needs three 1-based indices"));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                    }
                }
                _ => {}
            }
        }
        if mesh.triangles.iter().flatten().any(|&i| i >= mesh.vertices.len()) {
            return Err(Error::Parse {
                file: file.to_path_buf(),
                line: 0,
                message: "face index out of range".into(),
            });
        }
        Ok(mesh)
    }

    pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TriangleMesh::parse_obj(&text, path)
    }

    /// Connected pieces (by shared vertices) as separate meshes, largest first.
    pub fn components(&self) -> Vec<TriangleMesh> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for t in &self.triangles {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[k]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for (ti, t) in self.triangles.iter().enumerate() {
            let r = find(&mut parent, t[0]);
            let g = *slot.entry(r).or_insert_with(|| {
                groups.push((r, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(ti);
        }
        let mut out: Vec<TriangleMesh> = groups.into_iter().map(|(_, tris)| self.subset(&tris)).collect();
        out.sort_by(|a, b| b.triangles.len().cmp(&a.triangles.len()));
        out
    }

    fn subset(&self, tris: &[usize]) -> TriangleMesh {
        let mut remap = HashMap::new();
        let mut mesh = TriangleMesh::default();
        for &ti in tris {
            let t = self.triangles[ti].map(|v| {
                *remap.entry(v).or_insert_with(|| {
                    mesh.vertices.push(self.vertices[v]);
                    mesh.vertices.len() - 1
                })
            });
            mesh.triangles.push(t);
        }
        mesh
    }

    /// Largest connected piece.
    pub fn largest_component(&self) -> TriangleMesh {
        self.components().into_iter().next().unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatertightReport {
    pub closed: bool,
    pub euler: i64,
    pub volume: f64,
}

pub fn watertight_check(m: &TriangleMesh) -> WatertightReport {
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    let mut used = vec![false; m.vertices.len()];
    let mut volume = 0.0;
    for t in &m.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            used[t[k]] = true;
        }
        let [a, b, c] = t.map(|i| m.vertices[i]);
        volume += a.dot(&b.cross(&c)) / 6.0;
    }
    let closed = !m.triangles.is_empty() && edges.values().all(|&n| n == 2);
    let v = used.iter().filter(|u| **u).count() as i64;
    WatertightReport {
        closed,
        euler: v - edges.len() as i64 + m.triangles.len() as i64,
        volume,
    }
}

/// Corner offsets; corner index = x + 2y + 4z.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Cube edges as corner pairs (lower corner first).
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Face corners in counter-clockwise order seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

fn edge_id(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).expect("cube edge")
}

/// Closed loops of crossed edges for every corner configuration. Each face
/// contributes one oriented segment per run of inside corners, so shared
/// faces are cut identically by both neighbouring cubes.
fn loop_table() -> &'static Vec<Vec<Vec<usize>>> {
    static TABLE: OnceLock<Vec<Vec<Vec<usize>>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..256usize)
            .map(|config| {
                let inside = |c: usize| config >> c & 1 == 1;
                let mut next = [usize::MAX; 12];
                for face in FACES {
                    let flags: Vec<bool> = face.iter().map(|&c| inside(c)).collect();
                    if flags.iter().all(|f| *f) || flags.iter().all(|f| !*f) {
                        continue;
                    }
                    for s in 0..4 {
                        // A run of inside corners starts at s when the previous corner is outside.
                        if !flags[s] || flags[(s + 3) % 4] {
                            continue;
                        }
                        let mut e = s;
                        while flags[(e + 1) % 4] {
                            e = (e + 1) % 4;
                        }
                        let exit = edge_id(face[e], face[(e + 1) % 4]);
                        let entry = edge_id(face[(s + 3) % 4], face[s]);
                        next[exit] = entry;
                    }
                }
                let mut seen = [false; 12];
                let mut loops = Vec::new();
                for start in 0..12 {
                    if next[start] == usize::MAX || seen[start] {
                        continue;
                    }
                    let mut lp = Vec::new();
                    let mut e = start;
                    while !seen[e] {
                        seen[e] = true;
                        lp.push(e);
                        e = next[e];
                    }
                    loops.push(lp);
                }
                loops
            })
            .collect()
    })
}

/// Interpolation parameters stay this far from cube corners so no triangle
/// collapses.
const EDGE_CLAMP: f64 = 0.01;

/// Isosurface separating values below `iso` (inside) from the rest. Triangles
/// face toward increasing values.
pub fn marching_cubes(g: &VoxelGrid, iso: f64) -> Result<TriangleMesh> {
    if !iso.is_finite() || g.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument("grid needs two nodes per axis and a finite iso level".into()));
    }
    let table = loop_table();
    let [nx, ny, nz] = g.dims;
    let mut edge_vertex = vec![u32::MAX; nx * ny * nz * 3];
    let mut mesh = TriangleMesh::default();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut config = 0;
                for (c, o) in CORNERS.iter().enumerate() {
                    if g.value(i + o[0], j + o[1], k + o[2]) < iso {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                for lp in &table[config] {
                    let ids: Vec<usize> = lp
                        .iter()
                        .map(|&e| {
                            let (a, b) = EDGES[e];
                            let (oa, ob) = (CORNERS[a], CORNERS[b]);
                            let axis = (0..3).find(|&d| oa[d] != ob[d]).unwrap();
                            let (ai, aj, ak) = (i + oa[0], j + oa[1], k + oa[2]);
                            let slot = 3 * g.index(ai, aj, ak) + axis;
                            if edge_vertex[slot] == u32::MAX {
                                let va = g.value(ai, aj, ak);
                                let vb = g.value(i + ob[0], j + ob[1], k + ob[2]);
                                let t = ((iso - va) / (vb - va)).clamp(EDGE_CLAMP, 1.0 - EDGE_CLAMP);
                                let pa = g.node(ai, aj, ak);
                                let pb = g.node(i + ob[0], j + ob[1], k + ob[2]);
                                mesh.vertices.push(pa + (pb - pa) * t);
                                edge_vertex[slot] = (mesh.vertices.len() - 1) as u32;
                            }
                            edge_vertex[slot] as usize
                        })
                        .collect();
                    if ids.len() == 3 {
                        mesh.triangles.push([ids[0], ids[2], ids[1]]);
                    } else {
                        let center = ids.iter().map(|&v| mesh.vertices[v]).sum::<Vec3>() / ids.len() as f64;
                        mesh.vertices.push(center);
                        let c = mesh.vertices.len() - 1;
                        for w in 0..ids.len() {
                            mesh.triangles.push([c, ids[(w + 1) % ids.len()], ids[w]]);
                        }
                    }
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok(mesh)
}

/// Closing radius in units of the mean nearest-neighbour spacing. Random
/// surface samples leave empty discs a few spacings wide.
pub const CLOSING_SPACINGS: f64 = 4.0;

/// Mean distance from odd-indexed points to the nearest even-indexed point,
/// scaled back to the full density. Points closer than `merge` count once, so
/// the same surface seen in many frames does not look denser than it is.
pub fn mean_spacing(c: &PointCloud, merge: f64) -> f64 {
    let mut seen = HashSet::new();
    let unique: Vec<Vec3> = c
        .points
        .iter()
        .filter(|p| seen.insert(((p.x / merge).floor() as i64, (p.y / merge).floor() as i64, (p.z / merge).floor() as i64)))
        .cloned()
        .collect();
    if unique.len() < 4 {
        return 0.0;
    }
    let even: Vec<Vec3> = unique.iter().step_by(2).cloned().collect();
    let odd: Vec<&Vec3> = unique.iter().skip(1).step_by(2).collect();
    let index = SpatialIndex::new(&even);
    let stride = (odd.len() / 4000).max(1);
    let sample: Vec<&Vec3> = odd.into_iter().step_by(stride).collect();
    let total: f64 = sample.iter().map(|q| (even[index.nearest(q).0] - *q).norm()).sum();
    total / sample.len() as f64 / std::f64::consts::SQRT_2
}

/// Stand-in for infinity that keeps the parabola intersections finite.
const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform along one line (lower envelope
/// of parabolas).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = (d * d + f[v[k]]).min(FAR);
    }
}

/// Squared distance, in cells, from every node to the nearest marked node.
fn distance_transform(marked: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = marked.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    let n = dims[0].max(dims[1]).max(dims[2]);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let len = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for b in 0..dims[others[1]] {
            for a in 0..dims[others[0]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for q in 0..len {
                    f[q] = d[base + q * strides[axis]];
                }
                edt_line(&f[..len], &mut out[..len], &mut v, &mut z);
                for q in 0..len {
                    d[base + q * strides[axis]] = out[q];
                }
            }
        }
    }
    d
}

/// Closing radius growth per retry when the surface is not genus 0.
const RADIUS_GROWTH: f64 = 1.5;
const RADIUS_RETRIES: usize = 4;

/// Closed outer surface around a point cloud.
///
/// The cloud is closed morphologically with a ball whose radius follows the
/// point spacing, so gaps in sparse scans do not open tunnels into the part.
/// The surface sits one cell outside the closed solid. If the result still
/// has handles the radius grows a little and the closing is redone.
pub fn mesh_from_cloud(c: &PointCloud, resolution: usize) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!("mesh resolution must be at least 8, got {resolution}")));
    }
    let (lo, hi) = c.bounds().ok_or(Error::EmptyCloud)?;
    let longest = (hi - lo).max();
    if longest < crate::pointcloud::MIN_DIAGONAL {
        return Err(Error::DegenerateCloud(longest));
    }
    let cell = longest / resolution as f64;
    let mut radius = (DEFAULT_TRUNCATION_CELLS * cell).max(CLOSING_SPACINGS * mean_spacing(c, 0.5 * cell));
    let mut mesh = closed_surface(c, cell, radius)?;
    for _ in 0..RADIUS_RETRIES {
        if watertight_check(&mesh).euler == 2 {
            break;
        }
        radius *= RADIUS_GROWTH;
        log::debug!("surface has handles, closing radius now {radius:.4}");
        mesh = closed_surface(c, cell, radius)?;
    }
    Ok(mesh)
}

fn closed_surface(c: &PointCloud, cell: f64, radius: f64) -> Result<TriangleMesh> {
    let pad = (radius / cell).ceil() as usize + PADDING_CELLS;
    let grid = distance_grid_padded(c, cell, radius + cell, pad)?;
    let [nx, ny, nz] = grid.dims;
    let mut outside = vec![false; grid.values.len()];
    let mut stack = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let on_border = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                let idx = grid.index(i, j, k);
                if on_border && grid.values[idx] >= radius {
                    outside[idx] = true;
                    stack.push((i, j, k));
                }
            }
        }
    }
    while let Some((i, j, k)) = stack.pop() {
        let steps: [(isize, isize, isize); 6] = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        for (di, dj, dk) in steps {
            let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
            if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                continue;
            }
            let idx = grid.index(a as usize, b as usize, c as usize);
            if !outside[idx] && grid.values[idx] >= radius {
                outside[idx] = true;
                stack.push((a as usize, b as usize, c as usize));
            }
        }
    }
    // Outside nodes lie on average half a cell beyond the radius.
    let d2 = distance_transform(&outside, grid.dims);
    let closed = VoxelGrid {
        values: d2.iter().map(|d| (radius - (d.sqrt() - 0.5) * cell).clamp(0.0, radius)).collect(),
        ..grid
    };
    Ok(marching_cubes(&closed, DEFAULT_ISO_CELLS * cell)?.largest_component())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sphere_grid(radius: f64, resolution: usize) -> VoxelGrid {
        let cell = 2.0 * radius / resolution as f64;
        let pad = 3.0 * cell;
        let dims = [resolution + 7; 3];
        VoxelGrid::from_fn(Vec3::repeat(-radius - pad), cell, dims, |p| p.norm())
    }

    #[test]
    fn loop_table_is_consistent() {
        let table = loop_table();
        assert!(table[0].is_empty() && table[255].is_empty());
        for (config, loops) in table.iter().enumerate() {
            let crossed: usize = EDGES
                .iter()
                .filter(|&&(a, b)| (config >> a & 1) != (config >> b & 1))
                .count();
            let used: usize = loops.iter().map(|l| l.len()).sum();
            assert_eq!(crossed, used, "config {config}");
            assert!(loops.iter().all(|l| l.len() >= 3));
        }
    }

    #[test]
    fn sphere_is_watertight_with_correct_volume() {
        let exact = 4.0 / 3.0 * PI * 0.125;
        let mesh = marching_cubes(&sphere_grid(0.5, 64), 0.5).unwrap();
        let report = watertight_check(&mesh);
        assert!(report.closed);
        assert_eq!(report.euler, 2);
        assert!((report.volume - exact).abs() / exact < 0.05, "{}", report.volume);
        let fine = watertight_check(&marching_cubes(&sphere_grid(0.5, 128), 0.5).unwrap());
        assert!((fine.volume - report.volume).abs() / report.volume < 0.02);
        assert!(mesh.triangles.iter().all(|t| mesh.triangle_area(t) > 1e-12));
        assert!(mesh.vertices.iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn cube_field_is_genus_zero() {
        let g = VoxelGrid::from_fn(Vec3::repeat(-1.0), 0.05, [41; 3], |p| p.abs().max());
        let report = watertight_check(&marching_cubes(&g, 0.5).unwrap());
        assert!(report.closed);
        assert_eq!(report.euler, 2);
        assert!((report.volume - 1.0).abs() < 0.05);
    }

    #[test]
    fn random_fields_stay_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dims = [9, 8, 7];
            let mut g = VoxelGrid::from_fn(Vec3::zeros(), 1.0, dims, |_| 1.0);
            for k in 1..dims[2] - 1 {
                for j in 1..dims[1] - 1 {
                    for i in 1..dims[0] - 1 {
                        let idx = g.index(i, j, k);
                        g.values[idx] = rng.gen_range(0.0..1.0);
                    }
                }
            }
            let mesh = marching_cubes(&g, 0.5).unwrap();
            let report = watertight_check(&mesh);
            assert!(report.closed);
            assert!(report.volume > 0.0);
            let hi = g.upper_corner();
            assert!(mesh.vertices.iter().all(|v| (0..3).all(|a| v[a] >= 0.0 && v[a] <= hi[a])));
        }
    }

    #[test]
    fn uniform_field_has_no_surface() {
        let g = VoxelGrid::from_fn(Vec3::zeros(), 1.0, [4, 4, 4], |_| 2.0);
        assert!(matches!(marching_cubes(&g, 1.0), Err(Error::EmptySurface)));
    }

    #[test]
    fn distance_grid_single_point() {
        let c = PointCloud::new(vec![Vec3::zeros()]);
        let g = distance_grid_with_cell(&c, 0.1, 0.15).unwrap();
        assert_eq!(g.dims, [7, 7, 7]);
        assert!(g.value(3, 3, 3) < 0.1);
        assert_eq!(g.value(0, 0, 0), 0.15);
        assert!(g.values.iter().all(|v| *v >= 0.0 && *v <= 0.15));
        assert!(matches!(distance_grid(&c, 64, 1.5), Err(Error::DegenerateCloud(_))));
    }

    #[test]
    fn distance_grid_tracks_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..20000)
            .map(|_| {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                v.normalize() * 0.5
            })
            .collect();
        let g = distance_grid(&PointCloud::new(pts), 32, 1.5).unwrap();
        let cell = g.cell_size;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let r = g.node(i, j, k).norm();
                    if g.value(i, j, k) < cell {
                        assert!((r - 0.5).abs() < 2.0 * cell, "node at radius {r}");
                    }
                    if (r - 0.5).abs() < 0.2 * cell {
                        assert!(g.value(i, j, k) < cell);
                    }
                }
            }
        }
        let mesh = mesh_from_cloud(&PointCloud::new(g.values.iter().map(|_| Vec3::zeros()).take(0).collect()), 32);
        assert!(mesh.is_err());
    }

    #[test]
    fn outer_shell_of_sampled_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..30000)
            .map(|_| {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                v.normalize() * 0.5
            })
            .collect();
        let mesh = mesh_from_cloud(&PointCloud::new(pts), 48).unwrap();
        let report = watertight_check(&mesh);
        assert!(report.closed);
        assert_eq!(report.euler, 2);
        let cell = 1.0 / 48.0;
        let r = 0.5 + cell;
        let expected = 4.0 / 3.0 * PI * r * r * r;
        assert!((report.volume - expected).abs() / expected < 0.05, "{} vs {expected}", report.volume);
    }

    #[test]
    fn watertight_examples() {
        let tri = TriangleMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            triangles: vec![[0, 1, 2]],
        };
        assert!(!watertight_check(&tri).closed);
        let tet = TriangleMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        };
        let r = watertight_check(&tet);
        assert!(r.closed);
        assert_eq!(r.euler, 2);
        assert!((r.volume - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn obj_roundtrip() {
        let mesh = marching_cubes(&sphere_grid(0.5, 12), 0.5).unwrap();
        let text = mesh.to_obj();
        assert!(text.starts_with("v "));
        let back = TriangleMesh::parse_obj(&text, Path::new("m.obj")).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.to_obj(), text);
        assert!(TriangleMesh::parse_obj("f 1 2 3\n", Path::new("m.obj")).is_err());
    }

    #[test]
    fn static_link_accumulation_keeps_extent() {
        use crate::clustering::ClusterAssignment;
        use crate::geometry::Pose;
        use crate::registration::ClusterSet;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<PointCloud> = (0..10)
            .map(|_| PointCloud::new((0..200).map(|_| Vec3::new(rng.gen(), rng.gen::<f64>() * 0.5, 0.2)).collect()))
            .collect();
        let seq = FrameSequence::new(frames, "s").unwrap();
        let track = ClusterTrack {
            poses: vec![vec![Pose::IDENTITY]; 10],
            local: ClusterSet::default(),
            memberships: vec![
                ClusterAssignment {
                    labels: vec![0; 200],
                    centers: vec![Vec3::zeros()]
                };
                10
            ],
            step_losses: vec![],
            anchor_losses: vec![],
            frame_chamfer: vec![0.0; 10],
        };
        let labels = PartLabeling::new(vec![0]);
        let lp = LinkPoseTrack {
            poses: vec![vec![Pose::IDENTITY; 10]],
        };
        let acc = accumulate_link_cloud(&seq, &track, &labels, &lp, 0);
        assert_eq!(acc.len(), 2000);
        let d_all = crate::pointcloud::bbox_diagonal(&acc).unwrap();
        let d_one = crate::pointcloud::bbox_diagonal(&seq.frames[0]).unwrap();
        assert!((d_all - d_one).abs() / d_one < 0.05);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [7, 5, 6];
        let marked: Vec<bool> = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.gen_bool(0.05)).collect();
        let d = distance_transform(&marked, dims);
        let coord = |n: usize| [n % dims[0], (n / dims[0]) % dims[1], n / (dims[0] * dims[1])];
        for n in 0..marked.len() {
            let a = coord(n);
            let brute = (0..marked.len())
                .filter(|&m| marked[m])
                .map(|m| {
                    let b = coord(m);
                    (0..3).map(|x| (a[x] as f64 - b[x] as f64).powi(2)).sum::<f64>()
                })
                .fold(FAR, f64::min);
            assert_eq!(d[n], brute);
        }
    }

    fn box_samples(size: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
        let total: f64 = areas.iter().sum();
        (0..n)
            .map(|_| {
                let mut u = rng.gen_range(0.0..total);
                let mut axis = 0;
                while u > areas[axis] && axis < 2 {
                    u -= areas[axis];
                    axis += 1;
                }
                let mut p = Vec3::new(
                    rng.gen_range(-0.5..0.5) * size[0],
                    rng.gen_range(-0.5..0.5) * size[1],
                    rng.gen_range(-0.5..0.5) * size[2],
                );
                p[axis] = if rng.gen_bool(0.5) { 0.5 } else { -0.5 } * size[axis];
                p
            })
            .collect()
    }

    #[test]
    fn sparse_repeated_scans_close_to_genus_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let size = [0.25, 0.06, 0.06];
        let base = box_samples(size, 800, &mut rng);
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.extend(base.iter().map(|p| p + Vec3::new(rng.gen_range(-1e-4..1e-4), 0.0, 0.0)));
        }
        let cloud = PointCloud::new(pts);
        let cell = size[0] / 64.0;
        assert!(mean_spacing(&cloud, 0.5 * cell) > 2.0 * mean_spacing(&cloud, 1e-6));
        let report = watertight_check(&mesh_from_cloud(&cloud, 64).unwrap());
        assert!(report.closed);
        assert_eq!(report.euler, 2);
        let expected = size.iter().map(|s| s + 2.0 * cell).product::<f64>();
        assert!((report.volume - expected).abs() / expected < 0.2, "{} vs {expected}", report.volume);
    }
}
