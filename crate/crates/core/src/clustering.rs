//! K-means++ initialization, single-pass fixed-center k-means for
//! resampling, agglomerative grouping and silhouette scoring.

use nalgebra::DMatrix;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::pointcloud::{bbox_diagonal, PointCloud};

const MAX_LLOYD_ITERS: usize = 100;

/// Per-point cluster labels plus cluster centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec3>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    /// Point indices per cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn nearest_center(p: &Vec3, centers: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec3], centers: &[Vec3], labels: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (j, d) = nearest_center(p, centers);
        *l = j;
        objective += d;
    }
    objective
}

/// Sum of member positions and member counts per cluster.
fn cluster_sums(points: &[Vec3], labels: &[usize], k: usize) -> (Vec<Vec3>, Vec<usize>) {
    let mut sums = vec![Vec3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l] += p;
        counts[l] += 1;
    }
    (sums, counts)
}

#[cfg(test)]
fn objective(points: &[Vec3], labels: &[usize], centers: &[Vec3]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p - centers[l]).norm_squared())
        .sum()
}

fn seed_centers(points: &[Vec3], s: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let n = points.len();
    let mut centers = Vec::with_capacity(s);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    centers.push(points[first]);
    chosen[first] = true;
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - points[first]).norm_squared())
        .collect();
    while centers.len() < s {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // All remaining weight is zero (duplicate points).
            Err(_) => chosen.iter().position(|c| !c).unwrap_or(0),
        };
        chosen[next] = true;
        let c = points[next];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - c).norm_squared());
        }
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Also returns the objective after every iteration.
pub fn kmeans_pp_traced(c: &PointCloud, s: usize, seed: u64) -> Result<(ClusterAssignment, Vec<f64>)> {
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least 2 clusters, got {s}"
        )));
    }
    let points = &c.points;
    let n = points.len();
    if n < s {
        return Err(Error::TooFewPoints {
            points: n,
            clusters: s,
        });
    }
    let tol = 1e-6 * bbox_diagonal(c).unwrap_or(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, s, &mut rng);
    let mut labels = vec![0usize; n];
    let mut trace = Vec::new();
    assign(points, &centers, &mut labels);

    for _ in 0..MAX_LLOYD_ITERS {
        let (sums, counts) = cluster_sums(points, &labels, s);
        let mut moved: f64 = 0.0;
        for j in 0..s {
            if counts[j] > 0 {
                let c = sums[j] / counts[j] as f64;
                moved = moved.max((c - centers[j]).norm());
                centers[j] = c;
            }
        }
        // Reseed empty clusters at the point farthest from its center.
        for j in 0..s {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (points[a] - centers[labels[a]]).norm_squared();
                        let db = (points[b] - centers[labels[b]]).norm_squared();
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                moved = moved.max((points[far] - centers[j]).norm());
                centers[j] = points[far];
                labels[far] = j;
            }
        }
        trace.push(assign(points, &centers, &mut labels));
        if moved < tol {
            break;
        }
    }

    // Lloyd can in principle still leave a cluster empty on exact ties.
    let (_, counts) = cluster_sums(points, &labels, s);
    for j in 0..s {
        if counts[j] == 0 {
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = (points[a] - centers[labels[a]]).norm_squared();
                    let db = (points[b] - centers[labels[b]]).norm_squared();
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("n >= s guarantees a donor cluster");
            labels[far] = j;
            centers[j] = points[far];
        }
    }
    let assignment = ClusterAssignment { labels, centers };
    Ok((assignment, trace))
}

pub fn kmeans_pp(c: &PointCloud, s: usize, seed: u64) -> Result<ClusterAssignment> {
    kmeans_pp_traced(c, s, seed).map(|(a, _)| a)
}

/// One nearest-center assignment followed by one mean update. Empty
/// clusters keep their input center.
pub fn kmeans_fixed_centers(c: &PointCloud, centers: &[Vec3]) -> ClusterAssignment {
    assert!(!centers.is_empty(), "kmeans_fixed_centers needs at least one center");
    let mut labels = vec![0usize; c.len()];
    assign(&c.points, centers, &mut labels);
    let (sums, counts) = cluster_sums(&c.points, &labels, centers.len());
    let centers = centers
        .iter()
        .enumerate()
        .map(|(j, &c0)| {
            if counts[j] > 0 {
                sums[j] / counts[j] as f64
            } else {
                c0
            }
        })
        .collect();
    ClusterAssignment { labels, centers }
}

/// Mean silhouette `(b - a) / max(a, b)` over all nodes.
///
/// `a(i)` is the mean distance to the other members of `i`'s group and
/// `b(i)` the smallest mean distance to another group. Members of singleton
/// groups score 0, following Rousseeuw.
pub fn silhouette_mean(dist: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    Ok(silhouette_samples(dist, labels)?.iter().sum::<f64>() / labels.len() as f64)
}

pub fn silhouette_samples(dist: &DMatrix<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let n = labels.len();
    if dist.nrows() != n || dist.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} distance matrix for {} labels",
            dist.nrows(),
            dist.ncols(),
            n
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::SingleGroup);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[(i, j)];
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            out.push(0.0);
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&g| g != own && sizes[g] > 0)
            .map(|g| sums[g] / sizes[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        out.push(if m > 0.0 { (b - a) / m } else { 0.0 });
    }
    Ok(out)
}

/// Agglomerative clustering with average linkage on a precomputed distance
/// matrix, cut at `k` groups. Labels are numbered by first appearance.
pub fn agglomerative_average(dist: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let n = dist.nrows();
    assert!(k >= 1 && k <= n, "cannot cut {n} nodes into {k} groups");
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Linkage between live groups, indexed by group slot.
    let mut link = dist.clone();
    let mut alive = vec![true; n];
    let mut count = n;
    while count > k {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for b in (a + 1)..n {
                if alive[b] && link[(a, b)] < best.2 {
                    best = (a, b, link[(a, b)]);
                }
            }
        }
        let (a, b, _) = best;
        let (na, nb) = (groups[a].len() as f64, groups[b].len() as f64);
        for c in 0..n {
            if alive[c] && c != a && c != b {
                let v = (na * link[(a, c)] + nb * link[(b, c)]) / (na + nb);
                link[(a, c)] = v;
                link[(c, a)] = v;
            }
        }
        let moved = std::mem::take(&mut groups[b]);
        groups[a].extend(moved);
        alive[b] = false;
        count -= 1;
    }
    let mut group_of = vec![0usize; n];
    for (g, members) in groups.iter().enumerate() {
        for &m in members {
            group_of[m] = g;
        }
    }
    let mut relabel = vec![usize::MAX; n];
    let mut next = 0;
    group_of
        .iter()
        .map(|&g| {
            if relabel[g] == usize::MAX {
                relabel[g] = next;
                next += 1;
            }
            relabel[g]
        })
        .collect()
}
