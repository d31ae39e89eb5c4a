//! Motion correlation between cluster trajectories and grouping of
//! clusters into rigid parts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{agglomerative_average, silhouette_mean};
use crate::error::{Error, Result};
use crate::geometry::{quat_geodesic, Pose, Quat, Vec3};
use crate::registration::ClusterTrack;

/// `alpha * |xi - xj| + geodesic(qi, qj)`.
pub fn pose_distance(a: &Pose, b: &Pose, alpha: f64) -> f64 {
    alpha * (a.position - b.position).norm() + quat_geodesic(&a.orientation, &b.orientation)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    pub alpha: f64,
    /// Drop the positional term.
    pub no_pos: bool,
    /// Drop the orientation term.
    pub no_ori: bool,
}

impl CorrelationOptions {
    pub fn new(alpha: f64) -> Self {
        CorrelationOptions {
            alpha,
            no_pos: false,
            no_ori: false,
        }
    }
}

/// Symmetric S x S matrix in `[0, 1]`; small entries mean co-rigid clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub values: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("correlation matrix must be square".into()));
        }
        Ok(CorrelationMatrix {
            values: DMatrix::from_fn(n, n, |i, j| rows[i][j]),
        })
    }

    fn normalized(mut values: DMatrix<f64>) -> Result<Self> {
        let max = values.max();
        if !(max > 0.0) {
            return Err(Error::DegenerateTrack);
        }
        values /= max;
        Ok(CorrelationMatrix { values })
    }
}

/// Per-cluster motion relative to the first frame, expressed about the
/// centroid of the first-frame cluster positions so that clusters moving
/// together get identical displacements.
pub fn displacements(track: &ClusterTrack, t: usize) -> Vec<Pose> {
    let first = &track.poses[0];
    let c: Vec3 = first.iter().map(|p| p.position).sum::<Vec3>() / first.len() as f64;
    track.poses[t]
        .iter()
        .zip(first)
        .map(|(now, start)| {
            let dq: Quat = now.orientation * start.orientation.conjugate();
            let position = (now.position - c) - dq.rotate(&(start.position - c));
            Pose::new(position, dq)
        })
        .collect()
}

/// Accumulated displacement distances, max-normalized.
pub fn correlation_matrix(track: &ClusterTrack, opts: &CorrelationOptions) -> Result<CorrelationMatrix> {
    let s = track.num_clusters();
    if track.num_frames() < 2 {
        return Err(Error::EmptySequence(track.num_frames()));
    }
    let alpha = if opts.no_pos { 0.0 } else { opts.alpha };
    let mut acc = DMatrix::zeros(s, s);
    for t in 1..track.num_frames() {
        let d = displacements(track, t);
        for i in 0..s {
            for j in i + 1..s {
                let mut v = alpha * (d[i].position - d[j].position).norm();
                if !opts.no_ori {
                    v += quat_geodesic(&d[i].orientation, &d[j].orientation);
                }
                acc[(i, j)] += v;
                acc[(j, i)] += v;
            }
        }
    }
    CorrelationMatrix::normalized(acc)
}

/// Elementwise mean of matrices built on the same cluster set, re-normalized.
pub fn merge_correlations(mats: &[CorrelationMatrix]) -> Result<CorrelationMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("no correlation matrices to merge".into()))?;
    let n = first.size();
    let mut sum = DMatrix::zeros(n, n);
    for m in mats {
        if m.size() != n {
            return Err(Error::ShapeMismatch(format!(
                "correlation matrices of size {n} and {} cannot be merged",
                m.size()
            )));
        }
        sum += &m.values;
    }
    CorrelationMatrix::normalized(sum / mats.len() as f64)
}

/// Cluster-to-part assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLabeling {
    pub part_of: Vec<usize>,
    pub count: usize,
}

impl PartLabeling {
    pub fn new(part_of: Vec<usize>) -> Self {
        let count = part_of.iter().max().map_or(0, |m| m + 1);
        PartLabeling { part_of, count }
    }

    pub fn members(&self, part: usize) -> Vec<usize> {
        (0..self.part_of.len()).filter(|&i| self.part_of[i] == part).collect()
    }
}

/// Default part-count search range for `s` clusters.
pub fn default_k_range(s: usize) -> (usize, usize) {
    (2, (s.saturating_sub(1)).min(24).max(2))
}

/// Average-linkage grouping for every k in range; keeps the k with the best
/// mean silhouette (ties go to the smaller k). Returns the curve as `(k, score)`.
pub fn group_parts(m: &CorrelationMatrix, k_range: (usize, usize)) -> Result<(PartLabeling, Vec<(usize, f64)>)> {
    let s = m.size();
    let (lo, hi) = k_range;
    if lo < 2 || lo > hi || hi + 1 > s {
        return Err(Error::InvalidArgument(format!(
            "part range ({lo}, {hi}) invalid for {s} clusters"
        )));
    }
    let mut curve = Vec::with_capacity(hi - lo + 1);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in lo..=hi {
        let labels = agglomerative_average(&m.values, k);
        let score = silhouette_mean(&m.values, &labels)?;
        curve.push((k, score));
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, labels));
        }
    }
    let (_, labels) = best.expect("non-empty range");
    Ok((PartLabeling::new(labels), curve))
}

/// A cluster is loose when its nearest neighbour is farther than this many
/// times the median nearest-neighbour distance...
pub const LOOSE_FACTOR: f64 = 4.0;
/// ...and farther than this absolute distance.
pub const LOOSE_FLOOR: f64 = 0.02;
/// A loose cluster becomes its own part when it is not between any two
/// parts, i.e. `(d(o, A) + d(o, B)) / d(A, B)` exceeds this for every pair.
pub const STANDALONE_RATIO: f64 = 1.2;
/// A standalone cluster joins an earlier standalone one when it is closer
/// to it than this fraction of its distance to the nearest part.
pub const JOIN_FRACTION: f64 = 0.5;

/// Like [`group_parts`], but the part count is chosen on the tightly
/// correlated clusters only.
///
/// Clusters straddling a joint move with a blend of both links, sit between
/// the two groups and drag the silhouette toward extra parts. They are held
/// out of the search and then attached to the nearest part by average
/// distance, unless they are far from every pair of parts, which happens for
/// a small link covered by one or two clusters. With `k_min == k_max` this is
/// plain [`group_parts`]. The curve is the one of the tight subset.
pub fn group_parts_robust(m: &CorrelationMatrix, k_range: (usize, usize)) -> Result<(PartLabeling, Vec<(usize, f64)>)> {
    let s = m.size();
    let (lo, hi) = k_range;
    if lo == hi || s < 3 {
        return group_parts(m, k_range);
    }
    let v = &m.values;
    let nearest: Vec<f64> = (0..s)
        .map(|i| (0..s).filter(|&j| j != i).map(|j| v[(i, j)]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut sorted = nearest.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = (LOOSE_FACTOR * sorted[s / 2]).max(LOOSE_FLOOR);
    let tight: Vec<usize> = (0..s).filter(|&i| nearest[i] <= cut).collect();
    if tight.len() == s || tight.len() < lo + 1 {
        return group_parts(m, k_range);
    }

    let sub = CorrelationMatrix {
        values: DMatrix::from_fn(tight.len(), tight.len(), |a, b| v[(tight[a], tight[b])]),
    };
    let (inner, curve) = group_parts(&sub, (lo, hi.min(tight.len() - 1)))?;
    let members: Vec<Vec<usize>> = (0..inner.count)
        .map(|p| inner.members(p).into_iter().map(|a| tight[a]).collect())
        .collect();
    let mean = |a: &[usize], b: &[usize]| {
        a.iter().flat_map(|&x| b.iter().map(move |&y| v[(x, y)])).sum::<f64>() / (a.len() * b.len()) as f64
    };

    let mut part_of = vec![0; s];
    for (p, group) in members.iter().enumerate() {
        for &i in group {
            part_of[i] = p;
        }
    }
    let mut extra: Vec<Vec<usize>> = Vec::new();
    for o in (0..s).filter(|i| nearest[*i] > cut) {
        let to: Vec<f64> = members.iter().map(|g| mean(&[o], g)).collect();
        let mut ratio = f64::INFINITY;
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let gap = mean(&members[a], &members[b]);
                if gap > 0.0 {
                    ratio = ratio.min((to[a] + to[b]) / gap);
                }
            }
        }
        let closest = (0..members.len()).min_by(|&a, &b| to[a].total_cmp(&to[b])).expect("at least two parts");
        if ratio <= STANDALONE_RATIO {
            part_of[o] = closest;
            continue;
        }
        // Several loose clusters may cover one small link together.
        let shared = (0..extra.len())
            .map(|e| (e, mean(&[o], &extra[e])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .filter(|&(_, d)| d < JOIN_FRACTION * to[closest]);
        if let Some((e, _)) = shared {
            part_of[o] = members.len() + e;
            extra[e].push(o);
        } else if members.len() + extra.len() < hi {
            part_of[o] = members.len() + extra.len();
            extra.push(vec![o]);
        } else {
            part_of[o] = closest;
        }
    }
    Ok((PartLabeling::new(part_of), curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ClusterAssignment;
    use crate::geometry::Transform3D;
    use crate::registration::ClusterSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn track_from(poses: Vec<Vec<Pose>>) -> ClusterTrack {
        let s = poses[0].len();
        ClusterTrack {
            local: ClusterSet {
                points: vec![],
                cluster: vec![],
                count: s,
            },
            memberships: vec![
                ClusterAssignment {
                    labels: vec![],
                    centers: vec![]
                };
                poses.len()
            ],
            step_losses: vec![],
            anchor_losses: vec![],
            frame_chamfer: vec![0.0; poses.len()],
            poses,
        }
    }

    /// Three rigid parts: a static base, a part hinged on it, and a part hinged on that.
    fn arm_track(frames: usize) -> (ClusterTrack, Vec<usize>) {
        let positions = [
            (0, Vec3::new(0.0, 0.0, 0.0)),
            (0, Vec3::new(0.1, 0.0, 0.0)),
            (0, Vec3::new(0.0, 0.1, 0.0)),
            (0, Vec3::new(0.05, 0.05, 0.0)),
            (1, Vec3::new(0.0, 0.0, 0.2)),
            (1, Vec3::new(0.0, 0.0, 0.3)),
            (1, Vec3::new(0.02, 0.0, 0.25)),
            (1, Vec3::new(0.0, 0.02, 0.35)),
            (2, Vec3::new(0.0, 0.1, 0.45)),
            (2, Vec3::new(0.0, 0.2, 0.45)),
            (2, Vec3::new(0.0, 0.15, 0.47)),
            (2, Vec3::new(0.0, 0.25, 0.43)),
        ];
        let mut poses = Vec::new();
        for t in 0..frames {
            let a = 0.1 * t as f64;
            let j1 = Transform3D::about_axis(&Vec3::x(), &Vec3::new(0.0, 0.0, 0.15), a);
            let j2 = j1.compose(&Transform3D::about_axis(&Vec3::y(), &Vec3::new(0.0, 0.0, 0.4), -1.3 * a));
            let frame = positions
                .iter()
                .map(|(part, p)| {
                    let t = match part {
                        0 => Transform3D::IDENTITY,
                        1 => j1,
                        _ => j2,
                    };
                    t.compose(&Transform3D::from_translation(*p)).to_pose()
                })
                .collect();
            poses.push(frame);
        }
        (track_from(poses), positions.iter().map(|p| p.0).collect())
    }

    #[test]
    fn pose_distance_examples() {
        let p = Pose::IDENTITY;
        assert_eq!(pose_distance(&p, &p, 1.0), 0.0);
        let q = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert!((pose_distance(&p, &q, 1.0) - 1.0).abs() < 1e-15);
        let r = Pose::new(Vec3::zeros(), Quat::from_axis_angle(&Vec3::z(), PI / 2.0));
        assert!((pose_distance(&p, &r, 1.0) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_structure_on_arm() {
        let (track, parts) = arm_track(10);
        let m = correlation_matrix(&track, &CorrelationOptions::new(PI / 0.6)).unwrap();
        let s = m.size();
        let mut intra_max: f64 = 0.0;
        let mut inter_min = f64::INFINITY;
        for i in 0..s {
            assert_eq!(m.values[(i, i)], 0.0);
            for j in 0..s {
                assert!((m.values[(i, j)] - m.values[(j, i)]).abs() < 1e-12);
                if i != j {
                    if parts[i] == parts[j] {
                        intra_max = intra_max.max(m.values[(i, j)]);
                    } else {
                        inter_min = inter_min.min(m.values[(i, j)]);
                    }
                }
            }
        }
        assert!(intra_max < 1e-9, "co-moving clusters must be identical: {intra_max}");
        assert!(intra_max < inter_min);
        assert!((m.values.max() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn correlation_needs_motion() {
        let (track, _) = arm_track(1);
        assert!(correlation_matrix(&track, &CorrelationOptions::new(1.0)).is_err());
        let mut still = arm_track(2).0;
        still.poses[1] = still.poses[0].clone();
        assert!(matches!(
            correlation_matrix(&still, &CorrelationOptions::new(1.0)),
            Err(Error::DegenerateTrack)
        ));
    }

    #[test]
    fn correlation_invariant_to_global_rigid_motion() {
        let (track, _) = arm_track(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Transform3D::new(
            Quat::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()).to_matrix(),
            Vec3::new(rng.gen(), rng.gen(), rng.gen()),
        );
        let mut moved = track.clone();
        for frame in &mut moved.poses {
            for p in frame.iter_mut() {
                *p = g.compose(&p.to_transform()).to_pose();
            }
        }
        let opts = CorrelationOptions::new(3.0);
        let a = correlation_matrix(&track, &opts).unwrap();
        let b = correlation_matrix(&moved, &opts).unwrap();
        assert!((a.values - b.values).abs().max() < 1e-9);
    }

    #[test]
    fn correlation_invariant_to_uniform_scale() {
        let (track, _) = arm_track(8);
        let mut scaled = track.clone();
        for frame in &mut scaled.poses {
            for p in frame.iter_mut() {
                p.position *= 2.5;
            }
        }
        let a = correlation_matrix(&track, &CorrelationOptions::new(4.0)).unwrap();
        let b = correlation_matrix(&scaled, &CorrelationOptions::new(4.0 / 2.5)).unwrap();
        assert!((a.values - b.values).abs().max() < 1e-9);
    }

    #[test]
    fn merge_examples() {
        let a = CorrelationMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b = CorrelationMatrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        assert_eq!(merge_correlations(&[a.clone()]).unwrap(), a);
        assert_eq!(merge_correlations(&[a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(merge_correlations(&[a.clone(), b]).unwrap(), a);
        let c = CorrelationMatrix::from_rows(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(matches!(merge_correlations(&[a, c]), Err(Error::ShapeMismatch(_))));
    }

    fn block_matrix(sizes: &[usize]) -> (CorrelationMatrix, Vec<usize>) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &n)| vec![b; n]).collect();
        let n = labels.len();
        let values = DMatrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 0.0 } else { 1.0 });
        (CorrelationMatrix { values }, labels)
    }

    #[test]
    fn groups_block_structure() {
        let (m, labels) = block_matrix(&[3, 4, 2]);
        let (parts, curve) = group_parts(&m, (2, 6)).unwrap();
        assert_eq!(parts.count, 3);
        assert_eq!(parts.part_of, labels);
        assert_eq!(curve.len(), 5);
        let (two, curve) = group_parts(&m, (2, 2)).unwrap();
        assert_eq!(two.count, 2);
        assert_eq!(curve.len(), 1);
        assert!(group_parts(&m, (1, 3)).is_err());
        assert!(group_parts(&m, (2, 9)).is_err());
    }

    /// Three tight blocks of four plus one extra cluster at the given
    /// distances to each block.
    fn blocks_with_extra(to: [f64; 3]) -> CorrelationMatrix {
        let (base, _) = block_matrix(&[4, 4, 4]);
        let mut values = DMatrix::zeros(13, 13);
        values.view_mut((0, 0), (12, 12)).copy_from(&base.values);
        for i in 0..12 {
            values[(i, 12)] = to[i / 4];
            values[(12, i)] = to[i / 4];
        }
        CorrelationMatrix { values }
    }

    #[test]
    fn robust_grouping_matches_plain_on_clean_blocks() {
        let (m, labels) = block_matrix(&[3, 4, 2, 5]);
        let (parts, curve) = group_parts_robust(&m, (2, 8)).unwrap();
        assert_eq!(parts.part_of, labels);
        assert_eq!(curve, group_parts(&m, (2, 8)).unwrap().1);
        let (fixed, _) = group_parts_robust(&m, (3, 3)).unwrap();
        assert_eq!(fixed.count, 3);
    }

    #[test]
    fn robust_grouping_attaches_straddling_cluster() {
        let m = blocks_with_extra([0.45, 0.55, 1.0]);
        let (parts, _) = group_parts_robust(&m, (2, 8)).unwrap();
        assert_eq!(parts.count, 3);
        assert_eq!(parts.part_of[12], parts.part_of[0]);
    }

    #[test]
    fn robust_grouping_keeps_lone_cluster() {
        let m = blocks_with_extra([1.0, 1.0, 1.0]);
        let (parts, _) = group_parts_robust(&m, (2, 8)).unwrap();
        assert_eq!(parts.count, 4);
        assert_eq!(parts.members(3), vec![12]);
        // No room for a fourth part.
        let (capped, _) = group_parts_robust(&m, (2, 3)).unwrap();
        assert_eq!(capped.count, 3);
    }

    #[test]
    fn robust_grouping_pairs_loose_clusters_on_one_link() {
        let (base, _) = block_matrix(&[4, 4, 4]);
        let mut values = DMatrix::from_element(14, 14, 1.0);
        values.view_mut((0, 0), (12, 12)).copy_from(&base.values);
        values[(12, 12)] = 0.0;
        values[(13, 13)] = 0.0;
        values[(12, 13)] = 0.05;
        values[(13, 12)] = 0.05;
        let (parts, _) = group_parts_robust(&CorrelationMatrix { values }, (2, 8)).unwrap();
        assert_eq!(parts.count, 4);
        assert_eq!(parts.members(3), vec![12, 13]);
    }

    #[test]
    fn groups_arm_parts() {
        let (track, parts) = arm_track(10);
        let m = correlation_matrix(&track, &CorrelationOptions::new(PI / 0.6)).unwrap();
        let (labels, _) = group_parts(&m, default_k_range(m.size())).unwrap();
        assert_eq!(labels.part_of, parts);
    }

    #[test]
    fn part_labeling_members() {
        let l = PartLabeling::new(vec![0, 1, 0, 2]);
        assert_eq!(l.count, 3);
        assert_eq!(l.members(0), vec![0, 2]);
    }
}
