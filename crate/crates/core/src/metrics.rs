//! Evaluation against ground truth: registration Chamfer, tree edit
//! distance, joint axis errors, repose Chamfer and segmentation accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::pointcloud::{chamfer_l1, FrameSequence, PointCloud};
use crate::registration::ClusterTrack;
use crate::urdf::{fk_transforms, link_id, sample_surface, MeshLibrary, UrdfModel};

const MM: f64 = 1000.0;

/// Mean per-frame Chamfer (mm) between the tracked first-frame clusters and
/// every later frame.
pub fn metric_cd(track: &ClusterTrack, seq: &FrameSequence) -> Result<f64> {
    let frames = track.num_frames().min(seq.frames.len());
    if frames < 2 {
        return Err(Error::EmptySequence(frames));
    }
    let mut sum = 0.0;
    for t in 1..frames {
        let pred = PointCloud::new(track.local.transformed(&track.poses[t]));
        sum += chamfer_l1(&pred, &seq.frames[t])?;
    }
    Ok(sum / (frames - 1) as f64 * MM)
}

/// Rooted tree with ordered children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderedTree {
    pub root: usize,
    pub children: Vec<Vec<usize>>,
}

impl OrderedTree {
    /// Children sorted recursively by (subtree size, canonical string).
    pub fn canonical(parents: &[Option<usize>]) -> Result<OrderedTree> {
        let n = parents.len();
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 || parents.iter().flatten().any(|&p| p >= n) {
            return Err(Error::InvalidArgument("parent array must describe one rooted tree".into()));
        }
        let mut children = vec![Vec::new(); n];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        let mut tree = OrderedTree {
            root: roots[0],
            children,
        };
        let mut seen = 0;
        fn canon(t: &mut OrderedTree, v: usize, seen: &mut usize) -> (usize, String) {
            *seen += 1;
            let kids = t.children[v].clone();
            let mut keyed: Vec<((usize, String), usize)> = kids.into_iter().map(|c| (canon(t, c, seen), c)).collect();
            keyed.sort();
            let size = 1 + keyed.iter().map(|((s, _), _)| s).sum::<usize>();
            let label = format!("({})", keyed.iter().map(|((_, s), _)| s.as_str()).collect::<String>());
            t.children[v] = keyed.into_iter().map(|(_, c)| c).collect();
            (size, label)
        }
        if n > 0 {
            let root = tree.root;
            canon(&mut tree, root, &mut seen);
        }
        if seen != n {
            return Err(Error::InvalidArgument("parent array contains a cycle".into()));
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    /// Nodes in postorder.
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        fn walk(t: &OrderedTree, v: usize, out: &mut Vec<usize>) {
            for &c in &t.children[v] {
                walk(t, c, out);
            }
            out.push(v);
        }
        if !self.is_empty() {
            walk(self, self.root, &mut out);
        }
        out
    }
}

/// Postorder-indexed leftmost-leaf table and keyroots.
fn zs_tables(t: &OrderedTree) -> (Vec<usize>, Vec<usize>) {
    let order = t.postorder();
    let mut pos = vec![0; t.len()];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    let mut leftmost = vec![0; t.len()];
    for (k, &v) in order.iter().enumerate() {
        leftmost[k] = match t.children[v].first() {
            Some(&c) => leftmost[pos[c]],
            None => k,
        };
    }
    let keyroots = (0..order.len())
        .filter(|&k| !(k + 1..order.len()).any(|j| leftmost[j] == leftmost[k]))
        .collect();
    (leftmost, keyroots)
}

/// Unit-cost edit distance between ordered trees with anonymous nodes.
pub fn ordered_edit_distance(a: &OrderedTree, b: &OrderedTree) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    let (la, ka) = zs_tables(a);
    let (lb, kb) = zs_tables(b);
    let mut td = vec![vec![0usize; b.len()]; a.len()];
    for &i in &ka {
        for &j in &kb {
            let (oi, oj) = (la[i], lb[j]);
            let (h, w) = (i - oi + 2, j - oj + 2);
            let mut fd = vec![vec![0usize; w]; h];
            for x in 1..h {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..w {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in oi..=i {
                for y in oj..=j {
                    let (fx, fy) = (x - oi + 1, y - oj + 1);
                    let del = fd[fx - 1][fy] + 1;
                    let ins = fd[fx][fy - 1] + 1;
                    if la[x] == oi && lb[y] == oj {
                        fd[fx][fy] = del.min(ins).min(fd[fx - 1][fy - 1]);
                        td[x][y] = fd[fx][fy];
                    } else {
                        let sub = fd[la[x] - oi][lb[y] - oj] + td[x][y];
                        fd[fx][fy] = del.min(ins).min(sub);
                    }
                }
            }
        }
    }
    td[a.len() - 1][b.len() - 1]
}

/// Edit distance between the canonical orderings of two parent arrays.
pub fn tree_edit_distance(a: &[Option<usize>], b: &[Option<usize>]) -> Result<usize> {
    Ok(ordered_edit_distance(&OrderedTree::canonical(a)?, &OrderedTree::canonical(b)?))
}

/// Joint axis as a world line at the rest configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLine {
    pub point: Vec3,
    pub axis: Vec3,
}

/// One line per joint, in model joint order.
pub fn joint_lines(m: &UrdfModel) -> Result<Vec<JointLine>> {
    let frames = fk_transforms(m, &BTreeMap::new())?;
    Ok(m.joints
        .iter()
        .map(|j| {
            let c = m.links.iter().position(|l| l.name == j.child).expect("validated model");
            JointLine {
                point: frames[c].translation,
                axis: (frames[c].rotation * Vec3::from(j.axis)).normalize(),
            }
        })
        .collect())
}

/// Angle between axis directions, ignoring sign, in radians.
pub fn axis_angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).abs().min(1.0).acos()
}

/// Length of the common perpendicular between two infinite lines.
pub fn line_distance(a: &JointLine, b: &JointLine) -> f64 {
    let d = b.point - a.point;
    let n = a.axis.cross(&b.axis);
    if n.norm() < 1e-9 {
        d.cross(&a.axis).norm()
    } else {
        d.dot(&n).abs() / n.norm()
    }
}

/// `[predicted link][truth link]` counts of first-frame points.
pub fn link_overlap(pred_labels: &[usize], truth_labels: &[usize], pred_links: usize, truth_links: usize) -> Vec<Vec<usize>> {
    let mut o = vec![vec![0; truth_links]; pred_links];
    for (&p, &t) in pred_labels.iter().zip(truth_labels) {
        o[p][t] += 1;
    }
    o
}

/// Pairs `(predicted joint, truth joint)` by child-link overlap, greedily from
/// the largest overlap; ties go to the smaller axis angle.
pub fn match_joints(pred: &UrdfModel, truth: &UrdfModel, overlap: &[Vec<usize>]) -> Result<Vec<(usize, usize)>> {
    let pl = joint_lines(pred)?;
    let tl = joint_lines(truth)?;
    let mut candidates = Vec::new();
    for (pi, pj) in pred.joints.iter().enumerate() {
        let Some(pc) = link_id(&pj.child) else { continue };
        for (ti, tj) in truth.joints.iter().enumerate() {
            let Some(tc) = link_id(&tj.child) else { continue };
            let score = overlap.get(pc).and_then(|row| row.get(tc)).copied().unwrap_or(0);
            if score > 0 {
                candidates.push((score, axis_angle_between(&pl[pi].axis, &tl[ti].axis), pi, ti));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
    let mut used_p = vec![false; pred.joints.len()];
    let mut used_t = vec![false; truth.joints.len()];
    let mut pairs = Vec::new();
    for (_, _, pi, ti) in candidates {
        if !used_p[pi] && !used_t[ti] {
            used_p[pi] = true;
            used_t[ti] = true;
            pairs.push((pi, ti));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoCorrespondence);
    }
    pairs.sort();
    Ok(pairs)
}

/// Mean line distance (mm) and mean axis angle (degrees) over matched joints.
pub fn metric_joint(pred: &UrdfModel, truth: &UrdfModel, matching: &[(usize, usize)]) -> Result<(f64, f64)> {
    if matching.is_empty() {
        return Err(Error::NoCorrespondence);
    }
    let pl = joint_lines(pred)?;
    let tl = joint_lines(truth)?;
    let (mut d, mut a) = (0.0, 0.0);
    for &(p, t) in matching {
        d += line_distance(&pl[p], &tl[t]);
        a += axis_angle_between(&pl[p].axis, &tl[t].axis);
    }
    let n = matching.len() as f64;
    Ok((d / n * MM, (a / n).to_degrees()))
}

/// Mean Chamfer (mm) between the two models' surfaces over random shared
/// joint commands. Predicted angles are negated where its axis points
/// against the matched truth axis.
#[allow(clippy::too_many_arguments)]
pub fn metric_repose(
    pred: &UrdfModel,
    pred_meshes: &MeshLibrary,
    truth: &UrdfModel,
    truth_meshes: &MeshLibrary,
    matching: &[(usize, usize)],
    trials: usize,
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 || n_points == 0 {
        return Err(Error::InvalidArgument("repose needs at least one trial and one point".into()));
    }
    if matching.is_empty() {
        return Err(Error::NoCorrespondence);
    }
    let pl = joint_lines(pred)?;
    let tl = joint_lines(truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for trial in 0..trials {
        let mut pa = BTreeMap::new();
        let mut ta = BTreeMap::new();
        for &(p, t) in matching {
            let (pj, tj) = (&pred.joints[p], &truth.joints[t]);
            let sign = if pl[p].axis.dot(&tl[t].axis) < 0.0 { -1.0 } else { 1.0 };
            let (plo, phi) = if sign > 0.0 { (pj.lower, pj.upper) } else { (-pj.upper, -pj.lower) };
            let (lo, hi) = (plo.max(tj.lower), phi.min(tj.upper));
            let angle = if lo < hi { rng.gen_range(lo..hi) } else { 0.0 };
            ta.insert(tj.name.clone(), angle);
            pa.insert(pj.name.clone(), sign * angle);
        }
        // Both models share the sampling stream, so identical models compare equal.
        let stream = seed.wrapping_add(trial as u64 + 1);
        let a = sample_surface(pred, pred_meshes, &pa, n_points, stream)?;
        let b = sample_surface(truth, truth_meshes, &ta, n_points, stream)?;
        total += chamfer_l1(&a, &b)?;
    }
    Ok(total / trials as f64 * MM)
}

/// Truth part of every cluster by majority vote over its first-frame points.
pub fn cluster_truth_parts(track: &ClusterTrack, truth_labels: &[usize], truth_links: usize) -> Vec<usize> {
    let s = track.num_clusters();
    let mut votes = vec![vec![0usize; truth_links]; s];
    for (&c, &t) in track.memberships[0].labels.iter().zip(truth_labels) {
        votes[c][t] += 1;
    }
    votes
        .iter()
        .map(|v| (0..truth_links).max_by(|&a, &b| v[a].cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0))
        .collect()
}

/// Fraction of items whose predicted part maps to their true part under the
/// best one-to-one relabeling.
pub fn segmentation_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predicted vs {} true labels", pred.len(), truth.len())));
    }
    let np = pred.iter().max().unwrap() + 1;
    let nt = truth.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0i64; nt]; np];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let matrix = if np <= nt {
        Matrix::from_rows(counts).expect("rectangular")
    } else {
        Matrix::from_rows((0..nt).map(|t| (0..np).map(|p| counts[p][t]).collect::<Vec<_>>())).expect("rectangular")
    };
    let (agree, _) = kuhn_munkres(&matrix);
    Ok(agree as f64 / pred.len() as f64)
}

/// Metrics of one prediction; metrics that could not be computed stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cd: Option<f64>,
    pub ted: Option<f64>,
    pub e_jd: Option<f64>,
    pub e_ja: Option<f64>,
    pub cd_r: Option<f64>,
    pub matched_joints: usize,
    pub truth_joints: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        writeln!(out, "{:<10} {:>10} {:>8} {:>10} {:>10} {:>10}", "", "CD (mm)", "TED", "E_JD (mm)", "E_JA (deg)", "CD_r (mm)").unwrap();
        writeln!(
            out,
            "{:<10} {:>10} {:>8} {:>10} {:>10} {:>10}",
            "predicted",
            cell(self.cd),
            cell(self.ted),
            cell(self.e_jd),
            cell(self.e_ja),
            cell(self.cd_r)
        )
        .unwrap();
        writeln!(out, "matched joints: {}/{}", self.matched_joints, self.truth_joints).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{random_chain, Branching};
    use crate::urdf::spec_to_urdf;

    fn path(n: usize) -> Vec<Option<usize>> {
        (0..n).map(|i| i.checked_sub(1)).collect()
    }

    #[test]
    fn ted_small_cases() {
        assert_eq!(tree_edit_distance(&path(3), &path(3)).unwrap(), 0);
        assert_eq!(tree_edit_distance(&path(3), &path(2)).unwrap(), 1);
        let star = vec![None, Some(0), Some(0), Some(0)];
        assert_eq!(tree_edit_distance(&star, &path(4)).unwrap(), 4);
        // Child order does not matter after canonicalization.
        let a = vec![None, Some(0), Some(0), Some(1)];
        let b = vec![None, Some(0), Some(0), Some(2)];
        assert_eq!(tree_edit_distance(&a, &b).unwrap(), 0);
        assert_eq!(tree_edit_distance(&path(1), &path(5)).unwrap(), 4);
        assert!(tree_edit_distance(&[None, None], &path(2)).is_err());
        assert!(tree_edit_distance(&[Some(1), Some(0), None], &path(2)).is_err());
    }

    #[test]
    fn line_distance_cases() {
        let a = JointLine {
            point: Vec3::zeros(),
            axis: Vec3::z(),
        };
        let b = JointLine {
            point: Vec3::new(0.005, 0.0, 0.3),
            axis: -Vec3::z(),
        };
        assert!((line_distance(&a, &b) - 0.005).abs() < 1e-15);
        let c = JointLine {
            point: Vec3::new(0.0, 0.0, 0.2),
            axis: Vec3::x(),
        };
        assert!(line_distance(&a, &c) < 1e-15);
        let d = JointLine {
            point: Vec3::new(0.0, 0.1, 0.2),
            axis: Vec3::x(),
        };
        assert!((line_distance(&a, &d) - 0.1).abs() < 1e-15);
        assert!((axis_angle_between(&Vec3::z(), &-Vec3::z())).abs() < 1e-15);
    }

    #[test]
    fn joint_metric_self_and_offset() {
        let spec = random_chain(3, Branching::Serial, 4).unwrap();
        let (truth, _) = spec_to_urdf(&spec, "t");
        let matching: Vec<(usize, usize)> = (0..3).map(|i| (i, i)).collect();
        let (d, a) = metric_joint(&truth, &truth, &matching).unwrap();
        assert!(d < 1e-9 && a < 1e-6);
        let mut flipped = truth.clone();
        for j in &mut flipped.joints {
            j.axis = j.axis.map(|v| -v);
        }
        let (d, a) = metric_joint(&flipped, &truth, &matching).unwrap();
        assert!(d < 1e-9 && a < 1e-6);
        assert!(matches!(metric_joint(&truth, &truth, &[]), Err(Error::NoCorrespondence)));
    }

    #[test]
    fn segmentation_accuracy_best_permutation() {
        assert_eq!(segmentation_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(segmentation_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(segmentation_accuracy(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(segmentation_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn repose_self_comparison() {
        let spec = random_chain(3, Branching::Serial, 8).unwrap();
        let (truth, lib) = spec_to_urdf(&spec, "t");
        let matching: Vec<(usize, usize)> = (0..3).map(|i| (i, i)).collect();
        let cd = metric_repose(&truth, &lib, &truth, &lib, &matching, 3, 5000, 1).unwrap();
        assert!(cd < 1.0, "{cd}");
        assert!(metric_repose(&truth, &lib, &truth, &lib, &matching, 0, 5000, 1).is_err());

        // Flipping the predicted axes keeps the commanded motion identical.
        let mut flipped = truth.clone();
        for j in &mut flipped.joints {
            j.axis = j.axis.map(|v| -v);
            (j.lower, j.upper) = (-j.upper, -j.lower);
        }
        let cdf = metric_repose(&flipped, &lib, &truth, &lib, &matching, 3, 5000, 1).unwrap();
        assert!(cdf < 1.0, "{cdf}");
    }

    #[test]
    fn report_marks_missing_metrics() {
        let r = EvalReport {
            ted: Some(0.0),
            ..Default::default()
        };
        assert!(r.table().contains("n/a"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"cd\":null"));
    }
}
