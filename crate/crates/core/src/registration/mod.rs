//! Cluster-based 6-DoF registration: a step model tracks clusters from
//! frame to frame, an anchor model re-registers the first-frame clusters
//! against every new frame to suppress drift.

mod network;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use network::{encoded_dim, positional_encode, Adam, ForwardCache, NetworkShape, Regressor, RotationRepr};

use crate::clustering::{kmeans_fixed_centers, kmeans_pp, ClusterAssignment};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Quat, Vec3};
use crate::pointcloud::{bbox_diagonal, FrameSequence, PointCloud, SpatialIndex};

/// Patience only counts an iteration as progress when the best loss
/// improves by at least this relative amount.
pub const MIN_RELATIVE_IMPROVEMENT: f64 = 1e-4;
/// Optimization aborts when the loss exceeds this multiple of its start value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Start losses below this fraction of the diagonal are raised to it before
/// the divergence test, so a near-perfect start is not flagged by jitter.
pub const DIVERGENCE_FLOOR: f64 = 1e-3;
/// A frame whose final Chamfer exceeds this fraction of the diagonal fails.
pub const FAILURE_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// Shared regressor network (default).
    Network,
    /// Raw per-cluster pose parameters, no network.
    Direct,
}

impl std::str::FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(OptimizerMode::Network),
            "direct" => Ok(OptimizerMode::Direct),
            other => Err(Error::Config(format!("unknown optimizer mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub hidden_width: usize,
    pub encoder_layers: usize,
    pub pe_bands: usize,
    pub rotation_repr: RotationRepr,
    pub lr_step: f64,
    pub lr_anchor: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub mode: OptimizerMode,
    /// Learning rate used by `OptimizerMode::Direct` for both stages.
    pub lr_direct: f64,
    pub use_anchor: bool,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden_width: 256,
            encoder_layers: 3,
            pe_bands: 6,
            rotation_repr: RotationRepr::Quaternion,
            lr_step: 1e-4,
            lr_anchor: 5e-5,
            max_iters: 1000,
            patience: 50,
            mode: OptimizerMode::Network,
            lr_direct: 1e-3,
            use_anchor: true,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.hidden_width, self.encoder_layers, self.pe_bands, self.max_iters, self.patience];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("regressor counts must be at least 1".into()));
        }
        let rates = [self.lr_step, self.lr_anchor, self.lr_direct];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn network_shape(&self) -> NetworkShape {
        NetworkShape {
            hidden_width: self.hidden_width,
            encoder_layers: self.encoder_layers,
            pe_bands: self.pe_bands,
            repr: self.rotation_repr,
        }
    }
}

/// Maps world positions into the unit-scale box the encoder expects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub diagonal: f64,
}

impl Normalization {
    pub fn from_cloud(c: &PointCloud) -> Result<Self> {
        let diagonal = bbox_diagonal(c)?;
        let (lo, hi) = c.bounds().ok_or(Error::EmptyCloud)?;
        Ok(Normalization {
            center: (lo + hi) / 2.0,
            diagonal,
        })
    }
}

/// Points grouped by cluster, stored in each cluster's local frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub points: Vec<Vec3>,
    pub cluster: Vec<usize>,
    pub count: usize,
}

impl ClusterSet {
    /// Expresses labelled world points in the frames given by `poses`.
    pub fn from_world(points: &[Vec3], labels: &[usize], poses: &[Pose]) -> Self {
        let inverse: Vec<(Mat3, Vec3)> = poses
            .iter()
            .map(|p| (p.orientation.to_matrix().transpose(), p.position))
            .collect();
        let local = points
            .iter()
            .zip(labels)
            .map(|(p, &l)| inverse[l].0 * (p - inverse[l].1))
            .collect();
        ClusterSet {
            points: local,
            cluster: labels.to_vec(),
            count: poses.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn members(&self, i: usize) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.cluster)
            .filter(|(_, &c)| c == i)
            .map(|(p, _)| *p)
            .collect()
    }

    /// World points under the given poses.
    pub fn transformed(&self, poses: &[Pose]) -> Vec<Vec3> {
        let frames: Vec<(Mat3, Vec3)> = poses.iter().map(|p| (p.orientation.to_matrix(), p.position)).collect();
        self.points
            .iter()
            .zip(&self.cluster)
            .map(|(l, &c)| frames[c].0 * l + frames[c].1)
            .collect()
    }
}

/// Frozen nearest-neighbour pairs of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    /// Target index nearest to every predicted point.
    pub pred_to_target: Vec<usize>,
    /// Predicted index nearest to every target point.
    pub target_to_pred: Vec<usize>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign3(v: &Vec3) -> Vec3 {
    Vec3::new(sign(v.x), sign(v.y), sign(v.z))
}

fn l1(v: &Vec3) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

/// How a loss evaluation obtains its nearest-neighbour pairs.
#[derive(Clone, Copy, Debug)]
pub enum Matching<'a> {
    /// Exact search, optionally warm-started from earlier pairs.
    Search(Option<&'a Correspondences>),
    /// Reuse the given pairs unchanged.
    Frozen(&'a Correspondences),
}

/// Averaged L1 Chamfer loss of `pred` against `target` and its gradient
/// w.r.t. every predicted point.
pub fn chamfer_loss_grad(
    pred: &[Vec3],
    target: &[Vec3],
    target_index: &SpatialIndex,
    matching: Matching<'_>,
) -> (f64, Vec<Vec3>, Correspondences) {
    let corr = match matching {
        Matching::Frozen(c) => c.clone(),
        Matching::Search(hint) => {
            let pred_index = SpatialIndex::new(pred);
            let (pred_to_target, target_to_pred) = match hint {
                Some(h) if h.pred_to_target.len() == pred.len() && h.target_to_pred.len() == target.len() => (
                    pred.par_iter()
                        .zip(&h.pred_to_target)
                        .map(|(p, &j)| target_index.nearest_with_hint(p, j).0)
                        .collect(),
                    target
                        .par_iter()
                        .zip(&h.target_to_pred)
                        .map(|(y, &k)| pred_index.nearest_with_hint(y, k).0)
                        .collect(),
                ),
                _ => (
                    pred.par_iter().map(|p| target_index.nearest(p).0).collect(),
                    target.par_iter().map(|y| pred_index.nearest(y).0).collect(),
                ),
            };
            Correspondences {
                pred_to_target,
                target_to_pred,
            }
        }
    };
    let norm = (pred.len() + target.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); pred.len()];
    for (k, (p, &j)) in pred.iter().zip(&corr.pred_to_target).enumerate() {
        let d = p - target[j];
        loss += l1(&d);
        grad[k] += sign3(&d);
    }
    for (y, &k) in target.iter().zip(&corr.target_to_pred) {
        let d = pred[k] - y;
        loss += l1(&d);
        grad[k] += sign3(&d);
    }
    for g in &mut grad {
        *g /= norm;
    }
    (loss / norm, grad, corr)
}

/// d R(q) / d q_c for a unit quaternion `(w, x, y, z)`, `c` in 0..4.
fn quat_matrix_partials(q: &[f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = *q;
    let m = |a: [f64; 9]| Mat3::from_row_slice(&a) * 2.0;
    [
        m([0.0, -z, y, z, 0.0, -x, -y, x, 0.0]),
        m([0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x]),
        m([-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y]),
        m([-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0]),
    ]
}

/// Gram–Schmidt rotation from two raw columns.
fn gram_schmidt(a1: &Vec3, a2: &Vec3) -> Mat3 {
    let b1 = a1.normalize();
    let u2 = a2 - b1 * b1.dot(a2);
    let b2 = u2.normalize();
    Mat3::from_columns(&[b1, b2, b1.cross(&b2)])
}

/// Pulls dL/dR back onto the raw 6D columns.
fn gram_schmidt_backward(a1: &Vec3, a2: &Vec3, g: &Mat3) -> (Vec3, Vec3) {
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(a2);
    let n2 = u2.norm();
    let b2 = u2 / n2;
    let g3: Vec3 = g.column(2).into();
    let mut gb1: Vec3 = Vec3::from(g.column(0)) + b2.cross(&g3);
    let gb2: Vec3 = Vec3::from(g.column(1)) + g3.cross(&b1);
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * b1.dot(a2) + a2 * b1.dot(&gu2);
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    (ga1, ga2)
}

/// One pose-regression problem: move `clusters` (local frames) from
/// `inputs` toward `target`.
pub struct StepProblem<'a> {
    pub clusters: &'a ClusterSet,
    pub inputs: &'a [Pose],
    pub target: &'a [Vec3],
    pub target_index: &'a SpatialIndex,
    pub norm: Normalization,
    pub repr: RotationRepr,
}

/// Evaluated state for one set of residuals.
pub struct Evaluation {
    pub loss: f64,
    pub poses: Vec<Pose>,
    /// dL / d residual, shape `(S, pose_dim)`.
    pub grad: Array2<f64>,
    pub correspondences: Correspondences,
}

impl StepProblem<'_> {
    pub fn pose_dim(&self) -> usize {
        3 + self.repr.dim()
    }

    /// Raw input rows: normalized position followed by rotation parameters.
    pub fn input_rows(&self) -> Array2<f64> {
        let d = self.pose_dim();
        let mut rows = Array2::zeros((self.inputs.len(), d));
        for (i, p) in self.inputs.iter().enumerate() {
            let x = (p.position - self.norm.center) / self.norm.diagonal;
            for k in 0..3 {
                rows[[i, k]] = x[k];
            }
            match self.repr {
                RotationRepr::Quaternion => {
                    for (k, v) in p.orientation.to_array().iter().enumerate() {
                        rows[[i, 3 + k]] = *v;
                    }
                }
                RotationRepr::Rot6d => {
                    let r = p.orientation.to_matrix();
                    for k in 0..3 {
                        rows[[i, 3 + k]] = r[(k, 0)];
                        rows[[i, 6 + k]] = r[(k, 1)];
                    }
                }
            }
        }
        rows
    }

    /// Loss and gradient for `inputs + residual`.
    pub fn evaluate(&self, inputs: &Array2<f64>, residual: &Array2<f64>, matching: Matching<'_>) -> Evaluation {
        let s = self.inputs.len();
        let raw = inputs + residual;
        let mut frames = Vec::with_capacity(s);
        for i in 0..s {
            let row = raw.row(i);
            let x = self.norm.center + Vec3::new(row[0], row[1], row[2]) * self.norm.diagonal;
            let r = match self.repr {
                RotationRepr::Quaternion => {
                    let n = (row[3] * row[3] + row[4] * row[4] + row[5] * row[5] + row[6] * row[6]).sqrt();
                    crate::geometry::quat_components_to_matrix(row[3] / n, row[4] / n, row[5] / n, row[6] / n)
                }
                RotationRepr::Rot6d => gram_schmidt(&Vec3::new(row[3], row[4], row[5]), &Vec3::new(row[6], row[7], row[8])),
            };
            frames.push((r, x));
        }
        let pred: Vec<Vec3> = self
            .clusters
            .points
            .iter()
            .zip(&self.clusters.cluster)
            .map(|(l, &c)| frames[c].0 * l + frames[c].1)
            .collect();
        let (loss, point_grad, correspondences) = chamfer_loss_grad(&pred, self.target, self.target_index, matching);

        let mut gx = vec![Vec3::zeros(); s];
        let mut gr = vec![Mat3::zeros(); s];
        for ((g, l), &c) in point_grad.iter().zip(&self.clusters.points).zip(&self.clusters.cluster) {
            gx[c] += g;
            gr[c] += g * l.transpose();
        }

        let mut grad = Array2::zeros((s, self.pose_dim()));
        let mut poses = Vec::with_capacity(s);
        for i in 0..s {
            let row = raw.row(i);
            let dx = gx[i] * self.norm.diagonal;
            for k in 0..3 {
                grad[[i, k]] = dx[k];
            }
            match self.repr {
                RotationRepr::Quaternion => {
                    let u = [row[3], row[4], row[5], row[6]];
                    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let q = [u[0] / n, u[1] / n, u[2] / n, u[3] / n];
                    let partials = quat_matrix_partials(&q);
                    let dq: Vec<f64> = partials.iter().map(|p| p.component_mul(&gr[i]).sum()).collect();
                    let proj: f64 = dq.iter().zip(&q).map(|(a, b)| a * b).sum();
                    for k in 0..4 {
                        grad[[i, 3 + k]] = (dq[k] - q[k] * proj) / n;
                    }
                    poses.push(Pose::new(frames[i].1, Quat::new(q[0], q[1], q[2], q[3])));
                }
                RotationRepr::Rot6d => {
                    let a1 = Vec3::new(row[3], row[4], row[5]);
                    let a2 = Vec3::new(row[6], row[7], row[8]);
                    let (g1, g2) = gram_schmidt_backward(&a1, &a2, &gr[i]);
                    for k in 0..3 {
                        grad[[i, 3 + k]] = g1[k];
                        grad[[i, 6 + k]] = g2[k];
                    }
                    poses.push(Pose::new(frames[i].1, Quat::from_matrix(&frames[i].0)));
                }
            }
        }
        Evaluation {
            loss,
            poses,
            grad,
            correspondences,
        }
    }
}

/// Outcome of one optimization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    /// Poses at the best observed loss.
    pub poses: Vec<Pose>,
    pub best_loss: f64,
    pub losses: Vec<f64>,
}

/// Minimizes the Chamfer loss of `problem` with Adam at rate `lr`.
pub fn optimize(problem: &StepProblem<'_>, cfg: &RegressorConfig, lr: f64, rng: &mut ChaCha8Rng) -> Result<StageResult> {
    let inputs = problem.input_rows();
    let s = problem.inputs.len();
    let dim = problem.pose_dim();
    let mut net = match cfg.mode {
        OptimizerMode::Network => Some(Regressor::new(
            NetworkShape {
                repr: problem.repr,
                ..cfg.network_shape()
            },
            rng,
        )),
        OptimizerMode::Direct => None,
    };
    let mut direct = vec![0.0; s * dim];
    let n_params = net.as_ref().map_or(direct.len(), |n| n.params().len());
    let lr = if net.is_some() { lr } else { cfg.lr_direct };
    let mut adam = Adam::new(n_params, lr);

    let mut losses = Vec::new();
    let mut best: Option<(f64, Vec<Pose>)> = None;
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    let mut initial = None;
    let mut hint: Option<Correspondences> = None;
    for _ in 0..cfg.max_iters {
        let (residual, cache) = match &net {
            Some(n) => {
                let (r, c) = n.forward(&inputs);
                (r, Some(c))
            }
            None => (Array2::from_shape_vec((s, dim), direct.clone()).expect("direct shape"), None),
        };
        let eval = problem.evaluate(&inputs, &residual, Matching::Search(hint.as_ref()));
        if !eval.loss.is_finite() {
            return Err(Error::DivergedOptimization {
                loss: eval.loss,
                initial: initial.unwrap_or(f64::NAN),
            });
        }
        let start = *initial.get_or_insert(eval.loss);
        if eval.loss > DIVERGENCE_FACTOR * start.max(DIVERGENCE_FLOOR * problem.norm.diagonal) {
            return Err(Error::DivergedOptimization {
                loss: eval.loss,
                initial: start,
            });
        }
        losses.push(eval.loss);
        if best.as_ref().map_or(true, |(b, _)| eval.loss < *b) {
            best = Some((eval.loss, eval.poses.clone()));
        }
        if eval.loss < reference * (1.0 - MIN_RELATIVE_IMPROVEMENT) {
            reference = eval.loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        if eval.loss == 0.0 {
            break;
        }
        hint = Some(eval.correspondences);
        match (&mut net, cache) {
            (Some(n), Some(cache)) => {
                let grad = n.backward(&cache, &eval.grad);
                adam.step(n.params_mut(), &grad);
            }
            _ => {
                let grad: Vec<f64> = eval.grad.iter().copied().collect();
                adam.step(&mut direct, &grad);
            }
        }
    }
    let (best_loss, poses) = best.expect("at least one iteration");
    Ok(StageResult {
        poses,
        best_loss,
        losses,
    })
}

/// Per-cluster poses over a sequence plus the clusters they carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrack {
    /// `[frame][cluster]` world poses.
    pub poses: Vec<Vec<Pose>>,
    /// First-frame clusters in their local frames.
    pub local: ClusterSet,
    /// Per-frame point memberships.
    pub memberships: Vec<ClusterAssignment>,
    pub step_losses: Vec<Vec<f64>>,
    pub anchor_losses: Vec<Vec<f64>>,
    /// Per-point averaged Chamfer of the first-frame clusters at every frame.
    pub frame_chamfer: Vec<f64>,
}

impl ClusterTrack {
    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.local.count
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn stage_rng(seed: u64, frame: usize, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 * 2 + stage);
    rng
}

/// Initial cluster poses: member centroid with identity orientation.
pub fn initial_poses(points: &[Vec3], assignment: &ClusterAssignment) -> Vec<Pose> {
    let mut sums = vec![Vec3::zeros(); assignment.num_clusters()];
    let mut counts = vec![0usize; assignment.num_clusters()];
    for (p, &l) in points.iter().zip(&assignment.labels) {
        sums[l] += p;
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .zip(&assignment.centers)
        .map(|((s, &n), c)| Pose::from_translation(if n > 0 { s / n as f64 } else { *c }))
        .collect()
}

/// Tracks `s` k-means++ clusters of the first frame through the sequence.
pub fn register_sequence(seq: &FrameSequence, s: usize, cfg: &RegressorConfig, seed: u64) -> Result<ClusterTrack> {
    let assignment = kmeans_pp(&seq.frames[0], s, seed)?;
    register_with_assignment(seq, assignment, cfg, seed)
}

/// Registers a sequence whose first frame is clustered around given
/// centers, so several sequences share one cluster set.
pub fn register_with_centers(seq: &FrameSequence, centers: &[Vec3], cfg: &RegressorConfig, seed: u64) -> Result<ClusterTrack> {
    if seq.frames[0].len() < centers.len() {
        return Err(Error::TooFewPoints {
            points: seq.frames[0].len(),
            clusters: centers.len(),
        });
    }
    let assignment = kmeans_fixed_centers(&seq.frames[0], centers);
    register_with_assignment(seq, assignment, cfg, seed)
}

pub fn register_with_assignment(
    seq: &FrameSequence,
    assignment: ClusterAssignment,
    cfg: &RegressorConfig,
    seed: u64,
) -> Result<ClusterTrack> {
    cfg.validate()?;
    if seq.frames.len() < 2 {
        return Err(Error::EmptySequence(seq.frames.len()));
    }
    let first = &seq.frames[0];
    let norm = Normalization::from_cloud(first)?;
    let poses0 = initial_poses(&first.points, &assignment);
    let anchor_set = ClusterSet::from_world(&first.points, &assignment.labels, &poses0);
    let mut current = anchor_set.clone();
    let mut track = ClusterTrack {
        poses: vec![poses0],
        local: anchor_set,
        memberships: vec![assignment],
        step_losses: Vec::new(),
        anchor_losses: Vec::new(),
        frame_chamfer: vec![0.0],
    };

    for t in 1..seq.frames.len() {
        let target = &seq.frames[t].points;
        let target_index = SpatialIndex::new(target);
        let previous = track.poses[t - 1].clone();
        let step = optimize(
            &StepProblem {
                clusters: &current,
                inputs: &previous,
                target,
                target_index: &target_index,
                norm,
                repr: cfg.rotation_repr,
            },
            cfg,
            cfg.lr_step,
            &mut stage_rng(seed, t, 0),
        )
        .map_err(|e| e.in_stage("step model"))?;
        track.step_losses.push(step.losses);

        let mut poses = step.poses;
        let anchor_problem = |inputs: &[Pose]| -> Result<StageResult> {
            optimize(
                &StepProblem {
                    clusters: &track.local,
                    inputs,
                    target,
                    target_index: &target_index,
                    norm,
                    repr: cfg.rotation_repr,
                },
                cfg,
                cfg.lr_anchor,
                &mut stage_rng(seed, t, 1),
            )
        };
        let chamfer = if cfg.use_anchor {
            let anchor = anchor_problem(&poses).map_err(|e| e.in_stage("anchor model"))?;
            poses = anchor.poses;
            let best = anchor.best_loss;
            track.anchor_losses.push(anchor.losses);
            best
        } else {
            let predicted = track.local.transformed(&poses);
            let (loss, _, _) = chamfer_loss_grad(&predicted, target, &target_index, Matching::Search(None));
            loss
        };
        if chamfer > FAILURE_FRACTION * norm.diagonal {
            return Err(Error::RegistrationFailed {
                frame: t,
                chamfer,
                limit: FAILURE_FRACTION * norm.diagonal,
            });
        }
        let centers: Vec<Vec3> = poses.iter().map(|p| p.position).collect();
        let membership = kmeans_fixed_centers(&seq.frames[t], &centers);
        current = ClusterSet::from_world(target, &membership.labels, &poses);
        log::debug!("frame {t}: chamfer {chamfer:.6}");
        track.frame_chamfer.push(chamfer);
        track.memberships.push(membership);
        track.poses.push(poses);
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_geodesic, Transform3D};
    use rand::Rng;

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let q = Quat::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        q.to_matrix()
    }

    #[test]
    fn quaternion_partials_match_finite_differences() {
        let q = [0.3, -0.5, 0.7, 0.4];
        let partials = quat_matrix_partials(&q);
        let h = 1e-6;
        for c in 0..4 {
            let mut a = q;
            let mut b = q;
            a[c] += h;
            b[c] -= h;
            // Unnormalized formula, so central differences are exact up to O(h^2).
            let ra = crate::geometry::quat_components_to_matrix(a[0], a[1], a[2], a[3]);
            let rb = crate::geometry::quat_components_to_matrix(b[0], b[1], b[2], b[3]);
            let fd = (ra - rb) / (2.0 * h);
            assert!((fd - partials[c]).norm() < 1e-8, "component {c}");
        }
    }

    #[test]
    fn gram_schmidt_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a1 = Vec3::new(1.2, 0.3, -0.4);
        let a2 = Vec3::new(0.2, 0.9, 0.5);
        let w = random_rotation(&mut rng) * 2.0;
        let f = |a1: &Vec3, a2: &Vec3| gram_schmidt(a1, a2).component_mul(&w).sum();
        let (g1, g2) = gram_schmidt_backward(&a1, &a2, &w);
        let h = 1e-6;
        for k in 0..3 {
            let e = Vec3::ith(k, h);
            let fd1 = (f(&(a1 + e), &a2) - f(&(a1 - e), &a2)) / (2.0 * h);
            let fd2 = (f(&a1, &(a2 + e)) - f(&a1, &(a2 - e))) / (2.0 * h);
            assert!((fd1 - g1[k]).abs() < 1e-7 && (fd2 - g2[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(2.0), 1.0);
    }

    #[test]
    fn cluster_set_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let poses: Vec<Pose> = (0..3)
            .map(|_| Transform3D::new(random_rotation(&mut rng), Vec3::new(rng.gen(), rng.gen(), rng.gen())).to_pose())
            .collect();
        let set = ClusterSet::from_world(&pts, &labels, &poses);
        for (a, b) in set.transformed(&poses).iter().zip(&pts) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(set.members(1).len(), 10);
    }

    #[test]
    fn config_validation() {
        assert!(RegressorConfig::default().validate().is_ok());
        let bad = RegressorConfig {
            lr_step: 0.0,
            ..RegressorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegressorConfig {
            patience: 0,
            ..RegressorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stationary_target_keeps_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..400).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let cloud = PointCloud::new(pts.clone());
        let assignment = kmeans_pp(&cloud, 4, 1).unwrap();
        let poses = initial_poses(&pts, &assignment);
        let set = ClusterSet::from_world(&pts, &assignment.labels, &poses);
        let index = SpatialIndex::new(&pts);
        let norm = Normalization::from_cloud(&cloud).unwrap();
        let cfg = RegressorConfig {
            hidden_width: 32,
            max_iters: 50,
            ..RegressorConfig::default()
        };
        for repr in [RotationRepr::Quaternion, RotationRepr::Rot6d] {
            let problem = StepProblem {
                clusters: &set,
                inputs: &poses,
                target: &pts,
                target_index: &index,
                norm,
                repr,
            };
            let result = optimize(&problem, &cfg, cfg.lr_step, &mut rng).unwrap();
            assert!(result.best_loss <= result.losses[0]);
            for (a, b) in result.poses.iter().zip(&poses) {
                assert!((a.position - b.position).norm() < 1e-3 * norm.diagonal);
                assert!(quat_geodesic(&a.orientation, &b.orientation) < 1e-6);
            }
        }
    }
}
