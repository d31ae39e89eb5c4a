//! End-to-end reconstruction: registration, segmentation, topology, joints,
//! meshes and the URDF bundle, plus evaluation of a finished bundle.

mod config;

pub use config::{PipelineConfig, DEFAULT_CLUSTERS};

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clustering::kmeans_pp;
use crate::error::{Error, Result};
use crate::joints::{estimate_joints, link_poses, LinkPoseTrack, RevoluteJoint};
use crate::meshing::{accumulate_link_cloud, mesh_from_cloud, watertight_check};
use crate::metrics::{
    link_overlap, match_joints, metric_cd, metric_joint, metric_repose, tree_edit_distance, EvalReport,
};
use crate::pointcloud::{alpha_scale, bbox_diagonal, chamfer_l1, load_sequence, FrameSequence, PointCloud};
use crate::registration::{register_with_assignment, register_with_centers, ClusterTrack};
use crate::segmentation::{correlation_matrix, group_parts_robust, merge_correlations, CorrelationOptions, PartLabeling};
use crate::synthgen::GroundTruth;
use crate::topology::{
    build_mst_multi, build_segmentation_graph, infer_topology, link_spanning_tree, select_root, trajectory_weights,
    KinematicTree,
};
use crate::urdf::{build_urdf, emit_xml, load_meshes, mesh_path, read_urdf, spec_to_urdf};

/// First frames of different sequences must agree to this fraction of the
/// bounding-box diagonal.
pub const ALIGNMENT_TOLERANCE: f64 = 0.02;

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Register,
    Segment,
    Topology,
    Joints,
    Build,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Register => "register",
            Stage::Segment => "segment",
            Stage::Topology => "topology",
            Stage::Joints => "joints",
            Stage::Build => "build",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Register, Stage::Segment, Stage::Topology, Stage::Joints, Stage::Build]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub tracks: Vec<ClusterTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub alpha: f64,
    pub correlation: Vec<Vec<f64>>,
    /// `(k, mean silhouette)` for every candidate part count.
    pub silhouette: Vec<(usize, f64)>,
    pub parts: usize,
    /// Part of every cluster.
    pub part_of: Vec<usize>,
}

impl SegmentationReport {
    pub fn labeling(&self) -> PartLabeling {
        PartLabeling::new(self.part_of.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub root: usize,
    pub parents: Vec<Option<usize>>,
    /// Clusters of every link.
    pub links: Vec<Vec<usize>>,
    pub mst_edges: Vec<(usize, usize, f64)>,
    /// Set when the cluster graph revisited a link and the link-level
    /// spanning tree was used instead.
    pub fallback: bool,
}

impl TopologyReport {
    pub fn tree(&self) -> Result<KinematicTree> {
        KinematicTree::from_parents(&self.parents, self.links.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointsReport {
    pub joints: Vec<RevoluteJoint>,
}

/// Summary of a written bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub path: PathBuf,
    pub links: usize,
    pub joints: usize,
    /// Links whose mesh could not be extracted.
    pub missing_meshes: Vec<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Paths inside an output bundle.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub root: PathBuf,
}

impl Bundle {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Bundle { root: root.into() }
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.report_dir().join(file)
    }

    pub fn urdf(&self) -> PathBuf {
        self.root.join("model.urdf")
    }

    fn create(&self) -> Result<()> {
        for dir in [self.root.clone(), self.report_dir(), self.root.join("meshes")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Loads every sequence and checks that their first frames agree.
pub fn load_sequences(paths: &[PathBuf]) -> Result<Vec<FrameSequence>> {
    let seqs = paths
        .iter()
        .map(|p| load_sequence(p))
        .collect::<Result<Vec<_>>>()?;
    check_alignment(&seqs)?;
    Ok(seqs)
}

pub fn check_alignment(seqs: &[FrameSequence]) -> Result<()> {
    let Some(first) = seqs.first() else {
        return Err(Error::Config("no sequences".into()));
    };
    let diag = bbox_diagonal(&first.frames[0])?;
    for (k, s) in seqs.iter().enumerate().skip(1) {
        let cd = chamfer_l1(&first.frames[0], &s.frames[0])?;
        if cd > ALIGNMENT_TOLERANCE * diag {
            return Err(Error::Alignment(0, k, cd));
        }
    }
    Ok(())
}

/// Registers every sequence against one shared first-frame clustering.
pub fn register_all(seqs: &[FrameSequence], cfg: &PipelineConfig) -> Result<Vec<ClusterTrack>> {
    let assignment = kmeans_pp(&seqs[0].frames[0], cfg.clusters, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        seqs.par_iter()
            .enumerate()
            .map(|(k, seq)| {
                info!("registering sequence {k} ({} frames)", seq.len());
                let seed = cfg.seed.wrapping_add(k as u64);
                if k == 0 {
                    register_with_assignment(seq, assignment.clone(), &cfg.regressor, seed)
                } else {
                    register_with_centers(seq, &assignment.centers, &cfg.regressor, seed)
                }
            })
            .collect()
    })
}

pub fn segment(tracks: &[ClusterTrack], first_frame: &PointCloud, cfg: &PipelineConfig) -> Result<SegmentationReport> {
    let alpha = match cfg.alpha {
        Some(a) => a,
        None => alpha_scale(first_frame)?,
    };
    let opts = CorrelationOptions {
        alpha,
        no_pos: cfg.no_pos,
        no_ori: cfg.no_ori,
    };
    let mats = tracks
        .iter()
        .map(|t| correlation_matrix(t, &opts))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_correlations(&mats)?;
    let (labels, curve) = group_parts_robust(&merged, cfg.k_range())?;
    Ok(SegmentationReport {
        alpha,
        correlation: merged.rows(),
        silhouette: curve,
        parts: labels.count,
        part_of: labels.part_of,
    })
}

pub fn infer_tree(tracks: &[ClusterTrack], seg: &SegmentationReport) -> Result<TopologyReport> {
    let refs: Vec<&ClusterTrack> = tracks.iter().collect();
    let labels = seg.labeling();
    let mst = build_mst_multi(&refs);
    let root = select_root(&refs, &labels, seg.alpha);
    let (tree, fallback) = match infer_topology(&mst, &build_segmentation_graph(&labels), &labels, root) {
        Ok(tree) => (tree, false),
        Err(Error::CyclicConnectivity(link)) => {
            warn!("cluster graph reaches link {link} twice; using the link spanning tree");
            (link_spanning_tree(&trajectory_weights(&refs), &labels, root)?, true)
        }
        Err(e) => return Err(e),
    };
    Ok(TopologyReport {
        root,
        parents: tree.parents(),
        links: tree.links.iter().map(|l| l.clusters.clone()).collect(),
        mst_edges: mst.edges.clone(),
        fallback,
    })
}

/// Runs the pipeline from `from` onward, reusing earlier stage reports found
/// in the bundle.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, from: Stage) -> Result<BundleSummary> {
    run_stages(cfg, out, from, Stage::Build).map(|s| s.expect("build stage yields a summary"))
}

/// Runs stages `from..=until`. Earlier stages are read back from the bundle's
/// report directory. Only a run that reaches [`Stage::Build`] has a summary.
pub fn run_stages(cfg: &PipelineConfig, out: &Path, from: Stage, until: Stage) -> Result<Option<BundleSummary>> {
    cfg.validate()?;
    if until < from {
        return Err(Error::InvalidArgument(format!(
            "stage `{}` comes before `{}`",
            until.name(),
            from.name()
        )));
    }
    let bundle = Bundle::new(out);
    bundle.create()?;
    let seqs = load_sequences(&cfg.sequences).map_err(|e| e.in_stage("load"))?;
    write_json(&bundle.report("config.json"), cfg)?;

    let tracks = if from <= Stage::Register {
        let tracks = register_all(&seqs, cfg).map_err(|e| e.in_stage("register"))?;
        write_json(&bundle.report("track.json"), &TrackReport { tracks: tracks.clone() })?;
        tracks
    } else {
        read_json::<TrackReport>(&bundle.report("track.json"))?.tracks
    };
    if tracks.len() != seqs.len() {
        return Err(Error::ShapeMismatch(format!("{} tracks for {} sequences", tracks.len(), seqs.len())));
    }
    if until == Stage::Register {
        return Ok(None);
    }

    let seg = if from <= Stage::Segment {
        let seg = segment(&tracks, &seqs[0].frames[0], cfg).map_err(|e| e.in_stage("segment"))?;
        info!("selected {} parts", seg.parts);
        write_json(&bundle.report("segmentation_report.json"), &seg)?;
        seg
    } else {
        read_json(&bundle.report("segmentation_report.json"))?
    };
    if until == Stage::Segment {
        return Ok(None);
    }
    let labels = seg.labeling();

    let topo = if from <= Stage::Topology {
        let topo = infer_tree(&tracks, &seg).map_err(|e| e.in_stage("topology"))?;
        write_json(&bundle.report("topology.json"), &topo)?;
        topo
    } else {
        read_json(&bundle.report("topology.json"))?
    };
    if until == Stage::Topology {
        return Ok(None);
    }
    let tree = topo.tree()?;

    let lps: Vec<LinkPoseTrack> = tracks.iter().map(|t| link_poses(t, &labels)).collect();
    let joints = if from <= Stage::Joints {
        let joints = estimate_joints(&tree, &lps).map_err(|e| e.in_stage("joints"))?;
        write_json(&bundle.report("joints.json"), &JointsReport { joints: joints.clone() })?;
        joints
    } else {
        read_json::<JointsReport>(&bundle.report("joints.json"))?.joints
    };
    if until == Stage::Joints {
        return Ok(None);
    }

    let mut meshes = Vec::with_capacity(tree.links.len());
    let mut missing = Vec::new();
    for link in 0..tree.links.len() {
        let mut cloud = Vec::new();
        for ((seq, track), lp) in seqs.iter().zip(&tracks).zip(&lps) {
            cloud.extend(accumulate_link_cloud(seq, track, &labels, lp, link).points);
        }
        match mesh_from_cloud(&PointCloud::new(cloud), cfg.mesh_resolution) {
            Ok(mesh) => {
                let report = watertight_check(&mesh);
                if !report.closed {
                    warn!("mesh of link {link} is not closed");
                }
                mesh.write_obj(&bundle.root.join(mesh_path(link)))?;
                meshes.push(Some(mesh_path(link)));
            }
            Err(e) => {
                warn!("no mesh for link {link}: {e}");
                missing.push(link);
                meshes.push(None);
            }
        }
    }
    let rest: Vec<_> = lps[0].poses.iter().map(|p| p[0]).collect();
    let model = build_urdf(&tree, &joints, &rest, &meshes, &cfg.name).map_err(|e| e.in_stage("urdf"))?;
    let xml = emit_xml(&model);
    fs::write(bundle.urdf(), xml).map_err(|e| Error::io(bundle.urdf(), e))?;
    Ok(Some(BundleSummary {
        path: bundle.root.clone(),
        links: model.links.len(),
        joints: model.joints.len(),
        missing_meshes: missing,
    }))
}

pub const REPOSE_TRIALS: usize = 10;
pub const REPOSE_POINTS: usize = 5000;

/// Compares a bundle with the ground truth of its first sequence. Metrics
/// whose inputs are missing stay `None`.
pub fn evaluate_bundle(dir: &Path, truth: &GroundTruth, seed: u64) -> Result<EvalReport> {
    let bundle = Bundle::new(dir);
    let tracks = read_json::<TrackReport>(&bundle.report("track.json"))?.tracks;
    let track = tracks.first().ok_or(Error::EmptySequence(0))?;
    let seg: SegmentationReport = read_json(&bundle.report("segmentation_report.json"))?;
    let topo: TopologyReport = read_json(&bundle.report("topology.json"))?;
    let model = read_urdf(&bundle.urdf())?;
    let (truth_model, truth_meshes) = spec_to_urdf(&truth.spec, "truth");
    let mut report = EvalReport {
        truth_joints: truth.spec.joints.len(),
        ..Default::default()
    };

    let cfg: Option<PipelineConfig> = read_json(&bundle.report("config.json")).ok();
    if let Some(path) = cfg.as_ref().and_then(|c| c.sequences.first()) {
        match load_sequence(path).and_then(|seq| metric_cd(track, &seq)) {
            Ok(cd) => report.cd = Some(cd),
            Err(e) => warn!("registration chamfer unavailable: {e}"),
        }
    }
    report.ted = Some(tree_edit_distance(&topo.parents, &truth.spec.parents())? as f64);

    let pred_labels: Vec<usize> = track.memberships[0].labels.iter().map(|&c| seg.part_of[c]).collect();
    let overlap = link_overlap(&pred_labels, &truth.labels[0], seg.parts, truth.spec.links.len());
    let matching = match match_joints(&model, &truth_model, &overlap) {
        Ok(m) => m,
        Err(Error::NoCorrespondence) => return Ok(report),
        Err(e) => return Err(e),
    };
    report.matched_joints = matching.len();
    let (e_jd, e_ja) = metric_joint(&model, &truth_model, &matching)?;
    report.e_jd = Some(e_jd);
    report.e_ja = Some(e_ja);
    match load_meshes(&model, dir) {
        Ok(lib) if model.links.iter().all(|l| l.mesh.is_some()) => {
            report.cd_r = Some(metric_repose(
                &model,
                &lib,
                &truth_model,
                &truth_meshes,
                &matching,
                REPOSE_TRIALS,
                REPOSE_POINTS,
                seed,
            )?);
        }
        Ok(_) => warn!("repose skipped: some links have no mesh"),
        Err(e) => warn!("repose skipped: {e}"),
    }
    Ok(report)
}
