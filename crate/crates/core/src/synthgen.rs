//! Ground-truth generator: random articulated trees built from primitive
//! links, random joint trajectories and surface-sampled point cloud frames.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, Transform3D, Vec3};
use crate::pointcloud::{FrameSequence, PointCloud};

/// Link geometry, centered on its own shape frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Box { size: [f64; 3] },
    /// Cylinder along the shape frame's z axis.
    Cylinder { radius: f64, length: f64 },
}

impl Shape {
    pub fn area(&self) -> f64 {
        match *self {
            Shape::Box { size: [a, b, c] } => 2.0 * (a * b + b * c + a * c),
            Shape::Cylinder { radius, length } => 2.0 * PI * radius * (radius + length),
        }
    }

    /// Uniform surface sample; returns `(point, outward normal)` in the shape frame.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> (Vec3, Vec3) {
        match *self {
            Shape::Box { size } => {
                let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
                let faces = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
                let total = 2.0 * (faces[0] + faces[1] + faces[2]);
                let mut u = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (a, area) in faces.iter().enumerate() {
                    if u < 2.0 * area {
                        axis = a;
                        break;
                    }
                    u -= 2.0 * area;
                }
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::new(
                    rng.gen_range(-h[0]..h[0]),
                    rng.gen_range(-h[1]..h[1]),
                    rng.gen_range(-h[2]..h[2]),
                );
                p[axis] = sign * h[axis];
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (p, n)
            }
            Shape::Cylinder { radius, length } => {
                let side = 2.0 * PI * radius * length;
                let cap = PI * radius * radius;
                let u = rng.gen::<f64>() * (side + 2.0 * cap);
                let theta = rng.gen_range(0.0..2.0 * PI);
                if u < side {
                    let z = rng.gen_range(-length / 2.0..length / 2.0);
                    let n = Vec3::new(theta.cos(), theta.sin(), 0.0);
                    (Vec3::new(radius * n.x, radius * n.y, z), n)
                } else {
                    let sign = if u < side + cap { 1.0 } else { -1.0 };
                    let r = radius * rng.gen::<f64>().sqrt();
                    (
                        Vec3::new(r * theta.cos(), r * theta.sin(), sign * length / 2.0),
                        Vec3::new(0.0, 0.0, sign),
                    )
                }
            }
        }
    }

    /// Unsigned distance from a shape-frame point to the surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Box { size } => {
                let h = Vec3::new(size[0] / 2.0, size[1] / 2.0, size[2] / 2.0);
                let q = p.abs() - h;
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Shape::Cylinder { radius, length } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - length / 2.0;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                let inside = dr.max(dz).min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    pub shape: Shape,
    /// Shape frame expressed in the link frame.
    pub shape_origin: Pose,
}

/// Revolute joint. The child link frame coincides with the joint frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    /// Joint frame at zero angle, in the parent link frame.
    pub origin: Pose,
    /// Unit rotation axis in the joint frame.
    pub axis: Vec3,
    pub lower: f64,
    pub upper: f64,
}

/// Tree-structured robot. Link 0 is the root and sits at the world origin;
/// every joint's parent precedes its child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
}

impl RobotSpec {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Parent link of each link (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parents = vec![None; self.links.len()];
        for j in &self.joints {
            parents[j.child] = Some(j.parent);
        }
        parents
    }

    /// World transform of every link frame for the given joint angles.
    pub fn link_transforms(&self, angles: &[f64]) -> Vec<Transform3D> {
        assert_eq!(angles.len(), self.joints.len(), "one angle per joint");
        let mut out = vec![Transform3D::IDENTITY; self.links.len()];
        let mut joint_of = vec![None; self.links.len()];
        for (k, j) in self.joints.iter().enumerate() {
            joint_of[j.child] = Some(k);
        }
        // Parents precede children, so one forward pass suffices.
        for link in 0..self.links.len() {
            if let Some(k) = joint_of[link] {
                let j = &self.joints[k];
                let motion = Transform3D::about_axis(&j.axis, &Vec3::zeros(), angles[k]);
                out[link] = out[j.parent].compose(&j.origin.to_transform()).compose(&motion);
            }
        }
        out
    }

    pub fn link_poses(&self, angles: &[f64]) -> Vec<Pose> {
        self.link_transforms(angles)
            .iter()
            .map(Transform3D::to_pose)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for (k, j) in self.joints.iter().enumerate() {
            if j.parent >= j.child || j.child >= self.links.len() {
                return Err(Error::InvalidArgument(format!(
                    "joint {k} must connect an earlier parent to a later child"
                )));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 || j.lower >= j.upper {
                return Err(Error::InvalidArgument(format!("joint {k} has a bad axis or limits")));
            }
        }
        let mut seen = vec![false; self.links.len()];
        for j in &self.joints {
            if std::mem::replace(&mut seen[j.child], true) {
                return Err(Error::InvalidArgument(format!("link {} has two parents", j.child)));
            }
        }
        if self.joints.len() + 1 != self.links.len() {
            return Err(Error::InvalidArgument("robot is not a single tree".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    Serial,
    Star,
    Mixed,
}

impl std::str::FromStr for Branching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Branching::Serial),
            "star" => Ok(Branching::Star),
            "mixed" => Ok(Branching::Mixed),
            other => Err(Error::Config(format!("unknown branching `{other}`"))),
        }
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Random unit vector within `max_angle` of `center`.
fn random_in_cone(rng: &mut impl Rng, center: &Vec3, max_angle: f64) -> Vec3 {
    loop {
        let v = random_unit(rng);
        if v.dot(center).clamp(-1.0, 1.0).acos() <= max_angle {
            return v;
        }
    }
}

/// Shape frame orientation that maps local z onto `dir`.
fn z_to(dir: &Vec3) -> Quat {
    let z = Vec3::z();
    let axis = z.cross(dir);
    let s = axis.norm();
    if s < 1e-12 {
        return if dir.z > 0.0 {
            Quat::IDENTITY
        } else {
            Quat::from_axis_angle(&Vec3::x(), PI)
        };
    }
    Quat::from_axis_angle(&(axis / s), s.atan2(z.dot(dir)))
}


/// Angle between two lines (sign-free), in `[0, pi/2]`.
fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).abs().clamp(0.0, 1.0).acos()
}

struct Limb {
    dir: Vec3,
    length: f64,
    thickness: f64,
    axis: Vec3,
    children: usize,
}

/// Random articulated robot with `dof` revolute joints.
///
/// Every link dimension lies in `[0.05, 0.3]` m; axes of consecutive joints
/// are at least 15° apart and every axis is at least 60° away from its own
/// link's long direction.
pub fn random_chain(dof: usize, branching: Branching, seed: u64) -> Result<RobotSpec> {
    if !(1..=18).contains(&dof) {
        return Err(Error::InvalidArgument(format!("dof must be in 1..=18, got {dof}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [
        rng.gen_range(0.15..0.3),
        rng.gen_range(0.15..0.3),
        rng.gen_range(0.05..0.1),
    ];
    let mut links = vec![LinkSpec {
        name: "base".into(),
        shape: Shape::Box { size: base },
        shape_origin: Pose::from_translation(Vec3::new(0.0, 0.0, base[2] / 2.0)),
    }];
    let mut limbs: Vec<Limb> = vec![Limb {
        dir: Vec3::z(),
        length: base[2],
        thickness: base[0].min(base[1]),
        axis: Vec3::z(),
        children: 0,
    }];
    let mut joints = Vec::with_capacity(dof);
    let star_phase = rng.gen_range(0.0..2.0 * PI);

    for i in 1..=dof {
        let parent = match branching {
            Branching::Serial => i - 1,
            Branching::Star => 0,
            Branching::Mixed => {
                if i == 1 {
                    0
                } else {
                    // Prefer recent links so branches grow some depth.
                    let lo = i.saturating_sub(3);
                    rng.gen_range(lo..i)
                }
            }
        };
        let slot = limbs[parent].children;
        limbs[parent].children += 1;

        let (attach, dir) = if parent == 0 {
            let top = Vec3::new(0.0, 0.0, base[2]);
            if branching == Branching::Serial || (slot == 0 && branching == Branching::Mixed) {
                (top, random_in_cone(&mut rng, &Vec3::z(), 0.35))
            } else {
                let count = if branching == Branching::Star { dof } else { 3 };
                let phi = star_phase + 2.0 * PI * slot as f64 / count as f64;
                let radial = Vec3::new(phi.cos(), phi.sin(), 0.0);
                let r = 0.35 * base[0].min(base[1]);
                let attach = top + Vec3::new(radial.x * r, radial.y * r, 0.0);
                let center = (radial * 0.8 + Vec3::z() * 0.6).normalize();
                (attach, random_in_cone(&mut rng, &center, 0.3))
            }
        } else {
            let p = &limbs[parent];
            if slot == 0 {
                (p.dir * p.length, random_in_cone(&mut rng, &p.dir, 1.0))
            } else {
                // Side branch from the middle of the parent.
                let side = random_unit(&mut rng);
                let side = (side - p.dir * side.dot(&p.dir)).normalize();
                let attach = p.dir * (p.length * rng.gen_range(0.45..0.7)) + side * (p.thickness / 2.0);
                (attach, random_in_cone(&mut rng, &(side * 0.9 + p.dir * 0.4).normalize(), 0.3))
            }
        };

        let length = rng.gen_range(0.12..0.3);
        let thickness = rng.gen_range(0.05..0.08);
        let parent_axis = limbs[parent].axis;
        let axis = loop {
            let a = random_unit(&mut rng);
            let ok_dir = line_angle(&a, &dir) >= PI / 3.0;
            let ok_parent = parent == 0 || line_angle(&a, &parent_axis) >= 15f64.to_radians();
            if ok_dir && ok_parent {
                break a;
            }
        };
        let shape = if rng.gen::<bool>() {
            Shape::Cylinder {
                radius: thickness / 2.0,
                length,
            }
        } else {
            Shape::Box {
                size: [thickness, thickness, length],
            }
        };
        links.push(LinkSpec {
            name: format!("link_{i}"),
            shape,
            shape_origin: Pose::new(dir * (length / 2.0), z_to(&dir)),
        });
        joints.push(JointSpec {
            name: format!("joint_{i}"),
            parent,
            child: i,
            origin: Pose::from_translation(attach),
            axis,
            lower: -rng.gen_range(0.8..1.6),
            upper: rng.gen_range(0.8..1.6),
        });
        limbs.push(Limb {
            dir,
            length,
            thickness,
            axis,
            children: 0,
        });
    }
    let spec = RobotSpec { links, joints };
    spec.validate()?;
    Ok(spec)
}

/// Default per-frame angle step cap (about 7°).
pub const DEFAULT_MAX_STEP: f64 = 0.12;

/// Per-frame joint angles `[frame][joint]`.
///
/// Each joint moves linearly from 0 toward a random target inside its
/// limits; the per-frame step is clipped to `max_step`. Targets are drawn
/// with magnitude at least 35% of the limit on their side so every joint
/// produces observable motion.
pub fn random_trajectory(spec: &RobotSpec, frames: usize, max_step: f64, seed: u64) -> Vec<Vec<f64>> {
    assert!(frames >= 2, "trajectory needs at least two frames");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: Vec<f64> = spec
        .joints
        .iter()
        .map(|j| {
            let limit = if rng.gen::<bool>() { j.upper } else { j.lower };
            let target = limit * rng.gen_range(0.35..1.0);
            let step = target / (frames - 1) as f64;
            step.clamp(-max_step, max_step)
        })
        .collect();
    (0..frames)
        .map(|f| {
            steps
                .iter()
                .zip(&spec.joints)
                .map(|(s, j)| (s * f as f64).clamp(j.lower, j.upper))
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-frame rigid translation jitter (m).
    pub global_sigma: f64,
    /// Per-point Gaussian noise (m).
    pub point_sigma: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        global_sigma: 0.0,
        point_sigma: 0.0,
    };
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            global_sigma: 0.002,
            point_sigma: 0.002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub points_per_frame: usize,
    pub noise: NoiseSpec,
    /// Keep only points facing at least one of `k` random view directions.
    pub occlusion: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            points_per_frame: 5000,
            noise: NoiseSpec::default(),
            occlusion: None,
        }
    }
}

/// Everything the generator knows about a rendered sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: RobotSpec,
    pub trajectory: Vec<Vec<f64>>,
    /// `[frame][link]` world poses of the link frames.
    pub link_poses: Vec<Vec<Pose>>,
    /// `[frame][point]` link label of every emitted point.
    pub labels: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Body-fixed surface samples: `(link, point, normal)` in link frames.
pub fn sample_body(spec: &RobotSpec, n: usize, rng: &mut impl Rng) -> Vec<(usize, Vec3, Vec3)> {
    let areas: Vec<f64> = spec.links.iter().map(|l| l.shape.area()).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.gen::<f64>() * total;
            let mut link = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if u < *a {
                    link = i;
                    break;
                }
                u -= a;
            }
            let l = &spec.links[link];
            let (p, nrm) = l.shape.sample_surface(rng);
            let t = l.shape_origin.to_transform();
            (link, t.apply(&p), t.rotation * nrm)
        })
        .collect()
}

/// Renders one point cloud per trajectory frame.
///
/// The same body-fixed surface samples are reused for every frame, so a
/// noiseless static trajectory yields identical frames.
pub fn render_sequence(
    spec: &RobotSpec,
    trajectory: &[Vec<f64>],
    options: &RenderOptions,
    seed: u64,
) -> Result<(FrameSequence, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = sample_body(spec, options.points_per_frame, &mut rng);
    let views: Vec<Vec3> = match options.occlusion {
        Some(k) => (0..k.max(1)).map(|_| random_unit(&mut rng)).collect(),
        None => Vec::new(),
    };
    let point_noise = Normal::new(0.0, options.noise.point_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let global_noise = Normal::new(0.0, options.noise.global_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut frames = Vec::with_capacity(trajectory.len());
    let mut link_poses = Vec::with_capacity(trajectory.len());
    let mut labels = Vec::with_capacity(trajectory.len());
    for angles in trajectory {
        let transforms = spec.link_transforms(angles);
        let jitter = if options.noise.global_sigma > 0.0 {
            Vec3::new(
                global_noise.sample(&mut rng),
                global_noise.sample(&mut rng),
                global_noise.sample(&mut rng),
            )
        } else {
            Vec3::zeros()
        };
        let mut pts = Vec::with_capacity(body.len());
        let mut lab = Vec::with_capacity(body.len());
        for (link, p, n) in &body {
            let t = &transforms[*link];
            if !views.is_empty() {
                let wn = t.rotation * n;
                if views.iter().all(|v| wn.dot(v) <= 0.0) {
                    continue;
                }
            }
            let mut w = t.apply(p) + jitter;
            if options.noise.point_sigma > 0.0 {
                w += Vec3::new(
                    point_noise.sample(&mut rng),
                    point_noise.sample(&mut rng),
                    point_noise.sample(&mut rng),
                );
            }
            pts.push(w);
            lab.push(*link);
        }
        frames.push(PointCloud::new(pts));
        labels.push(lab);
        link_poses.push(transforms.iter().map(Transform3D::to_pose).collect());
    }
    let seq = FrameSequence::new(frames, format!("synthetic-{seed}"))?;
    let gt = GroundTruth {
        spec: spec.clone(),
        trajectory: trajectory.to_vec(),
        link_poses,
        labels,
    };
    Ok((seq, gt))
}
