//! Link poses, child-in-parent transforms and revolute joint estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle_from_rotation, Mat3, Pose, Quat, Transform3D, Vec3};
use crate::registration::ClusterTrack;
use crate::segmentation::PartLabeling;
use crate::topology::KinematicTree;

/// Joints whose largest observed rotation stays below this are not identifiable.
pub const MIN_JOINT_MOTION: f64 = 0.02;
/// Margin added on both sides of the observed angle range.
pub const LIMIT_MARGIN: f64 = 0.087;

/// `[link][frame]` world poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPoseTrack {
    pub poses: Vec<Vec<Pose>>,
}

/// Sign-aligned chordal mean of unit quaternions.
pub fn mean_quaternion(qs: &[Quat]) -> Quat {
    let first = qs[0];
    let mut sum = [0.0; 4];
    for q in qs {
        let q = if q.dot(&first) < 0.0 { q.negated() } else { *q };
        for (s, v) in sum.iter_mut().zip(q.to_array()) {
            *s += v;
        }
    }
    Quat::new(sum[0], sum[1], sum[2], sum[3])
}

/// Mean member position and mean member orientation per link and frame.
pub fn link_poses(track: &ClusterTrack, labels: &PartLabeling) -> LinkPoseTrack {
    let poses = (0..labels.count)
        .map(|link| {
            let members = labels.members(link);
            track
                .poses
                .iter()
                .map(|frame| {
                    let position = members.iter().map(|&i| frame[i].position).sum::<Vec3>() / members.len() as f64;
                    let qs: Vec<Quat> = members.iter().map(|&i| frame[i].orientation).collect();
                    Pose::new(position, mean_quaternion(&qs))
                })
                .collect()
        })
        .collect();
    LinkPoseTrack { poses }
}

/// Child pose in the parent frame, per frame: `inverse(H_p) * H_c`.
pub fn relative_transforms(lp: &LinkPoseTrack, parent: usize, child: usize) -> Vec<Transform3D> {
    lp.poses[parent]
        .iter()
        .zip(&lp.poses[child])
        .map(|(p, c)| p.to_transform().inverse().compose(&c.to_transform()))
        .collect()
}

/// Joint parameters in the parent link frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointEstimate {
    pub axis: Vec3,
    pub origin: Vec3,
    /// Per-sequence, per-frame angles.
    pub angles: Vec<Vec<f64>>,
    pub limits: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevoluteJoint {
    pub parent: usize,
    pub child: usize,
    pub axis: Vec3,
    pub origin: Vec3,
    pub angles: Vec<Vec<f64>>,
    pub limits: (f64, f64),
}

fn perpendicular_basis(a: &Vec3) -> (Vec3, Vec3) {
    let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = a.cross(&helper).normalize();
    (u, a.cross(&u))
}

/// Signed rotation angle of `r` about unit axis `a`.
pub fn signed_angle_about(r: &Mat3, a: &Vec3) -> f64 {
    let q = Quat::from_matrix(r);
    let mut angle = 2.0 * q.vector().dot(a).atan2(q.w);
    if angle > std::f64::consts::PI {
        angle -= 2.0 * std::f64::consts::PI;
    } else if angle <= -std::f64::consts::PI {
        angle += 2.0 * std::f64::consts::PI;
    }
    angle
}

pub fn estimate_joint(rel: &[Transform3D]) -> Result<JointEstimate> {
    estimate_joint_multi(&[rel.to_vec()])
}

/// Pools the `(first, t)` frame pairs of several sequences sharing one rest
/// configuration.
pub fn estimate_joint_multi(rels: &[Vec<Transform3D>]) -> Result<JointEstimate> {
    if rels.is_empty() || rels.iter().any(|r| r.len() < 2) {
        return Err(Error::InvalidArgument("joint estimation needs at least two frames".into()));
    }
    struct Pair {
        dr: Mat3,
        rhs: Vec3,
    }
    let mut pairs = Vec::new();
    let mut reference: Option<Vec3> = None;
    let mut axis_sum = Vec3::zeros();
    let mut max_angle: f64 = 0.0;
    for seq in rels {
        let r1 = seq[0].rotation;
        let t1 = seq[0].translation;
        for h in &seq[1..] {
            let dr = h.rotation * r1.transpose();
            let aa = axis_angle_from_rotation(&dr);
            max_angle = max_angle.max(aa.angle);
            if aa.near_zero {
                continue;
            }
            let axis = match reference {
                None => {
                    reference = Some(aa.axis);
                    aa.axis
                }
                Some(r) if aa.axis.dot(&r) < 0.0 => -aa.axis,
                Some(_) => aa.axis,
            };
            axis_sum += axis * aa.angle;
            pairs.push(Pair {
                dr,
                rhs: h.translation - dr * t1,
            });
        }
    }
    if max_angle < MIN_JOINT_MOTION || axis_sum.norm() == 0.0 {
        return Err(Error::InsufficientMotion {
            parent: usize::MAX,
            child: usize::MAX,
        });
    }
    let axis = axis_sum.normalize();

    // Solve (I - dR) c = rhs in the plane through the child's rest position
    // perpendicular to the axis; the component along the axis is unobservable.
    let anchor = rels[0][0].translation;
    let (u, v) = perpendicular_basis(&axis);
    let basis = nalgebra::Matrix3x2::from_columns(&[u, v]);
    let mut lhs = nalgebra::Matrix2::zeros();
    let mut b = nalgebra::Vector2::zeros();
    for p in &pairs {
        let m = Mat3::identity() - p.dr;
        let mb = m * basis;
        lhs += mb.transpose() * mb;
        b += mb.transpose() * (p.rhs - m * anchor);
    }
    let y = lhs
        .try_inverse()
        .map(|inv| inv * b)
        .unwrap_or_else(|| lhs.pseudo_inverse(1e-12).map(|p| p * b).unwrap_or_default());
    let origin = anchor + basis * y;

    let angles: Vec<Vec<f64>> = rels
        .iter()
        .map(|seq| {
            let r1t = seq[0].rotation.transpose();
            seq.iter().map(|h| signed_angle_about(&(h.rotation * r1t), &axis)).collect()
        })
        .collect();
    let (lo, hi) = angles
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    Ok(JointEstimate {
        axis,
        origin,
        angles,
        limits: (lo - LIMIT_MARGIN, hi + LIMIT_MARGIN),
    })
}

/// One joint per tree edge, pooling every sequence's link poses.
pub fn estimate_joints(tree: &KinematicTree, link_tracks: &[LinkPoseTrack]) -> Result<Vec<RevoluteJoint>> {
    tree.edges
        .iter()
        .map(|&(parent, child)| {
            let rels: Vec<Vec<Transform3D>> = link_tracks
                .iter()
                .map(|lp| relative_transforms(lp, parent, child))
                .collect();
            let est = estimate_joint_multi(&rels).map_err(|e| match e {
                Error::InsufficientMotion { .. } => Error::InsufficientMotion { parent, child },
                other => other,
            })?;
            Ok(RevoluteJoint {
                parent,
                child,
                axis: est.axis,
                origin: est.origin,
                angles: est.angles,
                limits: est.limits,
            })
        })
        .collect()
}

/// Convenience wrapper for a single track.
pub fn estimate_joints_single(track: &ClusterTrack, labels: &PartLabeling, tree: &KinematicTree) -> Result<Vec<RevoluteJoint>> {
    estimate_joints(tree, &[link_poses(track, labels)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_geodesic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hinge(axis: Vec3, point: Vec3, angles: &[f64], rest: Transform3D) -> Vec<Transform3D> {
        angles
            .iter()
            .map(|&a| Transform3D::about_axis(&axis, &point, a).compose(&rest))
            .collect()
    }

    #[test]
    fn mean_quaternion_cases() {
        let q = Quat::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0).normalize(), 0.7);
        assert!(quat_geodesic(&mean_quaternion(&[q]), &q) < 1e-12);
        assert!(quat_geodesic(&mean_quaternion(&[q, q]), &q) < 1e-12);
        let m = mean_quaternion(&[q, q.negated()]);
        assert!(quat_geodesic(&m, &q) < 1e-12);
        assert!(m.dot(&q) > 0.0);
    }

    #[test]
    fn hinge_oracle() {
        let angles: Vec<f64> = (0..10).map(|k| (k as f64 / 9.0) * 30f64.to_radians()).collect();
        let rest = Transform3D::from_translation(Vec3::new(0.3, 0.05, 0.1));
        let rel = hinge(Vec3::z(), Vec3::new(0.1, 0.0, 0.0), &angles, rest);
        let est = estimate_joint(&rel).unwrap();
        assert!(est.axis.dot(&Vec3::z()).abs().acos() < 0.5f64.to_radians());
        let off = est.origin - Vec3::new(0.1, 0.0, 0.0);
        assert!((off.x * off.x + off.y * off.y).sqrt() < 1e-3);
        // Closest point to the child's rest position along the axis.
        assert!((est.origin.z - 0.1).abs() < 1e-9);
        let sign = est.axis.z.signum();
        for (a, b) in est.angles[0].iter().zip(&angles) {
            assert!((a - sign * b).abs() < 1e-9);
        }
        assert!(est.limits.0 <= -LIMIT_MARGIN + 1e-12 || est.limits.1 >= 30f64.to_radians() + LIMIT_MARGIN - 1e-9);
    }

    #[test]
    fn identity_motion_is_insufficient() {
        let rel = vec![Transform3D::IDENTITY; 5];
        assert!(matches!(estimate_joint(&rel), Err(Error::InsufficientMotion { .. })));
    }

    #[test]
    fn reconstruction_reproduces_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let point = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let rest = Transform3D::new(
                Quat::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()).to_matrix(),
                Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let dir = if rng.gen() { 1.0 } else { -1.0 };
            let angles: Vec<f64> = (0..8).map(|k| 0.15 * k as f64 * dir).collect();
            let rel = hinge(axis, point, &angles, rest);
            let est = estimate_joint(&rel).unwrap();
            assert!((est.axis.norm() - 1.0).abs() < 1e-9);
            for (t, h) in rel.iter().enumerate() {
                let rebuilt = Transform3D::about_axis(&est.axis, &est.origin, est.angles[0][t]).compose(&rel[0]);
                assert!((rebuilt.translation - h.translation).norm() < 1e-6);
                assert!(quat_geodesic(&rebuilt.to_pose().orientation, &h.to_pose().orientation) < 1e-6);
                let dr = h.rotation * rel[0].rotation.transpose();
                let residual = (Mat3::identity() - dr) * est.origin - (h.translation - dr * rel[0].translation);
                assert!(residual.norm() < 1e-9);
            }
            let (lo, hi) = est.limits;
            assert!(est.angles[0].iter().all(|a| *a >= lo && *a <= hi));
            // Angles are continuous.
            for w in est.angles[0].windows(2) {
                assert!((w[1] - w[0]).abs() < 0.5);
            }
        }
    }

    #[test]
    fn axis_invariant_to_flipped_frame_axes() {
        // Alternating the direction of motion flips every other per-frame axis.
        let angles = [0.0, 0.2, -0.3, 0.4, -0.1];
        let rel = hinge(Vec3::y(), Vec3::new(0.0, 0.0, 0.2), &angles, Transform3D::IDENTITY);
        let est = estimate_joint(&rel).unwrap();
        assert!((est.axis.dot(&Vec3::y()).abs() - 1.0).abs() < 1e-12);
        let flipped = hinge(-Vec3::y(), Vec3::new(0.0, 0.0, 0.2), &angles, Transform3D::IDENTITY);
        let est2 = estimate_joint(&flipped).unwrap();
        assert!((est.axis.dot(&est2.axis).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relative_transform_cases() {
        let child = vec![
            Pose::new(Vec3::new(1.0, 2.0, 3.0), Quat::from_axis_angle(&Vec3::x(), 0.3)),
            Pose::new(Vec3::new(0.0, 2.0, 1.0), Quat::from_axis_angle(&Vec3::y(), 0.1)),
        ];
        let lp = LinkPoseTrack {
            poses: vec![vec![Pose::IDENTITY; 2], child.clone()],
        };
        let rel = relative_transforms(&lp, 0, 1);
        for (r, c) in rel.iter().zip(&child) {
            assert!((r.translation - c.position).norm() < 1e-15);
        }
        // Rigidly attached child: constant relative transform.
        let offset = Transform3D::new(Quat::from_axis_angle(&Vec3::z(), 0.4).to_matrix(), Vec3::new(0.1, 0.0, 0.0));
        let parents: Vec<Pose> = child.clone();
        let attached: Vec<Pose> = parents.iter().map(|p| p.to_transform().compose(&offset).to_pose()).collect();
        let lp = LinkPoseTrack {
            poses: vec![parents, attached],
        };
        let rel = relative_transforms(&lp, 0, 1);
        assert!((rel[0].rotation - rel[1].rotation).norm() < 1e-9);
        assert!((rel[0].translation - rel[1].translation).norm() < 1e-9);
    }
}
