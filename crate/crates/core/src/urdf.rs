//! URDF model building, XML emission and parsing, forward kinematics and
//! surface sampling of posed link meshes.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Transform3D, Vec3};
use crate::joints::RevoluteJoint;
use crate::meshing::TriangleMesh;
use crate::pointcloud::PointCloud;
use crate::synthgen::{RobotSpec, Shape};
use crate::topology::KinematicTree;

pub const PLACEHOLDER_MASS: f64 = 1.0;
pub const PLACEHOLDER_INERTIA: f64 = 1e-3;
pub const JOINT_EFFORT: f64 = 100.0;
pub const JOINT_VELOCITY: f64 = 10.0;

/// `xyz` plus fixed-axis roll, pitch, yaw, as written in the file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

pub fn rpy_to_matrix(rpy: [f64; 3]) -> Mat3 {
    let [r, p, y] = rpy;
    let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), r);
    let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), p);
    let rz = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), y);
    (rz * ry * rx).into_inner()
}

pub fn matrix_to_rpy(m: &Mat3) -> [f64; 3] {
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if sp.abs() > 1.0 - 1e-12 {
        // Gimbal lock: fold yaw into roll.
        let roll = (-m[(1, 2)]).atan2(m[(1, 1)]);
        return [roll, pitch, 0.0];
    }
    [m[(2, 1)].atan2(m[(2, 2)]), pitch, m[(1, 0)].atan2(m[(0, 0)])]
}

impl Origin {
    pub fn from_transform(t: &Transform3D) -> Origin {
        Origin {
            xyz: [t.translation.x, t.translation.y, t.translation.z],
            rpy: matrix_to_rpy(&t.rotation),
        }
    }

    pub fn to_transform(&self) -> Transform3D {
        Transform3D::new(rpy_to_matrix(self.rpy), Vec3::from(self.xyz))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UrdfLink {
    pub name: String,
    /// Relative mesh path used for both visual and collision geometry.
    pub mesh: Option<String>,
    /// Mesh frame in the link frame.
    pub visual_origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UrdfJoint {
    pub name: String,
    pub parent: String,
    pub child: String,
    /// Joint frame in the parent link frame.
    pub origin: Origin,
    /// Unit axis in the joint frame.
    pub axis: [f64; 3],
    pub lower: f64,
    pub upper: f64,
    pub effort: f64,
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UrdfModel {
    pub name: String,
    pub links: Vec<UrdfLink>,
    pub joints: Vec<UrdfJoint>,
}

pub fn link_name(id: usize) -> String {
    format!("link_{id}")
}

pub fn joint_name(child: usize) -> String {
    format!("joint_{child}")
}

pub fn mesh_path(id: usize) -> String {
    format!("meshes/link_{id}.obj")
}

/// Numeric link id from a `link_<id>` name.
pub fn link_id(name: &str) -> Option<usize> {
    name.strip_prefix("link_")?.parse().ok()
}

/// Builds the model from estimated joints and rest-frame link poses.
///
/// The root link frame is the world frame. Every other link frame sits on its
/// joint origin with the child's rest orientation, so zero angles reproduce
/// the rest configuration.
pub fn build_urdf(
    tree: &KinematicTree,
    joints: &[RevoluteJoint],
    rest: &[Pose],
    meshes: &[Option<String>],
    name: &str,
) -> Result<UrdfModel> {
    let m = tree.links.len();
    if rest.len() != m || meshes.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{m} links but {} rest poses and {} meshes",
            rest.len(),
            meshes.len()
        )));
    }
    let mut by_child: HashMap<usize, &RevoluteJoint> = HashMap::new();
    for j in joints {
        if !tree.edges.contains(&(j.parent, j.child)) || by_child.insert(j.child, j).is_some() {
            return Err(Error::TreeJointMismatch(format!("joint {}->{} is not a tree edge", j.parent, j.child)));
        }
    }
    if by_child.len() != tree.edges.len() {
        return Err(Error::TreeJointMismatch(format!(
            "{} joints for {} tree edges",
            by_child.len(),
            tree.edges.len()
        )));
    }
    let frames = rest_frames(tree, &by_child, rest);
    let order = tree.preorder();
    let links = order
        .iter()
        .map(|&id| UrdfLink {
            name: link_name(id),
            mesh: meshes[id].clone(),
            visual_origin: Origin::from_transform(&frames[id].inverse().compose(&rest[id].to_transform())),
        })
        .collect();
    let joints = order
        .iter()
        .filter_map(|id| by_child.get(id))
        .map(|j| {
            let local = frames[j.parent].inverse().compose(&frames[j.child]);
            let world_axis = rest[j.parent].orientation.rotate(&j.axis);
            let axis = frames[j.child].rotation.transpose() * world_axis;
            UrdfJoint {
                name: joint_name(j.child),
                parent: link_name(j.parent),
                child: link_name(j.child),
                origin: Origin::from_transform(&local),
                axis: [axis.x, axis.y, axis.z],
                lower: j.limits.0,
                upper: j.limits.1,
                effort: JOINT_EFFORT,
                velocity: JOINT_VELOCITY,
            }
        })
        .collect();
    Ok(UrdfModel {
        name: name.to_string(),
        links,
        joints,
    })
}

/// World frame of every URDF link at rest, indexed by link id.
fn rest_frames(tree: &KinematicTree, by_child: &HashMap<usize, &RevoluteJoint>, rest: &[Pose]) -> Vec<Transform3D> {
    (0..tree.links.len())
        .map(|id| match by_child.get(&id) {
            None => Transform3D::IDENTITY,
            Some(j) => {
                let point = rest[j.parent].apply(&j.origin);
                Transform3D::new(rest[id].orientation.to_matrix(), point)
            }
        })
        .collect()
}

/// Shortest decimal with nine significant digits, like C's `%.9g`.
pub fn format_number(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x.is_infinite() { format!("{}inf", if x < 0.0 { "-" } else { "" }) } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..9).contains(&exp) {
        let m = trim_fraction(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    let fixed = format!("{x:.decimals$}");
    let out = trim_fraction(&fixed);
    if out == "-0" {
        "0".into()
    } else {
        out
    }
}

fn trim_fraction(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn triple(v: [f64; 3]) -> String {
    v.map(format_number).join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Links and joints in tree pre-order, children in joint-list order.
fn preorder(m: &UrdfModel) -> (Vec<usize>, Vec<usize>) {
    let index: HashMap<&str, usize> = m.links.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); m.links.len()];
    let mut is_child = vec![false; m.links.len()];
    for (ji, j) in m.joints.iter().enumerate() {
        if let (Some(&p), Some(&c)) = (index.get(j.parent.as_str()), index.get(j.child.as_str())) {
            children[p].push(ji);
            is_child[c] = true;
        }
    }
    let mut links = Vec::new();
    let mut joints = Vec::new();
    let mut stack: Vec<usize> = (0..m.links.len()).filter(|&i| !is_child[i]).rev().collect();
    while let Some(l) = stack.pop() {
        links.push(l);
        for &ji in children[l].iter().rev() {
            stack.push(index[m.joints[ji].child.as_str()]);
        }
        // Joints are listed in the order their child links are visited.
    }
    let position: HashMap<usize, usize> = links.iter().enumerate().map(|(k, &l)| (l, k)).collect();
    let mut joint_order: Vec<usize> = (0..m.joints.len()).collect();
    joint_order.sort_by_key(|&ji| index.get(m.joints[ji].child.as_str()).and_then(|c| position.get(c)).copied());
    joints.extend(joint_order);
    (links, joints)
}

pub fn emit_xml(m: &UrdfModel) -> String {
    let (link_order, joint_order) = preorder(m);
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n");
    writeln!(out, "<robot name=\"{}\">", escape(&m.name)).unwrap();
    for &li in &link_order {
        let l = &m.links[li];
        writeln!(out, "  <link name=\"{}\">", escape(&l.name)).unwrap();
        out.push_str("    <!-- placeholder inertial values, not physical -->\n");
        out.push_str("    <inertial>\n");
        out.push_str("      <origin xyz=\"0 0 0\" rpy=\"0 0 0\"/>\n");
        writeln!(out, "      <mass value=\"{}\"/>", format_number(PLACEHOLDER_MASS)).unwrap();
        let i = format_number(PLACEHOLDER_INERTIA);
        writeln!(out, "      <inertia ixx=\"{i}\" ixy=\"0\" ixz=\"0\" iyy=\"{i}\" iyz=\"0\" izz=\"{i}\"/>").unwrap();
        out.push_str("    </inertial>\n");
        if let Some(mesh) = &l.mesh {
            for tag in ["visual", "collision"] {
                writeln!(out, "    <{tag}>").unwrap();
                writeln!(
                    out,
                    "      <origin xyz=\"{}\" rpy=\"{}\"/>",
                    triple(l.visual_origin.xyz),
                    triple(l.visual_origin.rpy)
                )
                .unwrap();
                out.push_str("      <geometry>\n");
                writeln!(out, "        <mesh filename=\"{}\"/>", escape(mesh)).unwrap();
                out.push_str("      </geometry>\n");
                writeln!(out, "    </{tag}>").unwrap();
            }
        }
        out.push_str("  </link>\n");
    }
    for &ji in &joint_order {
        let j = &m.joints[ji];
        writeln!(out, "  <joint name=\"{}\" type=\"revolute\">", escape(&j.name)).unwrap();
        writeln!(out, "    <parent link=\"{}\"/>", escape(&j.parent)).unwrap();
        writeln!(out, "    <child link=\"{}\"/>", escape(&j.child)).unwrap();
        writeln!(out, "    <origin xyz=\"{}\" rpy=\"{}\"/>", triple(j.origin.xyz), triple(j.origin.rpy)).unwrap();
        writeln!(out, "    <axis xyz=\"{}\"/>", triple(j.axis)).unwrap();
        writeln!(
            out,
            "    <limit lower=\"{}\" upper=\"{}\" effort=\"{}\" velocity=\"{}\"/>",
            format_number(j.lower),
            format_number(j.upper),
            format_number(j.effort),
            format_number(j.velocity)
        )
        .unwrap();
        out.push_str("  </joint>\n");
    }
    out.push_str("</robot>\n");
    out
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn parse_triple(node: Option<roxmltree::Node>, attr: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    let Some(text) = node.and_then(|n| n.attribute(attr)) else {
        return Ok(default);
    };
    let values: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Urdf(format!("invalid {attr} \"{text}\"")))?;
    values
        .try_into()
        .map_err(|_| Error::Urdf(format!("{attr} needs three numbers, got \"{text}\"")))
}

fn parse_origin(node: Option<roxmltree::Node>) -> Result<Origin> {
    Ok(Origin {
        xyz: parse_triple(node, "xyz", [0.0; 3])?,
        rpy: parse_triple(node, "rpy", [0.0; 3])?,
    })
}

fn number(node: roxmltree::Node, attr: &str) -> Result<f64> {
    node.attribute(attr)
        .ok_or_else(|| Error::Urdf(format!("missing attribute {attr}")))?
        .parse()
        .map_err(|_| Error::Urdf(format!("invalid number in {attr}")))
}

pub fn parse_urdf(text: &str) -> Result<UrdfModel> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Urdf(e.to_string()))?;
    let robot = doc.root_element();
    if !robot.has_tag_name("robot") {
        return Err(Error::Urdf("root element is not <robot>".into()));
    }
    let mut model = UrdfModel {
        name: robot.attribute("name").unwrap_or_default().to_string(),
        links: Vec::new(),
        joints: Vec::new(),
    };
    for node in robot.children().filter(|n| n.is_element()) {
        let name = node
            .attribute("name")
            .ok_or_else(|| Error::Urdf(format!("<{}> without name", node.tag_name().name())))?
            .to_string();
        match node.tag_name().name() {
            "link" => {
                let visual = child(node, "visual");
                let mesh = visual
                    .and_then(|v| child(v, "geometry"))
                    .and_then(|g| child(g, "mesh"))
                    .and_then(|m| m.attribute("filename"))
                    .map(str::to_string);
                model.links.push(UrdfLink {
                    name,
                    mesh,
                    visual_origin: parse_origin(visual.and_then(|v| child(v, "origin")))?,
                });
            }
            "joint" => {
                let kind = node.attribute("type").unwrap_or_default();
                if kind != "revolute" {
                    return Err(Error::Urdf(format!("joint {name} has unsupported type \"{kind}\"")));
                }
                let link_of = |tag: &str| {
                    child(node, tag)
                        .and_then(|n| n.attribute("link"))
                        .map(str::to_string)
                        .ok_or_else(|| Error::Urdf(format!("joint {name} lacks <{tag}>")))
                };
                let limit = child(node, "limit").ok_or_else(|| Error::Urdf(format!("joint {name} lacks <limit>")))?;
                model.joints.push(UrdfJoint {
                    parent: link_of("parent")?,
                    child: link_of("child")?,
                    origin: parse_origin(child(node, "origin"))?,
                    axis: parse_triple(child(node, "axis"), "xyz", [1.0, 0.0, 0.0])?,
                    lower: number(limit, "lower")?,
                    upper: number(limit, "upper")?,
                    effort: number(limit, "effort")?,
                    velocity: number(limit, "velocity")?,
                    name,
                });
            }
            _ => {}
        }
    }
    validate(&model)?;
    Ok(model)
}

pub fn read_urdf(path: &Path) -> Result<UrdfModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_urdf(&text)
}

/// Unique names, known joint endpoints and a single root.
pub fn validate(m: &UrdfModel) -> Result<()> {
    let mut names = HashMap::new();
    for (i, l) in m.links.iter().enumerate() {
        if names.insert(l.name.as_str(), i).is_some() {
            return Err(Error::Urdf(format!("duplicate link {}", l.name)));
        }
    }
    let mut seen_joint = HashMap::new();
    let mut has_parent = vec![false; m.links.len()];
    for j in &m.joints {
        if seen_joint.insert(j.name.as_str(), ()).is_some() {
            return Err(Error::Urdf(format!("duplicate joint {}", j.name)));
        }
        for l in [&j.parent, &j.child] {
            if !names.contains_key(l.as_str()) {
                return Err(Error::Urdf(format!("joint {} references unknown link {l}", j.name)));
            }
        }
        let c = names[j.child.as_str()];
        if has_parent[c] {
            return Err(Error::Urdf(format!("link {} has two parents", j.child)));
        }
        has_parent[c] = true;
    }
    let roots = has_parent.iter().filter(|p| !**p).count();
    if roots != 1 || m.joints.len() + 1 != m.links.len() {
        return Err(Error::Urdf(format!("expected one root, found {roots}")));
    }
    if preorder(m).0.len() != m.links.len() {
        return Err(Error::Urdf("joints form a cycle".into()));
    }
    Ok(())
}

/// World transform of every link frame, in model link order. Joints missing
/// from `angles` stay at zero; angles outside the limits are clamped.
pub fn fk_transforms(m: &UrdfModel, angles: &BTreeMap<String, f64>) -> Result<Vec<Transform3D>> {
    for name in angles.keys() {
        if !m.joints.iter().any(|j| &j.name == name) {
            return Err(Error::UnknownJointName(name.clone()));
        }
    }
    let index: HashMap<&str, usize> = m.links.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let by_child: HashMap<usize, &UrdfJoint> = m.joints.iter().map(|j| (index[j.child.as_str()], j)).collect();
    let (order, _) = preorder(m);
    let mut out = vec![Transform3D::IDENTITY; m.links.len()];
    for l in order {
        if let Some(j) = by_child.get(&l) {
            let mut a = angles.get(&j.name).copied().unwrap_or(0.0);
            if a < j.lower || a > j.upper {
                log::warn!("joint {} angle {a} outside [{}, {}], clamped", j.name, j.lower, j.upper);
                a = a.clamp(j.lower, j.upper);
            }
            let axis = Vec3::from(j.axis).normalize();
            let motion = Transform3D::about_axis(&axis, &Vec3::zeros(), a);
            out[l] = out[index[j.parent.as_str()]]
                .compose(&j.origin.to_transform())
                .compose(&motion);
        }
    }
    Ok(out)
}

pub fn fk_pose(m: &UrdfModel, angles: &BTreeMap<String, f64>) -> Result<Vec<Pose>> {
    Ok(fk_transforms(m, angles)?.iter().map(Transform3D::to_pose).collect())
}

/// Meshes keyed by the path written in the model.
pub type MeshLibrary = HashMap<String, TriangleMesh>;

/// Loads every referenced mesh relative to `base`.
pub fn load_meshes(m: &UrdfModel, base: &Path) -> Result<MeshLibrary> {
    let mut lib = MeshLibrary::new();
    for l in &m.links {
        if let Some(path) = &l.mesh {
            let full = base.join(path);
            if !full.exists() {
                return Err(Error::MissingMesh(full.display().to_string()));
            }
            lib.insert(path.clone(), TriangleMesh::read_obj(&full)?);
        }
    }
    Ok(lib)
}

/// Area-weighted uniform samples over all posed link meshes.
pub fn sample_surface(
    m: &UrdfModel,
    meshes: &MeshLibrary,
    angles: &BTreeMap<String, f64>,
    n: usize,
    seed: u64,
) -> Result<PointCloud> {
    let frames = fk_transforms(m, angles)?;
    let mut triangles: Vec<[Vec3; 3]> = Vec::new();
    for (l, frame) in m.links.iter().zip(&frames) {
        let Some(path) = &l.mesh else { continue };
        let mesh = meshes.get(path).ok_or_else(|| Error::MissingMesh(path.clone()))?;
        let t = frame.compose(&l.visual_origin.to_transform());
        let world: Vec<Vec3> = mesh.vertices.iter().map(|v| t.apply(v)).collect();
        triangles.extend(mesh.triangles.iter().map(|tri| tri.map(|i| world[i])));
    }
    let mut cumulative = Vec::with_capacity(triangles.len());
    let mut total = 0.0;
    for [a, b, c] in &triangles {
        total += (b - a).cross(&(c - a)).norm() / 2.0;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::MissingMesh("model has no surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let k = cumulative.partition_point(|&c| c <= u).min(triangles.len() - 1);
            let [a, b, c] = triangles[k];
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Closed triangle mesh of a primitive, in its shape frame.
pub fn primitive_mesh(shape: &Shape, segments: usize) -> TriangleMesh {
    match *shape {
        Shape::Box { size } => {
            let h = Vec3::new(size[0], size[1], size[2]) / 2.0;
            let vertices = (0..8)
                .map(|i| Vec3::new(
                    if i & 1 == 1 { h.x } else { -h.x },
                    if i & 2 == 2 { h.y } else { -h.y },
                    if i & 4 == 4 { h.z } else { -h.z },
                ))
                .collect();
            let quads = [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]];
            let triangles = quads
                .iter()
                .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
                .collect();
            TriangleMesh { vertices, triangles }
        }
        Shape::Cylinder { radius, length } => {
            let mut vertices = Vec::new();
            for z in [-length / 2.0, length / 2.0] {
                for s in 0..segments {
                    let a = 2.0 * PI * s as f64 / segments as f64;
                    vertices.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
                }
            }
            vertices.push(Vec3::new(0.0, 0.0, -length / 2.0));
            vertices.push(Vec3::new(0.0, 0.0, length / 2.0));
            let (bottom, top) = (2 * segments, 2 * segments + 1);
            let mut triangles = Vec::new();
            for s in 0..segments {
                let n = (s + 1) % segments;
                triangles.push([s, n, segments + n]);
                triangles.push([s, segments + n, segments + s]);
                triangles.push([bottom, n, s]);
                triangles.push([top, segments + s, segments + n]);
            }
            TriangleMesh { vertices, triangles }
        }
    }
}

pub const PRIMITIVE_SEGMENTS: usize = 64;

/// Ground-truth robot as a model with primitive meshes. Link and joint names
/// follow the spec's link indices.
pub fn spec_to_urdf(spec: &RobotSpec, name: &str) -> (UrdfModel, MeshLibrary) {
    let mut lib = MeshLibrary::new();
    let links = spec
        .links
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let path = mesh_path(i);
            lib.insert(path.clone(), primitive_mesh(&l.shape, PRIMITIVE_SEGMENTS));
            UrdfLink {
                name: link_name(i),
                mesh: Some(path),
                visual_origin: Origin::from_transform(&l.shape_origin.to_transform()),
            }
        })
        .collect();
    let joints = spec
        .joints
        .iter()
        .map(|j| UrdfJoint {
            name: joint_name(j.child),
            parent: link_name(j.parent),
            child: link_name(j.child),
            origin: Origin::from_transform(&j.origin.to_transform()),
            axis: [j.axis.x, j.axis.y, j.axis.z],
            lower: j.lower,
            upper: j.upper,
            effort: JOINT_EFFORT,
            velocity: JOINT_VELOCITY,
        })
        .collect();
    (
        UrdfModel {
            name: name.to_string(),
            links,
            joints,
        },
        lib,
    )
}
