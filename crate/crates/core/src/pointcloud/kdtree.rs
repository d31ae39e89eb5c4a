//! Exact nearest-neighbour search under the L1 norm.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a point set. Queries return the exact L1 nearest
/// neighbour; ties go to the lowest point index.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    /// Points in leaf order, so leaf scans read contiguous memory.
    sorted: Vec<[f64; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Self {
        assert!(!points.is_empty(), "spatial index over empty point set");
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * pts.len() / LEAF_SIZE + 1);
        build(&pts, &mut order, 0, pts.len(), &mut nodes);
        let sorted = order.iter().map(|&i| pts[i as usize]).collect();
        SpatialIndex {
            points: pts,
            sorted,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns `(index, L1 distance)` of the nearest stored point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        self.search(q, (usize::MAX, f64::INFINITY))
    }

    /// Same result as [`nearest`](Self::nearest), but starts from the bound
    /// given by a likely candidate, which prunes most of the tree when the
    /// hint is close.
    pub fn nearest_with_hint(&self, q: &Vec3, hint: usize) -> (usize, f64) {
        let p = &self.points[hint];
        let d = (p[0] - q.x).abs() + (p[1] - q.y).abs() + (p[2] - q.z).abs();
        self.search(q, (hint, d))
    }

    fn search(&self, q: &Vec3, mut best: (usize, f64)) -> (usize, f64) {
        let q = [q.x, q.y, q.z];
        // Each entry carries the per-axis distance from `q` to the node's
        // region; their sum is a lower bound on any distance inside it.
        let mut stack: [(usize, [f64; 3]); 64] = [(0, [0.0; 3]); 64];
        let mut top = 1;
        while top > 0 {
            top -= 1;
            let (node, off) = stack[top];
            if off[0] + off[1] + off[2] > best.1 {
                continue;
            }
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for (p, &i) in self.sorted[start..end].iter().zip(&self.order[start..end]) {
                        let d = (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs();
                        let i = i as usize;
                        if d < best.1 || (d == best.1 && i < best.0) {
                            best = (i, d);
                        }
                    }
                }
                Node::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[dim] - value;
                    let (near, far) = if diff < 0.0 {
                        (left, right)
                    } else {
                        (right, left)
                    };
                    let mut far_off = off;
                    far_off[dim] = far_off[dim].max(diff.abs());
                    // Far side first so the near side is popped next.
                    stack[top] = (far, far_off);
                    stack[top + 1] = (near, off);
                    top += 2;
                }
            }
        }
        best
    }
}

fn build(pts: &[[f64; 3]], order: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        let p = &pts[i as usize];
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[dim] - lo[dim] <= 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        pts[a as usize][dim].total_cmp(&pts[b as usize][dim])
    });
    let value = pts[order[mid] as usize][dim];
    nodes.push(Node::Leaf { start, end });
    let left = build(pts, order, start, mid, nodes);
    let right = build(pts, order, mid, end, nodes);
    nodes[id] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    id
}
