//! Cluster minimum spanning tree and kinematic tree inference.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::ClusterTrack;
use crate::segmentation::{pose_distance, PartLabeling};

/// Undirected weighted graph over cluster indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterGraph {
    pub nodes: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl ClusterGraph {
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes];
        for &(i, j, _) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Component id per node, numbered by lowest member.
    pub fn connected_components(&self) -> Vec<usize> {
        let mut uf = UnionFind::new(self.nodes);
        for &(i, j, _) in &self.edges {
            uf.union(i, j);
        }
        let mut ids = vec![usize::MAX; self.nodes];
        let mut out = vec![0; self.nodes];
        let mut next = 0;
        for (i, slot) in out.iter_mut().enumerate() {
            let r = uf.find(i);
            if ids[r] == usize::MAX {
                ids[r] = next;
                next += 1;
            }
            *slot = ids[r];
        }
        out
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Kruskal over a symmetric weight matrix; equal weights resolve in
/// lexicographic `(i, j)` order.
pub fn minimum_spanning_tree(weights: &DMatrix<f64>) -> ClusterGraph {
    let n = weights.nrows();
    let mut edges: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, weights[(i, j)]))
        .collect();
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut uf = UnionFind::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for e in edges {
        if uf.union(e.0, e.1) {
            tree.push(e);
        }
    }
    ClusterGraph { nodes: n, edges: tree }
}

/// Accumulated positional distance between cluster trajectories, summed over
/// every given track.
pub fn trajectory_weights(tracks: &[&ClusterTrack]) -> DMatrix<f64> {
    let s = tracks[0].num_clusters();
    let mut w = DMatrix::zeros(s, s);
    for track in tracks {
        for frame in &track.poses {
            for i in 0..s {
                for j in i + 1..s {
                    let d = (frame[i].position - frame[j].position).norm();
                    w[(i, j)] += d;
                    w[(j, i)] += d;
                }
            }
        }
    }
    w
}

pub fn build_mst(track: &ClusterTrack) -> ClusterGraph {
    minimum_spanning_tree(&trajectory_weights(&[track]))
}

pub fn build_mst_multi(tracks: &[&ClusterTrack]) -> ClusterGraph {
    minimum_spanning_tree(&trajectory_weights(tracks))
}

/// One clique per part.
pub fn build_segmentation_graph(labels: &PartLabeling) -> ClusterGraph {
    let n = labels.part_of.len();
    let edges = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| labels.part_of[i] == labels.part_of[j])
        .map(|(i, j)| (i, j, 1.0))
        .collect();
    ClusterGraph { nodes: n, edges }
}

/// Per-link motion: summed over frames (and tracks) of the mean member
/// pose distance to the first frame.
pub fn link_variation(tracks: &[&ClusterTrack], labels: &PartLabeling, alpha: f64) -> Vec<f64> {
    (0..labels.count)
        .map(|link| {
            let members = labels.members(link);
            tracks
                .iter()
                .map(|track| {
                    track
                        .poses
                        .iter()
                        .map(|frame| {
                            members
                                .iter()
                                .map(|&i| pose_distance(&frame[i], &track.poses[0][i], alpha))
                                .sum::<f64>()
                                / members.len() as f64
                        })
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Least-moving link; ties go to the lowest id.
pub fn select_root(tracks: &[&ClusterTrack], labels: &PartLabeling, alpha: f64) -> usize {
    let v = link_variation(tracks, labels, alpha);
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    pub clusters: Vec<usize>,
    pub parent: Option<usize>,
}

/// Directed link tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinematicTree {
    pub links: Vec<Link>,
    /// `(parent, child)` ordered by child id.
    pub edges: Vec<(usize, usize)>,
}

impl KinematicTree {
    /// Builds and validates a tree from a parent map.
    pub fn from_parents(parents: &[Option<usize>], clusters: Vec<Vec<usize>>) -> Result<Self> {
        let links: Vec<Link> = parents
            .iter()
            .zip(clusters)
            .enumerate()
            .map(|(id, (&parent, clusters))| Link { id, clusters, parent })
            .collect();
        let edges = links.iter().filter_map(|l| l.parent.map(|p| (p, l.id))).collect();
        let tree = KinematicTree { links, edges };
        tree.validate()?;
        Ok(tree)
    }

    pub fn root(&self) -> usize {
        self.links.iter().find(|l| l.parent.is_none()).map_or(0, |l| l.id)
    }

    pub fn children(&self, link: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.edges.iter().filter(|e| e.0 == link).map(|e| e.1).collect();
        c.sort_unstable();
        c
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.links.iter().map(|l| l.parent).collect()
    }

    /// Links in depth-first pre-order from the root, children by id.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.links.len());
        let mut stack = vec![self.root()];
        while let Some(l) = stack.pop() {
            out.push(l);
            for c in self.children(l).into_iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.links.len();
        let roots = self.links.iter().filter(|l| l.parent.is_none()).count();
        if roots != 1 || self.edges.len() + 1 != m {
            return Err(Error::CyclicConnectivity(self.root()));
        }
        if self.preorder().len() != m {
            return Err(Error::CyclicConnectivity(self.root()));
        }
        Ok(())
    }
}

/// Layered traversal of the link adjacency implied by the cluster MST.
///
/// A link reached from a second, non-parent link means the link graph has
/// a cycle and is reported instead of guessed.
pub fn infer_topology(mst: &ClusterGraph, seg: &ClusterGraph, labels: &PartLabeling, root: usize) -> Result<KinematicTree> {
    let m = labels.count;
    if root >= m {
        return Err(Error::InvalidArgument(format!("root {root} out of range for {m} links")));
    }
    // Links are the connected components of the segmentation graph; keep the
    // part ids for them.
    let components = seg.connected_components();
    let mut link_of = vec![0; seg.nodes];
    for (i, &c) in components.iter().enumerate() {
        let part = labels.part_of[i];
        if components.iter().zip(&labels.part_of).any(|(&c2, &p2)| c2 == c && p2 != part) {
            return Err(Error::ShapeMismatch("segmentation graph disagrees with part labels".into()));
        }
        link_of[i] = part;
    }
    let mut connected = vec![BTreeSet::new(); m];
    for &(i, j, _) in &mst.edges {
        let (a, b) = (link_of[i], link_of[j]);
        if a != b {
            connected[a].insert(b);
            connected[b].insert(a);
        }
    }
    let mut parent: Vec<Option<usize>> = vec![None; m];
    let mut visited = vec![false; m];
    visited[root] = true;
    let mut layer = vec![root];
    while !layer.is_empty() {
        let mut next = Vec::new();
        for &link in &layer {
            for &child in &connected[link] {
                if Some(child) == parent[link] {
                    continue;
                }
                if visited[child] {
                    return Err(Error::CyclicConnectivity(child));
                }
                visited[child] = true;
                parent[child] = Some(link);
                next.push(child);
            }
        }
        layer = next;
    }
    if let Some(unreached) = visited.iter().position(|v| !v) {
        return Err(Error::InvalidArgument(format!("link {unreached} is not connected to the root")));
    }
    let clusters = (0..m).map(|l| labels.members(l)).collect();
    KinematicTree::from_parents(&parent, clusters)
}

/// Link-level spanning tree used when the cluster MST induces a cyclic link
/// graph: links are joined by their closest cluster pair.
pub fn link_spanning_tree(weights: &DMatrix<f64>, labels: &PartLabeling, root: usize) -> Result<KinematicTree> {
    let m = labels.count;
    let mut w = DMatrix::from_element(m, m, f64::INFINITY);
    for i in 0..weights.nrows() {
        for j in 0..weights.ncols() {
            let (a, b) = (labels.part_of[i], labels.part_of[j]);
            if a != b && weights[(i, j)] < w[(a, b)] {
                w[(a, b)] = weights[(i, j)];
            }
        }
    }
    let mst = minimum_spanning_tree(&w);
    let adj = mst.neighbors();
    let mut parent = vec![None; m];
    let mut seen = vec![false; m];
    seen[root] = true;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(l) = queue.pop_front() {
        let mut next = adj[l].clone();
        next.sort_unstable();
        for c in next {
            if !seen[c] {
                seen[c] = true;
                parent[c] = Some(l);
                queue.push_back(c);
            }
        }
    }
    let clusters = (0..m).map(|l| labels.members(l)).collect();
    KinematicTree::from_parents(&parent, clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spanning_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
        let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let mut out = Vec::new();
        let mut pick = Vec::new();
        fn rec(all: &[(usize, usize)], start: usize, n: usize, pick: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            if pick.len() == n - 1 {
                let mut uf = UnionFind::new(n);
                if pick.iter().all(|&(a, b)| uf.union(a, b)) {
                    out.push(pick.clone());
                }
                return;
            }
            for k in start..all.len() {
                pick.push(all[k]);
                rec(all, k + 1, n, pick, out);
                pick.pop();
            }
        }
        rec(&all, 0, n, &mut pick, &mut out);
        out
    }

    #[test]
    fn mst_examples() {
        let x = [0.0f64, 1.0, 3.0];
        let w = DMatrix::from_fn(3, 3, |i, j| (x[i] - x[j]).abs());
        let mst = minimum_spanning_tree(&w);
        let e: Vec<(usize, usize)> = mst.edges.iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(e, vec![(0, 1), (1, 2)]);
        let two = minimum_spanning_tree(&DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0]));
        assert_eq!(two.edges.len(), 1);
    }

    #[test]
    fn mst_matches_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 2..=6 {
            let trees = spanning_trees(n);
            assert_eq!(trees.len(), n.pow(n as u32 - 2));
            for _ in 0..5 {
                let mut w = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in i + 1..n {
                        let v: f64 = rng.gen();
                        w[(i, j)] = v;
                        w[(j, i)] = v;
                    }
                }
                let best = trees
                    .iter()
                    .map(|t| t.iter().map(|&(a, b)| w[(a, b)]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((minimum_spanning_tree(&w).total_weight() - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segmentation_graph_examples() {
        let g = build_segmentation_graph(&PartLabeling::new(vec![0, 0, 1]));
        assert_eq!(g.edges, vec![(0, 1, 1.0)]);
        assert_eq!(build_segmentation_graph(&PartLabeling::new(vec![0; 4])).edges.len(), 6);
        assert!(build_segmentation_graph(&PartLabeling::new(vec![0, 1, 2])).edges.is_empty());
        assert_eq!(build_segmentation_graph(&PartLabeling::new(vec![1, 0, 1])).connected_components(), vec![0, 1, 0]);
    }

    fn graph(n: usize, edges: &[(usize, usize)]) -> ClusterGraph {
        ClusterGraph {
            nodes: n,
            edges: edges.iter().map(|&(a, b)| (a, b, 1.0)).collect(),
        }
    }

    #[test]
    fn serial_chain_topology() {
        let labels = PartLabeling::new(vec![0, 0, 1, 1, 2, 2]);
        let mst = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let tree = infer_topology(&mst, &build_segmentation_graph(&labels), &labels, 0).unwrap();
        assert_eq!(tree.edges, vec![(0, 1), (1, 2)]);
        assert_eq!(tree.root(), 0);
        let from_end = infer_topology(&mst, &build_segmentation_graph(&labels), &labels, 2).unwrap();
        assert_eq!(from_end.edges, vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn star_topology() {
        let labels = PartLabeling::new(vec![0, 0, 1, 2, 3]);
        let mst = graph(5, &[(0, 1), (0, 2), (1, 3), (1, 4)]);
        let tree = infer_topology(&mst, &build_segmentation_graph(&labels), &labels, 0).unwrap();
        assert_eq!(tree.edges, vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn cycle_is_reported() {
        // Part 0 is split in the MST so links 0, 1, 2 form a triangle.
        let labels = PartLabeling::new(vec![0, 1, 2, 0]);
        let mst = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let err = infer_topology(&mst, &build_segmentation_graph(&labels), &labels, 0).unwrap_err();
        assert!(matches!(err, Error::CyclicConnectivity(_)));
        let w = DMatrix::from_fn(4, 4, |i, j| (i as f64 - j as f64).abs());
        let tree = link_spanning_tree(&w, &labels, 0).unwrap();
        assert_eq!(tree.links.len(), 3);
        tree.validate().unwrap();
    }

    #[test]
    fn relabeling_gives_isomorphic_tree() {
        let labels = PartLabeling::new(vec![0, 0, 1, 1, 2, 3]);
        let mst = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 5)]);
        let tree = infer_topology(&mst, &build_segmentation_graph(&labels), &labels, 0).unwrap();
        let perm = [2, 0, 3, 1];
        let relabeled = PartLabeling::new(labels.part_of.iter().map(|&p| perm[p]).collect());
        let other = infer_topology(&mst, &build_segmentation_graph(&relabeled), &relabeled, perm[0]).unwrap();
        let mut mapped: Vec<(usize, usize)> = tree.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut got = other.edges.clone();
        mapped.sort();
        got.sort();
        assert_eq!(mapped, got);
    }

    #[test]
    fn mst_not_heavier_than_random_spanning_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let w = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 + if i == j { 0.0 } else { 1.0 });
        let w = (&w + w.transpose()) / 2.0;
        let best = minimum_spanning_tree(&w).total_weight();
        for _ in 0..1000 {
            // Random spanning tree from a random Pruefer-like attachment order.
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let total: f64 = (1..n).map(|k| w[(order[k], order[rng.gen_range(0..k)])]).sum();
            assert!(best <= total + 1e-12);
        }
    }

    #[test]
    fn preorder_and_children() {
        let tree = KinematicTree::from_parents(&[None, Some(0), Some(0), Some(1)], vec![vec![]; 4]).unwrap();
        assert_eq!(tree.preorder(), vec![0, 1, 3, 2]);
        assert_eq!(tree.children(0), vec![1, 2]);
        assert!(KinematicTree::from_parents(&[None, None], vec![vec![]; 2]).is_err());
    }
}
