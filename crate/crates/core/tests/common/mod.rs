#![allow(dead_code)]

use kinemaforge::geometry::Vec3;
use kinemaforge::metrics::OrderedTree;
use nalgebra::DMatrix;
use rand::Rng;

/// O(N*M) bidirectional L1 Chamfer, averaged over all points.
pub fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let l1 = |p: &Vec3, q: &Vec3| (p - q).abs().sum();
    let directed = |from: &[Vec3], to: &[Vec3]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| l1(p, q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    (directed(a, b) + directed(b, a)) / (a.len() + b.len()) as f64
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

/// Random rooted tree as a parent array; node 0 is not necessarily the root.
pub fn random_parents(rng: &mut impl Rng, n: usize) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut parents = vec![None; n];
    for k in 1..n {
        parents[order[k]] = Some(order[rng.gen_range(0..k)]);
    }
    parents
}

/// Preorder numbering and ancestor relation of an ordered tree.
struct Shape {
    pre: Vec<usize>,
    ancestor: Vec<Vec<bool>>,
}

fn shape(t: &OrderedTree) -> Shape {
    let n = t.children.len();
    let mut pre = vec![0; n];
    let mut ancestor = vec![vec![false; n]; n];
    let mut counter = 0;
    let mut stack = vec![(t.root, Vec::<usize>::new())];
    while let Some((v, path)) = stack.pop() {
        pre[v] = counter;
        counter += 1;
        for &a in &path {
            ancestor[a][v] = true;
        }
        let mut down = path.clone();
        down.push(v);
        for &c in t.children[v].iter().rev() {
            stack.push((c, down.clone()));
        }
    }
    Shape { pre, ancestor }
}

/// Ordered edit distance with unit insert/delete and free relabel, by
/// enumerating every valid mapping: `|a| + |b| - 2 * largest mapping`.
pub fn brute_ordered_ted(a: &OrderedTree, b: &OrderedTree) -> usize {
    let (sa, sb) = (shape(a), shape(b));
    let (na, nb) = (a.children.len(), b.children.len());
    let mut best = 0;
    let mut pairs = Vec::new();
    let mut used = vec![false; nb];
    extend(0, &sa, &sb, na, nb, &mut pairs, &mut used, &mut best);
    na + nb - 2 * best
}

#[allow(clippy::too_many_arguments)]
fn extend(
    i: usize,
    sa: &Shape,
    sb: &Shape,
    na: usize,
    nb: usize,
    pairs: &mut Vec<(usize, usize)>,
    used: &mut [bool],
    best: &mut usize,
) {
    if i == na {
        *best = (*best).max(pairs.len());
        return;
    }
    if pairs.len() + (na - i) <= *best {
        return;
    }
    extend(i + 1, sa, sb, na, nb, pairs, used, best);
    for j in 0..nb {
        if used[j] {
            continue;
        }
        let valid = pairs.iter().all(|&(x, y)| {
            sa.ancestor[x][i] == sb.ancestor[y][j]
                && sa.ancestor[i][x] == sb.ancestor[j][y]
                && (sa.pre[x] < sa.pre[i]) == (sb.pre[y] < sb.pre[j])
        });
        if valid {
            used[j] = true;
            pairs.push((i, j));
            extend(i + 1, sa, sb, na, nb, pairs, used, best);
            pairs.pop();
            used[j] = false;
        }
    }
}

/// Minimum total weight over every spanning tree of a complete graph.
pub fn brute_mst_weight(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(n - 1);
    subsets(&edges, 0, n, &mut chosen, w, &mut best);
    best
}

fn subsets(edges: &[(usize, usize)], from: usize, n: usize, chosen: &mut Vec<usize>, w: &DMatrix<f64>, best: &mut f64) {
    if chosen.len() == n - 1 {
        let mut comp: Vec<usize> = (0..n).collect();
        fn find(c: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while c[r] != r {
                r = c[r];
            }
            c[x] = r;
            r
        }
        let mut total = 0.0;
        for &e in chosen.iter() {
            let (a, b) = edges[e];
            let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
            if ra == rb {
                return;
            }
            comp[ra] = rb;
            total += w[(a, b)];
        }
        *best = best.min(total);
        return;
    }
    for e in from..edges.len() {
        if edges.len() - e < n - 1 - chosen.len() {
            break;
        }
        chosen.push(e);
        subsets(edges, e + 1, n, chosen, w, best);
        chosen.pop();
    }
}
