//! Ball tree over unit vectors for exact inner-product radius queries.

use crate::types::dot_slices;

/// Absolute slack added to the pruning bound to absorb rounding in the
/// centroid and radius.
const BOUND_SLACK: f64 = 1e-6;

#[derive(Clone, Debug)]
struct Node {
    start: usize,
    end: usize,
    center: Vec<f64>,
    radius: f64,
    children: Option<(usize, usize)>,
}

/// Partition of a set of vectors into nested balls. Each node stores the
/// centroid of its members and the largest distance from it, so the inner
/// product of a query `q` with any member is at most `q·c + |q|·r`.
#[derive(Clone, Debug)]
pub(crate) struct BallTree {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl BallTree {
    /// Builds over the rows `members` of `data` (row-major, width `dim`).
    pub(crate) fn build(data: &[f32], dim: usize, members: Vec<u32>, leaf_size: usize) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            order: members,
        };
        if !tree.order.is_empty() {
            tree.build_node(data, dim, 0, tree.order.len(), leaf_size.max(1));
        }
        tree
    }

    pub(crate) fn len(&self) -> usize {
        self.order.len()
    }

    fn build_node(&mut self, data: &[f32], dim: usize, start: usize, end: usize, leaf: usize) -> usize {
        let row = |i: u32| &data[i as usize * dim..(i as usize + 1) * dim];
        let n = (end - start) as f64;
        let mut center = vec![0.0f64; dim];
        for &i in &self.order[start..end] {
            center.iter_mut().zip(row(i)).for_each(|(c, v)| *c += f64::from(*v));
        }
        center.iter_mut().for_each(|c| *c /= n);
        let radius = self.order[start..end]
            .iter()
            .map(|&i| {
                row(i)
                    .iter()
                    .zip(&center)
                    .map(|(v, c)| (f64::from(*v) - c).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            center,
            radius,
            children: None,
        });
        if end - start <= leaf || radius == 0.0 {
            return id;
        }
        // split on the widest dimension at the median
        let center = &self.nodes[id].center;
        let mut spread = vec![0.0f64; dim];
        for &i in &self.order[start..end] {
            for ((s, v), c) in spread.iter_mut().zip(row(i)).zip(center) {
                *s += (f64::from(*v) - c).powi(2);
            }
        }
        let axis = spread
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (k, s)| if *s > best.1 { (k, *s) } else { best })
            .0;
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            let (x, y) = (data[*a as usize * dim + axis], data[*b as usize * dim + axis]);
            x.total_cmp(&y).then(a.cmp(b))
        });
        let left = self.build_node(data, dim, start, mid, leaf);
        let right = self.build_node(data, dim, mid, end, leaf);
        self.nodes[id].children = Some((left, right));
        id
    }

    /// Calls `visit(member, similarity)` for every member with
    /// `similarity ≥ eps` and `keep(member)`.
    pub(crate) fn query(
        &self,
        data: &[f32],
        dim: usize,
        q: &[f32],
        eps: f64,
        keep: impl Fn(u32) -> bool,
        mut visit: impl FnMut(u32, f64),
    ) {
        if self.nodes.is_empty() {
            return;
        }
        let q_norm = dot_slices(q, q).sqrt();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            let bound = q
                .iter()
                .zip(&node.center)
                .map(|(a, c)| f64::from(*a) * c)
                .sum::<f64>()
                + q_norm * node.radius;
            if bound + BOUND_SLACK < eps {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => {
                    for &m in &self.order[node.start..node.end] {
                        if !keep(m) {
                            continue;
                        }
                        let s = dot_slices(q, &data[m as usize * dim..(m as usize + 1) * dim]);
                        if s >= eps {
                            visit(m, s);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_scan_on_clustered_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 8;
        let n = 600;
        let mut data = Vec::with_capacity(n * dim);
        for k in 0..n {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.2..0.2)).collect();
            v[k % dim] += 1.0;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| (x / norm) as f32));
        }
        let tree = BallTree::build(&data, dim, (0..n as u32).collect(), 8);
        assert_eq!(tree.len(), n);
        for t in 0..50 {
            let q = &data[(t * 7 % n) * dim..(t * 7 % n + 1) * dim];
            for eps in [-1.0, 0.0, 0.5, 0.9, 1.0] {
                let mut got = Vec::new();
                tree.query(&data, dim, q, eps, |_| true, |m, _| got.push(m));
                got.sort_unstable();
                let want: Vec<u32> = (0..n as u32)
                    .filter(|m| dot_slices(q, &data[*m as usize * dim..(*m as usize + 1) * dim]) >= eps)
                    .collect();
                assert_eq!(got, want);
            }
        }
    }
}
