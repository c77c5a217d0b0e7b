//! Exact k-nearest-neighbor distance queries and the unit-ball volume.
//!
//! The index is a median-split kd-tree with exact pruning: query results are
//! identical to a sort-based brute-force scan, bit for bit. Queries here are
//! always against a reference set disjoint from the query points (the data
//! split guarantees it), so there is no self-exclusion logic; a stored point
//! equal to the query legitimately contributes distance zero.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use statrs::function::gamma::ln_gamma;

use crate::sample::SampleSet;
use crate::{Error, Result};

const LEAF_SIZE: usize = 16;

/// Volume of the d-dimensional Euclidean unit ball, `pi^(d/2) / Gamma(d/2 + 1)`.
pub fn unit_ball_volume(dim: usize) -> f64 {
    assert!(dim >= 1, "dimension must be >= 1");
    let half_d = dim as f64 / 2.0;
    (half_d * std::f64::consts::PI.ln() - ln_gamma(half_d + 1.0)).exp()
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        dim: u32,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Exact spatial index over an M×d reference set. Immutable after build;
/// concurrent queries are safe.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    len: usize,
    /// reference points, reordered for locality
    points: Vec<f64>,
    nodes: Vec<Node>,
    root: u32,
}

impl NeighborIndex {
    pub fn build(points: &SampleSet) -> Result<Self> {
        Self::build_from_flat(points.as_flat(), points.dim())
    }

    pub fn build_from_flat(flat: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if flat.is_empty() {
            return Err(Error::EmptyInput("neighbor index"));
        }
        debug_assert_eq!(flat.len() % dim, 0);
        let len = flat.len() / dim;
        let mut order: Vec<u32> = (0..len as u32).collect();
        let mut nodes = Vec::new();
        let root = build_recursive(flat, dim, &mut order, 0, &mut nodes);
        // store points in traversal order
        let mut points = Vec::with_capacity(flat.len());
        for &i in &order {
            points.extend_from_slice(&flat[i as usize * dim..(i as usize + 1) * dim]);
        }
        Ok(Self {
            dim,
            len,
            points,
            nodes,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Euclidean distance to the k-th closest stored point (k-th order
    /// statistic of the distance multiset; ties count separately).
    pub fn kth_distance(&self, query: &[f64], k: usize) -> Result<f64> {
        Ok(*self.k_smallest_distances(query, k)?.last().unwrap())
    }

    /// The k smallest distances in ascending order.
    pub fn k_smallest_distances(&self, query: &[f64], k: usize) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        if k == 0 || k > self.len {
            return Err(Error::NeighborCount { k, max: self.len });
        }
        let mut heap: BinaryHeap<TotalF64> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, &mut heap);
        let sorted = heap.into_sorted_vec();
        Ok(sorted.into_iter().map(|d| d.0.sqrt()).collect())
    }

    fn search(&self, node: u32, query: &[f64], k: usize, heap: &mut BinaryHeap<TotalF64>) {
        match &self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for i in *start as usize..*end as usize {
                    let p = &self.points[i * self.dim..(i + 1) * self.dim];
                    let d2 = squared_distance(query, p);
                    if heap.len() < k {
                        heap.push(TotalF64(d2));
                    } else if d2 < heap.peek().unwrap().0 {
                        heap.push(TotalF64(d2));
                        heap.pop();
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[*dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, query, k, heap);
                if heap.len() < k || diff * diff < heap.peek().unwrap().0 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

fn build_recursive(
    flat: &[f64],
    dim: usize,
    order: &mut [u32],
    offset: u32,
    nodes: &mut Vec<Node>,
) -> u32 {
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len() as u32,
        });
        return (nodes.len() - 1) as u32;
    }
    // split the axis of widest spread; all-equal points degenerate to a leaf
    let mut best_axis = 0;
    let mut best_spread = 0.0;
    for axis in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in order.iter() {
            let v = flat[i as usize * dim + axis];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best_axis = axis;
        }
    }
    if best_spread == 0.0 {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len() as u32,
        });
        return (nodes.len() - 1) as u32;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let va = flat[a as usize * dim + best_axis];
        let vb = flat[b as usize * dim + best_axis];
        va.total_cmp(&vb)
    });
    let split_value = flat[order[mid] as usize * dim + best_axis];
    let (left_slice, right_slice) = order.split_at_mut(mid);
    let left = build_recursive(flat, dim, left_slice, offset, nodes);
    let right = build_recursive(flat, dim, right_slice, offset + mid as u32, nodes);
    nodes.push(Node::Split {
        dim: best_axis as u32,
        value: split_value,
        left,
        right,
    });
    (nodes.len() - 1) as u32
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// Max-heap ordering for f64 via total order.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TotalF64(f64);

impl Eq for TotalF64 {}

impl PartialOrd for TotalF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TotalF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Sort-based scan. The independent fallback the index is checked against.
pub fn brute_force_kth_distance(points: &SampleSet, query: &[f64], k: usize) -> Result<f64> {
    let ds = brute_force_k_smallest(points, query, k)?;
    Ok(*ds.last().unwrap())
}

/// Brute-force version of [`NeighborIndex::k_smallest_distances`].
pub fn brute_force_k_smallest(points: &SampleSet, query: &[f64], k: usize) -> Result<Vec<f64>> {
    if query.len() != points.dim() {
        return Err(Error::DimensionMismatch {
            expected: points.dim(),
            actual: query.len(),
        });
    }
    if k == 0 || k > points.len() {
        return Err(Error::NeighborCount { k, max: points.len() });
    }
    let mut d2: Vec<f64> = points.rows().map(|p| squared_distance(query, p)).collect();
    d2.select_nth_unstable_by(k - 1, f64::total_cmp);
    let mut head: Vec<f64> = d2[..k].to_vec();
    head.sort_by(f64::total_cmp);
    Ok(head.into_iter().map(f64::sqrt).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(rows: &[Vec<f64>]) -> SampleSet {
        SampleSet::from_rows(rows, "test", None).unwrap()
    }

    #[test]
    fn collinear_points_order_statistics() {
        let pts = set(&[vec![0.0], vec![1.0], vec![2.0]]);
        let idx = NeighborIndex::build(&pts).unwrap();
        // distances from 0: {0, 1, 2}
        assert_eq!(idx.kth_distance(&[0.0], 1).unwrap(), 0.0);
        assert_eq!(idx.kth_distance(&[0.0], 2).unwrap(), 1.0);
        assert_eq!(idx.kth_distance(&[0.0], 3).unwrap(), 2.0);
    }

    #[test]
    fn three_four_five_triangle() {
        let pts = set(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        let idx = NeighborIndex::build(&pts).unwrap();
        assert_eq!(idx.kth_distance(&[0.0, 0.0], 2).unwrap(), 5.0);
    }

    #[test]
    fn duplicates_give_zero_distance() {
        let pts = set(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
        let idx = NeighborIndex::build(&pts).unwrap();
        assert_eq!(idx.kth_distance(&[1.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(idx.kth_distance(&[1.0, 1.0], 2).unwrap(), 0.0);
        assert!(idx.kth_distance(&[1.0, 1.0], 3).unwrap() > 0.0);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(NeighborIndex::build_from_flat(&[], 2).is_err());
        let pts = set(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let idx = NeighborIndex::build(&pts).unwrap();
        assert!(matches!(
            idx.kth_distance(&[0.0, 0.0], 3),
            Err(Error::NeighborCount { k: 3, max: 2 })
        ));
        assert!(matches!(
            idx.kth_distance(&[0.0, 0.0], 0),
            Err(Error::NeighborCount { .. })
        ));
        assert!(matches!(
            idx.kth_distance(&[0.0], 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matches_brute_force_exactly_across_dims() {
        for dim in 1..=8usize {
            let mut rng = Seed::with_stream(42, dim as u64).rng();
            let rows: Vec<Vec<f64>> = (0..200)
                .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
                .collect();
            let pts = set(&rows);
            let idx = NeighborIndex::build(&pts).unwrap();
            for _ in 0..40 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 1.4 - 0.2).collect();
                let k = rng.random_range(1..=pts.len());
                let fast = idx.kth_distance(&q, k).unwrap();
                let slow = brute_force_kth_distance(&pts, &q, k).unwrap();
                assert_eq!(fast, slow, "dim={dim} k={k}");
            }
        }
    }

    #[test]
    fn k_smallest_is_sorted_and_consistent() {
        let mut rng = Seed::new(5).rng();
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let pts = set(&rows);
        let idx = NeighborIndex::build(&pts).unwrap();
        let q = [0.5, 0.5, 0.5];
        let ds = idx.k_smallest_distances(&q, 50).unwrap();
        assert!(ds.windows(2).all(|w| w[0] <= w[1]));
        for (i, &d) in ds.iter().enumerate() {
            assert_eq!(d, idx.kth_distance(&q, i + 1).unwrap());
        }
        let brute = brute_force_k_smallest(&pts, &q, 50).unwrap();
        assert_eq!(ds, brute);
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-12);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unit_ball_volume_recursion() {
        for d in 3..=30usize {
            let lhs = unit_ball_volume(d);
            let rhs = unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64;
            assert!(
                ((lhs - rhs) / rhs).abs() < 1e-12,
                "recursion violated at d={d}: {lhs} vs {rhs}"
            );
        }
    }

    proptest! {
        #[test]
        fn kth_distance_nondecreasing_in_k(seed in 0u64..500) {
            let mut rng = Seed::new(seed).rng();
            let dim = rng.random_range(1..=4usize);
            let n = rng.random_range(2..=60usize);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
                .collect();
            let pts = set(&rows);
            let idx = NeighborIndex::build(&pts).unwrap();
            let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let mut last = 0.0f64;
            for k in 1..=n {
                let d = idx.kth_distance(&q, k).unwrap();
                prop_assert!(d >= last);
                last = d;
            }
        }
    }
}
