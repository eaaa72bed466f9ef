//! Exact Euclidean k-nearest-neighbour search over feature vectors.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::Serialize;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStrategy {
    /// Tree search unless the dimension makes pruning hopeless.
    Auto,
    Tree,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug)]
enum Node {
    Leaf(Vec<usize>),
    Split { axis: usize, value: f32, left: Box<Node>, right: Box<Node> },
}

#[derive(Debug)]
pub struct SimilarityIndex {
    ids: Vec<String>,
    points: Vec<Vec<f32>>,
    dim: usize,
    root: Node,
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn build(points: &[Vec<f32>], mut idx: Vec<usize>, dim: usize) -> Node {
    if idx.len() <= LEAF_SIZE {
        return Node::Leaf(idx);
    }
    let spread = |a: usize| {
        let (lo, hi) = idx.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(points[i][a]), hi.max(points[i][a]))
        });
        hi - lo
    };
    let axis = (0..dim).max_by(|&a, &b| spread(a).total_cmp(&spread(b)).then(b.cmp(&a))).unwrap_or(0);
    if spread(axis) == 0.0 {
        return Node::Leaf(idx);
    }
    idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let mid = idx.len() / 2;
    let value = points[idx[mid]][axis];
    // Everything strictly below `value` goes left, the rest right.
    let cut = idx.partition_point(|&i| points[i][axis] < value);
    let cut = if cut == 0 { idx.partition_point(|&i| points[i][axis] <= value) } else { cut };
    if cut == idx.len() {
        return Node::Leaf(idx);
    }
    let right = idx.split_off(cut);
    let value = points[right[0]][axis];
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, idx, dim)),
        right: Box::new(build(points, right, dim)),
    }
}

/// Candidate ordered by (squared distance, id).
struct Cand<'a> {
    d2: f64,
    id: &'a str,
    index: usize,
}

impl PartialEq for Cand<'_> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Cand<'_> {}
impl PartialOrd for Cand<'_> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cand<'_> {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d2.total_cmp(&o.d2).then_with(|| self.id.cmp(o.id))
    }
}

/// Build an index; ids must be unique and vectors share one dimension.
pub fn build_similarity_index(ids: Vec<String>, vectors: Vec<Vec<f32>>) -> Result<SimilarityIndex> {
    if ids.len() != vectors.len() {
        return Err(Error::Validation(format!("{} ids for {} vectors", ids.len(), vectors.len())));
    }
    if ids.is_empty() {
        return Err(Error::Validation("empty similarity index".into()));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Validation(format!("dimension mismatch: {} vs {dim}", v.len())));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("feature vectors must be finite".into()));
    }
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(Error::Validation("duplicate ids in similarity index".into()));
    }
    let root = build(&vectors, (0..vectors.len()).collect(), dim);
    Ok(SimilarityIndex { ids, points: vectors, dim, root })
}

impl SimilarityIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|i| i == id).map(|k| self.points[k].as_slice())
    }

    /// The `k` nearest members, nearest first, ties ordered by id.
    pub fn knn_query(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.query_with(query, k, SearchStrategy::Auto)
    }

    pub fn query_with(&self, query: &[f32], k: usize, strategy: SearchStrategy) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::Validation(format!("query has dimension {}, index {}", query.len(), self.dim)));
        }
        if k == 0 || k > self.len() {
            return Err(Error::Validation(format!("k must be in 1..={}, got {k}", self.len())));
        }
        let exhaustive = match strategy {
            SearchStrategy::Exhaustive => true,
            SearchStrategy::Tree => false,
            // Pruning only pays off when the points outnumber 2^dim.
            SearchStrategy::Auto => self.dim >= 20 || (self.len() >> self.dim.min(63)) == 0,
        };
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        if exhaustive {
            for i in 0..self.len() {
                self.offer(&mut heap, query, i, k);
            }
        } else {
            self.search(&self.root, query, k, &mut heap);
        }
        let mut found = heap.into_sorted_vec();
        found.truncate(k);
        Ok(found.into_iter().map(|c| Neighbor { id: self.ids[c.index].clone(), distance: c.d2.sqrt() }).collect())
    }

    fn offer<'a>(&'a self, heap: &mut BinaryHeap<Cand<'a>>, query: &[f32], i: usize, k: usize) {
        let c = Cand { d2: dist2(query, &self.points[i]), id: &self.ids[i], index: i };
        if heap.len() < k {
            heap.push(c);
        } else if heap.peek().is_some_and(|worst| c < *worst) {
            heap.pop();
            heap.push(c);
        }
    }

    fn search<'a>(&'a self, node: &Node, query: &[f32], k: usize, heap: &mut BinaryHeap<Cand<'a>>) {
        match node {
            Node::Leaf(idx) => {
                for &i in idx {
                    self.offer(heap, query, i, k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = query[*axis] as f64 - *value as f64;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // Points on the far side are at least |diff| away along this
                // axis; ties must still be visited for the id tie-break.
                let visit = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.d2);
                if visit {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute(ids: &[String], pts: &[Vec<f32>], q: &[f32], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<(f64, &String)> = ids
            .iter()
            .zip(pts)
            .map(|(id, p)| (p.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>(), id))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        all.into_iter().take(k).map(|(d, id)| Neighbor { id: id.clone(), distance: d.sqrt() }).collect()
    }

    fn corpus(n: usize, dim: usize, seed: u64) -> (Vec<String>, Vec<Vec<f32>>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n).map(|i| format!("city-{i:04}")).collect();
        let pts = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        (ids, pts)
    }

    #[test]
    fn tree_equals_linear_scan_in_64_dims() {
        let (ids, pts) = corpus(1000, 64, 1);
        let index = build_similarity_index(ids.clone(), pts.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for t in 0..50 {
            let q: Vec<f32> = if t % 5 == 0 { pts[t].clone() } else { (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            for k in [1, 3, 10] {
                let want = brute(&ids, &pts, &q, k);
                assert_eq!(index.query_with(&q, k, SearchStrategy::Tree).unwrap(), want);
                assert_eq!(index.knn_query(&q, k).unwrap(), want);
            }
        }
    }

    #[test]
    fn tree_prunes_correctly_in_low_dims_with_ties() {
        // Integer lattice points produce many exact distance ties.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f32>> = (0..500).map(|_| (0..3).map(|_| rng.gen_range(0..6) as f32).collect()).collect();
        let ids: Vec<String> = (0..500).map(|i| format!("{:03}", (i * 7919) % 1000)).collect();
        let index = build_similarity_index(ids.clone(), pts.clone()).unwrap();
        for _ in 0..200 {
            let q: Vec<f32> = (0..3).map(|_| rng.gen_range(0..6) as f32 + 0.5 * rng.gen_range(0..2) as f32).collect();
            for k in [1, 5, 17] {
                assert_eq!(index.query_with(&q, k, SearchStrategy::Tree).unwrap(), brute(&ids, &pts, &q, k));
            }
        }
    }

    #[test]
    fn self_query_and_midpoint() {
        let index = build_similarity_index(vec!["b".into(), "a".into()], vec![vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let me = index.knn_query(&[2.0, 0.0], 1).unwrap();
        assert_eq!(me, vec![Neighbor { id: "a".into(), distance: 0.0 }]);
        let mid = index.knn_query(&[1.0, 0.0], 2).unwrap();
        assert_eq!(mid.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(mid[0].distance, mid[1].distance);
    }

    #[test]
    fn index_errors() {
        assert!(build_similarity_index(vec![], vec![]).is_err());
        assert!(build_similarity_index(vec!["a".into(), "b".into()], vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(build_similarity_index(vec!["a".into(), "a".into()], vec![vec![0.0], vec![1.0]]).is_err());
        let index = build_similarity_index(vec!["a".into()], vec![vec![0.0, 1.0]]).unwrap();
        assert!(index.knn_query(&[0.0], 1).is_err());
        assert!(index.knn_query(&[0.0, 0.0], 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn every_member_finds_itself(seed in 0u64..1000, n in 1usize..60, dim in 1usize..6) {
            let (ids, pts) = corpus(n, dim, seed);
            let index = build_similarity_index(ids.clone(), pts.clone()).unwrap();
            for (id, p) in ids.iter().zip(&pts) {
                let hit = index.query_with(p, 1, SearchStrategy::Tree).unwrap();
                proptest::prop_assert_eq!(hit[0].distance, 0.0);
                proptest::prop_assert_eq!(&hit[0].id, id);
            }
        }
    }
}
