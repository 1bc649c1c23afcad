use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Vec3;
use crate::real::Real;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: T, left: usize, right: usize },
}

#[derive(Debug, Clone, Copy)]
struct Candidate<T> {
    d2: T,
    index: u32,
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d2.partial_cmp(&o.d2).unwrap_or(Ordering::Equal).then(self.index.cmp(&o.index))
    }
}

/// Static kd-tree for exact nearest-neighbor queries. Among equidistant
/// points the lowest index wins.
#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<Vec3<T>>,
    order: Vec<u32>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[Vec3<T>]) -> Self {
        let mut tree = Self { points: points.to_vec(), order: (0..points.len() as u32).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::splat(T::infinity());
        let mut hi = Vec3::splat(T::neg_infinity());
        for &i in &self.order[start..end] {
            lo = lo.min(self.points[i as usize]);
            hi = hi.max(self.points[i as usize]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a as usize][axis].partial_cmp(&pts[b as usize][axis]).unwrap_or(std::cmp::Ordering::Equal)
        });
        let value = self.points[self.order[mid] as usize][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// `(index, squared distance)` of the nearest point, `None` when empty.
    pub fn nearest(&self, q: Vec3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (T::infinity(), u32::MAX);
        self.search(0, q, &mut best);
        Some((best.1 as usize, best.0))
    }

    /// The `k` nearest points as `(index, squared distance)`, closest first,
    /// ties broken by index.
    pub fn knn(&self, q: Vec3<T>, k: usize) -> Vec<(usize, T)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(k + 1);
        self.search_k(0, q, k, &mut heap);
        let mut out: Vec<(usize, T)> = heap.into_iter().map(|c| (c.index as usize, c.d2)).collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        out
    }

    fn search_k(&self, node: usize, q: Vec3<T>, k: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate { d2: self.points[i as usize].distance_squared(q), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.search_k(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search_k(far, q, k, heap);
                }
            }
        }
    }

    fn search(&self, node: usize, q: Vec3<T>, best: &mut (T, u32)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = self.points[i as usize].distance_squared(q);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn matches_brute_force_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts: Vec<Vec3<f64>> = (0..700)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        for i in 0..50 {
            pts[650 + i] = pts[i * 3];
        }
        // lattice points create exact distance ties
        pts.extend((0..27).map(|i| Vec3::new((i % 3) as f64, ((i / 3) % 3) as f64, (i / 9) as f64) * 0.5));
        let tree = KdTree::new(&pts);
        for q in 0..400 {
            let x = if q < 100 { pts[q] } else { Vec3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)) };
            let x = if q % 50 == 0 { Vec3::splat(0.25) } else { x };
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, p) in pts.iter().enumerate() {
                let d = p.distance_squared(x);
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(tree.nearest(x), Some((best.1, best.0)));
        }
    }

    #[test]
    fn knn_matches_sorted_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts: Vec<Vec3<f64>> = (0..500)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        pts[499] = pts[0];
        let tree = KdTree::new(&pts);
        for k in [1, 2, 10, 600] {
            for q in 0..50 {
                let x = pts[q * 7];
                let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, p.distance_squared(x))).collect();
                all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                all.truncate(k);
                assert_eq!(tree.knn(x, k), all);
            }
        }
    }

    #[test]
    fn empty_tree() {
        assert_eq!(KdTree::<f64>::new(&[]).nearest(Vec3::zero()), None);
    }
}
