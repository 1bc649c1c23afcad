use std::collections::HashMap;

use super::{cell_center, cell_size, morton_encode};
use crate::geometry::Vec3;
use crate::imls::MlsPointSet;
use crate::real::Real;

/// Depths up to this use a dense cell table instead of a hash map.
const DENSE_MAX_DEPTH: u32 = 7;

#[derive(Debug, Clone)]
struct Cell<T> {
    center: Vec3<T>,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
enum Lookup {
    Dense(Vec<u32>),
    Hashed(HashMap<u64, u32>),
}

/// Buckets items by host octant so that "items whose host-octant center lies
/// within `hcut` of x" can be enumerated without scanning everything.
#[derive(Debug, Clone)]
pub struct NeighborIndex<T> {
    depth: u32,
    h: T,
    cells: Vec<Cell<T>>,
    members: Vec<u32>,
    lookup: Lookup,
}

const EMPTY: u32 = u32::MAX;

impl<T: Real> NeighborIndex<T> {
    /// `hosts[i]` are the integer finest-level coordinates of item `i`'s octant.
    pub fn new(depth: u32, hosts: &[[u32; 3]]) -> Self {
        let mut order: Vec<(u64, u32)> =
            hosts.iter().enumerate().map(|(i, c)| (morton_encode(c[0], c[1], c[2]), i as u32)).collect();
        order.sort_unstable();
        let mut cells = Vec::new();
        let mut keys = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let key = order[i].0;
            let start = i;
            while i < order.len() && order[i].0 == key {
                i += 1;
            }
            cells.push(Cell { center: cell_center(depth, hosts[order[start].1 as usize]), start, end: i });
            keys.push((key, hosts[order[start].1 as usize]));
        }
        let members = order.iter().map(|&(_, i)| i).collect();
        let lookup = if depth <= DENSE_MAX_DEPTH {
            let n = 1usize << depth;
            let mut table = vec![EMPTY; n * n * n];
            for (ci, (_, c)) in keys.iter().enumerate() {
                table[(c[0] as usize * n + c[1] as usize) * n + c[2] as usize] = ci as u32;
            }
            Lookup::Dense(table)
        } else {
            Lookup::Hashed(keys.iter().enumerate().map(|(ci, (k, _))| (*k, ci as u32)).collect())
        };
        Self { depth, h: cell_size(depth), cells, members, lookup }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    fn cell_at(&self, c: [u32; 3]) -> Option<&Cell<T>> {
        let idx = match &self.lookup {
            Lookup::Dense(table) => {
                let n = 1usize << self.depth;
                table[(c[0] as usize * n + c[1] as usize) * n + c[2] as usize]
            }
            Lookup::Hashed(map) => *map.get(&morton_encode(c[0], c[1], c[2]))?,
        };
        (idx != EMPTY).then(|| &self.cells[idx as usize])
    }

    /// Appends every item whose host-octant center is strictly closer than `hcut` to `x`.
    pub fn candidates(&self, x: Vec3<T>, hcut: T, out: &mut Vec<u32>) {
        let n = 1i64 << self.depth;
        let reach = (hcut / self.h).ceil().to_i64().unwrap_or(0) + 1;
        let rel = |v: T| ((v + T::one()) / self.h).floor().to_i64().unwrap_or(0);
        let (cx, cy, cz) = (rel(x.x), rel(x.y), rel(x.z));
        let hcut2 = hcut * hcut;
        let range = |c: i64| (c - reach).max(0)..=(c + reach).min(n - 1);
        for ix in range(cx) {
            for iy in range(cy) {
                for iz in range(cz) {
                    let coords = [ix as u32, iy as u32, iz as u32];
                    // test the would-be center before touching the table
                    let center = cell_center::<T>(self.depth, coords);
                    if center.distance_squared(x) >= hcut2 {
                        continue;
                    }
                    if let Some(cell) = self.cell_at(coords) {
                        debug_assert!(cell.center == center);
                        out.extend_from_slice(&self.members[cell.start..cell.end]);
                    }
                }
            }
        }
    }

    /// The `k` nearest of `candidates` to `x`, ordered by distance then index.
    pub fn select_nearest(x: Vec3<T>, candidates: &[u32], positions: &[Vec3<T>], k: usize) -> Vec<usize> {
        let mut scored: Vec<(T, u32)> = candidates.iter().map(|&i| (positions[i as usize].distance_squared(x), i)).collect();
        let cmp = |a: &(T, u32), b: &(T, u32)| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1));
        if scored.len() > k && k > 0 {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.truncate(k);
        scored.into_iter().map(|(_, i)| i as usize).collect()
    }

    pub fn knn(&self, x: Vec3<T>, positions: &[Vec3<T>], k: usize, hcut: T) -> Vec<usize> {
        let mut cand = Vec::new();
        self.candidates(x, hcut, &mut cand);
        Self::select_nearest(x, &cand, positions, k)
    }
}

/// The `k` nearest MLS points to `x` among those whose host-octant center is
/// within `hcut` of `x`; ties go to the lower index. Empty means "outside band".
pub fn knn_mls<T: Real>(x: Vec3<T>, points: &MlsPointSet<T>, k: usize, hcut: T) -> Vec<usize> {
    points.index().knn(x, points.positions(), k, hcut)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::octree::cell_of;

    fn brute(x: Vec3<f64>, pos: &[Vec3<f64>], hosts: &[[u32; 3]], depth: u32, k: usize, hcut: f64) -> Vec<usize> {
        let mut v: Vec<(f64, usize)> = (0..pos.len())
            .filter(|&i| cell_center::<f64>(depth, hosts[i]).distance_squared(x) < hcut * hcut)
            .map(|i| (pos[i].distance_squared(x), i))
            .collect();
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        v.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn matches_brute_force_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (depth, n) in [(4u32, 1000usize), (6, 800), (8, 500)] {
            let mut pos: Vec<Vec3<f64>> = (0..n)
                .map(|_| Vec3::from_f64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            // exact duplicates exercise the index tie-break
            for i in 0..20 {
                pos[n - 1 - i] = pos[i];
            }
            let hosts: Vec<[u32; 3]> = pos.iter().map(|p| cell_of(depth, *p)).collect();
            let index = NeighborIndex::new(depth, &hosts);
            let h = cell_size::<f64>(depth);
            for q in 0..100 {
                let x = if q < 20 { pos[q] } else { Vec3::from_f64(rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1)) };
                assert_eq!(index.knn(x, &pos, 10, 4.0 * h), brute(x, &pos, &hosts, depth, 10, 4.0 * h));
            }
        }
    }

    #[test]
    fn band_exclusion_and_single_candidate() {
        let pos = vec![Vec3::new(0.0f64, 0.0, 0.0)];
        let hosts = vec![cell_of(5, pos[0])];
        let index = NeighborIndex::new(5, &hosts);
        assert_eq!(index.knn(Vec3::new(0.01, 0.0, 0.0), &pos, 1, 0.25), vec![0]);
        assert!(index.knn(Vec3::new(0.9, 0.0, 0.0), &pos, 1, 0.25).is_empty());
    }
}
