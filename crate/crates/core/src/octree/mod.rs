//! Octree scaffold over `[-1,1]^3`, SDF probe sets and MLS neighbor queries.

mod knn;
mod samples;

pub use knn::{knn_mls, NeighborIndex};
pub use samples::{generate_sdf_samples, lattice_samples, level_threshold, SdfSample, SdfSampleSet, COARSE_LEVEL, FINE_LEVEL};

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{OrientedPointCloud, SdfGrid, Vec3};
use crate::real::Real;

pub const MAX_DEPTH: u32 = 10;

/// Levels at or above this index are fully non-empty by convention.
const FORCED_LEVELS: u32 = 2;

/// Interleaves the low 21 bits of each coordinate (x in the lowest position).
pub fn morton_encode(x: u32, y: u32, z: u32) -> u64 {
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

pub fn morton_decode(key: u64) -> [u32; 3] {
    [compact(key), compact(key >> 1), compact(key >> 2)]
}

fn spread(v: u32) -> u64 {
    let mut x = u64::from(v) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// A finest-level non-empty octant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Octant<T> {
    pub key: u64,
    pub coords: [u32; 3],
    pub center: Vec3<T>,
}

/// Uniform-depth occupancy octree. `levels[l]` holds the sorted Morton keys of
/// the non-empty octants at level `l` (level 0 is the root).
#[derive(Debug, Clone, PartialEq)]
pub struct Octree<T> {
    depth: u32,
    levels: Vec<Vec<u64>>,
    finest: Vec<Octant<T>>,
    clamped: usize,
}

/// Edge length of a cell at `level` inside `[-1,1]^3`.
pub fn cell_size<T: Real>(level: u32) -> T {
    T::lit(2.0) / T::lit((1u64 << level) as f64)
}

/// Center of the cell with integer coordinates `c` at `level`.
pub fn cell_center<T: Real>(level: u32, c: [u32; 3]) -> Vec3<T> {
    let h = cell_size::<T>(level);
    let half = T::lit(0.5);
    let at = |i: u32| -T::one() + h * (T::lit(f64::from(i)) + half);
    Vec3::new(at(c[0]), at(c[1]), at(c[2]))
}

/// Integer cell coordinates of `p` at `level`, clamped into the domain.
pub fn cell_of<T: Real>(level: u32, p: Vec3<T>) -> [u32; 3] {
    let n = 1u64 << level;
    let h = cell_size::<T>(level);
    let idx = |v: T| {
        let f = ((v + T::one()) / h).floor().as_f64();
        f.max(0.0).min((n - 1) as f64) as u32
    };
    [idx(p.x), idx(p.y), idx(p.z)]
}

impl<T: Real> Octree<T> {
    /// Builds the tree from finest-level keys; coarser levels are the union of
    /// parents, and levels 1-2 are forced full.
    pub fn from_finest_keys(depth: u32, mut keys: Vec<u64>) -> Result<Self> {
        check_depth(depth, 1)?;
        keys.sort_unstable();
        keys.dedup();
        let mut levels = vec![Vec::new(); depth as usize + 1];
        levels[depth as usize] = keys;
        for l in (0..depth as usize).rev() {
            let mut parents: Vec<u64> = levels[l + 1].iter().map(|k| k >> 3).collect();
            parents.dedup();
            levels[l] = parents;
        }
        for l in 1..=FORCED_LEVELS.min(depth) {
            levels[l as usize] = (0..1u64 << (3 * l)).collect();
        }
        levels[0] = vec![0];
        let finest = levels[depth as usize]
            .iter()
            .map(|&key| {
                let coords = morton_decode(key);
                Octant { key, coords, center: cell_center(depth, coords) }
            })
            .collect();
        Ok(Self { depth, levels, finest, clamped: 0 })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Finest cell size `h = 2 / 2^depth`.
    pub fn h(&self) -> T {
        cell_size(self.depth)
    }

    pub fn finest(&self) -> &[Octant<T>] {
        &self.finest
    }

    pub fn level(&self, l: u32) -> &[u64] {
        &self.levels[l as usize]
    }

    /// Number of input points moved into the domain during construction.
    pub fn clamped_points(&self) -> usize {
        self.clamped
    }

    /// Stable index of the finest octant containing `p`, if non-empty.
    pub fn locate(&self, p: Vec3<T>) -> Option<usize> {
        let [x, y, z] = cell_of(self.depth, p);
        self.finest.binary_search_by_key(&morton_encode(x, y, z), |o| o.key).ok()
    }

    pub fn is_occupied(&self, level: u32, key: u64) -> bool {
        self.levels.get(level as usize).is_some_and(|l| l.binary_search(&key).is_ok())
    }

    /// Debug dump: one `level: key key ...` line per level.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (l, keys) in self.levels.iter().enumerate() {
            let _ = write!(out, "{l}:");
            for k in keys {
                let _ = write!(out, " {k}");
            }
            out.push('\n');
        }
        out
    }
}

fn check_depth(depth: u32, min: u32) -> Result<()> {
    if depth < min || depth > MAX_DEPTH {
        Err(Error::Invalid(format!("octree depth {depth} outside {min}..={MAX_DEPTH}")))
    } else {
        Ok(())
    }
}

/// Octree whose finest non-empty octants are exactly those containing a point.
/// Points outside `[-1,1]^3` are clamped into it and counted.
pub fn build_octree<T: Real>(cloud: &OrientedPointCloud<T>, depth: u32) -> Result<Octree<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud is empty".into()));
    }
    check_depth(depth, 1)?;
    let (lo, hi) = (-T::one(), T::one());
    let mut clamped = 0;
    let keys = cloud
        .points
        .iter()
        .map(|p| {
            let q = p.map(|v| v.max(lo).min(hi));
            if q != *p {
                clamped += 1;
            }
            let [x, y, z] = cell_of(depth, q);
            morton_encode(x, y, z)
        })
        .collect();
    let mut tree = Octree::from_finest_keys(depth, keys)?;
    tree.clamped = clamped;
    Ok(tree)
}

/// Ground-truth octree from a signed distance grid: a finest octant is
/// non-empty iff the interpolated field changes sign (or vanishes) among its
/// corner samples and the lattice-rate samples inside it.
pub fn build_gt_octree<T: Real>(sdf: &SdfGrid<T>, depth: u32) -> Result<Octree<T>> {
    check_depth(depth, 2)?;
    let spacing = sdf.spacing().max_component();
    let slack = T::lit(3f64.sqrt()) * spacing;
    let half_diag = T::lit(3f64.sqrt() / 2.0);
    let mut frontier: Vec<u64> = vec![0];
    for level in 1..=depth {
        let h = cell_size::<T>(level);
        let children: Vec<u64> = frontier.iter().flat_map(|&k| (0..8).map(move |c| (k << 3) | c)).collect();
        frontier = if level < depth {
            // 1-Lipschitz pruning: the surface cannot reach a cell whose center is
            // farther than its half-diagonal (plus interpolation slack)
            children
                .into_par_iter()
                .filter(|&k| {
                    let c = cell_center::<T>(level, morton_decode(k));
                    sdf.sample(c).abs() <= h * half_diag + slack
                })
                .collect()
        } else {
            children.into_par_iter().filter(|&k| crosses_surface(sdf, level, k, spacing)).collect()
        };
    }
    Octree::from_finest_keys(depth, frontier)
}

fn crosses_surface<T: Real>(sdf: &SdfGrid<T>, level: u32, key: u64, spacing: T) -> bool {
    let h = cell_size::<T>(level);
    let steps = (h / spacing).ceil().to_usize().unwrap_or(1).max(1);
    let c = morton_decode(key);
    let origin = cell_center::<T>(level, c) - Vec3::splat(h * T::lit(0.5));
    let step = h / T::from_usize_lossy(steps);
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let p = origin
                    + Vec3::new(T::from_usize_lossy(i), T::from_usize_lossy(j), T::from_usize_lossy(k)) * step;
                let v = sdf.sample(p);
                lo = lo.min(v);
                hi = hi.max(v);
                if lo <= T::zero() && hi >= T::zero() {
                    return true;
                }
            }
        }
    }
    false
}
