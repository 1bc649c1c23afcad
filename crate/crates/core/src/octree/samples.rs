use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{SdfGrid, Vec3};
use crate::real::Real;

pub const COARSE_LEVEL: u8 = 6;
pub const FINE_LEVEL: u8 = 7;

/// Minimum grid resolution for the two-level probe set.
pub const MIN_SAMPLE_RESOLUTION: usize = 128;

/// A probe point with its ground-truth distance and unit gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample<T> {
    pub q: Vec3<T>,
    pub value: T,
    pub gradient: Vec3<T>,
    pub level: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdfSampleSet<T> {
    pub samples: Vec<SdfSample<T>>,
}

impl<T: Real> SdfSampleSet<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_level(&self, level: u8) -> usize {
        self.samples.iter().filter(|s| s.level == level).count()
    }

    /// Subset restricted to one level.
    pub fn level(&self, level: u8) -> Self {
        Self { samples: self.samples.iter().filter(|s| s.level == level).copied().collect() }
    }
}

/// `|sdf|` threshold for samples at an octree level: 1/8 at level 6, halving per level.
pub fn level_threshold<T: Real>(level: u8) -> T {
    T::lit(0.125) / T::lit(f64::from(1u32 << (level.saturating_sub(COARSE_LEVEL))))
}

/// Lattice points with index stride `stride` along every axis whose absolute
/// value is below `threshold`, tagged with `level`. Gradients are central
/// differences, normalized; points with a vanishing gradient are skipped.
pub fn lattice_samples<T: Real>(sdf: &SdfGrid<T>, stride: usize, threshold: T, level: u8) -> Vec<SdfSample<T>> {
    let r = sdf.resolution();
    let stride = stride.max(1);
    let xs: Vec<usize> = (0..r).step_by(stride).collect();
    xs.par_iter()
        .map(|&ix| {
            let mut out = Vec::new();
            for iy in (0..r).step_by(stride) {
                for iz in (0..r).step_by(stride) {
                    let value = sdf.at(ix, iy, iz);
                    if value.abs() >= threshold {
                        continue;
                    }
                    if let Some(gradient) = sdf.gradient_at(ix, iy, iz).try_normalize(T::lit(1e-12)) {
                        out.push(SdfSample { q: sdf.point(ix, iy, iz), value, gradient, level });
                    }
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Two-level probe set: every `R/64`-th lattice point with `|s| < 1/8` at
/// level 6, united with every `R/128`-th lattice point with `|s| < 1/16` at level 7.
pub fn generate_sdf_samples<T: Real>(sdf: &SdfGrid<T>) -> Result<SdfSampleSet<T>> {
    let r = sdf.resolution();
    if r < MIN_SAMPLE_RESOLUTION {
        return Err(Error::Invalid(format!(
            "SDF resolution {r} too small for probe generation (need >= {MIN_SAMPLE_RESOLUTION})"
        )));
    }
    let mut samples = Vec::new();
    for level in [COARSE_LEVEL, FINE_LEVEL] {
        let stride = r >> level;
        samples.extend(lattice_samples(sdf, stride, level_threshold(level), level));
    }
    Ok(SdfSampleSet { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Shape};

    #[test]
    fn thresholds() {
        assert_eq!(level_threshold::<f64>(6), 0.125);
        assert_eq!(level_threshold::<f64>(7), 0.0625);
    }

    #[test]
    fn constant_fields_select_by_threshold() {
        // a plane field: value = x; with spacing 2/127 the lattice covers x in [-1, 1]
        let g = SdfGrid::from_fn(128, Aabb::unit_cube(), |p: Vec3<f64>| p.x).unwrap();
        let set = generate_sdf_samples(&g).unwrap();
        for s in &set.samples {
            assert!(s.value.abs() < level_threshold::<f64>(s.level));
            assert!((s.gradient.norm() - 1.0).abs() < 1e-3);
        }
        // x = 0.2 at level 6 is excluded, |x| = 0.05 at level 7 is included
        assert!(set.samples.iter().all(|s| !(s.level == 6 && s.value.abs() >= 0.125)));
        assert!(set.samples.iter().any(|s| s.level == 7 && (s.value.abs() - 0.05).abs() < 0.02));
        assert!(set.count_level(7) >= set.count_level(6));
    }

    #[test]
    fn single_values_at_the_thresholds() {
        let g = SdfGrid::from_fn(16, Aabb::unit_cube(), |_: Vec3<f64>| 0.2).unwrap();
        assert!(lattice_samples(&g, 2, level_threshold(6), 6).is_empty());
        let g = SdfGrid::from_fn(16, Aabb::unit_cube(), |p: Vec3<f64>| 0.05 + 1e-3 * p.x).unwrap();
        assert_eq!(lattice_samples(&g, 2, level_threshold(6), 6).len(), 8 * 8 * 8);
        let fine = lattice_samples(&g, 1, level_threshold(7), 7);
        assert_eq!(fine.len(), 16 * 16 * 16);
        assert!(fine.iter().all(|s| s.level == 7));
    }

    #[test]
    fn low_resolution_is_rejected() {
        let g = SdfGrid::from_fn(64, Aabb::unit_cube(), |p: Vec3<f64>| p.x).unwrap();
        assert!(generate_sdf_samples(&g).is_err());
    }

    #[test]
    fn sphere_gradients_are_radial() {
        let shape = Shape::sphere(Vec3::zero(), 0.5f64).unwrap();
        let g = SdfGrid::from_shape(&shape, 256).unwrap();
        let set = generate_sdf_samples(&g).unwrap();
        assert!(set.count_level(7) >= set.count_level(6));
        assert!(set.count_level(6) > 1000);
        for s in &set.samples {
            assert!(s.gradient.angle_deg(s.q) < 2.0, "{s:?}");
        }
    }
}
