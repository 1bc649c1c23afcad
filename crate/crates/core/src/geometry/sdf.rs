use rayon::prelude::*;

use super::{Aabb, Vec3};
use crate::error::{Error, Result};
use crate::real::Real;

/// Analytic solids with closed-form signed distance (negative inside).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape<T> {
    Sphere { center: Vec3<T>, radius: T },
    /// Axis-aligned box centered at the origin.
    Box { half_extents: Vec3<T> },
    /// Torus around the z axis, centered at the origin.
    Torus { major: T, minor: T },
}

impl<T: Real> Shape<T> {
    pub fn sphere(center: Vec3<T>, radius: T) -> Result<Self> {
        Self::Sphere { center, radius }.validated()
    }

    pub fn cuboid(half_extents: Vec3<T>) -> Result<Self> {
        Self::Box { half_extents }.validated()
    }

    pub fn torus(major: T, minor: T) -> Result<Self> {
        Self::Torus { major, minor }.validated()
    }

    fn validated(self) -> Result<Self> {
        let ok = match self {
            Self::Sphere { radius, center } => radius > T::zero() && center.is_finite(),
            Self::Box { half_extents: h } => h.x > T::zero() && h.y > T::zero() && h.z > T::zero(),
            Self::Torus { major, minor } => major > T::zero() && minor > T::zero(),
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::Invalid(format!("shape parameters must be positive: {self:?}")))
        }
    }

    /// Exact signed distance from `x`.
    pub fn sdf(&self, x: Vec3<T>) -> T {
        match *self {
            Self::Sphere { center, radius } => (x - center).norm() - radius,
            Self::Box { half_extents } => {
                let q = x.abs() - half_extents;
                q.max(Vec3::zero()).norm() + q.max_component().min(T::zero())
            }
            Self::Torus { major, minor } => {
                let ring = (x.x * x.x + x.y * x.y).sqrt() - major;
                (ring * ring + x.z * x.z).sqrt() - minor
            }
        }
    }
}

/// Free-function form of [`Shape::sdf`].
pub fn analytic_sdf<T: Real>(shape: &Shape<T>, x: Vec3<T>) -> T {
    shape.sdf(x)
}

/// Signed distances sampled on a regular `R^3` lattice spanning `bounds`
/// (both faces included, so spacing is `extent / (R - 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid<T> {
    resolution: usize,
    bounds: Aabb<T>,
    values: Vec<T>,
}

impl<T: Real> SdfGrid<T> {
    /// Validates resolution, finiteness and the Lipschitz bound between neighbors.
    pub fn new(resolution: usize, bounds: Aabb<T>, values: Vec<T>) -> Result<Self> {
        let grid = Self::new_unchecked(resolution, bounds, values)?;
        grid.check_lipschitz()?;
        Ok(grid)
    }

    /// Structural checks only; for fields that are not distance functions.
    pub fn new_unchecked(resolution: usize, bounds: Aabb<T>, values: Vec<T>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Invalid("resolution too small (need R >= 2)".into()));
        }
        if values.len() != resolution * resolution * resolution {
            return Err(Error::ShapeMismatch(format!(
                "{} values for resolution {resolution}",
                values.len()
            )));
        }
        if bounds.is_empty() || bounds.extent().x <= T::zero() || !bounds.min.is_finite() || !bounds.max.is_finite() {
            return Err(Error::Invalid("grid bounds must be a non-degenerate box".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite SDF value".into()));
        }
        Ok(Self { resolution, bounds, values })
    }

    /// Samples `f` at every lattice point, one x-slab per task.
    pub fn from_fn(resolution: usize, bounds: Aabb<T>, f: impl Fn(Vec3<T>) -> T + Sync) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Invalid("resolution too small (need R >= 2)".into()));
        }
        let r = resolution;
        let mut values = vec![T::zero(); r * r * r];
        let probe = Self { resolution, bounds, values: Vec::new() };
        values.par_chunks_mut(r * r).enumerate().for_each(|(ix, slab)| {
            for iy in 0..r {
                for iz in 0..r {
                    slab[iy * r + iz] = f(probe.point(ix, iy, iz));
                }
            }
        });
        Self::new(resolution, bounds, values)
    }

    pub fn from_shape(shape: &Shape<T>, resolution: usize) -> Result<Self> {
        Self::from_fn(resolution, Aabb::unit_cube(), |p| shape.sdf(p))
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> Aabb<T> {
        self.bounds
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn spacing(&self) -> Vec3<T> {
        self.bounds.extent() / T::from_usize_lossy(self.resolution - 1)
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> T {
        self.values[self.index(ix, iy, iz)]
    }

    #[inline]
    pub fn point(&self, ix: usize, iy: usize, iz: usize) -> Vec3<T> {
        let s = self.spacing();
        let m = self.bounds.min;
        Vec3::new(
            m.x + s.x * T::from_usize_lossy(ix),
            m.y + s.y * T::from_usize_lossy(iy),
            m.z + s.z * T::from_usize_lossy(iz),
        )
    }

    /// Central-difference gradient at a lattice point (one-sided on faces).
    pub fn gradient_at(&self, ix: usize, iy: usize, iz: usize) -> Vec3<T> {
        let r = self.resolution;
        let s = self.spacing();
        let diff = |lo: usize, hi: usize, a: T, b: T, h: T| (b - a) / (h * T::from_usize_lossy(hi - lo));
        let (x0, x1) = (ix.saturating_sub(1), (ix + 1).min(r - 1));
        let (y0, y1) = (iy.saturating_sub(1), (iy + 1).min(r - 1));
        let (z0, z1) = (iz.saturating_sub(1), (iz + 1).min(r - 1));
        Vec3::new(
            diff(x0, x1, self.at(x0, iy, iz), self.at(x1, iy, iz), s.x),
            diff(y0, y1, self.at(ix, y0, iz), self.at(ix, y1, iz), s.y),
            diff(z0, z1, self.at(ix, iy, z0), self.at(ix, iy, z1), s.z),
        )
    }

    /// Trilinear interpolation, clamped to the grid bounds.
    pub fn sample(&self, p: Vec3<T>) -> T {
        let r = self.resolution;
        let s = self.spacing();
        let rel = p - self.bounds.min;
        let max_cell = T::from_usize_lossy(r - 1);
        let coord = |v: T, h: T| -> (usize, T) {
            let g = (v / h).max(T::zero()).min(max_cell);
            let i = g.floor().to_usize().unwrap_or(0).min(r - 2);
            (i, g - T::from_usize_lossy(i))
        };
        let (ix, fx) = coord(rel.x, s.x);
        let (iy, fy) = coord(rel.y, s.y);
        let (iz, fz) = coord(rel.z, s.z);
        let one = T::one();
        let mut acc = T::zero();
        for (dx, wx) in [(0, one - fx), (1, fx)] {
            for (dy, wy) in [(0, one - fy), (1, fy)] {
                for (dz, wz) in [(0, one - fz), (1, fz)] {
                    acc += wx * wy * wz * self.at(ix + dx, iy + dy, iz + dz);
                }
            }
        }
        acc
    }

    /// Gradient of the interpolated field by central differences of one lattice step.
    pub fn sample_gradient(&self, p: Vec3<T>) -> Vec3<T> {
        let s = self.spacing();
        let two = T::lit(2.0);
        let d = |e: Vec3<T>, h: T| (self.sample(p + e) - self.sample(p - e)) / (two * h);
        Vec3::new(
            d(Vec3::new(s.x, T::zero(), T::zero()), s.x),
            d(Vec3::new(T::zero(), s.y, T::zero()), s.y),
            d(Vec3::new(T::zero(), T::zero(), s.z), s.z),
        )
    }

    /// Adjacent lattice values may differ by at most `sqrt(3) * spacing` (+10%).
    fn check_lipschitz(&self) -> Result<()> {
        let r = self.resolution;
        let s = self.spacing();
        let limit = T::lit(3f64.sqrt() * 1.1) * s.max_component();
        for ix in 0..r {
            for iy in 0..r {
                for iz in 0..r {
                    let v = self.at(ix, iy, iz);
                    let bad = (ix + 1 < r && (self.at(ix + 1, iy, iz) - v).abs() > limit)
                        || (iy + 1 < r && (self.at(ix, iy + 1, iz) - v).abs() > limit)
                        || (iz + 1 < r && (self.at(ix, iy, iz + 1) - v).abs() > limit);
                    if bad {
                        return Err(Error::Format(format!(
                            "values at lattice point ({ix},{iy},{iz}) jump by more than sqrt(3)*spacing"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
