//! The implicit moving least-squares function, its weighted-normal gradient
//! approximation, and the narrow-band membership test.

use crate::error::{Error, Result};
use crate::geometry::{OrientedPointCloud, Vec3};
use crate::octree::{cell_center, cell_of, cell_size, NeighborIndex, Octree};
use crate::real::Real;

/// Offset range factor: MLS points stay within `beta * h` (per axis) of their octant center.
pub const BETA: f64 = 1.5;
/// Weight sums at or below this mark a point as outside the band.
pub const WEIGHT_EPS: f64 = 1e-12;

/// Oriented point with a support radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlsPoint<T> {
    pub position: Vec3<T>,
    pub normal: Vec3<T>,
    pub radius: T,
    /// Index of the host octant in the owning set's octant table.
    pub octant: usize,
}

/// Neighbor selection: the `k` nearest points among those whose host-octant
/// center is closer than `hcut_factor * h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborRule<T> {
    pub k: usize,
    pub hcut_factor: T,
}

impl<T: Real> Default for NeighborRule<T> {
    fn default() -> Self {
        Self { k: 10, hcut_factor: T::lit(4.0) }
    }
}

/// MLS points together with the scaffold octants hosting them.
#[derive(Debug, Clone)]
pub struct MlsPointSet<T> {
    points: Vec<MlsPoint<T>>,
    positions: Vec<Vec3<T>>,
    octants: Vec<[u32; 3]>,
    depth: u32,
    rule: NeighborRule<T>,
    index: NeighborIndex<T>,
}

impl<T: Real> MlsPointSet<T> {
    /// Points whose `octant` field indexes `octree.finest()`.
    pub fn new(points: Vec<MlsPoint<T>>, octree: &Octree<T>) -> Result<Self> {
        let octants: Vec<[u32; 3]> = octree.finest().iter().map(|o| o.coords).collect();
        Self::with_octants(points, octants, octree.depth())
    }

    /// Points with explicit host coordinates at `depth`.
    pub fn with_octants(points: Vec<MlsPoint<T>>, octants: Vec<[u32; 3]>, depth: u32) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("MLS point set is empty".into()));
        }
        let h = cell_size::<T>(depth);
        let reach = T::lit(BETA * 3f64.sqrt()) * h * T::lit(1.0 + 1e-9);
        let unit_tol = T::lit(1e-9);
        for (i, p) in points.iter().enumerate() {
            let host = octants
                .get(p.octant)
                .ok_or_else(|| Error::ShapeMismatch(format!("point {i} references missing octant {}", p.octant)))?;
            if !p.position.is_finite() || !p.normal.is_finite() {
                return Err(Error::Format(format!("point {i} has non-finite coordinates")));
            }
            if (p.normal.norm() - T::one()).abs() > unit_tol {
                return Err(Error::Format(format!("point {i} normal is not unit length")));
            }
            if !(p.radius > T::zero() && p.radius <= T::one()) {
                return Err(Error::InvalidRadius(format!("point {i} radius {} outside (0, 1]", p.radius)));
            }
            if p.position.distance(cell_center(depth, *host)) > reach {
                return Err(Error::Invalid(format!("point {i} lies farther than beta*h*sqrt(3) from its octant")));
            }
        }
        let hosts: Vec<[u32; 3]> = points.iter().map(|p| octants[p.octant]).collect();
        let index = NeighborIndex::new(depth, &hosts);
        let positions = points.iter().map(|p| p.position).collect();
        Ok(Self { points, positions, octants, depth, rule: NeighborRule::default(), index })
    }

    /// Hosts each point in the depth-`depth` cell containing it.
    pub fn from_oriented(positions: &[Vec3<T>], normals: &[Vec3<T>], radii: &[T], depth: u32) -> Result<Self> {
        if positions.len() != normals.len() || positions.len() != radii.len() {
            return Err(Error::ShapeMismatch("positions, normals and radii differ in length".into()));
        }
        let mut octants = Vec::new();
        let mut slot = std::collections::HashMap::new();
        let points = positions
            .iter()
            .zip(normals)
            .zip(radii)
            .map(|((&position, &normal), &radius)| {
                let c = cell_of(depth, position);
                let octant = *slot.entry(c).or_insert_with(|| {
                    octants.push(c);
                    octants.len() - 1
                });
                MlsPoint { position, normal, radius, octant }
            })
            .collect();
        Self::with_octants(points, octants, depth)
    }

    /// Uses the cloud's normals; every point gets radius `radius`.
    pub fn from_cloud(cloud: &OrientedPointCloud<T>, radius: T, depth: u32) -> Result<Self> {
        let normals = cloud.normals.as_ref().ok_or_else(|| Error::Invalid("point cloud has no normals".into()))?;
        Self::from_oriented(&cloud.points, normals, &vec![radius; cloud.len()], depth)
    }

    pub fn with_rule(mut self, rule: NeighborRule<T>) -> Self {
        self.rule = rule;
        self
    }

    pub fn rule(&self) -> NeighborRule<T> {
        self.rule
    }

    pub fn points(&self) -> &[MlsPoint<T>] {
        &self.points
    }

    pub fn positions(&self) -> &[Vec3<T>] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn h(&self) -> T {
        cell_size(self.depth)
    }

    /// Neighbor cutoff distance on octant centers.
    pub fn hcut(&self) -> T {
        self.rule.hcut_factor * self.h()
    }

    pub fn octants(&self) -> &[[u32; 3]] {
        &self.octants
    }

    pub fn index(&self) -> &NeighborIndex<T> {
        &self.index
    }

    /// Ω(x): neighbor indices under the set's rule.
    pub fn neighbors(&self, x: Vec3<T>) -> Vec<usize> {
        self.index.knn(x, &self.positions, self.rule.k, self.hcut())
    }

    /// Ω(p_i) without `i` itself.
    pub fn point_neighbors(&self, i: usize) -> Vec<usize> {
        let mut nb = self.index.knn(self.positions[i], &self.positions, self.rule.k + 1, self.hcut());
        if let Some(pos) = nb.iter().position(|&j| j == i) {
            nb.remove(pos);
        }
        nb.truncate(self.rule.k);
        nb
    }

    /// Same octants, new point attributes (e.g. after an optimizer step).
    pub fn map_points(&self, f: impl Fn(&MlsPoint<T>) -> MlsPoint<T>) -> Result<Self> {
        let points = self.points.iter().map(f).collect();
        Ok(Self::with_octants(points, self.octants.clone(), self.depth)?.with_rule(self.rule))
    }
}

/// Result of evaluating the implicit function at one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImlsValue<T> {
    pub value: T,
    pub in_band: bool,
    pub weight_sum: T,
}

/// Gaussian weight `exp(-d^2 / r^2)`.
pub fn theta<T: Real>(d: T, r: T) -> Result<T> {
    if !(r > T::zero()) {
        return Err(Error::InvalidRadius(format!("weight radius must be positive, got {r}")));
    }
    Ok((-(d * d) / (r * r)).exp())
}

/// Shifted weights over a neighbor set: `exp(-(d_i^2/r_i^2 - m))` with `m`
/// the smallest exponent, so the largest weight is exactly one.
pub(crate) fn shifted_weights<T: Real>(x: Vec3<T>, mls: &MlsPointSet<T>, nb: &[usize]) -> (Vec<T>, T) {
    let pts = mls.points();
    let expo: Vec<T> = nb
        .iter()
        .map(|&i| {
            let p = &pts[i];
            p.position.distance_squared(x) / (p.radius * p.radius)
        })
        .collect();
    let m = expo.iter().copied().fold(T::infinity(), T::min);
    (expo.iter().map(|&e| (m - e).exp()).collect(), m)
}

/// Evaluates F over an explicit neighbor set.
pub fn eval_f_with<T: Real>(x: Vec3<T>, mls: &MlsPointSet<T>, nb: &[usize]) -> ImlsValue<T> {
    if nb.is_empty() {
        return ImlsValue { value: T::zero(), in_band: false, weight_sum: T::zero() };
    }
    let pts = mls.points();
    let (w, m) = shifted_weights(x, mls, nb);
    let mut num = T::zero();
    let mut den = T::zero();
    for (&i, &wi) in nb.iter().zip(&w) {
        num += wi * (x - pts[i].position).dot(pts[i].normal);
        den += wi;
    }
    let weight_sum = den * (-m).exp();
    ImlsValue { value: num / den, in_band: weight_sum > T::lit(WEIGHT_EPS), weight_sum }
}

/// Weighted blend of tangent-plane signed distances over Ω(x).
pub fn eval_f<T: Real>(x: Vec3<T>, mls: &MlsPointSet<T>) -> ImlsValue<T> {
    eval_f_with(x, mls, &mls.neighbors(x))
}

/// Weighted average of normals over an explicit neighbor set (unnormalized).
pub fn eval_grad_with<T: Real>(x: Vec3<T>, mls: &MlsPointSet<T>, nb: &[usize]) -> Result<Vec3<T>> {
    if !eval_f_with(x, mls, nb).in_band {
        return Err(Error::OutsideBand);
    }
    let pts = mls.points();
    let (w, _) = shifted_weights(x, mls, nb);
    let mut acc = Vec3::zero();
    let mut den = T::zero();
    for (&i, &wi) in nb.iter().zip(&w) {
        acc += pts[i].normal * wi;
        den += wi;
    }
    Ok(acc / den)
}

/// Approximate gradient of F: weighted average of neighbor normals.
pub fn eval_grad<T: Real>(x: Vec3<T>, mls: &MlsPointSet<T>) -> Result<Vec3<T>> {
    eval_grad_with(x, mls, &mls.neighbors(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: Vec3<f64>, n: Vec3<f64>, r: f64, depth: u32) -> MlsPointSet<f64> {
        MlsPointSet::from_oriented(&[p], &[n], &[r], depth).unwrap()
    }

    #[test]
    fn theta_values() {
        assert_eq!(theta(0.0f64, 1.0).unwrap(), 1.0);
        assert!((theta(1.0f64, 1.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!((theta(2.0f64, 1.0).unwrap() - 0.018_315_638_888_734_18).abs() < 1e-15);
        assert!(matches!(theta(1.0f64, 0.0), Err(Error::InvalidRadius(_))));
        assert!(theta(1.0f64, -2.0).is_err());
    }

    #[test]
    fn single_point_is_plane_distance() {
        let mls = single(Vec3::zero(), Vec3::unit_z(), 1.0, 1);
        let v = eval_f(Vec3::new(0.0, 0.0, 0.5), &mls);
        assert!(v.in_band);
        assert!((v.value - 0.5).abs() < 1e-15);
        assert!((v.weight_sum - (-0.25f64).exp()).abs() < 1e-15);
        assert_eq!(eval_grad(Vec3::new(0.1, 0.2, 0.3), &mls).unwrap(), Vec3::unit_z());
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let mls = MlsPointSet::from_oriented(
            &[Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            &[Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            &[1.0f64, 1.0],
            1,
        )
        .unwrap();
        let v = eval_f(Vec3::zero(), &mls);
        assert!((v.value + 1.0).abs() < 1e-15);
    }

    #[test]
    fn far_query_is_outside_band() {
        let mls = single(Vec3::new(-0.9, -0.9, -0.9), Vec3::unit_z(), 0.01, 6);
        let v = eval_f(Vec3::new(0.5, 0.5, 0.5), &mls);
        assert!(!v.in_band);
        assert!(matches!(eval_grad(Vec3::new(0.5, 0.5, 0.5), &mls), Err(Error::OutsideBand)));
        // inside the octant cutoff but beyond the weight support
        let v = eval_f(Vec3::new(-0.9, -0.9, -0.9 + 0.08), &mls);
        assert!(!v.in_band && v.weight_sum < 1e-12);
    }

    #[test]
    fn rejects_invalid_points() {
        let bad_normal = MlsPointSet::from_oriented(&[Vec3::zero()], &[Vec3::new(0.0, 0.0, 2.0f64)], &[0.1], 3);
        assert!(bad_normal.is_err());
        let bad_radius = MlsPointSet::from_oriented(&[Vec3::zero()], &[Vec3::unit_z()], &[0.0f64], 3);
        assert!(matches!(bad_radius, Err(Error::InvalidRadius(_))));
        let pts = vec![MlsPoint { position: Vec3::splat(0.9f64), normal: Vec3::unit_z(), radius: 0.1, octant: 0 }];
        assert!(MlsPointSet::with_octants(pts, vec![[0, 0, 0]], 4).is_err());
    }

    #[test]
    fn point_neighbors_exclude_self() {
        let mls = MlsPointSet::from_oriented(
            &[Vec3::zero(), Vec3::new(0.1, 0.0, 0.0f64), Vec3::new(0.0, 0.1, 0.0)],
            &[Vec3::unit_z(); 3],
            &[0.2; 3],
            3,
        )
        .unwrap();
        assert_eq!(mls.point_neighbors(0), vec![1, 2]);
        assert_eq!(mls.point_neighbors(2), vec![0, 1]);
    }

    #[test]
    fn works_in_single_precision() {
        let mls = MlsPointSet::<f32>::from_oriented(&[Vec3::zero()], &[Vec3::unit_z()], &[1.0], 1).unwrap();
        let v = eval_f(Vec3::new(0.0f32, 0.0, 0.25), &mls);
        assert!((v.value - 0.25).abs() < 1e-7);
    }
}
