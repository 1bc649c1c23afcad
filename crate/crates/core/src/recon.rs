//! Classical IMLS reconstruction: oriented input points used directly as MLS points.

use crate::error::{Error, Result};
use crate::geometry::OrientedPointCloud;
use crate::imls::MlsPointSet;
use crate::kdtree::KdTree;
use crate::real::Real;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_HOST_DEPTH: u32 = 6;
pub const MIN_RADIUS: f64 = 1e-4;
pub const MAX_RADIUS: f64 = 0.5;

/// Distance from each point to its `k`-th nearest other point, with `k`
/// clamped to the number of other points, then clamped to `[1e-4, 0.5]`.
pub fn knn_radii<T: Real>(points: &[crate::geometry::Vec3<T>], k: usize) -> Result<Vec<T>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let tree = KdTree::new(points);
    let k = k.min(points.len().saturating_sub(1));
    let (lo, hi) = (T::lit(MIN_RADIUS), T::lit(MAX_RADIUS));
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if k == 0 {
                return hi;
            }
            let nb = tree.knn(p, k + 1);
            let d2 = nb.iter().filter(|&&(j, _)| j != i).nth(k - 1).map_or(nb[k].1, |&(_, d)| d);
            d2.sqrt().max(lo).min(hi)
        })
        .collect())
}

/// MLS points hosted at `depth`, one per input point.
pub fn reconstruct<T: Real>(cloud: &OrientedPointCloud<T>, k: usize, depth: u32) -> Result<MlsPointSet<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud is empty".into()));
    }
    let normals = cloud.normals.as_ref().ok_or_else(|| Error::Invalid("point cloud has no normals".into()))?;
    let radii = knn_radii(&cloud.points, k)?;
    MlsPointSet::from_oriented(&cloud.points, normals, &radii, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn two_points_use_clamped_mutual_distance() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.3, 0.0, 0.4)];
        assert_eq!(knn_radii(&pts, 10).unwrap(), vec![0.5, 0.5]);
        let near = vec![Vec3::<f64>::new(0.0, 0.0, 0.0), Vec3::new(0.03, 0.0, 0.04)];
        let r = knn_radii(&near, 10).unwrap();
        assert!((r[0] - 0.05).abs() < 1e-15 && (r[1] - 0.05).abs() < 1e-15);
        let same = vec![Vec3::<f64>::new(0.1, 0.1, 0.1); 2];
        assert_eq!(knn_radii(&same, 1).unwrap(), vec![1e-4, 1e-4]);
    }

    #[test]
    fn kth_neighbor_excludes_self() {
        let pts: Vec<Vec3<f64>> = (0..6).map(|i| Vec3::new(0.01 * i as f64, 0.0, 0.0)).collect();
        let r = knn_radii(&pts, 2).unwrap();
        assert!((r[0] - 0.02).abs() < 1e-15);
        assert!((r[2] - 0.01).abs() < 1e-15);
        assert!(knn_radii(&pts, 0).is_err());
    }

    #[test]
    fn requires_normals() {
        let c = OrientedPointCloud::unoriented(vec![Vec3::new(0.0, 0.0, 0.0f64)]);
        assert!(matches!(reconstruct(&c, 10, 6), Err(Error::Invalid(_))));
        let c = OrientedPointCloud::new(vec![Vec3::new(0.2, 0.0, 0.0f64)], Some(vec![Vec3::unit_z()])).unwrap();
        let mls = reconstruct(&c, 10, 6).unwrap();
        assert_eq!(mls.len(), 1);
        assert_eq!(mls.points()[0].radius, 0.5);
    }
}
