//! Mesh comparison metrics: L1 Chamfer distance, normal consistency,
//! F-score and Monte-Carlo volumetric IoU.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sample_surface, Aabb, MeshQuery, TriangleMesh, Vec3};
use crate::kdtree::KdTree;
use crate::real::Real;
use crate::reduce::pairwise_sum;

/// Chamfer distances are reported multiplied by this.
pub const CD_SCALE: f64 = 10.0;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_SAMPLES: usize = 100_000;

fn require_nonempty<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("metric inputs must be nonempty".into()));
    }
    Ok(())
}

/// For every query point, the index of and distance to its nearest target.
pub fn nearest_all<T: Real>(queries: &[Vec3<T>], targets: &KdTree<T>) -> Vec<(usize, T)> {
    queries
        .par_iter()
        .map(|&q| {
            let (i, d2) = targets.nearest(q).expect("nonempty target set");
            (i, d2.sqrt())
        })
        .collect()
}

fn mean<T: Real>(v: &[T]) -> T {
    pairwise_sum(v) / T::from_usize_lossy(v.len())
}

/// Bidirectional mean nearest-neighbor distance,
/// `mean_x d(x, Y) / 2 + mean_y d(y, X) / 2` (unscaled).
pub fn chamfer_l1<T: Real>(x: &[Vec3<T>], y: &[Vec3<T>]) -> Result<T> {
    require_nonempty(x, y)?;
    let dx: Vec<T> = nearest_all(x, &KdTree::new(y)).into_iter().map(|(_, d)| d).collect();
    let dy: Vec<T> = nearest_all(y, &KdTree::new(x)).into_iter().map(|(_, d)| d).collect();
    Ok((mean(&dx) + mean(&dy)) / T::lit(2.0))
}

/// Mean `|<n(x), n(nearest(x))>|` in both directions.
pub fn normal_consistency<T: Real>(x: &[Vec3<T>], nx: &[Vec3<T>], y: &[Vec3<T>], ny: &[Vec3<T>]) -> Result<T> {
    require_nonempty(x, y)?;
    if x.len() != nx.len() || y.len() != ny.len() {
        return Err(Error::ShapeMismatch("one normal per point required".into()));
    }
    let one_way = |p: &[Vec3<T>], np: &[Vec3<T>], q: &[Vec3<T>], nq: &[Vec3<T>]| {
        let nn = nearest_all(p, &KdTree::new(q));
        let dots: Vec<T> = nn.iter().zip(np).map(|(&(j, _), n)| n.dot(nq[j]).abs().min(T::one())).collect();
        mean(&dots)
    };
    Ok((one_way(x, nx, y, ny) + one_way(y, ny, x, nx)) / T::lit(2.0))
}

/// F-score at threshold `tau` with `gt` as reference: precision is the fraction
/// of `pred` within `tau` of `gt`, recall the fraction of `gt` within `tau` of `pred`.
pub fn fscore<T: Real>(gt: &[Vec3<T>], pred: &[Vec3<T>], tau: T) -> Result<(T, T, T)> {
    if !(tau > T::zero()) {
        return Err(Error::Invalid("tau must be positive".into()));
    }
    require_nonempty(gt, pred)?;
    let frac = |p: &[Vec3<T>], q: &[Vec3<T>]| {
        let hits = nearest_all(p, &KdTree::new(q)).iter().filter(|(_, d)| *d < tau).count();
        T::from_usize_lossy(hits) / T::from_usize_lossy(p.len())
    };
    let precision = frac(pred, gt);
    let recall = frac(gt, pred);
    let s = precision + recall;
    let f = if s > T::zero() { T::lit(2.0) * precision * recall / s } else { T::zero() };
    Ok((f, precision, recall))
}

/// Monte-Carlo IoU of the solids bounded by two watertight meshes, sampled
/// uniformly in the union of their bounding boxes.
pub fn iou<T: Real>(a: &TriangleMesh<T>, b: &TriangleMesh<T>, samples: usize, seed: u64) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("IoU needs two nonempty meshes".into()));
    }
    let qa = MeshQuery::new(a)?;
    let qb = MeshQuery::new(b)?;
    qa.require_watertight()?;
    qb.require_watertight()?;
    let bounds = a.bounds().union(&b.bounds());
    let pts = box_samples(&bounds, samples, seed);
    let (mut inter, mut union) = (0usize, 0usize);
    let flags: Vec<(bool, bool)> = pts.par_iter().map(|&p| (qa.is_inside(p), qb.is_inside(p))).collect();
    for (ia, ib) in flags {
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    Ok(if union == 0 { T::zero() } else { T::from_usize_lossy(inter) / T::from_usize_lossy(union) })
}

fn box_samples<T: Real>(b: &Aabb<T>, n: usize, seed: u64) -> Vec<Vec3<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = b.extent();
    (0..n)
        .map(|_| {
            let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            b.min + Vec3::new(e.x * T::lit(u[0]), e.y * T::lit(u[1]), e.z * T::lit(u[2]))
        })
        .collect()
}

/// Options for [`evaluate_meshes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions<T> {
    pub surface_samples: usize,
    pub iou_samples: usize,
    pub tau: T,
    pub seed: u64,
    /// Skip IoU (e.g. for open predictions).
    pub with_iou: bool,
}

impl<T: Real> Default for MetricOptions<T> {
    fn default() -> Self {
        Self { surface_samples: DEFAULT_SAMPLES, iou_samples: DEFAULT_SAMPLES, tau: T::lit(DEFAULT_TAU), seed: 0, with_iou: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport<T> {
    pub cd1_raw: T,
    /// `cd1_raw * 10`.
    pub cd1: T,
    pub nc: T,
    pub iou: Option<T>,
    pub fscore: T,
    pub precision: T,
    pub recall: T,
    pub tau: T,
    pub gt_samples: usize,
    pub pred_samples: usize,
    pub iou_samples: usize,
    pub seed: u64,
}

impl<T: Real> MetricReport<T> {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let f = |v: T| format!("{:.9e}", v.as_f64());
        vec![
            ("cd1", f(self.cd1)),
            ("cd1_raw", f(self.cd1_raw)),
            ("nc", f(self.nc)),
            ("iou", self.iou.map_or_else(|| "nan".to_string(), f)),
            ("fscore", f(self.fscore)),
            ("precision", f(self.precision)),
            ("recall", f(self.recall)),
            ("tau", f(self.tau)),
            ("gt_samples", self.gt_samples.to_string()),
            ("pred_samples", self.pred_samples.to_string()),
            ("iou_samples", self.iou_samples.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// One `key value` pair per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} {v}");
        }
        s
    }

    /// Single line of `key=value` pairs.
    pub fn to_record(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// Samples both surfaces and computes every metric. Surface normals come
/// from the sampled faces.
pub fn evaluate_meshes<T: Real>(pred: &TriangleMesh<T>, gt: &TriangleMesh<T>, opts: &MetricOptions<T>) -> Result<MetricReport<T>> {
    let g = sample_surface(gt, opts.surface_samples, 0.0, opts.seed)?;
    let p = sample_surface(pred, opts.surface_samples, 0.0, opts.seed)?;
    let (gn, pn) = (g.normals.as_ref().unwrap(), p.normals.as_ref().unwrap());
    let cd1_raw = chamfer_l1(&g.points, &p.points)?;
    let nc = normal_consistency(&g.points, gn, &p.points, pn)?;
    let (fscore, precision, recall) = fscore(&g.points, &p.points, opts.tau)?;
    let iou = if opts.with_iou { Some(iou(pred, gt, opts.iou_samples, opts.seed.wrapping_add(2))?) } else { None };
    Ok(MetricReport {
        cd1_raw,
        cd1: cd1_raw * T::lit(CD_SCALE),
        nc,
        iou,
        fscore,
        precision,
        recall,
        tau: opts.tau,
        gt_samples: g.len(),
        pred_samples: p.len(),
        iou_samples: if opts.with_iou { opts.iou_samples } else { 0 },
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::icosphere;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn chamfer_reference_values() {
        let x = [v(0.0, 0.0, 0.0)];
        let y = [v(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_l1(&x, &y).unwrap(), 1.0);
        assert_eq!(chamfer_l1(&x, &x).unwrap(), 0.0);
        assert!(matches!(chamfer_l1(&x, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn normal_consistency_reference_values() {
        let p = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let n = [v(0.0, 0.0, 1.0), v(0.0, 1.0, 0.0)];
        let flipped = [v(0.0, 0.0, -1.0), v(0.0, -1.0, 0.0)];
        let ortho = [v(1.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        assert_eq!(normal_consistency(&p, &n, &p, &n).unwrap(), 1.0);
        assert_eq!(normal_consistency(&p, &n, &p, &flipped).unwrap(), 1.0);
        assert_eq!(normal_consistency(&p, &n, &p, &ortho).unwrap(), 0.0);
        assert!(normal_consistency(&p, &n[..1], &p, &n).is_err());
    }

    #[test]
    fn fscore_reference_values() {
        let x = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        assert_eq!(fscore(&x, &x, 0.1).unwrap(), (1.0, 1.0, 1.0));
        let far = [v(5.0, 0.0, 0.0)];
        assert_eq!(fscore(&x, &far, 0.1).unwrap(), (0.0, 0.0, 0.0));
        // half of pred near gt, all of gt covered
        let pred = [v(0.0, 0.0, 0.05), v(1.0, 0.0, 0.05), v(0.0, 3.0, 0.0), v(1.0, 3.0, 0.0)];
        let (f, p, r) = fscore(&x, &pred, 0.1).unwrap();
        assert_eq!((p, r), (0.5, 1.0));
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert!(fscore(&x, &x, 0.0).is_err());
    }

    #[test]
    fn iou_reference_values() {
        let a = icosphere(Vec3::zero(), 0.5f64, 3);
        assert_eq!(iou(&a, &a, 2000, 1).unwrap(), 1.0);
        let b = icosphere(v(0.0, 0.0, 0.0), 0.2, 2);
        let c = icosphere(v(1.0, 0.0, 0.0), 0.2, 2);
        assert_eq!(iou(&b, &c, 2000, 1).unwrap(), 0.0);
        let mut open = a.clone();
        open.triangles.truncate(open.triangles.len() / 2);
        assert!(matches!(iou(&open, &a, 100, 1), Err(Error::OpenMesh { .. })));
    }

    #[test]
    fn report_formats() {
        let a = icosphere(Vec3::zero(), 0.5f64, 2);
        let opts = MetricOptions { surface_samples: 500, iou_samples: 500, ..MetricOptions::default() };
        let r = evaluate_meshes(&a, &a, &opts).unwrap();
        assert!(r.cd1 < 0.5 && r.nc > 0.9 && r.iou == Some(1.0));
        assert_eq!(r.to_kv().lines().count(), 12);
        assert!(r.to_record().starts_with("cd1="));
        assert!(!r.to_record().contains('\n'));
    }
}
