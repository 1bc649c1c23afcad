//! Central finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::Vec3;
use crate::imls::{MlsPoint, MlsPointSet};
use crate::loss::{total_loss_frozen, FrozenNeighbors, LossWeights};
use crate::octree::{cell_of, SdfSample};

/// A small random configuration: noisy points on a sphere of radius 0.5 with
/// roughly radial normals, plus probes near the sphere.
pub struct GradCheckCase {
    pub mls: MlsPointSet<f64>,
    pub samples: Vec<SdfSample<f64>>,
}

pub fn random_case(seed: u64, points: usize, samples: usize) -> Result<GradCheckCase> {
    let depth = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(points);
    let mut hosts = Vec::with_capacity(points);
    for i in 0..points {
        let d = dir(&mut rng);
        let position = d * (0.5 + rng.random_range(-0.03..0.03));
        let normal = (d + dir(&mut rng) * 0.3).normalize();
        let radius = rng.random_range(0.06..0.16);
        hosts.push(cell_of(depth, position));
        pts.push(MlsPoint { position, normal, radius, octant: i });
    }
    let mls = MlsPointSet::with_octants(pts, hosts, depth)?;
    let samples = (0..samples)
        .map(|i| {
            let d = dir(&mut rng);
            let q = d * (0.5 + rng.random_range(-0.1..0.1));
            SdfSample { q, value: q.norm() - 0.5, gradient: d, level: if i % 2 == 0 { 6 } else { 7 } }
        })
        .collect();
    Ok(GradCheckCase { mls, samples })
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|analytic - fd| / max(|analytic|, |fd|)` among entries above the absolute floor.
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

/// Checks every position, radius and tangent-normal partial of the total loss
/// (with the given weights and frozen neighborhoods) against central differences.
/// Normal perturbations move along two tangent directions and renormalize.
pub fn check_gradients(case: &GradCheckCase, weights: &LossWeights<f64>, step: f64) -> Result<GradCheckReport> {
    let frozen = FrozenNeighbors::compute(&case.mls, &case.samples);
    let eval = |mls: &MlsPointSet<f64>| total_loss_frozen(mls, &case.samples, &frozen, None, &[], weights).map(|r| r.total);
    let base = total_loss_frozen(&case.mls, &case.samples, &frozen, None, &[], weights)?;
    let g = &base.gradients;
    let mut report = GradCheckReport { checked: 0, failures: 0, max_rel_err: 0.0, worst: String::new() };
    let n = case.mls.len();
    for i in 0..n {
        let p0 = case.mls.points()[i];
        let (t1, t2) = tangent_basis(p0.normal);
        let mut entries: Vec<(String, f64, Box<dyn Fn(f64) -> MlsPoint<f64>>)> = Vec::new();
        for axis in 0..3 {
            let mut e = [0.0; 3];
            e[axis] = 1.0;
            let e = Vec3::from_array(e);
            entries.push((format!("p[{i}].{axis}"), g.position[i][axis], Box::new(move |s| MlsPoint { position: p0.position + e * s, ..p0 })));
        }
        entries.push((format!("r[{i}]"), g.radius[i], Box::new(move |s| MlsPoint { radius: p0.radius + s, ..p0 })));
        for (k, t) in [t1, t2].into_iter().enumerate() {
            entries.push((
                format!("n[{i}].t{k}"),
                g.normal[i].dot(t),
                Box::new(move |s| MlsPoint { normal: (p0.normal + t * s).normalize(), ..p0 }),
            ));
        }
        for (name, analytic, perturb) in entries {
            let at = |s: f64| {
                let moved = perturb(s);
                case.mls.map_points(|p| if p.octant == p0.octant { moved } else { *p }).and_then(|m| eval(&m))
            };
            let fd = (at(step)? - at(-step)?) / (2.0 * step);
            let diff = (analytic - fd).abs();
            report.checked += 1;
            if diff <= ABS_FLOOR {
                continue;
            }
            let rel = diff / analytic.abs().max(fd.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}: analytic {analytic:e} fd {fd:e}");
            }
            if rel > REL_TOL {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

fn dir(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    loop {
        let v = Vec3::<f64>::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n2 = v.norm_squared();
        if n2 > 0.01 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

fn tangent_basis(n: Vec3<f64>) -> (Vec3<f64>, Vec3<f64>) {
    let a = if n.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
    let t1 = a.cross(n).normalize();
    (t1, n.cross(t1))
}

/// Weight sets isolating each differentiable term, then all of them together.
pub fn term_weight_sets() -> Vec<(&'static str, LossWeights<f64>)> {
    let z = LossWeights::zero();
    let d = LossWeights::default();
    vec![
        ("sdf", LossWeights { sdf_coarse: d.sdf_coarse, sdf_fine: d.sdf_fine, ..z }),
        ("grad", LossWeights { grad: d.grad, ..z }),
        ("rep", LossWeights { repulsion: d.repulsion, ..z }),
        ("proj", LossWeights { projection: d.projection, ..z }),
        ("rad", LossWeights { radius: d.radius, ..z }),
        ("all", d),
    ]
}
