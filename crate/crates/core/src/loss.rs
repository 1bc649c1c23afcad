//! Loss terms over an MLS point set and their analytic gradients.
//!
//! Bilateral weights `w_ij` and all neighbor sets are frozen for the duration
//! of one evaluation ([`FrozenNeighbors`]); the Gaussian weights inside the
//! implicit function are differentiated through.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::imls::{shifted_weights, MlsPointSet, WEIGHT_EPS};
use crate::octree::{morton_decode, Octree, SdfSample, SdfSampleSet, COARSE_LEVEL};
use crate::real::Real;
use crate::reduce::{pairwise_sum, CHUNK};

/// Coefficients of every loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub octree: T,
    /// SDF weight for level-6 samples.
    pub sdf_coarse: T,
    /// SDF weight for level-7 samples.
    pub sdf_fine: T,
    pub grad: T,
    pub repulsion: T,
    pub projection: T,
    pub radius: T,
    pub weight_decay: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            octree: T::lit(0.1),
            sdf_coarse: T::lit(200.0),
            sdf_fine: T::lit(800.0),
            grad: T::lit(0.05),
            repulsion: T::lit(0.05),
            projection: T::lit(10.0),
            radius: T::lit(10.0),
            weight_decay: T::lit(5e-5),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn zero() -> Self {
        let z = T::zero();
        Self { octree: z, sdf_coarse: z, sdf_fine: z, grad: z, repulsion: z, projection: z, radius: z, weight_decay: z }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.octree,
            self.sdf_coarse,
            self.sdf_fine,
            self.grad,
            self.repulsion,
            self.projection,
            self.radius,
            self.weight_decay,
        ];
        if all.iter().all(|w| *w >= T::zero() && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid("loss weights must be finite and non-negative".into()))
        }
    }

    /// SDF weight for a sample level.
    pub fn sdf_weight(&self, level: u8) -> T {
        if level <= COARSE_LEVEL {
            self.sdf_coarse
        } else {
            self.sdf_fine
        }
    }
}

/// Per-point partial derivatives (positions, normals, radii).
#[derive(Debug, Clone, PartialEq)]
pub struct PointGradients<T> {
    pub position: Vec<Vec3<T>>,
    pub normal: Vec<Vec3<T>>,
    pub radius: Vec<T>,
}

impl<T: Real> PointGradients<T> {
    pub fn zeros(n: usize) -> Self {
        Self { position: vec![Vec3::zero(); n], normal: vec![Vec3::zero(); n], radius: vec![T::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn add_assign(&mut self, o: &Self) {
        for i in 0..self.len() {
            self.position[i] += o.position[i];
            self.normal[i] += o.normal[i];
            self.radius[i] += o.radius[i];
        }
    }

    fn apply(&mut self, c: &Contribution<T>) {
        let i = c.index as usize;
        self.position[i] += c.position;
        self.normal[i] += c.normal;
        self.radius[i] += c.radius;
    }

    pub fn all_finite(&self) -> bool {
        self.position.iter().chain(&self.normal).all(|v| v.is_finite()) && self.radius.iter().all(|r| r.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct Contribution<T> {
    index: u32,
    position: Vec3<T>,
    normal: Vec3<T>,
    radius: T,
}

/// Neighbor sets and bilateral weights held fixed across one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNeighbors<T> {
    /// Ω(q) for every SDF sample.
    pub samples: Vec<Vec<u32>>,
    /// Ω(p_i) \ {i} for every MLS point.
    pub points: Vec<Vec<u32>>,
    /// `w_ij` aligned with `points`.
    pub bilateral: Vec<Vec<T>>,
}

impl<T: Real> FrozenNeighbors<T> {
    pub fn compute(mls: &MlsPointSet<T>, samples: &[SdfSample<T>]) -> Self {
        let sample_nb = samples.par_iter().map(|s| to_u32(mls.neighbors(s.q))).collect();
        let mut out = Self::for_points(mls);
        out.samples = sample_nb;
        out
    }

    /// Point neighborhoods only (no samples).
    pub fn for_points(mls: &MlsPointSet<T>) -> Self {
        let points: Vec<Vec<u32>> = (0..mls.len()).into_par_iter().map(|i| to_u32(mls.point_neighbors(i))).collect();
        let bilateral = bilateral_weights(mls, &points);
        Self { samples: Vec::new(), points, bilateral }
    }

    /// Recomputes `w_ij` for the stored point neighborhoods.
    pub fn refresh_bilateral(&mut self, mls: &MlsPointSet<T>) {
        self.bilateral = bilateral_weights(mls, &self.points);
    }
}

fn to_u32(v: Vec<usize>) -> Vec<u32> {
    v.into_iter().map(|i| i as u32).collect()
}

/// `w_ij = exp(-|p_i - p_j|^2 / r_j^2 - (1 - <n_i, n_j>))`; not symmetric in i, j.
pub fn bilateral_weight<T: Real>(pi: Vec3<T>, ni: Vec3<T>, pj: Vec3<T>, nj: Vec3<T>, rj: T) -> T {
    (-(pi.distance_squared(pj) / (rj * rj)) - (T::one() - ni.dot(nj))).exp()
}

fn bilateral_weights<T: Real>(mls: &MlsPointSet<T>, nb: &[Vec<u32>]) -> Vec<Vec<T>> {
    let pts = mls.points();
    nb.par_iter()
        .enumerate()
        .map(|(i, js)| {
            js.iter()
                .map(|&j| {
                    let (a, b) = (&pts[i], &pts[j as usize]);
                    bilateral_weight(a.position, a.normal, b.position, b.normal, b.radius)
                })
                .collect()
        })
        .collect()
}

/// A loss value with its gradient table.
#[derive(Debug, Clone, PartialEq)]
pub struct TermResult<T> {
    pub value: T,
    pub gradients: PointGradients<T>,
}

/// Result of the SDF term, split into its value and gradient-alignment parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfTermResult<T> {
    /// `sum lambda_s (F - F_o)^2`.
    pub value: T,
    /// `sum lambda_g |1 - grad F . grad F_o|`.
    pub alignment: T,
    pub skipped: usize,
    pub gradients: PointGradients<T>,
}

impl<T: Real> SdfTermResult<T> {
    pub fn total(&self) -> T {
        self.value + self.alignment
    }
}

struct SampleEval<T> {
    value: T,
    alignment: T,
    in_band: bool,
    contributions: Vec<Contribution<T>>,
}

fn eval_sample<T: Real>(mls: &MlsPointSet<T>, s: &SdfSample<T>, nb: &[u32], w: &LossWeights<T>) -> SampleEval<T> {
    let skipped = SampleEval { value: T::zero(), alignment: T::zero(), in_band: false, contributions: Vec::new() };
    if nb.is_empty() {
        return skipped;
    }
    let idx: Vec<usize> = nb.iter().map(|&i| i as usize).collect();
    let (wt, m) = shifted_weights(s.q, mls, &idx);
    let den: T = wt.iter().copied().sum();
    if !(den * (-m).exp() > T::lit(WEIGHT_EPS)) {
        return skipped;
    }
    let pts = mls.points();
    let g = s.gradient;
    let mut f = T::zero();
    let mut a = T::zero();
    for (&i, &wi) in idx.iter().zip(&wt) {
        let p = &pts[i];
        f += wi * (s.q - p.position).dot(p.normal);
        a += wi * p.normal.dot(g);
    }
    f /= den;
    a /= den;
    let lambda_s = w.sdf_weight(s.level);
    let diff = f - s.value;
    let value = lambda_s * diff * diff;
    let gap = T::one() - a;
    let alignment = w.grad * gap.abs();
    let dl_df = T::lit(2.0) * lambda_s * diff;
    let dl_da = -w.grad * sign(gap);
    let two = T::lit(2.0);
    let contributions = idx
        .iter()
        .zip(&wt)
        .map(|(&i, &wi)| {
            let p = &pts[i];
            let d = s.q - p.position;
            let r2 = p.radius * p.radius;
            let si = d.dot(p.normal);
            let share = wi / den;
            let c = (dl_df * (si - f) + dl_da * (p.normal.dot(g) - a)) / den;
            Contribution {
                index: i as u32,
                position: d * (c * wi * two / r2) - p.normal * (dl_df * share),
                normal: d * (dl_df * share) + g * (dl_da * share),
                radius: c * wi * two * d.norm_squared() / (r2 * p.radius),
            }
        })
        .collect();
    SampleEval { value, alignment, in_band: true, contributions }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Number of sample chunks evaluated concurrently before scattering.
const SUPER_BATCH: usize = 64;

/// SDF fitting term with frozen sample neighborhoods. Samples outside the
/// band are skipped and counted.
pub fn sdf_loss_frozen<T: Real>(
    mls: &MlsPointSet<T>,
    samples: &[SdfSample<T>],
    nb: &[Vec<u32>],
    w: &LossWeights<T>,
) -> Result<SdfTermResult<T>> {
    if nb.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!("{} neighbor sets for {} samples", nb.len(), samples.len())));
    }
    let mut grads = PointGradients::zeros(mls.len());
    let mut values = Vec::with_capacity(samples.len());
    let mut aligns = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    let chunks: Vec<(usize, usize)> = (0..samples.len()).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(samples.len()))).collect();
    for batch in chunks.chunks(SUPER_BATCH) {
        let evals: Vec<Vec<SampleEval<T>>> = batch
            .par_iter()
            .map(|&(lo, hi)| (lo..hi).map(|k| eval_sample(mls, &samples[k], &nb[k], w)).collect())
            .collect();
        for chunk in evals {
            for e in chunk {
                if !e.in_band {
                    skipped += 1;
                }
                values.push(e.value);
                aligns.push(e.alignment);
                for c in &e.contributions {
                    grads.apply(c);
                }
            }
        }
    }
    Ok(SdfTermResult { value: pairwise_sum(&values), alignment: pairwise_sum(&aligns), skipped, gradients: grads })
}

/// SDF fitting term with neighborhoods taken from the current point set.
pub fn sdf_loss<T: Real>(mls: &MlsPointSet<T>, samples: &SdfSampleSet<T>, w: &LossWeights<T>) -> Result<SdfTermResult<T>> {
    let nb: Vec<Vec<u32>> = samples.samples.par_iter().map(|s| to_u32(mls.neighbors(s.q))).collect();
    sdf_loss_frozen(mls, &samples.samples, &nb, w)
}

/// Runs `per_point` for every MLS point (in parallel), then scatters the
/// contributions in point order.
fn point_term<T: Real>(
    mls: &MlsPointSet<T>,
    frozen: &FrozenNeighbors<T>,
    per_point: impl Fn(usize, &[u32], &[T]) -> (T, Vec<Contribution<T>>) + Sync,
) -> Result<TermResult<T>> {
    if frozen.points.len() != mls.len() || frozen.bilateral.len() != mls.len() {
        return Err(Error::ShapeMismatch("frozen neighborhoods do not match the point set".into()));
    }
    let evals: Vec<(T, Vec<Contribution<T>>)> = (0..mls.len())
        .into_par_iter()
        .map(|i| per_point(i, &frozen.points[i], &frozen.bilateral[i]))
        .collect();
    let mut gradients = PointGradients::zeros(mls.len());
    let mut values = Vec::with_capacity(evals.len());
    for (v, cs) in &evals {
        values.push(*v);
        for c in cs {
            gradients.apply(c);
        }
    }
    Ok(TermResult { value: pairwise_sum(&values), gradients })
}

/// `lambda_rep * sum_i sum_j -w_ij |(I - n_i n_i^T)(p_i - p_j)|`.
pub fn repulsion_loss_frozen<T: Real>(mls: &MlsPointSet<T>, frozen: &FrozenNeighbors<T>, w: &LossWeights<T>) -> Result<TermResult<T>> {
    let pts = mls.points();
    let lambda = w.repulsion;
    point_term(mls, frozen, |i, nb, wij| {
        let (pi, ni) = (pts[i].position, pts[i].normal);
        let mut value = T::zero();
        let mut out = Vec::with_capacity(2 * nb.len());
        let mut gi = Contribution { index: i as u32, position: Vec3::zero(), normal: Vec3::zero(), radius: T::zero() };
        for (&j, &wj) in nb.iter().zip(wij) {
            let v = pi - pts[j as usize].position;
            let nv = ni.dot(v);
            let u = v - ni * nv;
            let len = u.norm();
            value -= wj * len;
            if len > T::zero() {
                let scale = -lambda * wj / len;
                // d|u|/dv = P u / |u|, d|u|/dn = -(n.v) u - (u.n) v, all over |u|
                let dv = (u - ni * ni.dot(u)) * scale;
                gi.position += dv;
                gi.normal += (u * (-nv) - v * u.dot(ni)) * scale;
                out.push(Contribution { index: j, position: -dv, normal: Vec3::zero(), radius: T::zero() });
            }
        }
        out.push(gi);
        (lambda * value, out)
    })
}

/// `lambda_p * sum_i sum_j w_ij <n_i, p_i - p_j>^2`.
pub fn projection_loss_frozen<T: Real>(mls: &MlsPointSet<T>, frozen: &FrozenNeighbors<T>, w: &LossWeights<T>) -> Result<TermResult<T>> {
    let pts = mls.points();
    let lambda = w.projection;
    let two = T::lit(2.0);
    point_term(mls, frozen, |i, nb, wij| {
        let (pi, ni) = (pts[i].position, pts[i].normal);
        let mut value = T::zero();
        let mut out = Vec::with_capacity(nb.len() + 1);
        let mut gi = Contribution { index: i as u32, position: Vec3::zero(), normal: Vec3::zero(), radius: T::zero() };
        for (&j, &wj) in nb.iter().zip(wij) {
            let v = pi - pts[j as usize].position;
            let e = ni.dot(v);
            value += wj * e * e;
            let s = two * lambda * wj * e;
            gi.position += ni * s;
            gi.normal += v * s;
            out.push(Contribution { index: j, position: ni * (-s), normal: Vec3::zero(), radius: T::zero() });
        }
        out.push(gi);
        (lambda * value, out)
    })
}

/// `lambda_r * sum_i (r_i - sum_j w_ij r_j / sum_j w_ij)^2`; neighborless points contribute 0.
pub fn radius_loss_frozen<T: Real>(mls: &MlsPointSet<T>, frozen: &FrozenNeighbors<T>, w: &LossWeights<T>) -> Result<TermResult<T>> {
    let pts = mls.points();
    let lambda = w.radius;
    let two = T::lit(2.0);
    point_term(mls, frozen, |i, nb, wij| {
        let total: T = wij.iter().copied().sum();
        if nb.is_empty() || !(total > T::zero()) {
            return (T::zero(), Vec::new());
        }
        let mean = nb.iter().zip(wij).map(|(&j, &wj)| wj * pts[j as usize].radius).sum::<T>() / total;
        let delta = pts[i].radius - mean;
        let s = two * lambda * delta;
        let mut out: Vec<Contribution<T>> = nb
            .iter()
            .zip(wij)
            .map(|(&j, &wj)| Contribution { index: j, position: Vec3::zero(), normal: Vec3::zero(), radius: -s * wj / total })
            .collect();
        out.push(Contribution { index: i as u32, position: Vec3::zero(), normal: Vec3::zero(), radius: s });
        (lambda * delta * delta, out)
    })
}

pub fn repulsion_loss<T: Real>(mls: &MlsPointSet<T>, w: &LossWeights<T>) -> Result<TermResult<T>> {
    repulsion_loss_frozen(mls, &FrozenNeighbors::for_points(mls), w)
}

pub fn projection_loss<T: Real>(mls: &MlsPointSet<T>, w: &LossWeights<T>) -> Result<TermResult<T>> {
    projection_loss_frozen(mls, &FrozenNeighbors::for_points(mls), w)
}

pub fn radius_loss<T: Real>(mls: &MlsPointSet<T>, w: &LossWeights<T>) -> Result<TermResult<T>> {
    radius_loss_frozen(mls, &FrozenNeighbors::for_points(mls), w)
}

/// Per-octant occupancy logits and ground-truth labels for one octree level.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyPrediction<T> {
    pub level: u32,
    pub logits: Vec<T>,
    pub labels: Vec<u8>,
}

impl<T: Real> OccupancyPrediction<T> {
    pub fn new(level: u32, logits: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if logits.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} logits for {} labels", logits.len(), labels.len())));
        }
        Ok(Self { level, logits, labels })
    }
}

/// Labels for levels `3..=depth`: the octants at level `j` are the children of
/// non-empty level `j-1` octants, labelled 1 when non-empty. Returns
/// `(level, keys, labels)` triples.
pub fn occupancy_targets<T: Real>(octree: &Octree<T>) -> Vec<(u32, Vec<u64>, Vec<u8>)> {
    (3..=octree.depth())
        .map(|level| {
            let keys: Vec<u64> = octree.level(level - 1).iter().flat_map(|&k| (0..8).map(move |c| (k << 3) | c)).collect();
            let labels = keys.iter().map(|&k| u8::from(octree.is_occupied(level, k))).collect();
            debug_assert!(keys.iter().all(|&k| morton_decode(k).iter().all(|&c| c < (1 << level))));
            (level, keys, labels)
        })
        .collect()
}

/// Numerically stable sigmoid cross-entropy on a logit.
pub fn sigmoid_cross_entropy<T: Real>(logit: T, label: u8) -> T {
    let y = if label != 0 { T::one() } else { T::zero() };
    logit.max(T::zero()) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// `lambda_o * sum_levels mean_octants cross_entropy(sigmoid(logit), label)`.
pub fn octree_structure_loss<T: Real>(pred: &[OccupancyPrediction<T>], w: &LossWeights<T>) -> Result<T> {
    let mut per_level = Vec::with_capacity(pred.len());
    for p in pred {
        if p.logits.len() != p.labels.len() {
            return Err(Error::ShapeMismatch(format!("level {}: {} logits for {} labels", p.level, p.logits.len(), p.labels.len())));
        }
        if p.logits.is_empty() {
            continue;
        }
        let ce: Vec<T> = p.logits.iter().zip(&p.labels).map(|(&x, &y)| sigmoid_cross_entropy(x, y)).collect();
        per_level.push(pairwise_sum(&ce) / T::from_usize_lossy(ce.len()));
    }
    Ok(w.octree * pairwise_sum(&per_level))
}

/// Named values of every term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms<T> {
    pub octree: T,
    pub sdf: T,
    pub grad: T,
    pub repulsion: T,
    pub projection: T,
    pub radius: T,
    pub weight_decay: T,
}

impl<T: Real> LossTerms<T> {
    pub fn total(&self) -> T {
        pairwise_sum(&[self.octree, self.sdf, self.grad, self.repulsion, self.projection, self.radius, self.weight_decay])
    }
}

/// Every term, the total, and the gradient table.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub terms: LossTerms<T>,
    pub total: T,
    /// Gradients with respect to decoded positions, normals (projected onto
    /// the tangent space of the unit sphere at `n_i`) and radii.
    pub gradients: PointGradients<T>,
    /// `d(weight decay)/d(raw)` aligned with the raw parameter slice.
    pub raw_gradient: Vec<T>,
    pub skipped_samples: usize,
    pub samples: usize,
}

impl<T: Real> LossReport<T> {
    /// Flat `key value` block, one pair per line.
    pub fn to_kv(&self) -> String {
        let t = &self.terms;
        let mut s = String::new();
        for (k, v) in [
            ("total", self.total),
            ("octree", t.octree),
            ("sdf", t.sdf),
            ("grad", t.grad),
            ("rep", t.repulsion),
            ("proj", t.projection),
            ("rad", t.radius),
            ("wd", t.weight_decay),
        ] {
            let _ = writeln!(s, "{k} {:e}", v.as_f64());
        }
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "skipped {}", self.skipped_samples);
        s
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.gradients.all_finite() && self.raw_gradient.iter().all(|g| g.is_finite())
    }
}

/// Projects each normal gradient onto the tangent plane at the matching normal.
pub fn project_normal_gradients<T: Real>(mls: &MlsPointSet<T>, g: &mut PointGradients<T>) {
    for (gn, p) in g.normal.iter_mut().zip(mls.points()) {
        *gn = *gn - p.normal * p.normal.dot(*gn);
    }
}

/// All terms with explicit frozen neighborhoods.
pub fn total_loss_frozen<T: Real>(
    mls: &MlsPointSet<T>,
    samples: &[SdfSample<T>],
    frozen: &FrozenNeighbors<T>,
    pred: Option<&[OccupancyPrediction<T>]>,
    raw_params: &[T],
    w: &LossWeights<T>,
) -> Result<LossReport<T>> {
    w.validate()?;
    let sdf = sdf_loss_frozen(mls, samples, &frozen.samples, w)?;
    let rep = repulsion_loss_frozen(mls, frozen, w)?;
    let proj = projection_loss_frozen(mls, frozen, w)?;
    let rad = radius_loss_frozen(mls, frozen, w)?;
    let octree = match pred {
        Some(p) => octree_structure_loss(p, w)?,
        None => T::zero(),
    };
    let sq: Vec<T> = raw_params.iter().map(|&x| x * x).collect();
    let weight_decay = w.weight_decay * pairwise_sum(&sq);
    let raw_gradient = raw_params.iter().map(|&x| T::lit(2.0) * w.weight_decay * x).collect();
    let terms = LossTerms {
        octree,
        sdf: sdf.value,
        grad: sdf.alignment,
        repulsion: rep.value,
        projection: proj.value,
        radius: rad.value,
        weight_decay,
    };
    let mut gradients = sdf.gradients;
    gradients.add_assign(&rep.gradients);
    gradients.add_assign(&proj.gradients);
    gradients.add_assign(&rad.gradients);
    project_normal_gradients(mls, &mut gradients);
    Ok(LossReport { total: terms.total(), terms, gradients, raw_gradient, skipped_samples: sdf.skipped, samples: samples.len() })
}

/// All terms with neighborhoods computed from the current point set.
pub fn total_loss<T: Real>(
    mls: &MlsPointSet<T>,
    samples: &SdfSampleSet<T>,
    pred: Option<&[OccupancyPrediction<T>]>,
    raw_params: &[T],
    w: &LossWeights<T>,
) -> Result<LossReport<T>> {
    let frozen = FrozenNeighbors::compute(mls, &samples.samples);
    total_loss_frozen(mls, &samples.samples, &frozen, pred, raw_params, w)
}
