//! Direct per-shape optimization of MLS point parameters against the loss suite.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::geometry::{SdfGrid, Vec3};
use crate::imls::{MlsPoint, MlsPointSet, BETA};
use crate::loss::{total_loss_frozen, FrozenNeighbors, LossReport, LossWeights};
use crate::octree::{generate_sdf_samples, Octree, SdfSample, SdfSampleSet, COARSE_LEVEL};
use crate::real::Real;

/// Raw scalars per MLS point: offset (3), normal (3), radius (1).
pub const RAW_PER_POINT: usize = 7;

pub const DEFAULT_BATCH: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig<T> {
    /// MLS points per finest octant.
    pub points_per_octant: usize,
    pub beta: T,
    pub lr: T,
    pub lr_decay: T,
    pub lr_decay_every: usize,
    pub lr_floor: T,
    /// Epochs on level-6 samples only.
    pub coarse_epochs: usize,
    /// Epochs on the union of both sample levels.
    pub fine_epochs: usize,
    pub weights: LossWeights<T>,
    /// Samples per optimizer step; `None` takes one full-batch step per epoch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl<T: Real> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            points_per_octant: 1,
            beta: T::lit(BETA),
            lr: T::lit(1e-3),
            lr_decay: T::lit(0.8),
            lr_decay_every: 10,
            lr_floor: T::lit(1e-4),
            coarse_epochs: 30,
            fine_epochs: 30,
            weights: LossWeights::default(),
            batch_size: Some(DEFAULT_BATCH),
            seed: 0,
        }
    }
}

impl<T: Real> FitConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_octant == 0 {
            return Err(Error::Invalid("points per octant must be at least 1".into()));
        }
        if !(self.beta > T::zero()) || !(self.lr > T::zero()) || !(self.lr_floor >= T::zero()) {
            return Err(Error::Invalid("beta and lr must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.lr_decay > T::zero() && self.lr_decay <= T::one()) {
            return Err(Error::Invalid("lr decay must lie in (0, 1]".into()));
        }
        self.weights.validate()
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> T {
        let mut lr = self.lr;
        if self.lr_decay_every > 0 {
            for _ in 0..epoch / self.lr_decay_every {
                lr = (lr * self.lr_decay).max(self.lr_floor);
            }
        }
        lr
    }

    pub fn total_epochs(&self) -> usize {
        self.coarse_epochs + self.fine_epochs
    }

    /// 1 during the coarse stage, 2 afterwards.
    pub fn stage_at(&self, epoch: usize) -> u8 {
        if epoch < self.coarse_epochs {
            1
        } else {
            2
        }
    }
}

/// Raw parameters for every (octant, slot) pair plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState<T> {
    pub points_per_octant: usize,
    /// `RAW_PER_POINT` scalars per point, point `k * s + l` for octant `k`, slot `l`.
    pub raw: Vec<T>,
    pub adam: Adam<T>,
    pub epoch: usize,
    /// Normals reset to +z because the raw vector vanished.
    pub normal_resets: usize,
}

impl<T: Real> FitState<T> {
    /// `u = 0`, `rho = 0`, `v` = SDF gradient at the octant center (or +z).
    /// With several points per octant the offsets get a small seeded jitter so
    /// the points are distinguishable.
    pub fn init(octree: &Octree<T>, sdf: Option<&SdfGrid<T>>, s: usize, seed: u64) -> Result<Self> {
        if s == 0 {
            return Err(Error::Invalid("points per octant must be at least 1".into()));
        }
        let oct = octree.finest();
        if oct.is_empty() {
            return Err(Error::EmptyInput("scaffold has no finest-level octants".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = Vec::with_capacity(oct.len() * s * RAW_PER_POINT);
        for o in oct {
            let n = sdf.and_then(|g| g.sample_gradient(o.center).try_normalize(T::lit(1e-12))).unwrap_or_else(Vec3::unit_z);
            for _ in 0..s {
                for _ in 0..3 {
                    raw.push(if s > 1 { T::lit(rng.random_range(-0.5..0.5)) } else { T::zero() });
                }
                raw.extend([n.x, n.y, n.z, T::zero()]);
            }
        }
        let adam = Adam::new(raw.len());
        Ok(Self { points_per_octant: s, raw, adam, epoch: 0, normal_resets: 0 })
    }

    pub fn num_points(&self) -> usize {
        self.raw.len() / RAW_PER_POINT
    }

    fn point_raw(&self, i: usize) -> &[T] {
        &self.raw[i * RAW_PER_POINT..(i + 1) * RAW_PER_POINT]
    }
}

/// Nominal radius `l_r = h / sqrt(s)`.
pub fn nominal_radius<T: Real>(h: T, s: usize) -> T {
    h / T::from_usize_lossy(s).sqrt()
}

/// Maps raw parameters to MLS points: `p = c + beta h tanh(u)`, `n = v / |v|`,
/// `r = 1.25 l_r + 0.75 l_r tanh(rho)`. Returns the set and the number of
/// normals reset to +z.
pub fn decode<T: Real>(state: &FitState<T>, octree: &Octree<T>, beta: T) -> Result<(MlsPointSet<T>, usize)> {
    let s = state.points_per_octant;
    let oct = octree.finest();
    if state.raw.len() != oct.len() * s * RAW_PER_POINT {
        return Err(Error::ShapeMismatch(format!(
            "state holds {} raw scalars, scaffold needs {}",
            state.raw.len(),
            oct.len() * s * RAW_PER_POINT
        )));
    }
    let h = octree.h();
    let lr = nominal_radius(h, s);
    let mut resets = 0;
    let mut pts = Vec::with_capacity(state.num_points());
    for i in 0..state.num_points() {
        let r = state.point_raw(i);
        let k = i / s;
        let t = Vec3::new(r[0].tanh(), r[1].tanh(), r[2].tanh()) * (beta * h);
        let normal = match Vec3::new(r[3], r[4], r[5]).try_normalize(T::lit(1e-12)) {
            Some(n) => n,
            None => {
                resets += 1;
                Vec3::unit_z()
            }
        };
        let radius = T::lit(1.25) * lr + T::lit(0.75) * lr * r[6].tanh();
        pts.push(MlsPoint { position: oct[k].center + t, normal, radius, octant: k });
    }
    Ok((MlsPointSet::new(pts, octree)?, resets))
}

/// Chains decoded-space gradients (normals already tangent-projected) back to raw parameters.
fn raw_gradient<T: Real>(state: &FitState<T>, octree: &Octree<T>, beta: T, report: &LossReport<T>) -> Vec<T> {
    let s = state.points_per_octant;
    let bh = beta * octree.h();
    let lr = nominal_radius(octree.h(), s);
    let one = T::one();
    let g = &report.gradients;
    let mut out = report.raw_gradient.clone();
    if out.is_empty() {
        out = vec![T::zero(); state.raw.len()];
    }
    for i in 0..state.num_points() {
        let r = state.point_raw(i);
        let o = &mut out[i * RAW_PER_POINT..(i + 1) * RAW_PER_POINT];
        for a in 0..3 {
            let th = r[a].tanh();
            o[a] += g.position[i][a] * bh * (one - th * th);
        }
        let vn = Vec3::new(r[3], r[4], r[5]).norm();
        if vn >= T::lit(1e-12) {
            for a in 0..3 {
                o[3 + a] += g.normal[i][a] / vn;
            }
        }
        let th = r[6].tanh();
        o[6] += g.radius[i] * T::lit(0.75) * lr * (one - th * th);
    }
    out
}

/// Loss values recorded for one epoch (before that epoch's update).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    pub stage: u8,
    pub lr: T,
    pub report: LossReport<T>,
}

impl<T: Real> EpochRecord<T> {
    /// `epoch total sdf grad rep proj rad wd lr stage`
    pub fn trace_line(&self) -> String {
        let t = &self.report.terms;
        let mut s = format!("{}", self.epoch);
        for v in [self.report.total, t.sdf, t.grad, t.repulsion, t.projection, t.radius, t.weight_decay, self.lr] {
            let _ = write!(s, " {:.9e}", v.as_f64());
        }
        let _ = write!(s, " {}", self.stage);
        s
    }
}

pub const TRACE_HEADER: &str = "epoch total sdf grad rep proj rad wd lr stage";

#[derive(Debug, Clone)]
pub struct FitOutput<T> {
    pub mls: MlsPointSet<T>,
    pub state: FitState<T>,
    pub trace: Vec<EpochRecord<T>>,
    /// Set when a non-finite loss stopped the fit; `state` and `mls` are then
    /// the last finite ones.
    pub diverged_at: Option<usize>,
}

impl<T: Real> FitOutput<T> {
    pub fn require_converged(&self) -> Result<()> {
        match self.diverged_at {
            Some(epoch) => Err(Error::Diverged { epoch }),
            None => Ok(()),
        }
    }

    pub fn trace_text(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.trace {
            s.push_str(&r.trace_line());
            s.push('\n');
        }
        s
    }
}

/// Total loss of a point set against a sample subset, neighborhoods taken
/// from the point set itself.
pub fn evaluate<T: Real>(mls: &MlsPointSet<T>, samples: &[SdfSample<T>], raw: &[T], weights: &LossWeights<T>) -> Result<LossReport<T>> {
    let frozen = FrozenNeighbors::compute(mls, samples);
    total_loss_frozen(mls, samples, &frozen, None, raw, weights)
}

/// Fits MLS points on `octree` to the two-level probe set derived from `sdf`.
pub fn fit<T: Real>(octree: &Octree<T>, sdf: &SdfGrid<T>, cfg: &FitConfig<T>) -> Result<FitOutput<T>> {
    let samples = generate_sdf_samples(sdf)?;
    let state = FitState::init(octree, Some(sdf), cfg.points_per_octant, cfg.seed)?;
    fit_from(octree, &samples, state, cfg, |_| {})
}

/// Runs the curriculum from an explicit state; `on_epoch` sees every record as it is produced.
pub fn fit_from<T: Real>(
    octree: &Octree<T>,
    samples: &SdfSampleSet<T>,
    mut state: FitState<T>,
    cfg: &FitConfig<T>,
    mut on_epoch: impl FnMut(&EpochRecord<T>),
) -> Result<FitOutput<T>> {
    cfg.validate()?;
    if state.points_per_octant != cfg.points_per_octant {
        return Err(Error::ShapeMismatch("state and config disagree on points per octant".into()));
    }
    let coarse: Vec<SdfSample<T>> = samples.samples.iter().filter(|s| s.level <= COARSE_LEVEL).copied().collect();
    let mut trace = Vec::with_capacity(cfg.total_epochs());
    let mut diverged_at = None;
    for epoch in 0..cfg.total_epochs() {
        let stage = cfg.stage_at(epoch);
        let batch: &[SdfSample<T>] = if stage == 1 { &coarse } else { &samples.samples };
        let (mls, resets) = decode(&state, octree, cfg.beta)?;
        if resets > 0 {
            state.normal_resets += resets;
            reset_vanished_normals(&mut state);
        }
        let report = evaluate(&mls, batch, &state.raw, &cfg.weights)?;
        let lr = cfg.lr_at(epoch);
        if !report.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        let full_grad = match cfg.batch_size {
            Some(b) if b < batch.len() => None,
            _ => Some(raw_gradient(&state, octree, cfg.beta, &report)),
        };
        let record = EpochRecord { epoch, stage, lr, report };
        on_epoch(&record);
        trace.push(record);
        let next = match full_grad {
            Some(grad) => adam_update(&state, &grad, lr),
            None => minibatch_pass(octree, batch, &state, cfg, epoch, lr)?,
        };
        match next {
            Some(mut next) => {
                next.epoch = epoch + 1;
                state = next;
            }
            None => {
                diverged_at = Some(epoch);
                break;
            }
        }
    }
    let (mls, _) = decode(&state, octree, cfg.beta)?;
    Ok(FitOutput { mls, state, trace, diverged_at })
}

/// One Adam step; `None` if the gradient or the result is not finite.
fn adam_update<T: Real>(state: &FitState<T>, grad: &[T], lr: T) -> Option<FitState<T>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    let mut next = state.clone();
    next.adam.step(&mut next.raw, grad, lr);
    next.raw.iter().all(|x| x.is_finite()).then_some(next)
}

/// One pass over `samples` in seeded random order, one Adam step per batch.
/// The SDF terms of a batch are scaled by `|samples| / |batch|` so every
/// step targets the full objective in expectation.
fn minibatch_pass<T: Real>(
    octree: &Octree<T>,
    samples: &[SdfSample<T>],
    state: &FitState<T>,
    cfg: &FitConfig<T>,
    epoch: usize,
    lr: T,
) -> Result<Option<FitState<T>>> {
    let size = cfg.batch_size.unwrap_or(samples.len()).max(1);
    let mut order: Vec<u32> = (0..samples.len() as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    let mut state = state.clone();
    for idx in order.chunks(size) {
        let batch: Vec<SdfSample<T>> = idx.iter().map(|&i| samples[i as usize]).collect();
        let scale = T::from_usize_lossy(samples.len()) / T::from_usize_lossy(batch.len());
        let w = LossWeights {
            sdf_coarse: cfg.weights.sdf_coarse * scale,
            sdf_fine: cfg.weights.sdf_fine * scale,
            grad: cfg.weights.grad * scale,
            ..cfg.weights
        };
        let (mls, _) = decode(&state, octree, cfg.beta)?;
        let report = evaluate(&mls, &batch, &state.raw, &w)?;
        if !report.is_finite() {
            return Ok(None);
        }
        let grad = raw_gradient(&state, octree, cfg.beta, &report);
        match adam_update(&state, &grad, lr) {
            Some(next) => state = next,
            None => return Ok(None),
        }
    }
    Ok(Some(state))
}

fn reset_vanished_normals<T: Real>(state: &mut FitState<T>) {
    for chunk in state.raw.chunks_mut(RAW_PER_POINT) {
        if Vec3::new(chunk[3], chunk[4], chunk[5]).try_normalize(T::lit(1e-12)).is_none() {
            chunk[3] = T::zero();
            chunk[4] = T::zero();
            chunk[5] = T::one();
        }
    }
}

/// Human-readable summary of a fit's first and last epochs.
pub fn summary<T: Real>(out: &FitOutput<T>) -> String {
    let mut s = String::new();
    if let (Some(a), Some(b)) = (out.trace.first(), out.trace.last()) {
        let _ = writeln!(s, "points {}", out.mls.len());
        let _ = writeln!(s, "epochs {}", out.trace.len());
        let _ = writeln!(s, "initial_total {:e}", a.report.total.as_f64());
        let _ = writeln!(s, "final_total {:e}", b.report.total.as_f64());
        let _ = writeln!(s, "normal_resets {}", out.state.normal_resets);
    }
    s
}
