//! Self-supervised training objective.
//!
//! Four terms are evaluated on a batch of space-time samples `(X, t)`:
//!
//! * image: squared error between the predicted and observed intensity;
//! * motion: one-step intensity constancy and forward/backward round trip;
//! * cycle: intensity and summed displacement after composing one full
//!   period, on a sub-batch;
//! * reg: L1 size and forward/backward agreement of the displacements.
//!
//! Each term is a mean over its samples. The total is
//! `alpha1 * image + motion + cycle + alpha3 * reg`; `alpha1` and `alpha2`
//! also weight the intensity and coordinate parts inside motion and cycle.
//!
//! The batch is processed in fixed-size chunks whose partial sums are
//! reduced in chunk order, so results do not depend on the thread count.

use std::ops::Range;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Activations, FieldParams, GradientBundle};
use crate::geometry::{phase, GUARD_HI, GUARD_LO};
use crate::parallel::{map_ranges, Exec};
use crate::real::Real;

pub const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 0.1,
            alpha3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Switches for the ablation variants. The two constraint flags remove the
/// intensity or coordinate parts of both the motion and the cycle term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub image: bool,
    pub motion: bool,
    pub cycle: bool,
    pub reg: bool,
    pub intensity_constraint: bool,
    pub coordinate_constraint: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            image: true,
            motion: true,
            cycle: true,
            reg: true,
            intensity_constraint: true,
            coordinate_constraint: true,
        }
    }
}

impl LossTerms {
    pub fn only_image() -> Self {
        LossTerms {
            motion: false,
            cycle: false,
            reg: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub terms: LossTerms,
    /// Frames per cardiac cycle.
    pub period: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub image: f64,
    pub motion: f64,
    pub cycle: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn check(&self) -> Result<()> {
        for (term, v) in [
            ("image", self.image),
            ("motion", self.motion),
            ("cycle", self.cycle),
            ("reg", self.reg),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: term.into() });
            }
        }
        Ok(())
    }
}

/// Training samples. `targets` holds the observed intensity at each
/// sample; `in_cycle` marks the cycle sub-batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub positions: Vec<[f64; 3]>,
    pub frames: Vec<i64>,
    pub targets: Vec<f64>,
    pub in_cycle: Vec<bool>,
}

impl Batch {
    pub fn new(positions: Vec<[f64; 3]>, frames: Vec<i64>, targets: Vec<f64>, cycle_stride: usize) -> Result<Self> {
        let n = positions.len();
        if frames.len() != n || targets.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "batch of {n} positions with {} frames and {} targets",
                frames.len(),
                targets.len()
            )));
        }
        let stride = cycle_stride.max(1);
        Ok(Batch {
            positions,
            frames,
            targets,
            in_cycle: (0..n).map(|i| i % stride == 0).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn cycle_len(&self) -> usize {
        self.in_cycle.iter().filter(|&&c| c).count()
    }
}

/// Which derivatives to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Want {
    pub params: bool,
    /// Derivative with respect to each sample position, used for view poses.
    pub positions: bool,
}

impl Want {
    pub const NOTHING: Want = Want {
        params: false,
        positions: false,
    };
    pub const PARAMS: Want = Want {
        params: true,
        positions: false,
    };
    pub const ALL: Want = Want {
        params: true,
        positions: true,
    };
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub breakdown: LossBreakdown,
    pub grads: Option<GradientBundle<F>>,
    pub d_positions: Option<Vec<[f64; 3]>>,
    /// Cycle samples whose composed path left the guard box.
    pub diverged: usize,
}

/// Evaluate the objective and, optionally, its gradients.
pub fn evaluate<F: Real>(
    params: &FieldParams<F>,
    batch: &Batch,
    cfg: &LossConfig,
    want: Want,
    exec: Exec,
) -> Result<LossOutput<F>> {
    cfg.weights.validate()?;
    if cfg.period < 2 {
        return Err(Error::InvalidConfig("loss needs a period of at least 2".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidData("empty batch".into()));
    }
    let n = batch.len();
    let n_cycle = batch.cycle_len();
    let scales = Scales {
        batch: 1.0 / n as f64,
        cycle: if n_cycle > 0 { 1.0 / n_cycle as f64 } else { 0.0 },
    };
    let parts = map_ranges(exec, n, CHUNK, |r| chunk_loss(params, batch, r, cfg, want, scales));

    let mut sums = [0.0; 4];
    let mut diverged = 0;
    let mut grads = want.params.then(GradientBundle::zeros);
    let mut d_positions = want.positions.then(|| Vec::with_capacity(n));
    for part in parts {
        for (s, p) in sums.iter_mut().zip(part.sums) {
            *s += p;
        }
        diverged += part.diverged;
        if let (Some(g), Some(pg)) = (grads.as_mut(), part.grads.as_ref()) {
            g.add_assign(pg);
        }
        if let (Some(d), Some(pd)) = (d_positions.as_mut(), part.d_x0.as_ref()) {
            d.extend(pd.rows().into_iter().map(|r| [r[0].f64(), r[1].f64(), r[2].f64()]));
        }
    }
    let w = cfg.weights;
    let mut b = LossBreakdown {
        image: sums[0] * scales.batch,
        motion: sums[1] * scales.batch,
        cycle: sums[2] * scales.cycle,
        reg: sums[3] * scales.batch,
        total: 0.0,
    };
    b.total = w.alpha1 * b.image + b.motion + b.cycle + w.alpha3 * b.reg;
    b.check()?;
    if let Some(g) = &grads {
        if !g.is_finite() {
            return Err(Error::NonFinite { term: "gradient".into() });
        }
    }
    Ok(LossOutput {
        breakdown: b,
        grads,
        d_positions,
        diverged,
    })
}

fn single_term<F: Real>(params: &FieldParams<F>, batch: &Batch, cfg: &LossConfig, pick: fn(&mut LossTerms)) -> Result<LossBreakdown> {
    let mut terms = LossTerms {
        image: false,
        motion: false,
        cycle: false,
        reg: false,
        ..cfg.terms
    };
    pick(&mut terms);
    let cfg = LossConfig { terms, ..*cfg };
    Ok(evaluate(params, batch, &cfg, Want::NOTHING, Exec::default())?.breakdown)
}

/// Mean squared intensity error.
pub fn image_loss<F: Real>(params: &FieldParams<F>, batch: &Batch, cfg: &LossConfig) -> Result<f64> {
    Ok(single_term(params, batch, cfg, |t| t.image = true)?.image)
}

pub fn motion_consistency_loss<F: Real>(params: &FieldParams<F>, batch: &Batch, cfg: &LossConfig) -> Result<f64> {
    Ok(single_term(params, batch, cfg, |t| t.motion = true)?.motion)
}

pub fn cycle_consistency_loss<F: Real>(params: &FieldParams<F>, batch: &Batch, cfg: &LossConfig) -> Result<f64> {
    Ok(single_term(params, batch, cfg, |t| t.cycle = true)?.cycle)
}

pub fn regularization_loss<F: Real>(params: &FieldParams<F>, batch: &Batch, cfg: &LossConfig) -> Result<f64> {
    Ok(single_term(params, batch, cfg, |t| t.reg = true)?.reg)
}

pub fn total_loss<F: Real>(params: &FieldParams<F>, batch: &Batch, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(evaluate(params, batch, cfg, Want::NOTHING, Exec::default())?.breakdown)
}

#[derive(Debug, Clone, Copy)]
struct Scales {
    batch: f64,
    cycle: f64,
}

struct ChunkOut<F> {
    sums: [f64; 4],
    grads: Option<GradientBundle<F>>,
    d_x0: Option<Array2<F>>,
    diverged: usize,
}

fn positions_array<F: Real>(pts: &[[f64; 3]]) -> Array2<F> {
    Array2::from_shape_fn((pts.len(), 3), |(i, c)| F::of(pts[i][c]))
}

fn phases<F: Real>(frames: &[i64], offset: i64, period: usize) -> Array1<F> {
    Array1::from_iter(frames.iter().map(|&t| F::of(phase(t + offset, period))))
}

#[inline]
fn sgn<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Squared distance from `x` to the guard box and its gradient.
fn guard_penalty(x: [f64; 3]) -> (f64, [f64; 3]) {
    let mut d2 = 0.0;
    let mut g = [0.0; 3];
    for c in 0..3 {
        let e = x[c] - x[c].clamp(GUARD_LO, GUARD_HI);
        d2 += e * e;
        g[c] = 2.0 * e;
    }
    (d2, g)
}

fn motion_of<F: Real>(acts: &Activations<F>, forward: bool) -> &Array2<F> {
    if forward {
        &acts.forward
    } else {
        &acts.backward
    }
}

/// Reverse pass through one stage with a gradient on either motion head.
fn backprop<F: Real>(
    params: &FieldParams<F>,
    acts: &Activations<F>,
    d_o: &Array1<F>,
    d_motion: &Array2<F>,
    forward: bool,
    grads: Option<&mut GradientBundle<F>>,
) -> Array2<F> {
    let zero = Array2::zeros((acts.len(), 3));
    let (df, db) = if forward { (d_motion, &zero) } else { (&zero, d_motion) };
    params.backward(acts, d_o.view(), df.view(), db.view(), grads)
}

fn chunk_loss<F: Real>(
    params: &FieldParams<F>,
    batch: &Batch,
    range: Range<usize>,
    cfg: &LossConfig,
    want: Want,
    scales: Scales,
) -> ChunkOut<F> {
    let need = want.params || want.positions;
    let n = range.len();
    let period = cfg.period;
    let terms = cfg.terms;
    let LossWeights { alpha1, alpha2, alpha3 } = cfg.weights;
    let use_intensity = terms.intensity_constraint;
    let use_coord = terms.coordinate_constraint;
    let frames = &batch.frames[range.clone()];

    let x0 = positions_array::<F>(&batch.positions[range.clone()]);
    let a0 = params.forward(x0.view(), phases::<F>(frames, 0, period).view(), need);

    let mut sums = [0.0f64; 4];
    let mut diverged = 0;
    let mut grads = want.params.then(GradientBundle::zeros);
    let mut d_o0 = Array1::<F>::zeros(n);
    let mut d_f0 = Array2::<F>::zeros((n, 3));
    let mut d_b0 = Array2::<F>::zeros((n, 3));
    let mut d_x0 = Array2::<F>::zeros((n, 3));

    if terms.image {
        let g = F::of(2.0 * alpha1 * scales.batch);
        for i in 0..n {
            let e = a0.intensity[i] - F::of(batch.targets[range.start + i]);
            sums[0] += e.f64() * e.f64();
            d_o0[i] += g * e;
        }
    }

    if terms.reg {
        let g = F::of(alpha3 * scales.batch);
        for i in 0..n {
            for c in 0..3 {
                let (f, b) = (a0.forward[[i, c]], a0.backward[[i, c]]);
                let s = f + b;
                sums[3] += (s.abs() + f.abs() + b.abs()).f64();
                d_f0[[i, c]] += g * (sgn(s) + sgn(f));
                d_b0[[i, c]] += g * (sgn(s) + sgn(b));
            }
        }
    }

    if terms.motion && (use_intensity || use_coord) {
        for forward in [true, false] {
            let step = if forward { 1 } else { -1 };
            let m0 = motion_of(&a0, forward);
            let xi = &x0 + m0;
            let ai = params.forward(xi.view(), phases::<F>(frames, step, period).view(), need);
            let opp = motion_of(&ai, !forward);
            let mut d_oi = Array1::<F>::zeros(n);
            let mut d_opp = Array2::<F>::zeros((n, 3));
            let gi = F::of(2.0 * alpha1 * scales.batch);
            let gc = F::of(2.0 * alpha2 * scales.batch);
            let d_m0 = if forward { &mut d_f0 } else { &mut d_b0 };
            for i in 0..n {
                if use_intensity {
                    let e = ai.intensity[i] - a0.intensity[i];
                    sums[1] += alpha1 * e.f64() * e.f64();
                    d_oi[i] += gi * e;
                    d_o0[i] -= gi * e;
                }
                if use_coord {
                    for c in 0..3 {
                        // X_{t+i} + m_opp(X_{t+i}) - X_t = m0 + m_opp
                        let r = m0[[i, c]] + opp[[i, c]];
                        sums[1] += alpha2 * r.f64() * r.f64();
                        d_opp[[i, c]] += gc * r;
                        d_m0[[i, c]] += gc * r;
                    }
                }
            }
            if need {
                let dxi = backprop(params, &ai, &d_oi, &d_opp, !forward, grads.as_mut());
                *d_m0 += &dxi;
                d_x0 += &dxi;
            }
        }
    }

    let rows: Vec<usize> = (0..n).filter(|&i| batch.in_cycle[range.start + i]).collect();
    if terms.cycle && !rows.is_empty() {
        let ctx = CycleCtx {
            params,
            frames: rows.iter().map(|&i| frames[i]).collect(),
            period,
            alpha1,
            alpha2,
            use_intensity,
            use_coord,
            scale: scales.cycle,
            need,
        };
        let x0_sub = Array2::from_shape_fn((rows.len(), 3), |(r, c)| x0[[rows[r], c]]);
        let o0_sub = Array1::from_iter(rows.iter().map(|&i| a0.intensity[i]));
        for forward in [true, false] {
            let m0 = motion_of(&a0, forward);
            let m0_sub = Array2::from_shape_fn((rows.len(), 3), |(r, c)| m0[[rows[r], c]]);
            let out = ctx.chain(&x0_sub, &m0_sub, &o0_sub, forward, grads.as_mut());
            sums[2] += out.sum;
            diverged += out.diverged;
            if need {
                let d_m0 = if forward { &mut d_f0 } else { &mut d_b0 };
                for (r, &i) in rows.iter().enumerate() {
                    d_o0[i] += out.d_o0[r];
                    for c in 0..3 {
                        d_m0[[i, c]] += out.d_m0[[r, c]];
                        d_x0[[i, c]] += out.d_x0[[r, c]];
                    }
                }
            }
        }
    }

    if need {
        let d = params.backward(&a0, d_o0.view(), d_f0.view(), d_b0.view(), grads.as_mut());
        d_x0 += &d;
    }

    ChunkOut {
        sums,
        grads,
        d_x0: want.positions.then_some(d_x0),
        diverged,
    }
}

struct CycleCtx<'a, F> {
    params: &'a FieldParams<F>,
    frames: Vec<i64>,
    period: usize,
    alpha1: f64,
    alpha2: f64,
    use_intensity: bool,
    use_coord: bool,
    scale: f64,
    need: bool,
}

struct ChainOut<F> {
    sum: f64,
    diverged: usize,
    d_o0: Array1<F>,
    d_m0: Array2<F>,
    d_x0: Array2<F>,
}

impl<F: Real> CycleCtx<'_, F> {
    /// Compose one period from `x0` (first step `m0` already known), then
    /// score the summed displacement and, for the forward chain, the
    /// intensity after the full period.
    fn chain(
        &self,
        x0: &Array2<F>,
        m0: &Array2<F>,
        o0: &Array1<F>,
        forward: bool,
        mut grads: Option<&mut GradientBundle<F>>,
    ) -> ChainOut<F> {
        let c = x0.nrows();
        let period = self.period;
        let step = if forward { 1i64 } else { -1 };
        let intensity_stage = forward && self.use_intensity;
        // Stages 1..period-1 produce motions; stage `period` only intensity.
        let last = if intensity_stage { period } else { period - 1 };

        let mut pos = x0 + m0;
        let mut total: Array2<F> = m0.clone();
        let mut diverged_at: Vec<Option<usize>> = vec![None; c];
        // inputs[k - 1] is P_k, the unclamped position entering stage k.
        let mut inputs: Vec<Array2<F>> = Vec::with_capacity(last);
        let mut stages: Vec<Activations<F>> = Vec::with_capacity(last);

        for k in 1..=last {
            for r in 0..c {
                if diverged_at[r].is_none() {
                    let x = [pos[[r, 0]].f64(), pos[[r, 1]].f64(), pos[[r, 2]].f64()];
                    if guard_penalty(x).0 > 0.0 {
                        diverged_at[r] = Some(k);
                    }
                }
            }
            let eval = Array2::from_shape_fn((c, 3), |(r, a)| {
                let v = pos[[r, a]];
                if diverged_at[r].is_some() {
                    v.max(F::of(GUARD_LO)).min(F::of(GUARD_HI))
                } else {
                    v
                }
            });
            inputs.push(pos.clone());
            let t = phases::<F>(&self.frames, step * k as i64, period);
            let acts = self.params.forward(eval.view(), t.view(), self.need);
            if k < period {
                let m = motion_of(&acts, forward);
                for r in 0..c {
                    if diverged_at[r].is_none() {
                        for a in 0..3 {
                            total[[r, a]] += m[[r, a]];
                            pos[[r, a]] += m[[r, a]];
                        }
                    }
                }
            }
            stages.push(acts);
        }
        if last < period {
            // P_T is never evaluated here but still has to stay in bounds.
            inputs.push(pos.clone());
            for r in 0..c {
                let x = [pos[[r, 0]].f64(), pos[[r, 1]].f64(), pos[[r, 2]].f64()];
                if diverged_at[r].is_none() && guard_penalty(x).0 > 0.0 {
                    diverged_at[r] = Some(period);
                }
            }
        }

        let mut sum = 0.0;
        let mut n_div = 0;
        let mut d_o_last = Array1::<F>::zeros(c);
        let mut g_total = Array2::<F>::zeros((c, 3));
        let mut d_o0 = Array1::<F>::zeros(c);
        let stop_pos = |r: usize, k: usize| -> [f64; 3] {
            let p = &inputs[k - 1];
            [p[[r, 0]].f64(), p[[r, 1]].f64(), p[[r, 2]].f64()]
        };
        for r in 0..c {
            match diverged_at[r] {
                Some(k) => {
                    n_div += 1;
                    sum += guard_penalty(stop_pos(r, k)).0;
                }
                None => {
                    if intensity_stage {
                        let o_t = stages[period - 1].intensity[r];
                        let e = o_t - o0[r];
                        sum += self.alpha1 * e.f64() * e.f64();
                        let g = F::of(2.0 * self.alpha1 * self.scale) * e;
                        d_o_last[r] = g;
                        d_o0[r] = -g;
                    }
                    if self.use_coord {
                        for a in 0..3 {
                            let s = total[[r, a]];
                            sum += self.alpha2 * s.f64() * s.f64();
                            g_total[[r, a]] = F::of(2.0 * self.alpha2 * self.scale) * s;
                        }
                    }
                }
            }
        }

        let mut d_m0 = Array2::<F>::zeros((c, 3));
        let mut d_x0 = Array2::<F>::zeros((c, 3));
        if !self.need {
            return ChainOut {
                sum,
                diverged: n_div,
                d_o0,
                d_m0,
                d_x0,
            };
        }

        // dL/dP_{k+1}, walking the stages in reverse.
        let mut d_next = Array2::<F>::zeros((c, 3));
        for r in 0..c {
            if last < period && diverged_at[r] == Some(period) {
                let g = guard_penalty(stop_pos(r, period)).1;
                for a in 0..3 {
                    d_next[[r, a]] = F::of(g[a] * self.scale);
                }
            }
        }
        for k in (1..=last).rev() {
            let acts = &stages[k - 1];
            let dp = if k == period {
                let zero = Array2::zeros((c, 3));
                self.params.backward(acts, d_o_last.view(), zero.view(), zero.view(), grads.as_deref_mut())
            } else {
                let mut d_m = Array2::<F>::zeros((c, 3));
                for r in 0..c {
                    let live = diverged_at[r].is_none_or(|j| j > k);
                    if live {
                        for a in 0..3 {
                            d_m[[r, a]] = d_next[[r, a]] + g_total[[r, a]];
                        }
                    }
                }
                let zero = Array1::zeros(c);
                let dp = backprop(self.params, acts, &zero, &d_m, forward, grads.as_deref_mut());
                dp + &d_next
            };
            d_next = dp;
            for r in 0..c {
                match diverged_at[r] {
                    Some(j) if j == k => {
                        let g = guard_penalty(stop_pos(r, k)).1;
                        for a in 0..3 {
                            // Rows stopped here restart their gradient at the penalty.
                            d_next[[r, a]] = F::of(g[a] * self.scale);
                        }
                    }
                    Some(j) if j < k => d_next.row_mut(r).fill(F::zero()),
                    _ => {}
                }
            }
        }
        for r in 0..c {
            for a in 0..3 {
                d_m0[[r, a]] = d_next[[r, a]] + g_total[[r, a]];
                d_x0[[r, a]] = d_next[[r, a]];
            }
        }
        ChainOut {
            sum,
            diverged: n_div,
            d_o0,
            d_m0,
            d_x0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::eval_field;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, head_scale: f64) -> FieldParams<f64> {
        let mut p = FieldParams::<f64>::init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        p.randomize_heads(&mut rng, head_scale);
        p
    }

    fn batch(n: usize, period: usize, seed: u64, stride: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0.2..0.8))).collect();
        let frames = (0..n).map(|_| rng.random_range(0..period as i64)).collect();
        let targets = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Batch::new(pos, frames, targets, stride).unwrap()
    }

    fn cfg(period: usize) -> LossConfig {
        LossConfig {
            weights: LossWeights::default(),
            terms: LossTerms::default(),
            period,
        }
    }

    fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    fn sq(a: [f64; 3]) -> f64 {
        a.iter().map(|v| v * v).sum()
    }

    /// Straight-line recomputation of every term with one query at a time.
    fn naive(p: &FieldParams<f64>, b: &Batch, cfg: &LossConfig) -> [f64; 4] {
        let LossWeights { alpha1, alpha2, .. } = cfg.weights;
        let period = cfg.period;
        let tn = |t: i64| t.rem_euclid(period as i64) as f64 / period as f64;
        let n = b.len() as f64;
        let (mut img, mut mot, mut cyc, mut reg) = (0.0, 0.0, 0.0, 0.0);
        let mut n_cyc = 0.0;
        for s in 0..b.len() {
            let (x, t) = (b.positions[s], b.frames[s]);
            let q = eval_field(p, x, tn(t));
            img += (q.intensity - b.targets[s]).powi(2);
            for c in 0..3 {
                reg += (q.forward[c] + q.backward[c]).abs() + q.forward[c].abs() + q.backward[c].abs();
            }
            let xp = add(x, q.forward);
            let qp = eval_field(p, xp, tn(t + 1));
            mot += alpha1 * (qp.intensity - q.intensity).powi(2);
            mot += alpha2 * sq([0, 1, 2].map(|c| xp[c] + qp.backward[c] - x[c]));
            let xm = add(x, q.backward);
            let qm = eval_field(p, xm, tn(t - 1));
            mot += alpha1 * (qm.intensity - q.intensity).powi(2);
            mot += alpha2 * sq([0, 1, 2].map(|c| xm[c] + qm.forward[c] - x[c]));
            if b.in_cycle[s] {
                n_cyc += 1.0;
                let mut y = x;
                let mut total = [0.0; 3];
                for k in 0..period as i64 {
                    let m = eval_field(p, y, tn(t + k)).forward;
                    total = add(total, m);
                    y = add(y, m);
                }
                let o_end = eval_field(p, y, tn(t + period as i64)).intensity;
                cyc += alpha1 * (o_end - q.intensity).powi(2) + alpha2 * sq(total);
                let mut y = x;
                let mut total = [0.0; 3];
                for k in 0..period as i64 {
                    let m = eval_field(p, y, tn(t - k)).backward;
                    total = add(total, m);
                    y = add(y, m);
                }
                cyc += alpha2 * sq(total);
            }
        }
        [img / n, mot / n, cyc / n_cyc, reg / n]
    }

    #[test]
    fn matches_naive_loops_on_two_points() {
        let p = params(3, 0.08);
        let b = batch(2, 4, 9, 1);
        let c = cfg(4);
        let got = total_loss(&p, &b, &c).unwrap();
        let want = naive(&p, &b, &c);
        for (g, w) in [got.image, got.motion, got.cycle, got.reg].into_iter().zip(want) {
            assert!((g - w).abs() <= 1e-10, "{g} vs {w}");
        }
        assert!(want[2] > 0.0 && want[1] > 0.0);
        let composed = c.weights.alpha1 * got.image + got.motion + got.cycle + c.weights.alpha3 * got.reg;
        assert!((got.total - composed).abs() <= 1e-12);
        assert_eq!(image_loss(&p, &b, &c).unwrap(), got.image);
        assert_eq!(motion_consistency_loss(&p, &b, &c).unwrap(), got.motion);
        assert_eq!(cycle_consistency_loss(&p, &b, &c).unwrap(), got.cycle);
        assert_eq!(regularization_loss(&p, &b, &c).unwrap(), got.reg);
    }

    #[test]
    fn zero_motion_constant_field_is_free_of_motion_losses() {
        // Fresh init: heads are zero, so O = 0.5 everywhere and m = 0.
        let p = FieldParams::<f64>::init(1);
        let mut b = batch(16, 5, 2, 2);
        b.targets.iter_mut().for_each(|t| *t = 0.5);
        let l = total_loss(&p, &b, &cfg(5)).unwrap();
        assert_eq!(l, LossBreakdown::default());
    }

    #[test]
    fn single_point_image_error() {
        let p = FieldParams::<f64>::init(1);
        let b = Batch::new(vec![[0.5; 3]], vec![0], vec![0.0], 1).unwrap();
        assert!((image_loss(&p, &b, &cfg(4)).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn totals_respect_ablation_switches() {
        let p = params(4, 0.01);
        let b = batch(40, 6, 1, 4);
        let mut c = cfg(6);
        c.weights.alpha3 = 0.0;
        let l = total_loss(&p, &b, &c).unwrap();
        assert!(l.reg > 0.0);
        assert_eq!(evaluate(&p, &b, &c, Want::NOTHING, Exec::Sequential).unwrap().diverged, 0);
        assert!((l.total - (l.image + l.motion + l.cycle)).abs() < 1e-12);

        c.terms.intensity_constraint = false;
        let coord_only = total_loss(&p, &b, &c).unwrap();
        c.terms.intensity_constraint = true;
        c.terms.coordinate_constraint = false;
        let int_only = total_loss(&p, &b, &c).unwrap();
        let both = total_loss(&p, &b, &cfg(6)).unwrap();
        assert!((coord_only.motion + int_only.motion - both.motion).abs() < 1e-12);
        assert!((coord_only.cycle + int_only.cycle - both.cycle).abs() < 1e-12);
    }

    fn check_gradient(p: &FieldParams<f64>, b: &Batch, c: &LossConfig) {
        let out = evaluate(p, b, c, Want::PARAMS, Exec::Sequential).unwrap();
        let g = out.grads.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut idx: Vec<usize> = (0..60).map(|_| rng.random_range(0..p.n_params())).collect();
        // make sure every head row and the first layer are probed
        let head = &crate::field::ARCH.layers[crate::field::HEAD_LAYER];
        idx.extend((0..7).map(|r| head.weight_offset + r * head.fan_in + 3));
        idx.extend([0, 1, 2, 100]);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in idx {
            let mut q = p.clone();
            q.values[i] += h;
            let lp = total_loss(&q, b, c).unwrap().total;
            q.values[i] -= 2.0 * h;
            let lm = total_loss(&q, b, c).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g.values[i]).abs() / (fd.abs().max(g.values[i].abs()).max(1e-6));
            worst = worst.max(err);
            assert!(err <= 1e-4, "param {i}: analytic {} vs fd {fd}", g.values[i]);
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let p = params(5, 0.2);
        let b = batch(6, 4, 3, 2);
        check_gradient(&p, &b, &cfg(4));
    }

    #[test]
    fn each_term_gradient_matches_finite_differences() {
        let p = params(6, 0.2);
        let b = batch(5, 4, 8, 1);
        for pick in [
            LossTerms { motion: false, cycle: false, reg: false, ..Default::default() },
            LossTerms { image: false, cycle: false, reg: false, ..Default::default() },
            LossTerms { image: false, motion: false, reg: false, ..Default::default() },
            LossTerms { image: false, motion: false, cycle: false, ..Default::default() },
        ] {
            let c = LossConfig { terms: pick, ..cfg(4) };
            check_gradient(&p, &b, &c);
        }
    }

    #[test]
    fn divergent_chains_are_penalized_with_exact_gradient() {
        // Large head weights make the composed path leave the guard box.
        let p = params(7, 6.0);
        let b = batch(6, 8, 4, 1);
        for intensity_constraint in [true, false] {
            let c = LossConfig {
                terms: LossTerms {
                    image: false,
                    motion: false,
                    reg: false,
                    intensity_constraint,
                    ..Default::default()
                },
                ..cfg(8)
            };
            let out = evaluate(&p, &b, &c, Want::NOTHING, Exec::Sequential).unwrap();
            assert!(out.diverged > 0, "expected divergence");
            check_gradient(&p, &b, &c);
        }
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let p = params(8, 0.2);
        let b = batch(4, 4, 5, 2);
        let c = cfg(4);
        let out = evaluate(&p, &b, &c, Want::ALL, Exec::Sequential).unwrap();
        let d = out.d_positions.unwrap();
        let h = 1e-6;
        for s in 0..b.len() {
            for a in 0..3 {
                let mut q = b.clone();
                q.positions[s][a] += h;
                let lp = total_loss(&p, &q, &c).unwrap().total;
                q.positions[s][a] -= 2.0 * h;
                let lm = total_loss(&p, &q, &c).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - d[s][a]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", d[s][a]);
            }
        }
    }

    #[test]
    fn chunking_and_threads_do_not_change_results() {
        let p = params(9, 0.2).cast::<f32>();
        let b = batch(CHUNK * 2 + 37, 6, 6, 8);
        let c = cfg(6);
        let seq = evaluate(&p, &b, &c, Want::PARAMS, Exec::Sequential).unwrap();
        let par = evaluate(&p, &b, &c, Want::PARAMS, Exec::Parallel).unwrap();
        assert_eq!(seq.breakdown, par.breakdown);
        assert_eq!(seq.grads.unwrap().values, par.grads.unwrap().values);
    }

    #[test]
    fn regularization_examples() {
        // Three-output case checked on the closed form of the term.
        let per_point = |f: [f64; 3], b: [f64; 3]| -> f64 {
            (0..3).map(|c| (f[c] + b[c]).abs() + f[c].abs() + b[c].abs()).sum()
        };
        assert!((per_point([0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]) - 0.2).abs() < 1e-15);
        assert!((per_point([0.1, 0.0, 0.0], [0.1, 0.0, 0.0]) - 0.4).abs() < 1e-15);
        let p = FieldParams::<f64>::init(2);
        let b = batch(8, 4, 1, 1);
        assert_eq!(regularization_loss(&p, &b, &cfg(4)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = FieldParams::<f64>::init(2);
        let b = batch(4, 4, 1, 1);
        let mut c = cfg(4);
        c.weights.alpha2 = -1.0;
        assert!(total_loss(&p, &b, &c).is_err());
        assert!(total_loss(&p, &Batch::default(), &cfg(4)).is_err());
        assert!(Batch::new(vec![[0.0; 3]], vec![], vec![0.0], 1).is_err());
    }
}
