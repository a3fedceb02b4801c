//! Optimization loop: batch sampling, Adam with a cosine-annealed learning
//! rate, joint view-pose refinement for 2D data, and checkpoints.

mod checkpoint;
mod sweep;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{FieldParams, DEFAULT_OMEGA0};
use crate::geometry::{pixel_to_plane, ViewPose};
use crate::losses::{evaluate, Batch, LossBreakdown, LossConfig, LossTerms, LossWeights, Want};
use crate::parallel::{set_threads, Exec};
use crate::real::Real;
use crate::volume_io::{node_coord, Dataset, DatasetKind};

pub use checkpoint::{AnyCheckpoint, Checkpoint, HISTORY_TAIL};
pub use sweep::{default_rank, sweep_cells, SweepCell, SweepParam, WEIGHT_GRID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_points: usize,
    pub lr0: f64,
    pub weights: LossWeights,
    pub terms: LossTerms,
    /// Share of each batch that also runs the full-cycle composition.
    pub cycle_fraction: f64,
    pub seed: u64,
    pub omega0: f64,
    pub precision: Precision,
    /// Worker threads; 0 keeps the pool default, 1 runs sequentially.
    pub threads: usize,
    /// Checkpoint cadence in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Pose learning rate as a multiple of the network learning rate.
    pub pose_lr_scale: f64,
    /// Leading views whose pose is held fixed to pin the global frame.
    pub anchor_views: usize,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_points: 8192,
            lr0: 1e-4,
            weights: LossWeights::default(),
            terms: LossTerms::default(),
            cycle_fraction: 0.125,
            seed: 0,
            omega0: DEFAULT_OMEGA0,
            precision: Precision::F32,
            threads: 0,
            checkpoint_every: 0,
            pose_lr_scale: 1.0,
            anchor_views: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if self.batch_points < 1 {
            return bad("batch_points must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.cycle_fraction > 0.0 && self.cycle_fraction <= 1.0) {
            return bad("cycle_fraction must lie in (0, 1]");
        }
        if !(self.omega0 > 0.0) {
            return bad("omega0 must be positive");
        }
        if !(self.pose_lr_scale >= 0.0) {
            return bad("pose_lr_scale must be >= 0");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        self.weights.validate()
    }

    /// Stride between cycle samples within a batch.
    pub fn cycle_stride(&self) -> usize {
        (1.0 / self.cycle_fraction).round().max(1.0) as usize
    }

    pub fn exec(&self) -> Exec {
        if self.threads == 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON form, as hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Cosine annealing from `lr0` at iteration 0 to 0 at `iterations`.
pub fn cosine_lr(iter: usize, iterations: usize, lr0: f64) -> f64 {
    if iter >= iterations {
        return 0.0;
    }
    let x = std::f64::consts::PI * iter as f64 / iterations as f64;
    (lr0 * (1.0 + x.cos()) / 2.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Advance the shared step counter; call once per optimizer step before
    /// [`AdamState::apply`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update `params`, whose moments live at `offset..offset + len`.
    pub fn apply<F: Real>(&mut self, offset: usize, params: &mut [F], grads: &[f64], lr: f64, hp: &AdamParams) {
        assert_eq!(params.len(), grads.len());
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = F::of(p.f64() - lr * mh / (vh.sqrt() + hp.eps));
        }
    }
}

/// One full Adam step over a single parameter vector.
pub fn adam_step<F: Real>(params: &mut [F], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { term: "gradient".into() });
    }
    state.begin_step();
    state.apply(0, params, grads, lr, &AdamParams::default());
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite { term: "parameter update".into() });
    }
    Ok(())
}

/// A 2D sample's origin: view index and plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneRef {
    pub view: usize,
    pub u: f64,
    pub v: f64,
}

/// Draw `n` training samples. 3D data is sampled uniformly over grid nodes
/// and frames, 2D data over views, pixels and frames.
pub fn sample_batch(
    rng: &mut impl Rng,
    dataset: &Dataset,
    poses: &[ViewPose],
    n: usize,
    cycle_stride: usize,
) -> Result<(Batch, Option<Vec<PlaneRef>>)> {
    let period = dataset.period();
    let mut positions = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let planes = match &dataset.kind {
        DatasetKind::Volume(vol) => {
            let d = vol.dims();
            for _ in 0..n {
                let (i, j, k) = (rng.random_range(0..d[0]), rng.random_range(0..d[1]), rng.random_range(0..d[2]));
                let t = rng.random_range(0..period);
                positions.push([node_coord(i, d[0]), node_coord(j, d[1]), node_coord(k, d[2])]);
                frames.push(t as i64);
                targets.push(vol.frames[t].get(i, j, k) as f64);
            }
            None
        }
        DatasetKind::MultiView(mv) => {
            if poses.len() != mv.views.len() {
                return Err(Error::DimensionMismatch("one pose per view is required".into()));
            }
            let (w, h) = mv.image_size();
            let mut refs = Vec::with_capacity(n);
            for _ in 0..n {
                let view = rng.random_range(0..mv.views.len());
                let (i, j) = (rng.random_range(0..w), rng.random_range(0..h));
                let t = rng.random_range(0..period);
                let (u, v) = pixel_to_plane(i, j, w, h);
                positions.push(poses[view].map_plane(u, v));
                frames.push(t as i64);
                targets.push(mv.views[view].frames[t].get(i, j) as f64);
                refs.push(PlaneRef { view, u, v });
            }
            Some(refs)
        }
    };
    Ok((Batch::new(positions, frames, targets, cycle_stride)?, planes))
}

/// Gradient of the loss with respect to each pose, six values per view
/// (axis-angle then translation), from per-sample position gradients.
pub fn pose_gradients(poses: &[ViewPose], planes: &[PlaneRef], d_positions: &[[f64; 3]]) -> Vec<f64> {
    let derivs: Vec<_> = poses.iter().map(ViewPose::rotation_derivatives).collect();
    let mut g = vec![0.0; 6 * poses.len()];
    for (p, d) in planes.iter().zip(d_positions) {
        let q = ViewPose::plane_point(p.u, p.v);
        let dx = nalgebra::Vector3::from(*d);
        for (i, dr) in derivs[p.view].iter().enumerate() {
            g[6 * p.view + i] += dx.dot(&(dr * q));
        }
        for a in 0..3 {
            g[6 * p.view + 3 + a] += d[a];
        }
    }
    g
}

/// Per-iteration seed stream, so any iteration can be replayed on resume.
pub fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

pub struct Trainer<'a, F: Real> {
    pub config: TrainConfig,
    dataset: &'a Dataset,
    state: Checkpoint<F>,
    exec: Exec,
    loss_cfg: LossConfig,
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let params = FieldParams::<F>::init_with_omega(config.seed, config.omega0);
        let poses = match &dataset.kind {
            DatasetKind::MultiView(mv) => mv.initial_poses.clone(),
            DatasetKind::Volume(_) => Vec::new(),
        };
        let n = params.n_params() + 6 * poses.len();
        let state = Checkpoint {
            params,
            poses,
            adam: AdamState::new(n),
            iteration: 0,
            period: dataset.period(),
            config_hash: config.hash(),
            history: Vec::new(),
        };
        Self::with_state(config, dataset, state)
    }

    /// Continue from a checkpoint written with the same configuration.
    pub fn resume(config: TrainConfig, dataset: &'a Dataset, state: Checkpoint<F>) -> Result<Self> {
        config.validate()?;
        if state.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with config {}, current config is {}",
                state.config_hash,
                config.hash()
            )));
        }
        if state.period != dataset.period() {
            return Err(Error::Checkpoint("checkpoint period differs from the dataset".into()));
        }
        Self::with_state(config, dataset, state)
    }

    fn with_state(config: TrainConfig, dataset: &'a Dataset, state: Checkpoint<F>) -> Result<Self> {
        if config.threads > 1 {
            set_threads(config.threads);
        }
        let loss_cfg = LossConfig {
            weights: config.weights,
            terms: config.terms,
            period: dataset.period(),
        };
        Ok(Trainer {
            exec: config.exec(),
            config,
            dataset,
            state,
            loss_cfg,
        })
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    pub fn checkpoint(&self) -> &Checkpoint<F> {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint<F> {
        self.state
    }

    fn pose_trainable(&self, view: usize) -> [bool; 2] {
        if view < self.config.anchor_views {
            return [false, false];
        }
        let p = &self.state.poses[view];
        [p.rotation_trainable, p.translation_trainable]
    }

    /// Run one optimizer step and return the loss breakdown before it.
    pub fn step(&mut self) -> Result<(f64, LossBreakdown)> {
        let iter = self.state.iteration;
        let lr = cosine_lr(iter, self.config.iterations, self.config.lr0);
        let mut rng = iteration_rng(self.config.seed, iter);
        let (batch, planes) = sample_batch(
            &mut rng,
            self.dataset,
            &self.state.poses,
            self.config.batch_points,
            self.config.cycle_stride(),
        )?;
        let want = Want {
            params: true,
            positions: planes.is_some(),
        };
        let out = evaluate(&self.state.params, &batch, &self.loss_cfg, want, self.exec)?;
        let mut grads: Vec<f64> = out.grads.expect("requested").values.iter().map(|g| g.f64()).collect();
        let mut pose_grads = match (&planes, &out.d_positions) {
            (Some(pl), Some(d)) => pose_gradients(&self.state.poses, pl, d),
            _ => Vec::new(),
        };
        for v in 0..self.state.poses.len() {
            let [rot, trans] = self.pose_trainable(v);
            if !rot {
                pose_grads[6 * v..6 * v + 3].fill(0.0);
            }
            if !trans {
                pose_grads[6 * v + 3..6 * v + 6].fill(0.0);
            }
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.iter().chain(&pose_grads).map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let k = clip / norm;
                grads.iter_mut().chain(pose_grads.iter_mut()).for_each(|g| *g *= k);
            }
        }
        if grads.iter().chain(&pose_grads).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { term: "gradient".into() });
        }

        let hp = AdamParams::default();
        let n = self.state.params.n_params();
        let adam = &mut self.state.adam;
        adam.begin_step();
        adam.apply(0, &mut self.state.params.values, &grads, lr, &hp);
        if !self.state.poses.is_empty() {
            let mut flat: Vec<f64> = self
                .state
                .poses
                .iter()
                .flat_map(|p| p.rotation.into_iter().chain(p.translation))
                .collect();
            adam.apply(n, &mut flat, &pose_grads, lr * self.config.pose_lr_scale, &hp);
            let anchors = self.config.anchor_views;
            for (v, pose) in self.state.poses.iter_mut().enumerate() {
                let chunk = &flat[6 * v..6 * v + 6];
                if v >= anchors && pose.rotation_trainable {
                    pose.rotation.copy_from_slice(&chunk[..3]);
                }
                if v >= anchors && pose.translation_trainable {
                    pose.translation.copy_from_slice(&chunk[3..6]);
                }
            }
        }
        if !self.state.params.is_finite() {
            return Err(Error::NonFinite { term: "parameter update".into() });
        }
        self.state.iteration += 1;
        self.state.push_history(iter, out.breakdown);
        Ok((lr, out.breakdown))
    }
}

/// CSV training log: `iteration,lr,image,motion,cycle,reg,total`.
pub struct TrainingLog {
    out: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl TrainingLog {
    pub const HEADER: &'static str = "iteration,lr,image,motion,cycle,reg,total";

    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainingLog {
            out: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        };
        writeln!(log.out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(log)
    }

    /// Append to an existing log, e.g. after resuming.
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrainingLog {
            out: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, iter: usize, lr: f64, l: &LossBreakdown) -> Result<()> {
        writeln!(
            self.out,
            "{iter},{lr:e},{:e},{:e},{:e},{:e},{:e}",
            l.image, l.motion, l.cycle, l.reg, l.total
        )
        .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Train to completion, logging every iteration and writing checkpoints
/// named `ckpt_<iter>.bin` into `ckpt_dir` at the configured cadence plus
/// `final.bin`.
pub fn train<F: Real>(
    config: &TrainConfig,
    dataset: &Dataset,
    log: Option<&mut TrainingLog>,
    ckpt_dir: Option<&Path>,
) -> Result<Checkpoint<F>> {
    let trainer = Trainer::<F>::new(config.clone(), dataset)?;
    run(trainer, log, ckpt_dir)
}

/// Drive an existing trainer to its configured iteration count.
pub fn run<F: Real>(
    mut trainer: Trainer<'_, F>,
    mut log: Option<&mut TrainingLog>,
    ckpt_dir: Option<&Path>,
) -> Result<Checkpoint<F>> {
    let every = trainer.config.checkpoint_every;
    while !trainer.is_done() {
        let iter = trainer.iteration();
        let (lr, loss) = trainer.step()?;
        if let Some(l) = log.as_deref_mut() {
            l.record(iter, lr, &loss)?;
        }
        if iter % 100 == 0 {
            log::info!(
                "iter {iter} lr {lr:.3e} total {:.5e} (image {:.3e} motion {:.3e} cycle {:.3e} reg {:.3e})",
                loss.total,
                loss.image,
                loss.motion,
                loss.cycle,
                loss.reg
            );
        }
        if let (Some(dir), true) = (ckpt_dir, every > 0 && trainer.iteration() % every == 0 && !trainer.is_done()) {
            if let Some(l) = log.as_deref_mut() {
                l.flush()?;
            }
            trainer
                .checkpoint()
                .save(&dir.join(format!("ckpt_{:06}.bin", trainer.iteration())))?;
        }
    }
    if let Some(l) = log {
        l.flush()?;
    }
    let state = trainer.into_checkpoint();
    if let Some(dir) = ckpt_dir {
        state.save(&dir.join("final.bin"))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests;
