use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use neuralcmf::evaluation::{evaluate_phantom, EvalOptions};
use neuralcmf::geometry::{write_trajectories_csv, GridFrame};
use neuralcmf::metrics::MetricsReport;
use neuralcmf::strain::{aha_assign, strain_curves};
use neuralcmf::trainer::{default_rank, sweep_cells, Precision, SweepParam, TrainConfig, WEIGHT_GRID};
use neuralcmf::tracking::{track_points, warp_mask, warp_volume};
use neuralcmf::volume_io::{
    load_manifest, perturb_poses, read_u8_blob, write_f32_blob, write_multiview_dataset, write_u8_blob,
    write_volume_dataset, Dataset, LabeledMask, LongAxis, Mode, PhantomSpec, PhantomViews,
};

use crate::run::{
    create_dir, io_error, load_f64_checkpoint, train_and_report, write_json, write_text, RunManifest,
    FINAL_CHECKPOINT,
};
use crate::{CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic beating-shell dataset with known motion.
    Phantom(PhantomArgs),
    /// Fit a motion field to a dataset.
    Train(TrainArgs),
    /// Follow points through the cycle.
    Track(TrackArgs),
    /// Warp a frame (and its masks) to another frame.
    Warp(WarpArgs),
    /// Lagrangian strain curves per AHA segment.
    Strain(StrainArgs),
    /// Tracking and overlap metrics.
    Metrics(MetricsArgs),
    /// Train one model per grid cell and rank them.
    Sweep(SweepArgs),
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train_cmd(a),
        Command::Track(a) => track(a),
        Command::Warp(a) => warp(a),
        Command::Strain(a) => strain(a),
        Command::Metrics(a) => metrics(a),
        Command::Sweep(a) => sweep(a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Volume3d,
    Multiview2d,
}

impl ModeArg {
    fn mode(self) -> Mode {
        match self {
            ModeArg::Volume3d => Mode::Volume3d,
            ModeArg::Multiview2d => Mode::Multiview2d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// Grid size along each axis.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    /// Frames per cycle.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Peak fractional contraction.
    #[arg(long, default_value_t = 0.2)]
    amp: f64,
    /// Texture seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Volume3d)]
    mode: ModeArg,
    /// Number of slice views (2D mode).
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// How many of the views are short-axis planes (2D mode).
    #[arg(long, default_value_t = 3)]
    short_axis: usize,
    /// Slice image size in pixels (2D mode).
    #[arg(long, default_value_t = 32)]
    image: usize,
    /// Maximum rotation error added to the initial view poses, degrees.
    #[arg(long, default_value_t = 0.0)]
    perturb_deg: f64,
}

fn phantom(a: PhantomArgs) -> CliResult<()> {
    let mut run = RunManifest::start("phantom");
    run.seed = Some(a.seed);
    let spec = PhantomSpec::new([a.dims; 3], a.frames, a.amp, a.seed);
    spec.validate()?;
    let axis = LongAxis::vertical(spec.center, spec.outer_radius);
    let manifest = match a.mode {
        ModeArg::Volume3d => {
            let seq = spec.generate()?;
            let masks: Vec<LabeledMask> = (0..a.frames).map(|t| spec.shell_mask(t)).collect();
            write_volume_dataset(&a.out, &seq, &masks, Some(&spec), Some(axis))?
        }
        ModeArg::Multiview2d => {
            let views = PhantomViews {
                count: a.views,
                width: a.image,
                height: a.image,
                short_axis: a.short_axis,
                ..Default::default()
            };
            let truth = spec.view_poses(&views);
            let mut seq = spec.slice_views(&truth, a.image, a.image)?;
            if a.perturb_deg > 0.0 {
                seq.initial_poses = perturb_poses(&truth, a.perturb_deg, 1, a.seed);
            }
            write_multiview_dataset(&a.out, &seq, spec.spacing_mm, Some(&spec), Some(&truth))?
        }
    };
    println!("{}", manifest.display());
    run.outputs.push(manifest);
    run.finish(&a.out)
}

#[derive(Debug, Args, Clone)]
pub struct TrainOpts {
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    alpha3: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs the sequential path.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Expected dataset mode; checked against the manifest.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    no_motion_loss: bool,
    #[arg(long)]
    no_cycle_loss: bool,
    #[arg(long)]
    no_reg_loss: bool,
    /// Phantom evaluation sample count.
    #[arg(long, default_value_t = 10_000)]
    eval_points: usize,
}

impl TrainOpts {
    fn resolve(&self) -> CliResult<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Core(neuralcmf::Error::Json {
                        path: p.clone(),
                        source: e,
                    })
                })?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.iters, c.iterations);
        set!(self.batch, c.batch_points);
        set!(self.lr0, c.lr0);
        set!(self.alpha1, c.weights.alpha1);
        set!(self.alpha2, c.weights.alpha2);
        set!(self.alpha3, c.weights.alpha3);
        set!(self.seed, c.seed);
        set!(self.threads, c.threads);
        set!(self.checkpoint_every, c.checkpoint_every);
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        c.terms.motion &= !self.no_motion_loss;
        c.terms.cycle &= !self.no_cycle_loss;
        c.terms.reg &= !self.no_reg_loss;
        c.validate()?;
        Ok(c)
    }

    fn load_data(&self, path: &Path) -> CliResult<Dataset> {
        let data = load_manifest(path)?;
        if let Some(m) = self.mode {
            if data.manifest.mode != m.mode() {
                return Err(CliError::Usage(format!(
                    "--mode {m:?} does not match the dataset mode {:?}",
                    data.manifest.mode
                )));
            }
        }
        Ok(data)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let mut run = RunManifest::start("train");
    let config = a.opts.resolve()?;
    let data = a.opts.load_data(&a.data)?;
    run.config_path = a.opts.config.clone();
    run.inputs.push(a.data.clone());
    run.seed = Some(config.seed);
    let report = train_and_report(&config, &data, &a.out, a.opts.eval_points)?;
    if let Some(p) = &report.phantom {
        println!(
            "MTE {:.4} mm ({:.3} voxel), cosine {}, cycle residual {:.4}, ED->ES DICE {:.3}",
            p.mte_mm,
            p.mte_voxels,
            p.cosine.mean.map_or("undefined".into(), |c| format!("{c:.3}")),
            p.cycle_residual_mean,
            p.dice_ed_es
        );
    }
    run.outputs.push(a.out.join(FINAL_CHECKPOINT));
    run.finish(&a.out)
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; supplies the grid, masks and phantom metadata.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl CheckpointArgs {
    fn exec(&self) -> neuralcmf::parallel::Exec {
        TrainConfig {
            threads: self.threads,
            ..Default::default()
        }
        .exec()
    }
}

fn grid_of(data: &Dataset) -> GridFrame {
    GridFrame {
        dims: data.grid_dims(),
        spacing_mm: data.spacing_mm(),
    }
}

/// Seeds from a CSV of normalized `x,y,z` rows, else voxel centers of the
/// frame-0 mask, else phantom shell samples.
fn seed_points(path: Option<&Path>, data: &Dataset, count: usize, seed: u64) -> CliResult<Vec<[f64; 3]>> {
    if let Some(p) = path {
        return read_points(p);
    }
    if let Some(m) = data.mask(0) {
        let g = neuralcmf::volume_io::Grid3::zeros(m.dims);
        let mut pts = Vec::new();
        for k in 0..m.dims[2] {
            for j in 0..m.dims[1] {
                for i in 0..m.dims[0] {
                    if m.get(i, j, k) {
                        pts.push(g.node_position(i, j, k));
                    }
                }
            }
        }
        if !pts.is_empty() {
            return Ok(pts);
        }
    }
    if let Some(spec) = &data.manifest.phantom {
        return Ok(spec.sample_material_points(&mut ChaCha8Rng::seed_from_u64(seed), count));
    }
    Err(CliError::Usage("no --points file, frame-0 mask or phantom to seed from".into()))
}

fn read_points(path: &Path) -> CliResult<Vec<[f64; 3]>> {
    read_rows::<3>(path).map(|rows| rows.into_iter().collect())
}

fn read_rows<const N: usize>(path: &Path) -> CliResult<Vec<[f64; N]>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == N => out.push(v.try_into().unwrap()),
            // tolerate a header row
            Err(_) if n == 0 => continue,
            _ => {
                return Err(CliError::Core(neuralcmf::Error::InvalidData(format!(
                    "{}:{}: expected {N} numbers",
                    path.display(),
                    n + 1
                ))))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// CSV of normalized seed positions.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Seed count when sampling the phantom shell.
    #[arg(long, default_value_t = 2500)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    t0: i64,
    /// Steps to follow; defaults to one full cycle.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn track(a: TrackArgs) -> CliResult<()> {
    let mut run = RunManifest::start("track");
    let ck = load_f64_checkpoint(&a.ck.checkpoint)?;
    let data = load_manifest(&a.ck.data)?;
    let seeds = seed_points(a.points.as_deref(), &data, a.count, a.seed)?;
    let steps = a.frames.unwrap_or(ck.period);
    let trajs = track_points(&ck.params, &seeds, a.t0, steps, ck.period, a.ck.exec())?;
    create_dir(&a.ck.out)?;
    let path = a.ck.out.join("trajectories.csv");
    write_trajectories_csv(&path, &trajs, &grid_of(&data))?;
    let diverged = trajs.iter().filter(|t| t.is_divergent()).count();
    println!("{} trajectories, {diverged} divergent", trajs.len());
    run.inputs.extend([a.ck.checkpoint, a.ck.data]);
    run.seed = Some(a.seed);
    run.outputs.push(path);
    run.finish(&a.ck.out)
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[arg(long, default_value_t = 0)]
    src: usize,
    /// Target frame; defaults to mid-cycle.
    #[arg(long)]
    dst: Option<usize>,
}

fn warp(a: WarpArgs) -> CliResult<()> {
    let mut run = RunManifest::start("warp");
    let ck = load_f64_checkpoint(&a.ck.checkpoint)?;
    let data = load_manifest(&a.ck.data)?;
    let dst = a.dst.unwrap_or(ck.period / 2);
    let exec = a.ck.exec();
    create_dir(&a.ck.out)?;
    let mut summary = serde_json::Map::new();
    summary.insert("source_frame".into(), json!(a.src));
    summary.insert("target_frame".into(), json!(dst));
    if let Some(vol) = data.volume() {
        let src = vol
            .frames
            .get(a.src)
            .ok_or_else(|| CliError::Usage(format!("frame {} not in dataset", a.src)))?;
        let w = warp_volume(&ck.params, src, a.src, dst, ck.period, exec)?;
        let path = a.ck.out.join(format!("warped_{:03}_to_{:03}.f32raw", a.src, dst));
        write_f32_blob(&path, &w.grid.data)?;
        let mean_disp = w.displacement.iter().map(|&v| v as f64).sum::<f64>() / w.displacement.len() as f64;
        summary.insert("dims".into(), json!(w.grid.dims));
        summary.insert("diverged".into(), json!(w.diverged));
        summary.insert("mean_displacement".into(), json!(mean_disp));
        run.outputs.push(path);
    }
    if let Some(mask) = data.mask(a.src) {
        let warped = warp_mask(&ck.params, mask, a.src, dst, ck.period, exec)?;
        let path = a.ck.out.join(format!("warped_mask_{:03}_to_{:03}.u8raw", a.src, dst));
        write_u8_blob(&path, &warped.data)?;
        if let Some(target) = data.mask(dst) {
            let mut m = MetricsReport::default();
            m.add_masks(&warped, target, data.spacing_mm(), false)?;
            summary.insert("mask_vs_target".into(), serde_json::to_value(&m).unwrap());
        }
        run.outputs.push(path);
    }
    if run.outputs.is_empty() {
        return Err(CliError::Usage("dataset has neither a volume nor a source-frame mask".into()));
    }
    write_json(&a.ck.out.join("warp.json"), &summary)?;
    run.inputs.extend([a.ck.checkpoint, a.ck.data]);
    run.finish(&a.ck.out)
}

#[derive(Debug, Args)]
pub struct StrainArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// CSV of normalized material points at frame 0.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn strain(a: StrainArgs) -> CliResult<()> {
    let mut run = RunManifest::start("strain");
    let ck = load_f64_checkpoint(&a.ck.checkpoint)?;
    let data = load_manifest(&a.ck.data)?;
    let pts = seed_points(a.points.as_deref(), &data, a.count, a.seed)?;
    let axis = data.long_axis();
    let assign = aha_assign(&pts, &axis)?;
    let curves = strain_curves(&ck.params, &pts, &assign, ck.period, &grid_of(&data), a.ck.exec())?;
    create_dir(&a.ck.out)?;
    let seg = a.ck.out.join("strain_segments.csv");
    let long = a.ck.out.join("strain_long.csv");
    curves.write_csv(&seg)?;
    curves.write_long_csv(&long)?;
    let summary = json!({
        "points": pts.len(),
        "frames": curves.frames(),
        "segment_counts": assign.counts(),
        "missing_segments": curves.missing_segments,
        "diverged_points": curves.diverged_points,
        "peaks": curves.peaks(),
        "global": curves.global,
    });
    write_json(&a.ck.out.join("strain_summary.json"), &summary)?;
    let p = curves.peaks();
    let text = format!(
        "peak global strain: longitudinal {:.4} (frame {}), radial {:.4} (frame {}), circumferential {:.4} (frame {})\nmissing segments: {:?}\n",
        p.longitudinal.value,
        p.longitudinal.frame,
        p.radial.value,
        p.radial.frame,
        p.circumferential.value,
        p.circumferential.frame,
        curves.missing_segments
    );
    write_text(&a.ck.out.join("strain_summary.txt"), &text)?;
    print!("{text}");
    run.inputs.extend([a.ck.checkpoint, a.ck.data]);
    run.seed = Some(a.seed);
    run.outputs.extend([seg, long]);
    run.finish(&a.ck.out)
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Output JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV of predicted motion vectors (normalized units).
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// CSV of reference motion vectors.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// First mask blob (u8 raw).
    #[arg(long, requires = "mask_b")]
    mask_a: Option<PathBuf>,
    #[arg(long, requires = "mask_a")]
    mask_b: Option<PathBuf>,
    /// Dataset manifest giving grid size and spacing.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Grid size `nx,ny,nz` when no dataset is given.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Voxel spacing `sx,sy,sz` in mm when no dataset is given.
    #[arg(long, value_delimiter = ',')]
    spacing: Option<Vec<f64>>,
    /// Use the 95th-percentile Hausdorff distance.
    #[arg(long)]
    hd95: bool,
    /// Evaluate a checkpoint against the dataset's phantom.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    eval_points: usize,
}

fn metrics(a: MetricsArgs) -> CliResult<()> {
    let data = a.data.as_deref().map(load_manifest).transpose()?;
    for (flag, v) in [("--dims", a.dims.as_ref().map(Vec::len)), ("--spacing", a.spacing.as_ref().map(Vec::len))] {
        if v.is_some_and(|n| n != 3) {
            return Err(CliError::Usage(format!("{flag} takes three comma-separated values")));
        }
    }
    let grid = match (&data, &a.dims) {
        (Some(d), _) => Some(grid_of(d)),
        (None, Some(dims)) => Some(GridFrame {
            dims: [dims[0], dims[1], dims[2]],
            spacing_mm: a.spacing.as_ref().map_or([1.0; 3], |s| [s[0], s[1], s[2]]),
        }),
        _ => None,
    };
    let text = if let Some(ck_path) = &a.checkpoint {
        let data = data.as_ref().unwrap();
        let spec = data
            .manifest
            .phantom
            .as_ref()
            .ok_or_else(|| CliError::Usage("--checkpoint evaluation needs a phantom dataset".into()))?;
        let ck = load_f64_checkpoint(ck_path)?;
        let poses = data.manifest.true_poses.as_deref().map(|t| (ck.poses.as_slice(), t));
        let opts = EvalOptions {
            points: a.eval_points,
            ..Default::default()
        };
        let r = evaluate_phantom(&ck.params, spec, poses, &opts, neuralcmf::parallel::Exec::Parallel)?;
        serde_json::to_string_pretty(&r).unwrap()
    } else {
        let grid = grid.ok_or_else(|| CliError::Usage("pass --data or --dims".into()))?;
        let mut report = MetricsReport {
            config: json!({
                "pred": a.pred, "gt": a.gt, "mask_a": a.mask_a, "mask_b": a.mask_b,
                "dims": grid.dims, "spacing_mm": grid.spacing_mm, "hd95": a.hd95,
            }),
            ..Default::default()
        };
        let mut any = false;
        if let (Some(p), Some(g)) = (&a.pred, &a.gt) {
            report.add_motion(&read_points(p)?, &read_points(g)?, &grid)?;
            any = true;
        }
        if let (Some(ma), Some(mb)) = (&a.mask_a, &a.mask_b) {
            let n = grid.dims.iter().product();
            let load = |p: &PathBuf| -> CliResult<LabeledMask> {
                Ok(LabeledMask::new(grid.dims, read_u8_blob(p, n)?, 0, "")?)
            };
            report.add_masks(&load(ma)?, &load(mb)?, grid.spacing_mm, a.hd95)?;
            any = true;
        }
        if !any {
            return Err(CliError::Usage("give --pred/--gt, --mask-a/--mask-b or --checkpoint".into()));
        }
        serde_json::to_string_pretty(&report).unwrap()
    };
    match &a.out {
        Some(p) => write_text(p, &(text + "\n")),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// alpha1, alpha2, alpha3 or terms.
    #[arg(long)]
    param: String,
    /// Comma-separated values for weight sweeps.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let run = RunManifest::start("sweep");
    let param: SweepParam = a.param.parse().map_err(|e: neuralcmf::Error| CliError::Usage(e.to_string()))?;
    let base = a.opts.resolve()?;
    let data = a.opts.load_data(&a.data)?;
    let values = a.values.clone().unwrap_or_else(|| WEIGHT_GRID.to_vec());
    let cells = sweep_cells(&base, param, &values)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for cell in &cells {
        let dir = a.out.join(&cell.label);
        let mut cell_run = RunManifest::start("sweep");
        cell_run.inputs.push(a.data.clone());
        cell_run.seed = Some(cell.config.seed);
        let report = train_and_report(&cell.config, &data, &dir, a.opts.eval_points)?;
        cell_run.outputs.push(dir.join(FINAL_CHECKPOINT));
        cell_run.finish(&dir)?;
        let (mte, cosine) = report
            .phantom
            .as_ref()
            .map_or((None, None), |p| (Some(p.mte_mm), p.cosine.mean));
        let score = mte.or(report.final_loss.map(|l| l.total)).unwrap_or(f64::INFINITY);
        scores.push(score);
        println!("{:<40} mte {:?} cosine {:?}", cell.label, mte, cosine);
        rows.push(json!({
            "label": cell.label,
            "default": cell.is_default,
            "weights": cell.config.weights,
            "terms": cell.config.terms,
            "mte_mm": mte,
            "cosine": cosine,
            "final_total_loss": report.final_loss.map(|l| l.total),
        }));
    }
    let rank = default_rank(&cells, &scores);
    let mut csv = String::from("label,default,alpha1,alpha2,alpha3,mte_mm,cosine\n");
    for (cell, row) in cells.iter().zip(&rows) {
        let w = cell.config.weights;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.label,
            cell.is_default,
            w.alpha1,
            w.alpha2,
            w.alpha3,
            row["mte_mm"].as_f64().map_or(String::new(), |v| v.to_string()),
            row["cosine"].as_f64().map_or(String::new(), |v| v.to_string()),
        ));
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    write_json(&a.out.join("sweep.json"), &json!({ "param": param, "cells": rows, "default_rank": rank }))?;
    if let Some(r) = rank {
        println!("default cell rank {} of {}", r + 1, cells.len());
    }
    run.finish(&a.out)
}
