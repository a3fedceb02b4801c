//! Output plumbing shared by the subcommands.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use log::info;
use serde::{Deserialize, Serialize};

use neuralcmf::evaluation::{evaluate_phantom, EvalOptions, PhantomReport};
use neuralcmf::trainer::{train, AnyCheckpoint, Checkpoint, Precision, TrainConfig, TrainingLog};
use neuralcmf::volume_io::Dataset;

use crate::{CliError, CliResult};

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub started: String,
    pub finished: Option<String>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

impl RunManifest {
    pub fn start(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            argv: std::env::args().collect(),
            config_path: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").into(),
            started: now(),
            finished: None,
        }
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.finished = Some(now());
        write_json(&dir.join(RUN_MANIFEST), &self)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(neuralcmf::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn load_f64_checkpoint(path: &Path) -> CliResult<Checkpoint<f64>> {
    Ok(AnyCheckpoint::load(path)?.into_f64())
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const REPORT: &str = "report.json";

/// Deterministic summary of one training run; no wall-clock fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub iterations: usize,
    pub final_loss: Option<neuralcmf::losses::LossBreakdown>,
    pub phantom: Option<PhantomReport>,
}

/// Train into `out`, then evaluate against the phantom when the dataset
/// carries one.
pub fn train_and_report(config: &TrainConfig, data: &Dataset, out: &Path, eval_points: usize) -> CliResult<TrainReport> {
    create_dir(out)?;
    write_json(&out.join("config.json"), config)?;
    let mut log = TrainingLog::create(&out.join(TRAIN_LOG))?;
    let state = match config.precision {
        Precision::F32 => AnyCheckpoint::F32(train::<f32>(config, data, Some(&mut log), Some(out))?).into_f64(),
        Precision::F64 => train::<f64>(config, data, Some(&mut log), Some(out))?,
    };
    let phantom = match &data.manifest.phantom {
        Some(spec) if spec.period_t == state.period => {
            let truth = data.manifest.true_poses.as_deref();
            let poses = truth.map(|t| (state.poses.as_slice(), t));
            let opts = EvalOptions {
                points: eval_points,
                ..Default::default()
            };
            let r = evaluate_phantom(&state.params, spec, poses, &opts, config.exec())?;
            info!("phantom MTE {:.4} mm, cosine {:?}", r.mte_mm, r.cosine.mean);
            Some(r)
        }
        _ => None,
    };
    let report = TrainReport {
        config_hash: state.config_hash.clone(),
        iterations: state.iteration,
        final_loss: state.history.last().map(|(_, l)| *l),
        phantom,
    };
    write_json(&out.join(REPORT), &report)?;
    Ok(report)
}
