//! Evaluation of a trained field against the analytic phantom.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{eval_points, FieldParams};
use crate::geometry::{compose_many, phase, Direction, GridFrame, ViewPose};
use crate::metrics::{hausdorff, motion_cosine, motion_errors_mm, median, overlap_metrics, CosineSummary};
use crate::parallel::Exec;
use crate::real::Real;
use crate::strain::{aha_assign, strain_curves};
use crate::tracking::warp_mask;
use crate::volume_io::{LongAxis, PhantomSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub points: usize,
    pub seed: u64,
    /// Also compute the cumulative strain at peak contraction.
    pub strain: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            points: 10_000,
            seed: 7,
            strain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomReport {
    pub points: usize,
    /// Per-step forward motion error, median over shell samples.
    pub mte_mm: f64,
    pub mte_voxels: f64,
    pub mte_backward_mm: f64,
    pub cosine: CosineSummary,
    pub cosine_backward: CosineSummary,
    /// Distance between start and end of a full forward cycle, normalized units.
    pub cycle_residual_mean: f64,
    pub cycle_residual_median: f64,
    pub divergent_cycles: usize,
    pub ed_frame: usize,
    pub es_frame: usize,
    pub dice_ed_es: f64,
    pub jaccard_ed_es: f64,
    pub hausdorff_ed_es_mm: f64,
    pub dice_round_trip: f64,
    /// Global mean radial strain at the end-systolic frame and its closed form.
    pub radial_strain_es: Option<f64>,
    pub radial_strain_expected: f64,
    /// Largest view rotation error against the true poses (2D data only).
    pub max_pose_error_deg: Option<f64>,
}

/// Frame of peak contraction.
pub fn es_frame(spec: &PhantomSpec) -> usize {
    spec.period_t / 2
}

/// Material points in the shell with a frame assignment cycling through the
/// period, positioned where they sit at that frame.
fn shell_samples(spec: &PhantomSpec, n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<i64>) {
    let material = spec.sample_material_points(&mut ChaCha8Rng::seed_from_u64(seed), n);
    let frames: Vec<i64> = (0..n).map(|i| (i % spec.period_t) as i64).collect();
    let spatial = material
        .iter()
        .zip(&frames)
        .map(|(p, &t)| spec.spatial_point(*p, t as f64))
        .collect();
    (material, spatial, frames)
}

pub fn evaluate_phantom<F: Real>(
    params: &FieldParams<F>,
    spec: &PhantomSpec,
    poses: Option<(&[ViewPose], &[ViewPose])>,
    opts: &EvalOptions,
    exec: Exec,
) -> Result<PhantomReport> {
    if opts.points == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one point".into()));
    }
    let period = spec.period_t;
    let grid = GridFrame {
        dims: spec.grid_dims,
        spacing_mm: spec.spacing_mm,
    };
    let (material, spatial, frames) = shell_samples(spec, opts.points, opts.seed);
    let ts: Vec<f64> = frames.iter().map(|&t| phase(t, period)).collect();
    let out = eval_points(params, &spatial, &ts, exec);
    let pred_f: Vec<[f64; 3]> = out.iter().map(|s| s.forward).collect();
    let pred_b: Vec<[f64; 3]> = out.iter().map(|s| s.backward).collect();
    let truth = |d| -> Vec<[f64; 3]> {
        spatial
            .iter()
            .zip(&frames)
            .map(|(x, &t)| spec.true_motion(*x, t, d))
            .collect()
    };
    let (gt_f, gt_b) = (truth(Direction::Forward), truth(Direction::Backward));
    let mut err_f = motion_errors_mm(&pred_f, &gt_f, &grid)?;
    let mut err_b = motion_errors_mm(&pred_b, &gt_b, &grid)?;
    let mte_mm = median(&mut err_f).unwrap();
    let voxel_mm = grid.vector_to_mm([1.0, 0.0, 0.0])[0] / (grid.dims[0].max(2) - 1) as f64;

    let cycles = compose_many(params, &material, 0, period, Direction::Forward, period, exec)?;
    let mut residuals: Vec<f64> = cycles
        .iter()
        .map(|c| {
            let (a, b) = (c.start(), c.end());
            (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let cycle_residual_mean = residuals.iter().sum::<f64>() / residuals.len() as f64;

    let es = es_frame(spec);
    let ed_mask = spec.shell_mask(0);
    let es_mask = spec.shell_mask(es);
    let warped = warp_mask(params, &ed_mask, 0, es, period, exec)?;
    let ov = overlap_metrics(&warped, &es_mask)?;
    let hd = if warped.count() > 0 {
        hausdorff(&warped, &es_mask, spec.spacing_mm, false)?
    } else {
        f64::INFINITY
    };
    let back = warp_mask(params, &warped, es, 0, period, exec)?;
    let round = overlap_metrics(&back, &ed_mask)?;

    let radial_strain_es = if opts.strain {
        let axis = LongAxis::vertical(spec.center, spec.outer_radius);
        let assign = aha_assign(&material, &axis)?;
        let curves = strain_curves(params, &material, &assign, period, &grid, exec)?;
        Some(curves.global[es].radial)
    } else {
        None
    };
    let s = spec.scale(es as f64);

    let max_pose_error_deg = poses.map(|(est, truth)| {
        est.iter()
            .zip(truth)
            .map(|(a, b)| a.rotation_error_deg(b))
            .fold(0.0, f64::max)
    });

    Ok(PhantomReport {
        points: opts.points,
        mte_mm,
        mte_voxels: mte_mm / voxel_mm,
        mte_backward_mm: median(&mut err_b).unwrap(),
        cosine: motion_cosine(&pred_f, &gt_f)?,
        cosine_backward: motion_cosine(&pred_b, &gt_b)?,
        cycle_residual_mean,
        cycle_residual_median: median(&mut residuals).unwrap(),
        divergent_cycles: cycles.iter().filter(|c| c.is_divergent()).count(),
        ed_frame: 0,
        es_frame: es,
        dice_ed_es: ov.dice,
        jaccard_ed_es: ov.jaccard,
        hausdorff_ed_es_mm: hd,
        dice_round_trip: round.dice,
        radial_strain_es,
        radial_strain_expected: 0.5 * (s * s - 1.0),
        max_pose_error_deg,
    })
}

/// Error of the zero-motion predictor, a floor any useful model must beat.
pub fn zero_motion_mte_mm(spec: &PhantomSpec, opts: &EvalOptions) -> Result<f64> {
    let grid = GridFrame {
        dims: spec.grid_dims,
        spacing_mm: spec.spacing_mm,
    };
    let (_, spatial, frames) = shell_samples(spec, opts.points, opts.seed);
    let gt: Vec<[f64; 3]> = spatial
        .iter()
        .zip(&frames)
        .map(|(x, &t)| spec.true_motion(*x, t, Direction::Forward))
        .collect();
    let zero = vec![[0.0; 3]; gt.len()];
    crate::metrics::mte(&zero, &gt, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_field_report() {
        let spec = PhantomSpec::new([16; 3], 6, 0.2, 1);
        let p = FieldParams::<f64>::init(0);
        let opts = EvalOptions {
            points: 600,
            ..Default::default()
        };
        let r = evaluate_phantom(&p, &spec, None, &opts, Exec::Sequential).unwrap();
        // zero heads predict no motion at all
        assert_eq!(r.mte_mm, zero_motion_mte_mm(&spec, &opts).unwrap());
        assert_eq!(r.cosine.mean, None);
        assert_eq!(r.cycle_residual_mean, 0.0);
        assert_eq!(r.dice_round_trip, 1.0);
        assert!(r.dice_ed_es < 1.0);
        assert_eq!(r.radial_strain_es, Some(0.0));
        assert!((r.radial_strain_expected + 0.18).abs() < 1e-12);
        assert_eq!(r.es_frame, 3);
        assert!((r.mte_voxels * 1.0 - r.mte_mm).abs() < 1e-12);
    }

    #[test]
    fn report_is_deterministic_across_execution_modes() {
        let spec = PhantomSpec::new([12; 3], 4, 0.2, 1);
        let mut p = FieldParams::<f64>::init(0);
        p.randomize_heads(&mut ChaCha8Rng::seed_from_u64(1), 0.01);
        let opts = EvalOptions {
            points: 300,
            ..Default::default()
        };
        let a = evaluate_phantom(&p, &spec, None, &opts, Exec::Sequential).unwrap();
        let b = evaluate_phantom(&p, &spec, None, &opts, Exec::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
