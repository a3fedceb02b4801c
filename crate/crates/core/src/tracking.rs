//! Point tracking and ED-to-ES style warping of volumes and masks.

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::geometry::{compose_many, Direction, Trajectory};
use crate::parallel::Exec;
use crate::real::Real;
use crate::volume_io::{Grid3, LabeledMask};

/// Intensity threshold applied after pulling a mask through the motion.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Forward trajectories of `seeds` from frame `t0` over `n_frames` steps.
pub fn track_points<F: Real>(
    params: &FieldParams<F>,
    seeds: &[[f64; 3]],
    t0: i64,
    n_frames: usize,
    period: usize,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    if let Some(s) = seeds.iter().find(|s| !s.iter().all(|v| (0.0..=1.0).contains(v))) {
        return Err(Error::InvalidData(format!("seed {s:?} lies outside the unit cube")));
    }
    compose_many(params, seeds, t0, n_frames, Direction::Forward, period, exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub grid: Grid3,
    pub source_frame: usize,
    pub target_frame: usize,
    /// Distance in normalized units from each output node to its pre-image.
    pub displacement: Vec<f32>,
    /// Output nodes whose backward chain left the guard box.
    pub diverged: usize,
}

fn check_frames(t_src: usize, t_dst: usize, period: usize) -> Result<()> {
    if t_src >= period || t_dst >= period {
        return Err(Error::InvalidConfig(format!(
            "frames {t_src} -> {t_dst} outside a cycle of {period}"
        )));
    }
    Ok(())
}

/// Pre-image at `t_src` of every node of a `dims` grid at `t_dst`, found by
/// following the backward motion from `t_dst` down to `t_src` (wrapping
/// around the cycle when `t_src > t_dst`).
fn pre_images<F: Real>(
    params: &FieldParams<F>,
    dims: [usize; 3],
    t_src: usize,
    t_dst: usize,
    period: usize,
    exec: Exec,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>, usize)> {
    let probe = Grid3::zeros(dims);
    let mut nodes = Vec::with_capacity(probe.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                nodes.push(probe.node_position(i, j, k));
            }
        }
    }
    let steps = (t_dst + period - t_src) % period;
    if steps == 0 {
        return Ok((nodes.clone(), nodes, 0));
    }
    let trajs = compose_many(params, &nodes, t_dst as i64, steps, Direction::Backward, period, exec)?;
    let diverged = trajs.iter().filter(|t| t.is_divergent()).count();
    Ok((nodes, trajs.iter().map(Trajectory::end).collect(), diverged))
}

/// Resample `source` (at frame `t_src`) into frame `t_dst` by pulling each
/// output node back to its pre-image and interpolating trilinearly.
pub fn warp_volume<F: Real>(
    params: &FieldParams<F>,
    source: &Grid3,
    t_src: usize,
    t_dst: usize,
    period: usize,
    exec: Exec,
) -> Result<WarpResult> {
    check_frames(t_src, t_dst, period)?;
    if t_src == t_dst {
        return Ok(WarpResult {
            grid: source.clone(),
            source_frame: t_src,
            target_frame: t_dst,
            displacement: vec![0.0; source.len()],
            diverged: 0,
        });
    }
    let (nodes, pre, diverged) = pre_images(params, source.dims, t_src, t_dst, period, exec)?;
    let data = pre.iter().map(|&x| source.sample(x) as f32).collect();
    let displacement = nodes
        .iter()
        .zip(&pre)
        .map(|(a, b)| ((0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>()).sqrt() as f32)
        .collect();
    Ok(WarpResult {
        grid: Grid3 { dims: source.dims, data },
        source_frame: t_src,
        target_frame: t_dst,
        displacement,
        diverged,
    })
}

/// Warp a binary mask like [`warp_volume`], then threshold at one half.
pub fn warp_mask<F: Real>(
    params: &FieldParams<F>,
    mask: &LabeledMask,
    t_src: usize,
    t_dst: usize,
    period: usize,
    exec: Exec,
) -> Result<LabeledMask> {
    let w = warp_volume(params, &mask.to_grid(), t_src, t_dst, period, exec)?;
    let data = w.grid.data.iter().map(|&v| (v as f64 >= MASK_THRESHOLD) as u8).collect();
    LabeledMask::new(mask.dims, data, t_dst, &mask.region_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn still() -> FieldParams<f64> {
        FieldParams::init(3)
    }

    fn moving() -> FieldParams<f64> {
        let mut p = FieldParams::init(3);
        p.randomize_heads(&mut ChaCha8Rng::seed_from_u64(9), 0.05);
        p
    }

    fn blob_grid(dims: [usize; 3], seed: u64) -> Grid3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid3::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_motion_is_identity() {
        let p = still();
        let seeds = [[0.2, 0.3, 0.4], [0.9, 0.1, 0.5]];
        for t in track_points(&p, &seeds, 0, 6, 8, Exec::Sequential).unwrap() {
            assert_eq!(t.points.len(), 7);
            assert!(t.points.iter().all(|&(_, x)| x == t.start()));
        }
        let g = blob_grid([6, 5, 4], 1);
        let w = warp_volume(&p, &g, 0, 3, 8, Exec::Sequential).unwrap();
        // nodes map to themselves, so interpolation only sees weights of 0/1
        for (a, b) in w.grid.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(w.diverged, 0);
    }

    #[test]
    fn same_frame_warp_returns_source() {
        let p = moving();
        let g = blob_grid([5, 5, 5], 2);
        assert_eq!(warp_volume(&p, &g, 4, 4, 8, Exec::Sequential).unwrap().grid, g);
        let m = LabeledMask::new([5; 3], g.data.iter().map(|&v| (v > 0.5) as u8).collect(), 4, "lv").unwrap();
        assert_eq!(warp_mask(&p, &m, 4, 4, 8, Exec::Sequential).unwrap().data, m.data);
    }

    #[test]
    fn empty_mask_stays_empty_and_masks_stay_binary() {
        let p = moving();
        let m = LabeledMask::new([6; 3], vec![0; 216], 0, "").unwrap();
        assert_eq!(warp_mask(&p, &m, 0, 3, 8, Exec::Sequential).unwrap().count(), 0);
        let g = blob_grid([6; 3], 3);
        let m = LabeledMask::new([6; 3], g.data.iter().map(|&v| (v > 0.4) as u8).collect(), 0, "").unwrap();
        let w = warp_mask(&p, &m, 2, 5, 8, Exec::Sequential).unwrap();
        assert!(w.data.iter().all(|&v| v <= 1));
        assert_eq!(w.frame_index, 5);
    }

    #[test]
    fn warping_commutes_with_scaling() {
        let p = moving();
        let g = blob_grid([7, 6, 5], 4);
        let scaled = Grid3 {
            dims: g.dims,
            data: g.data.iter().map(|v| v * 4.0).collect(),
        };
        let a = warp_volume(&p, &g, 1, 6, 8, Exec::Sequential).unwrap();
        let b = warp_volume(&p, &scaled, 1, 6, 8, Exec::Sequential).unwrap();
        for (x, y) in a.grid.data.iter().zip(&b.grid.data) {
            assert_eq!(*x * 4.0, *y);
        }
    }

    #[test]
    fn parallel_warp_matches_sequential() {
        let p = moving();
        let g = blob_grid([9, 9, 9], 5);
        let a = warp_volume(&p, &g, 6, 2, 8, Exec::Sequential).unwrap();
        let b = warp_volume(&p, &g, 6, 2, 8, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn many_seeds_and_bad_inputs() {
        let p = moving();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seeds: Vec<[f64; 3]> = (0..2500).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        assert_eq!(track_points(&p, &seeds, 0, 8, 8, Exec::Parallel).unwrap().len(), 2500);
        assert!(track_points(&p, &[[1.2, 0.0, 0.0]], 0, 2, 8, Exec::Sequential).is_err());
        assert!(warp_volume(&p, &blob_grid([3; 3], 1), 0, 8, 8, Exec::Sequential).is_err());
    }
}
