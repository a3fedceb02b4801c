//! Lagrangian strain from the learned motion, anatomical directions and
//! AHA 17-segment curves.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{coord_jacobians, FieldParams};
use crate::geometry::{compose_many, phase, Direction, GridFrame};
use crate::parallel::Exec;
use crate::real::Real;
use crate::volume_io::LongAxis;

pub const N_SEGMENTS: usize = 17;

/// Disk radius below which a point belongs to the apex cap.
pub const APEX_CAP: f64 = 1.0 / 6.0;
/// Inner edge of the mid ring.
pub const APICAL_RING: f64 = 1.0 / 3.0;
/// Inner edge of the basal ring.
pub const MID_RING: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrainTensor {
    pub f: Matrix3<f64>,
    pub e: Matrix3<f64>,
    pub position: [f64; 3],
    pub frame: usize,
}

impl StrainTensor {
    pub fn new(f: Matrix3<f64>, position: [f64; 3], frame: usize) -> Self {
        StrainTensor {
            f,
            e: lagrangian_strain(&f),
            position,
            frame,
        }
    }
}

/// `F = I + J` for a spatial motion Jacobian `J`.
pub fn deformation_gradient(j: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::identity() + j
}

/// `E = (F^T F - I) / 2`, symmetrized against rounding.
pub fn lagrangian_strain(f: &Matrix3<f64>) -> Matrix3<f64> {
    let c = f.transpose() * f;
    let e = (c - Matrix3::identity()) * 0.5;
    (e + e.transpose()) * 0.5
}

pub fn directional_strain(e: &Matrix3<f64>, d: &Vector3<f64>) -> Result<f64> {
    if (d.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidData(format!("direction {d:?} is not a unit vector")));
    }
    Ok(d.dot(&(e * d)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionTriple {
    pub longitudinal: Vector3<f64>,
    pub radial: Vector3<f64>,
    pub circumferential: Vector3<f64>,
}

/// Local directions at `x`: longitudinal along the apex-to-base axis, radial
/// pointing away from the axis through the cavity center, circumferential
/// completing a right-handed frame.
pub fn local_directions(x: [f64; 3], axis: &LongAxis) -> Result<DirectionTriple> {
    let d_l = Vector3::from(axis.axis()?);
    directions_from(d_l, Vector3::from(x) - Vector3::from(axis.center))
}

fn directions_from(d_l: Vector3<f64>, outward: Vector3<f64>) -> Result<DirectionTriple> {
    let n = outward.norm();
    if !(n > 0.0) {
        return Err(Error::Degenerate("point coincides with the cavity center".into()));
    }
    let d_e = outward / n;
    let r = d_e - d_l * d_e.dot(&d_l);
    if r.norm() < 1e-6 {
        return Err(Error::Degenerate("point lies on the long axis".into()));
    }
    let radial = r.normalize();
    Ok(DirectionTriple {
        longitudinal: d_l,
        radial,
        circumferential: d_l.cross(&radial),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AhaAssignment {
    /// Segment id in `1..=17` per input point.
    pub segments: Vec<u8>,
    /// Bullseye coordinates `(radius, angle_deg)`; radius 0 at the apex and 1
    /// at the base, angle counterclockwise about the axis from anterior.
    pub disk: Vec<(f64, f64)>,
    pub axis: LongAxis,
}

impl AhaAssignment {
    pub fn counts(&self) -> [usize; N_SEGMENTS] {
        let mut c = [0; N_SEGMENTS];
        for &s in &self.segments {
            c[s as usize - 1] += 1;
        }
        c
    }
}

/// Segment id for bullseye coordinates.
pub fn aha_segment(radius: f64, angle_deg: f64) -> u8 {
    let sector = |width: f64, n: u8| (((angle_deg + width / 2.0).rem_euclid(360.0) / width) as u8).min(n - 1);
    if radius < APEX_CAP {
        17
    } else if radius < APICAL_RING {
        13 + sector(90.0, 4)
    } else if radius < MID_RING {
        7 + sector(60.0, 6)
    } else {
        1 + sector(60.0, 6)
    }
}

/// Map points onto the bullseye disk and assign AHA segments. The disk
/// radius is the normalized distance from the apex along the long axis,
/// clamped to `[0, 1]`.
pub fn aha_assign(points: &[[f64; 3]], axis: &LongAxis) -> Result<AhaAssignment> {
    if points.is_empty() {
        return Err(Error::InvalidData("no points to assign".into()));
    }
    let d_l = Vector3::from(axis.axis()?);
    let apex = Vector3::from(axis.apex);
    let length = (Vector3::from(axis.base) - apex).norm();
    let ant = Vector3::from(axis.anterior);
    let ant = ant - d_l * ant.dot(&d_l);
    if ant.norm() < 1e-9 {
        return Err(Error::Degenerate("anterior reference is parallel to the long axis".into()));
    }
    let e1 = ant.normalize();
    let e2 = d_l.cross(&e1);
    let mut segments = Vec::with_capacity(points.len());
    let mut disk = Vec::with_capacity(points.len());
    let mut off_axis = 0usize;
    for p in points {
        let v = Vector3::from(*p) - apex;
        let h = v.dot(&d_l);
        let radius = (h / length).clamp(0.0, 1.0);
        let planar = v - d_l * h;
        let angle = if planar.norm() > 1e-12 {
            off_axis += 1;
            planar.dot(&e2).atan2(planar.dot(&e1)).to_degrees().rem_euclid(360.0)
        } else {
            0.0
        };
        segments.push(aha_segment(radius, angle));
        disk.push((radius, angle));
    }
    if off_axis == 0 {
        return Err(Error::Degenerate("all points lie on the long axis".into()));
    }
    Ok(AhaAssignment {
        segments,
        disk,
        axis: axis.clone(),
    })
}

/// Mean strains of one segment at one frame; `None` for empty segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalStrain {
    pub longitudinal: f64,
    pub radial: f64,
    pub circumferential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainCurves {
    /// `segments[s][t]` for segment `s + 1` at frame `t`.
    pub segments: Vec<Vec<Option<DirectionalStrain>>>,
    /// Mean over all points per frame.
    pub global: Vec<DirectionalStrain>,
    pub missing_segments: Vec<u8>,
    /// Points whose trajectory left the guard box; still included.
    pub diverged_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakStrain {
    pub frame: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainSummary {
    pub longitudinal: PeakStrain,
    pub radial: PeakStrain,
    pub circumferential: PeakStrain,
}

impl StrainCurves {
    pub fn frames(&self) -> usize {
        self.global.len()
    }

    /// Frame and value of the largest-magnitude global strain per direction.
    pub fn peaks(&self) -> StrainSummary {
        let peak = |get: fn(&DirectionalStrain) -> f64| {
            let (frame, value) = self
                .global
                .iter()
                .map(get)
                .enumerate()
                .fold((0, 0.0f64), |best, (t, v)| if v.abs() > best.1.abs() { (t, v) } else { best });
            PeakStrain { frame, value }
        };
        StrainSummary {
            longitudinal: peak(|d| d.longitudinal),
            radial: peak(|d| d.radial),
            circumferential: peak(|d| d.circumferential),
        }
    }

    /// Segment table `segment,frame,E_l,E_r,E_c`, one row per segment and
    /// frame, with empty fields for missing segments.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("segment,frame,E_l,E_r,E_c\n");
        for (s, curve) in self.segments.iter().enumerate() {
            for (t, v) in curve.iter().enumerate() {
                match v {
                    Some(d) => out.push_str(&format!(
                        "{},{t},{},{},{}\n",
                        s + 1,
                        d.longitudinal,
                        d.radial,
                        d.circumferential
                    )),
                    None => out.push_str(&format!("{},{t},,,\n", s + 1)),
                }
            }
        }
        write_text(path, &out)
    }

    /// Long format `segment,frame,direction,value` with `direction` one of
    /// `l`, `r`, `c`; segment `global` rows follow the 17 segments.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("segment,frame,direction,value\n");
        let mut push = |seg: &str, t: usize, d: Option<&DirectionalStrain>| {
            for (name, v) in [
                ("l", d.map(|d| d.longitudinal)),
                ("r", d.map(|d| d.radial)),
                ("c", d.map(|d| d.circumferential)),
            ] {
                let v = v.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{seg},{t},{name},{v}\n"));
            }
        };
        for (s, curve) in self.segments.iter().enumerate() {
            for (t, v) in curve.iter().enumerate() {
                push(&(s + 1).to_string(), t, v.as_ref());
            }
        }
        for (t, d) in self.global.iter().enumerate() {
            push("global", t, Some(d));
        }
        write_text(path, &out)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Cumulative deformation gradients from frame 0 along each point's
/// trajectory, `F(t) = F_{t-1 -> t} ... F_{0 -> 1}`, in physical units.
/// Returns `period` gradients per point (identity at frame 0) and the
/// number of divergent trajectories.
pub fn cumulative_gradients<F: Real>(
    params: &FieldParams<F>,
    points: &[[f64; 3]],
    period: usize,
    grid: &GridFrame,
    exec: Exec,
) -> Result<(Vec<Vec<Matrix3<f64>>>, usize)> {
    let trajs = compose_many(params, points, 0, period - 1, Direction::Forward, period, exec)?;
    let diverged = trajs.iter().filter(|t| t.is_divergent()).count();
    // gradients of the normalized map carried to millimeters
    let s = Matrix3::from_diagonal(&Vector3::from(grid.vector_to_mm([1.0; 3])));
    let s_inv = s.try_inverse().ok_or_else(|| Error::Degenerate("zero grid extent".into()))?;
    let mut out = vec![vec![Matrix3::identity()]; points.len()];
    for step in 0..period - 1 {
        let xs: Vec<[f64; 3]> = trajs.iter().map(|t| t.points[step].1).collect();
        let ts = vec![phase(step as i64, period); xs.len()];
        for (acc, j) in out.iter_mut().zip(coord_jacobians(params, &xs, &ts, exec)) {
            let j = s * Matrix3::from_fn(|r, c| j[r][c]) * s_inv;
            let next = deformation_gradient(&j) * acc[step];
            acc.push(next);
        }
    }
    Ok((out, diverged))
}

/// Per-segment strain curves over one cycle for material points given at
/// frame 0. Directions are evaluated in the reference configuration.
pub fn strain_curves<F: Real>(
    params: &FieldParams<F>,
    points: &[[f64; 3]],
    assignment: &AhaAssignment,
    period: usize,
    grid: &GridFrame,
    exec: Exec,
) -> Result<StrainCurves> {
    if assignment.segments.len() != points.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} segment labels for {} points",
            assignment.segments.len(),
            points.len()
        )));
    }
    if period < 2 {
        return Err(Error::InvalidConfig("strain curves need a cycle of at least 2 frames".into()));
    }
    let dirs = points
        .iter()
        .map(|p| local_directions(*p, &assignment.axis))
        .collect::<Result<Vec<_>>>()?;
    let (grads, diverged_points) = cumulative_gradients(params, points, period, grid, exec)?;

    let mut sums = vec![vec![[0.0f64; 3]; period]; N_SEGMENTS];
    let mut global = vec![[0.0f64; 3]; period];
    for ((f_seq, d), &seg) in grads.iter().zip(&dirs).zip(&assignment.segments) {
        for (t, f) in f_seq.iter().enumerate() {
            let e = lagrangian_strain(f);
            let v = [
                d.longitudinal.dot(&(e * d.longitudinal)),
                d.radial.dot(&(e * d.radial)),
                d.circumferential.dot(&(e * d.circumferential)),
            ];
            for c in 0..3 {
                sums[seg as usize - 1][t][c] += v[c];
                global[t][c] += v[c];
            }
        }
    }
    let counts = assignment.counts();
    let mean = |v: [f64; 3], n: usize| DirectionalStrain {
        longitudinal: v[0] / n as f64,
        radial: v[1] / n as f64,
        circumferential: v[2] / n as f64,
    };
    let segments = sums
        .into_iter()
        .zip(counts)
        .map(|(curve, n)| curve.into_iter().map(|v| (n > 0).then(|| mean(v, n))).collect())
        .collect();
    let missing_segments = (1..=N_SEGMENTS as u8).filter(|s| counts[*s as usize - 1] == 0).collect();
    Ok(StrainCurves {
        segments,
        global: global.into_iter().map(|v| mean(v, points.len())).collect(),
        missing_segments,
        diverged_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::PhantomSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle).matrix()
    }

    #[test]
    fn tensor_examples() {
        assert_eq!(deformation_gradient(&Matrix3::zeros()), Matrix3::identity());
        let j = Matrix3::from_diagonal(&Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(deformation_gradient(&j), Matrix3::from_diagonal(&Vector3::new(1.1, 1.0, 1.0)));
        assert_eq!(lagrangian_strain(&Matrix3::identity()), Matrix3::zeros());
        let e = lagrangian_strain(&(Matrix3::identity() * 1.1));
        assert_abs_diff_eq!(e, Matrix3::identity() * 0.105, epsilon = 1e-15);
        let r = rotation([1.0, 2.0, -0.5], 0.7);
        assert!(lagrangian_strain(&r).abs().max() <= 1e-10);
    }

    #[test]
    fn strain_is_symmetric_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let f = Matrix3::from_fn(|_, _| rng.random_range(-1.5..1.5));
            let e = lagrangian_strain(&f);
            assert!((e - e.transpose()).abs().max() <= 1e-10);
            let r = rotation([rng.random(), rng.random(), rng.random::<f64>() + 0.1], rng.random_range(-3.0..3.0));
            assert!((lagrangian_strain(&(r * f)) - e).abs().max() <= 1e-10);
        }
    }

    #[test]
    fn directional_strain_matches_index_loop_and_rayleigh_bounds() {
        let e = Matrix3::from_diagonal(&Vector3::new(0.1, -0.2, 0.3));
        assert_eq!(directional_strain(&e, &Vector3::z()).unwrap(), 0.3);
        assert_eq!(directional_strain(&Matrix3::zeros(), &Vector3::x()).unwrap(), 0.0);
        assert!(directional_strain(&e, &Vector3::new(1.0, 1.0, 0.0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let e = (a + a.transpose()) * 0.5;
            let d = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let mut brute = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    brute += d[i] * e[(i, j)] * d[j];
                }
            }
            let v = directional_strain(&e, &d).unwrap();
            assert!((v - brute).abs() < 1e-14);
            let eig = e.symmetric_eigenvalues();
            assert!(v >= eig.min() - 1e-12 && v <= eig.max() + 1e-12);
        }
    }

    #[test]
    fn direction_examples() {
        let axis = LongAxis::vertical([0.0; 3], 1.0);
        let d = local_directions([1.0, 0.0, 0.0], &axis).unwrap();
        assert_eq!(d.radial, Vector3::x());
        assert_eq!(d.circumferential, Vector3::y());
        let d = local_directions([1.0, 0.0, 1.0], &axis).unwrap();
        assert_abs_diff_eq!(d.radial, Vector3::x(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.circumferential, Vector3::y(), epsilon = 1e-15);
        assert!(matches!(local_directions([0.0, 0.0, 0.4], &axis), Err(Error::Degenerate(_))));
    }

    #[test]
    fn directions_are_orthonormal() {
        let axis = LongAxis {
            center: [0.5; 3],
            apex: [0.4, 0.5, 0.1],
            base: [0.55, 0.45, 0.9],
            anterior: [0.0, 1.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut n = 0;
        while n < 10_000 {
            let x = [rng.random(), rng.random(), rng.random()];
            let Ok(d) = local_directions(x, &axis) else { continue };
            n += 1;
            for v in [d.longitudinal, d.radial, d.circumferential] {
                assert!((v.norm() - 1.0).abs() < 1e-10);
            }
            assert!(d.longitudinal.dot(&d.radial).abs() < 1e-8);
            assert!(d.longitudinal.dot(&d.circumferential).abs() < 1e-8);
            assert!(d.radial.dot(&d.circumferential).abs() < 1e-8);
        }
    }

    #[test]
    fn aha_examples() {
        let axis = LongAxis::vertical([0.5; 3], 0.3);
        let a = aha_assign(&[axis.apex, [0.5, 0.75, 0.75], [0.5, 0.75, 0.5], [0.75, 0.5, 0.35]], &axis).unwrap();
        assert_eq!(a.segments[0], 17);
        // anterior is +y
        assert_eq!(a.segments[1], 1);
        assert_eq!(a.segments[2], 7);
        // +x is a quarter turn from anterior, clockwise seen from the base
        assert_eq!(a.segments[3], 16);
        assert!(a.disk.iter().all(|&(r, _)| (0.0..=1.0).contains(&r)));
        assert!(aha_assign(&[], &axis).is_err());
        assert!(aha_assign(&[axis.apex, axis.base], &axis).is_err());
        for (angle, seg) in [(0.0, 1), (29.9, 1), (30.0, 2), (330.0, 1), (329.9, 6), (200.0, 4)] {
            assert_eq!(aha_segment(0.9, angle), seg);
        }
        assert_eq!(aha_segment(0.2, 44.0), 13);
        assert_eq!(aha_segment(0.2, 46.0), 14);
        assert_eq!(aha_segment(0.1, 200.0), 17);
    }

    #[test]
    fn phantom_shell_fills_every_segment() {
        let spec = PhantomSpec::new([32; 3], 8, 0.2, 1);
        let pts = spec.sample_material_points(&mut ChaCha8Rng::seed_from_u64(4), 4000);
        let axis = LongAxis::vertical(spec.center, spec.outer_radius);
        let a = aha_assign(&pts, &axis).unwrap();
        assert!(a.counts().iter().all(|&c| c > 0), "{:?}", a.counts());
    }

    #[test]
    fn zero_motion_gives_flat_zero_curves() {
        let p = FieldParams::<f64>::init(1);
        let spec = PhantomSpec::new([16; 3], 6, 0.2, 1);
        let pts = spec.sample_material_points(&mut ChaCha8Rng::seed_from_u64(5), 300);
        let axis = LongAxis::vertical(spec.center, spec.outer_radius);
        let a = aha_assign(&pts, &axis).unwrap();
        let grid = GridFrame {
            dims: [16; 3],
            spacing_mm: [1.0; 3],
        };
        let c = strain_curves(&p, &pts, &a, 6, &grid, Exec::Sequential).unwrap();
        assert_eq!(c.frames(), 6);
        for curve in c.segments.iter().flatten().flatten() {
            assert_eq!([curve.longitudinal, curve.radial, curve.circumferential], [0.0; 3]);
        }
        assert_eq!(c.peaks().radial.value, 0.0);
    }

    #[test]
    fn curves_start_at_zero_and_report_missing_segments() {
        let mut p = FieldParams::<f64>::init(2);
        p.randomize_heads(&mut ChaCha8Rng::seed_from_u64(6), 0.02);
        let axis = LongAxis::vertical([0.5; 3], 0.3);
        let pts = [[0.5, 0.75, 0.75], [0.75, 0.5, 0.3]];
        let a = aha_assign(&pts, &axis).unwrap();
        let grid = GridFrame {
            dims: [20, 20, 10],
            spacing_mm: [1.0, 1.0, 2.0],
        };
        let c = strain_curves(&p, &pts, &a, 5, &grid, Exec::Sequential).unwrap();
        assert_eq!(c.global[0].radial, 0.0);
        assert_eq!(c.missing_segments.len(), 15);
        assert!(c.segments[1][2].is_none());
        assert!(c.segments[0][3].unwrap().radial != 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        c.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 17 * 5);
        assert!(text.contains("\n2,0,,,\n"));
        c.write_long_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 17 * 5 * 3 + 5 * 3);
        assert!(text.contains("\n2,0,r,\n"));
    }

    #[test]
    fn uniform_scaling_field_gives_analytic_cumulative_strain() {
        // Chain of exact per-step gradients k_t I composes to s(t)/s(0) I.
        let spec = PhantomSpec::new([16; 3], 8, 0.2, 1);
        let mut f = Matrix3::identity();
        for t in 0..4 {
            f = deformation_gradient(&spec.true_motion_jacobian(t)) * f;
        }
        let e = lagrangian_strain(&f);
        assert_abs_diff_eq!(e[(0, 0)], (0.8f64.powi(2) - 1.0) / 2.0, epsilon = 1e-12);
    }
}
