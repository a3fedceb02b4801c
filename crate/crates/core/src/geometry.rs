//! Time normalization, point advection, trajectories and the virtual
//! slicing operator used for multi-view 2D supervision.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{eval_points, FieldParams};
use crate::parallel::Exec;
use crate::real::Real;
use crate::volume_io::{Image2, VolumeSequence};

/// Phase of frame `t` within a cycle of `period` frames, in `[0, 1)`.
pub fn normalize_time(t: i64, period: usize) -> Result<f64> {
    if period < 2 {
        return Err(Error::InvalidConfig(format!(
            "cardiac period must be at least 2 frames, got {period}"
        )));
    }
    Ok(phase(t, period))
}

/// Unchecked variant of [`normalize_time`] for hot loops.
#[inline]
pub fn phase(t: i64, period: usize) -> f64 {
    t.rem_euclid(period as i64) as f64 / period as f64
}

#[inline]
pub fn advect(x: [f64; 3], m: [f64; 3]) -> [f64; 3] {
    [x[0] + m[0], x[1] + m[1], x[2] + m[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn step(self) -> i64 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }
}

/// Lower/upper bound of the divergence guard box, per axis.
pub const GUARD_LO: f64 = -0.5;
pub const GUARD_HI: f64 = 1.5;

pub fn inside_guard(x: &[f64; 3]) -> bool {
    x.iter().all(|v| (GUARD_LO..=GUARD_HI).contains(v))
}

/// A tracked path through consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub direction: Direction,
    /// `(frame, position)` pairs; frames step by exactly one.
    pub points: Vec<(i64, [f64; 3])>,
    /// Index into `points` of the first position outside the guard box.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn start(&self) -> [f64; 3] {
        self.points[0].1
    }

    pub fn end(&self) -> [f64; 3] {
        self.points.last().unwrap().1
    }

    pub fn is_divergent(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Follow many seeds through `steps` frames using the field's own motion.
pub fn compose_many<F: Real>(
    params: &FieldParams<F>,
    seeds: &[[f64; 3]],
    t0: i64,
    steps: usize,
    direction: Direction,
    period: usize,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("trajectory needs at least one step".into()));
    }
    let mut trajs: Vec<Trajectory> = seeds
        .iter()
        .map(|&s| Trajectory {
            direction,
            points: vec![(t0, s)],
            diverged_at: if inside_guard(&s) { None } else { Some(0) },
        })
        .collect();
    let mut current: Vec<[f64; 3]> = seeds.to_vec();
    for k in 0..steps {
        let t = t0 + direction.step() * k as i64;
        let ts = vec![phase(t, period); current.len()];
        let out = eval_points(params, &current, &ts, exec);
        for (i, (pos, sample)) in current.iter_mut().zip(&out).enumerate() {
            let m = match direction {
                Direction::Forward => sample.forward,
                Direction::Backward => sample.backward,
            };
            *pos = advect(*pos, m);
            let traj = &mut trajs[i];
            traj.points.push((t + direction.step(), *pos));
            if traj.diverged_at.is_none() && !inside_guard(pos) {
                traj.diverged_at = Some(traj.points.len() - 1);
            }
        }
    }
    Ok(trajs)
}

/// Single-seed trajectory of `steps + 1` points.
pub fn compose_cycle<F: Real>(
    params: &FieldParams<F>,
    x0: [f64; 3],
    t0: i64,
    steps: usize,
    direction: Direction,
    period: usize,
) -> Result<Trajectory> {
    Ok(compose_many(params, &[x0], t0, steps, direction, period, Exec::Sequential)?.remove(0))
}

/// Physical description of a regular grid, used to convert normalized
/// coordinates to millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl GridFrame {
    pub fn to_mm(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| x[a] * (self.dims[a] - 1) as f64 * self.spacing_mm[a])
    }

    /// Scale a normalized displacement to millimeters.
    pub fn vector_to_mm(&self, v: [f64; 3]) -> [f64; 3] {
        self.to_mm(v)
    }
}

/// Write trajectories as CSV: `point_id,frame,x,y,z,x_mm,y_mm,z_mm`.
pub fn write_trajectories_csv(path: &Path, trajs: &[Trajectory], grid: &GridFrame) -> Result<()> {
    let mut out = String::from("point_id,frame,x,y,z,x_mm,y_mm,z_mm\n");
    for (id, traj) in trajs.iter().enumerate() {
        for (frame, p) in &traj.points {
            let mm = grid.to_mm(*p);
            out.push_str(&format!(
                "{id},{frame},{},{},{},{},{},{}\n",
                p[0], p[1], p[2], mm[0], mm[1], mm[2]
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid placement of an image plane in world coordinates.
///
/// A pixel at plane coordinates `(u, v)` in `[0, 1]^2` is the local point
/// `q = (u - 1/2, v - 1/2, 0)`; its world position is `R q + translation`
/// where `R` is the rotation with axis-angle vector `rotation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    #[serde(default = "default_true")]
    pub rotation_trainable: bool,
    #[serde(default = "default_true")]
    pub translation_trainable: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ViewPose {
    fn default() -> Self {
        ViewPose {
            rotation: [0.0; 3],
            translation: [0.5; 3],
            rotation_trainable: true,
            translation_trainable: true,
        }
    }
}

const SMALL_ANGLE: f64 = 1e-8;

impl ViewPose {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        ViewPose {
            rotation,
            translation,
            ..Default::default()
        }
    }

    pub fn frozen(mut self) -> Self {
        self.rotation_trainable = false;
        self.translation_trainable = false;
        self
    }

    /// Rodrigues' formula.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_axis_angle(Vector3::from(self.rotation))
    }

    /// `dR/dr_i` for the three axis-angle components.
    pub fn rotation_derivatives(&self) -> [Matrix3<f64>; 3] {
        let r = Vector3::from(self.rotation);
        let theta2 = r.norm_squared();
        let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
        if theta2.sqrt() < SMALL_ANGLE {
            let k = skew(&r);
            return basis.map(|e| {
                let ei = skew(&e);
                ei + 0.5 * (ei * k + k * ei)
            });
        }
        let rot = rotation_from_axis_angle(r);
        let k = skew(&r);
        let id = Matrix3::identity();
        basis.map(|e| {
            let lhs = r.dot(&e) * k + skew(&r.cross(&((id - rot) * e)));
            lhs * rot / theta2
        })
    }

    pub fn plane_point(u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(u - 0.5, v - 0.5, 0.0)
    }

    pub fn map_plane(&self, u: f64, v: f64) -> [f64; 3] {
        let w = self.rotation_matrix() * Self::plane_point(u, v) + Vector3::from(self.translation);
        [w.x, w.y, w.z]
    }

    /// Whether `R^T R = I` and `det R = 1` within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation_matrix();
        ((r.transpose() * r) - Matrix3::identity()).amax() <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    /// Angle in degrees of the relative rotation between two poses.
    pub fn rotation_error_deg(&self, other: &ViewPose) -> f64 {
        let rel = self.rotation_matrix().transpose() * other.rotation_matrix();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

pub fn rotation_from_axis_angle(r: Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = skew(&r);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / (theta * theta)) * (k * k)
}

/// Axis-angle vector of a rotation matrix.
pub fn axis_angle_from_rotation(m: &Matrix3<f64>) -> [f64; 3] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

/// Anything that can be probed for intensity at world positions.
pub trait IntensitySource: Sync {
    fn intensities(&self, points: &[[f64; 3]], frame: i64) -> Vec<f64>;
}

impl IntensitySource for VolumeSequence {
    fn intensities(&self, points: &[[f64; 3]], frame: i64) -> Vec<f64> {
        let t = frame.rem_euclid(self.period() as i64) as usize;
        points.iter().map(|p| self.sample(*p, t)).collect()
    }
}

/// A trained field viewed as an intensity source.
pub struct FieldSource<'a, F> {
    pub params: &'a FieldParams<F>,
    pub period: usize,
    pub exec: Exec,
}

impl<F: Real> IntensitySource for FieldSource<'_, F> {
    fn intensities(&self, points: &[[f64; 3]], frame: i64) -> Vec<f64> {
        let ts = vec![phase(frame, self.period); points.len()];
        eval_points(self.params, points, &ts, self.exec)
            .into_iter()
            .map(|s| s.intensity)
            .collect()
    }
}

/// World positions of every pixel of a `width x height` plane; row-major
/// with `u` fastest.
pub fn plane_positions(pose: &ViewPose, width: usize, height: usize) -> Vec<[f64; 3]> {
    let r = pose.rotation_matrix();
    let t = Vector3::from(pose.translation);
    let mut out = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            let (u, v) = pixel_to_plane(i, j, width, height);
            let w = r * ViewPose::plane_point(u, v) + t;
            out.push([w.x, w.y, w.z]);
        }
    }
    out
}

/// Plane coordinates of a pixel center, spanning `[0, 1]` inclusive.
pub fn pixel_to_plane(i: usize, j: usize, width: usize, height: usize) -> (f64, f64) {
    let u = if width > 1 { i as f64 / (width - 1) as f64 } else { 0.5 };
    let v = if height > 1 { j as f64 / (height - 1) as f64 } else { 0.5 };
    (u, v)
}

/// Synthesize the view seen through `pose` at frame `t`.
pub fn slice_image(
    source: &dyn IntensitySource,
    pose: &ViewPose,
    width: usize,
    height: usize,
    t: i64,
) -> Image2 {
    let pts = plane_positions(pose, width, height);
    let data = source
        .intensities(&pts, t)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Image2 {
        width,
        height,
        data,
    }
}
