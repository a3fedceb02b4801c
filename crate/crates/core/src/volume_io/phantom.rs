//! Analytic deforming shell with closed-form motion.
//!
//! A material point `p` at rest sits at `x(t) = c + s(t) (p - c)` where
//! `s(t) = 1 - (A/2)(1 - cos(2 pi t / T))`. Intensity is a function of the
//! material point only, so it is exactly conserved along trajectories.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{node_coord, Grid3, Image2, LabeledMask, MultiViewSequence, VolumeSequence, ViewSequence};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_from_rotation, pixel_to_plane, Direction, ViewPose};

pub const DEFAULT_BLOBS: usize = 40;
/// Blob width range in normalized units.
pub const BLOB_SIGMA: std::ops::Range<f64> = 0.05..0.08;
/// Wall edge width in normalized units.
pub const DEFAULT_EDGE: f64 = 0.065;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_edge() -> f64 {
    DEFAULT_EDGE
}

fn default_base() -> f64 {
    0.35
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_dims: [usize; 3],
    #[serde(rename = "period_T")]
    pub period_t: usize,
    pub center: [f64; 3],
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Contraction amplitude `A`; the minimum scale is `1 - A`.
    pub amplitude: f64,
    pub texture_seed: u64,
    /// Gaussian blobs in material coordinates. Regenerated from
    /// `texture_seed` when empty.
    #[serde(default)]
    pub blobs: Vec<Blob>,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    /// Width of the smooth wall edge in normalized units; one voxel when 0.
    #[serde(default = "default_edge")]
    pub edge_width: f64,
    /// Wall brightness before blobs are added.
    #[serde(default = "default_base")]
    pub base_level: f64,
}

/// Geometry of the synthetic 2D acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomViews {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Alternating out-of-axis tilt so view planes do not share a common line.
    pub tilt_deg: f64,
    /// How many of the views are short-axis planes across the long axis.
    /// Long-axis planes alone leave the azimuth of each view almost
    /// unobservable.
    #[serde(default)]
    pub short_axis: usize,
}

impl Default for PhantomViews {
    fn default() -> Self {
        PhantomViews {
            count: 8,
            width: 32,
            height: 32,
            tilt_deg: 20.0,
            short_axis: 3,
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl PhantomSpec {
    /// Centered shell with radii 0.2 and 0.38 and a generated texture.
    pub fn new(dims: [usize; 3], period: usize, amplitude: f64, seed: u64) -> Self {
        let mut spec = PhantomSpec {
            grid_dims: dims,
            period_t: period,
            center: [0.5; 3],
            inner_radius: 0.2,
            outer_radius: 0.38,
            amplitude,
            texture_seed: seed,
            blobs: Vec::new(),
            spacing_mm: [1.0; 3],
            edge_width: DEFAULT_EDGE,
            base_level: default_base(),
        };
        spec.ensure_texture();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0 < self.inner_radius && self.inner_radius < self.outer_radius && self.outer_radius < 0.5) {
            return bad(format!(
                "radii must satisfy 0 < inner < outer < 0.5, got {} / {}",
                self.inner_radius, self.outer_radius
            ));
        }
        if !(0.0..1.0).contains(&self.amplitude) {
            return bad(format!("amplitude must lie in [0, 1), got {}", self.amplitude));
        }
        if self.period_t < 4 {
            return bad(format!("phantom period must be at least 4, got {}", self.period_t));
        }
        if self.grid_dims.iter().any(|&d| d < 2) {
            return bad("phantom grid needs at least 2 nodes per axis".into());
        }
        for a in 0..3 {
            let c = self.center[a];
            if c - self.outer_radius < 0.0 || c + self.outer_radius > 1.0 {
                return bad("shell does not fit inside the unit cube".into());
            }
        }
        Ok(())
    }

    /// Fill `blobs` from the seed if it is empty.
    pub fn ensure_texture(&mut self) {
        if !self.blobs.is_empty() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let c = Vector3::from(self.center);
        while self.blobs.len() < DEFAULT_BLOBS {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * self.outer_radius;
            let r = p.norm();
            if r < self.inner_radius || r > self.outer_radius {
                continue;
            }
            let q = c + p;
            self.blobs.push(Blob {
                center: [q.x, q.y, q.z],
                sigma: rng.random_range(BLOB_SIGMA),
                amplitude: rng.random_range(0.25..0.6),
            });
        }
    }

    fn edge(&self) -> f64 {
        if self.edge_width > 0.0 {
            self.edge_width
        } else {
            1.0 / (self.grid_dims.iter().copied().max().unwrap() - 1) as f64
        }
    }

    /// Contraction scale `s(t)` for a real-valued frame index.
    pub fn scale(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * t / self.period_t as f64;
        1.0 - 0.5 * self.amplitude * (1.0 - w.cos())
    }

    /// Smallest scale over the cycle, reached at `t = T/2`.
    pub fn min_scale(&self) -> f64 {
        1.0 - self.amplitude
    }

    pub fn material_point(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        let s = self.scale(t);
        if s == 1.0 {
            return x;
        }
        [0, 1, 2].map(|a| (x[a] - self.center[a]) / s + self.center[a])
    }

    pub fn spatial_point(&self, p: [f64; 3], t: f64) -> [f64; 3] {
        let s = self.scale(t);
        [0, 1, 2].map(|a| self.center[a] + s * (p[a] - self.center[a]))
    }

    /// Exact displacement of the material point currently at `x` from
    /// frame `t` to `t + 1` (forward) or `t - 1` (backward).
    pub fn true_motion(&self, x: [f64; 3], t: i64, direction: Direction) -> [f64; 3] {
        let s0 = self.scale(t as f64);
        let s1 = self.scale((t + direction.step()) as f64);
        let k = s1 / s0 - 1.0;
        [0, 1, 2].map(|a| k * (x[a] - self.center[a]))
    }

    /// Exact spatial Jacobian of the forward motion at frame `t`.
    pub fn true_motion_jacobian(&self, t: i64) -> Matrix3<f64> {
        let k = self.scale((t + 1) as f64) / self.scale(t as f64) - 1.0;
        Matrix3::identity() * k
    }

    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| (p[a] - self.center[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rest-state brightness of a material point.
    pub fn texture(&self, p: [f64; 3]) -> f64 {
        let r = self.radius(p);
        let w = self.edge();
        let profile = smoothstep((r - self.inner_radius) / w + 0.5) * smoothstep((self.outer_radius - r) / w + 0.5);
        if profile == 0.0 {
            return 0.0;
        }
        let mut v = self.base_level;
        for b in &self.blobs {
            let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
            v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        (profile * v).clamp(0.0, 1.0)
    }

    pub fn intensity(&self, x: [f64; 3], t: f64) -> f64 {
        self.texture(self.material_point(x, t))
    }

    /// Whether the material point at `x` lies inside the wall.
    pub fn in_shell(&self, x: [f64; 3], t: f64) -> bool {
        let r = self.radius(self.material_point(x, t));
        (self.inner_radius..=self.outer_radius).contains(&r)
    }

    pub fn generate(&self) -> Result<VolumeSequence> {
        self.validate()?;
        let frames = (0..self.period_t)
            .map(|t| {
                Grid3::from_fn(self.grid_dims, |i, j, k| {
                    let x = [
                        node_coord(i, self.grid_dims[0]),
                        node_coord(j, self.grid_dims[1]),
                        node_coord(k, self.grid_dims[2]),
                    ];
                    self.intensity(x, t as f64) as f32
                })
            })
            .collect();
        VolumeSequence::new(frames, self.spacing_mm)
    }

    pub fn shell_mask(&self, t: usize) -> LabeledMask {
        let d = self.grid_dims;
        let grid = Grid3::from_fn(d, |i, j, k| {
            let x = [node_coord(i, d[0]), node_coord(j, d[1]), node_coord(k, d[2])];
            u8::from(self.in_shell(x, t as f64)) as f32
        });
        LabeledMask {
            dims: d,
            data: grid.data.iter().map(|&v| v as u8).collect(),
            frame_index: t,
            region_tag: "shell".into(),
        }
    }

    /// Material points drawn uniformly from the wall volume.
    pub fn sample_material_points(&self, rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0) * self.outer_radius);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if r < self.inner_radius || r > self.outer_radius {
                continue;
            }
            out.push([0, 1, 2].map(|a| self.center[a] + p[a]));
        }
        out
    }

    /// Ground-truth poses of the synthetic views. Long-axis planes come
    /// first: through the center at evenly spaced azimuths about the long (z)
    /// axis, with alternating tilt. Short-axis planes follow, perpendicular
    /// to the axis at heights spread over the middle of the shell.
    pub fn view_poses(&self, views: &PhantomViews) -> Vec<ViewPose> {
        let short = views.short_axis.min(views.count.saturating_sub(1));
        let long = views.count - short;
        let mut poses: Vec<ViewPose> = (0..long)
            .map(|k| {
                let azimuth = std::f64::consts::PI * k as f64 / long as f64;
                let tilt = if k % 2 == 0 { views.tilt_deg } else { -views.tilt_deg };
                let r = Rotation3::from_axis_angle(&Vector3::z_axis(), azimuth)
                    * Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2 + tilt.to_radians());
                ViewPose::new(axis_angle_from_rotation(r.matrix()), self.center)
            })
            .collect();
        for j in 0..short {
            let f = if short > 1 { 2.0 * j as f64 / (short - 1) as f64 - 1.0 } else { 0.0 };
            let mut t = self.center;
            t[2] += 0.5 * self.outer_radius * f;
            poses.push(ViewPose::new([0.0; 3], t));
        }
        poses
    }

    /// Slice the analytic phantom through each pose.
    pub fn slice_views(&self, poses: &[ViewPose], width: usize, height: usize) -> Result<MultiViewSequence> {
        self.validate()?;
        let views = poses
            .iter()
            .map(|pose| ViewSequence {
                frames: (0..self.period_t)
                    .map(|t| {
                        let mut data = Vec::with_capacity(width * height);
                        for j in 0..height {
                            for i in 0..width {
                                let (u, v) = pixel_to_plane(i, j, width, height);
                                let x = pose.map_plane(u, v);
                                let inside = x.iter().all(|c| (0.0..=1.0).contains(c));
                                data.push(if inside { self.intensity(x, t as f64) as f32 } else { 0.0 });
                            }
                        }
                        Image2 { width, height, data }
                    })
                    .collect(),
            })
            .collect();
        MultiViewSequence::new(views, poses.to_vec())
    }
}

/// Rotate each pose by a random axis with angle up to `max_deg`, leaving the
/// first `anchored` poses untouched.
pub fn perturb_poses(poses: &[ViewPose], max_deg: f64, anchored: usize, seed: u64) -> Vec<ViewPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            if k < anchored {
                return *pose;
            }
            let axis = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 0.1 && n <= 1.0 {
                    break v / n;
                }
            };
            let angle = rng.random_range(0.5 * max_deg..=max_deg).to_radians();
            let delta = Rotation3::new(axis * angle);
            let r = delta.matrix() * pose.rotation_matrix();
            ViewPose {
                rotation: axis_angle_from_rotation(&r),
                ..*pose
            }
        })
        .collect()
}
