//! Volumes, images and masks, their on-disk format, and the analytic
//! phantom used as ground truth.
//!
//! Raw blobs are little-endian `f32` (`.f32raw`) or bytes (`.u8raw`) in
//! x-fastest order. A JSON manifest ties blobs together into a dataset.

mod manifest;
mod phantom;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ViewPose;

pub use manifest::{
    default_view_poses, load_manifest, write_multiview_dataset, write_volume_dataset, Dataset, DatasetKind, LongAxis,
    Manifest, MaskEntry, Mode, ViewEntry,
};
pub use phantom::{perturb_poses, Blob, PhantomSpec, PhantomViews};

/// Scalar grid of `nx * ny * nz` values, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Grid3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Grid3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Grid3 { dims, data }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Normalized coordinates of node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            node_coord(i, self.dims[0]),
            node_coord(j, self.dims[1]),
            node_coord(k, self.dims[2]),
        ]
    }

    /// Trilinear interpolation at normalized `x`; zero outside `[0,1]^3`.
    pub fn sample(&self, x: [f64; 3]) -> f64 {
        if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
            return 0.0;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n < 2 {
                continue;
            }
            let g = x[a] * (n - 1) as f64;
            let i0 = (g.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let v = self.get(
                base[0] + o[0] * step(0),
                base[1] + o[1] * step(1),
                base[2] + o[2] * step(2),
            );
            acc += w * v as f64;
        }
        acc
    }
}

#[inline]
pub fn node_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.5
    }
}

/// 2D scalar image, `u` (width) fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image2 {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i + self.width * j]
    }

    /// Bilinear interpolation at plane coordinates in `[0,1]^2`, zero outside.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return 0.0;
        }
        let axis = |x: f64, n: usize| -> (usize, usize, f64) {
            if n < 2 {
                return (0, 0, 0.0);
            }
            let g = x * (n - 1) as f64;
            let i0 = (g.floor() as usize).min(n - 2);
            (i0, i0 + 1, g - i0 as f64)
        };
        let (i0, i1, fu) = axis(u, self.width);
        let (j0, j1, fv) = axis(v, self.height);
        let a = self.get(i0, j0) as f64 * (1.0 - fu) + self.get(i1, j0) as f64 * fu;
        let b = self.get(i0, j1) as f64 * (1.0 - fu) + self.get(i1, j1) as f64 * fu;
        a * (1.0 - fv) + b * fv
    }
}

/// A cardiac cycle of 3D frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSequence {
    pub frames: Vec<Grid3>,
    pub spacing_mm: [f64; 3],
}

impl VolumeSequence {
    pub fn new(frames: Vec<Grid3>, spacing_mm: [f64; 3]) -> Result<Self> {
        let seq = VolumeSequence { frames, spacing_mm };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidData(format!(
                "a sequence needs at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        let dims = self.frames[0].dims;
        for (t, f) in self.frames.iter().enumerate() {
            if f.dims != dims || f.data.len() != dims[0] * dims[1] * dims[2] {
                return Err(Error::DimensionMismatch(format!(
                    "frame {t} has dims {:?}, expected {dims:?}",
                    f.dims
                )));
            }
            if let Some(v) = f.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidData(format!(
                    "frame {t} holds {v}, outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn period(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.frames[0].dims
    }

    /// Trilinear sample of frame `t`; zero outside the unit cube.
    pub fn sample(&self, x: [f64; 3], t: usize) -> f64 {
        self.frames[t].sample(x)
    }

    /// Keep every `stride`-th frame.
    pub fn subsample_frames(&self, stride: usize) -> Result<Self> {
        let stride = stride.max(1);
        VolumeSequence::new(
            self.frames.iter().step_by(stride).cloned().collect(),
            self.spacing_mm,
        )
    }
}

/// One view's image sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSequence {
    pub frames: Vec<Image2>,
}

/// Multi-view 2D acquisition with a pose guess per view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSequence {
    pub views: Vec<ViewSequence>,
    pub initial_poses: Vec<ViewPose>,
    pub period: usize,
}

impl MultiViewSequence {
    pub fn new(views: Vec<ViewSequence>, initial_poses: Vec<ViewPose>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidData("multi-view dataset has no views".into()));
        }
        if initial_poses.len() != views.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} views but {} poses",
                views.len(),
                initial_poses.len()
            )));
        }
        let period = views[0].frames.len();
        if period < 2 {
            return Err(Error::InvalidData("views need at least 2 frames".into()));
        }
        let (w, h) = (views[0].frames[0].width, views[0].frames[0].height);
        for (k, v) in views.iter().enumerate() {
            if v.frames.len() != period {
                return Err(Error::DimensionMismatch(format!(
                    "view {k} has {} frames, expected {period}",
                    v.frames.len()
                )));
            }
            for img in &v.frames {
                if img.width != w || img.height != h || img.data.len() != w * h {
                    return Err(Error::DimensionMismatch(format!("view {k} image size")));
                }
                if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidData(format!("view {k} value outside [0, 1]")));
                }
            }
        }
        Ok(MultiViewSequence {
            views,
            initial_poses,
            period,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        let img = &self.views[0].frames[0];
        (img.width, img.height)
    }
}

/// Binary occupancy grid tied to one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMask {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
    pub frame_index: usize,
    pub region_tag: String,
}

impl LabeledMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>, frame_index: usize, region_tag: &str) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} voxels, dims {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidData("mask values must be 0 or 1".into()));
        }
        Ok(LabeledMask {
            dims,
            data,
            frame_index,
            region_tag: region_tag.to_string(),
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_grid(&self) -> Grid3 {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)] == 1
    }
}

pub fn read_f32_blob(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::SizeMismatch {
            what: path.display().to_string(),
            expected: expected_len * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_u8_blob(path: &Path, expected_len: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::SizeMismatch {
            what: path.display().to_string(),
            expected: expected_len,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn write_u8_blob(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}
