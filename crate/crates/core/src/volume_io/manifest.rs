//! JSON dataset manifests.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    read_f32_blob, read_u8_blob, write_f32_blob, write_u8_blob, Grid3, Image2, LabeledMask,
    MultiViewSequence, PhantomSpec, ViewSequence, VolumeSequence,
};
use crate::error::{Error, Result};
use crate::geometry::ViewPose;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "volume3d")]
    Volume3d,
    #[serde(rename = "multiview2d")]
    Multiview2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub path: String,
    pub frame_index: usize,
    #[serde(default)]
    pub region_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub frames: Vec<String>,
    #[serde(default)]
    pub initial_pose: Option<ViewPose>,
}

/// Long-axis geometry of the ventricle in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongAxis {
    /// Cavity center used for the radial direction.
    pub center: [f64; 3],
    pub apex: [f64; 3],
    /// A point on the basal plane; the axis runs from `apex` to here.
    pub base: [f64; 3],
    /// Reference direction for segment angles; projected onto the short-axis
    /// plane before use.
    pub anterior: [f64; 3],
}

impl LongAxis {
    /// Axis along z through `center`, apex and base on the sphere of `radius`.
    pub fn vertical(center: [f64; 3], radius: f64) -> Self {
        LongAxis {
            center,
            apex: [center[0], center[1], center[2] - radius],
            base: [center[0], center[1], center[2] + radius],
            anterior: [0.0, 1.0, 0.0],
        }
    }

    pub fn axis(&self) -> Result<[f64; 3]> {
        let d = Vector3::from(self.base) - Vector3::from(self.apex);
        let n = d.norm();
        if !(n > 1e-9) {
            return Err(Error::Degenerate("apex and base coincide".into()));
        }
        let d = d / n;
        Ok([d.x, d.y, d.z])
    }
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn one() -> f64 {
    1.0
}

fn unit_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    /// Volume grid size `[nx, ny, nz]` (3D mode).
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
    /// Image size `[width, height]` (2D mode).
    #[serde(default)]
    pub image_dims: Option<[usize; 2]>,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    #[serde(rename = "period_T")]
    pub period_t: usize,
    /// Frame blobs for 3D mode, relative to the manifest directory.
    #[serde(default)]
    pub frames: Vec<String>,
    #[serde(default)]
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub value_min: f64,
    #[serde(default = "one")]
    pub value_max: f64,
    #[serde(default)]
    pub masks: Vec<MaskEntry>,
    #[serde(default = "unit_stride")]
    pub frame_stride: usize,
    #[serde(default)]
    pub long_axis: Option<LongAxis>,
    /// Present for synthetic data; enables exact evaluation.
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Ground-truth view poses for synthetic 2D data.
    #[serde(default)]
    pub true_poses: Option<Vec<ViewPose>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Volume(VolumeSequence),
    MultiView(MultiViewSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub masks: Vec<LabeledMask>,
}

impl Dataset {
    pub fn period(&self) -> usize {
        match &self.kind {
            DatasetKind::Volume(v) => v.period(),
            DatasetKind::MultiView(m) => m.period,
        }
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.manifest.spacing_mm
    }

    /// Volume grid size; for 2D data the image size is used in-plane and
    /// along the third axis.
    pub fn grid_dims(&self) -> [usize; 3] {
        match &self.kind {
            DatasetKind::Volume(v) => v.dims(),
            DatasetKind::MultiView(m) => {
                let (w, h) = m.image_size();
                [w, h, w.max(h)]
            }
        }
    }

    pub fn long_axis(&self) -> LongAxis {
        self.manifest.long_axis.unwrap_or_else(|| match &self.manifest.phantom {
            Some(p) => LongAxis::vertical(p.center, p.outer_radius),
            None => LongAxis::vertical([0.5; 3], 0.4),
        })
    }

    pub fn volume(&self) -> Option<&VolumeSequence> {
        match &self.kind {
            DatasetKind::Volume(v) => Some(v),
            DatasetKind::MultiView(_) => None,
        }
    }

    pub fn multiview(&self) -> Option<&MultiViewSequence> {
        match &self.kind {
            DatasetKind::MultiView(m) => Some(m),
            DatasetKind::Volume(_) => None,
        }
    }

    pub fn mask(&self, frame: usize) -> Option<&LabeledMask> {
        self.masks.iter().find(|m| m.frame_index == frame)
    }
}

impl Manifest {
    /// Number of values expected in each frame blob.
    pub fn frame_len(&self) -> Result<usize> {
        match self.mode {
            Mode::Volume3d => {
                let d = self.dims.ok_or_else(|| Error::InvalidData("volume3d manifest needs dims".into()))?;
                Ok(d[0] * d[1] * d[2])
            }
            Mode::Multiview2d => {
                let d = self
                    .image_dims
                    .ok_or_else(|| Error::InvalidData("multiview2d manifest needs image_dims".into()))?;
                Ok(d[0] * d[1])
            }
        }
    }

    fn check(&self) -> Result<()> {
        if self.period_t < 2 {
            return Err(Error::InvalidData(format!(
                "period_T must be at least 2, got {}",
                self.period_t
            )));
        }
        if !(self.value_max > self.value_min) || !self.value_min.is_finite() || !self.value_max.is_finite() {
            return Err(Error::InvalidData(format!(
                "value range [{}, {}] is empty",
                self.value_min, self.value_max
            )));
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidData("spacing_mm must be positive".into()));
        }
        if self.frame_stride == 0 {
            return Err(Error::InvalidData("frame_stride must be at least 1".into()));
        }
        let counts: Vec<usize> = match self.mode {
            Mode::Volume3d => vec![self.frames.len()],
            Mode::Multiview2d => {
                if self.views.is_empty() {
                    return Err(Error::InvalidData("multiview2d manifest lists no views".into()));
                }
                self.views.iter().map(|v| v.frames.len()).collect()
            }
        };
        for c in counts {
            if c != self.period_t {
                return Err(Error::DimensionMismatch(format!(
                    "manifest lists {c} frames but period_T is {}",
                    self.period_t
                )));
            }
        }
        self.frame_len().map(|_| ())
    }

    fn rescale(&self, raw: Vec<f32>, what: &str) -> Result<Vec<f32>> {
        let (lo, span) = (self.value_min, self.value_max - self.value_min);
        raw.into_iter()
            .map(|v| {
                if !v.is_finite() {
                    return Err(Error::InvalidData(format!("{what} holds a non-finite value")));
                }
                Ok((((v as f64) - lo) / span).clamp(0.0, 1.0) as f32)
            })
            .collect()
    }
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Evenly spaced rotations about the long (z) axis, planes containing it.
pub fn default_view_poses(count: usize, center: [f64; 3]) -> Vec<ViewPose> {
    use nalgebra::Rotation3;
    (0..count)
        .map(|k| {
            let az = std::f64::consts::PI * k as f64 / count as f64;
            let r = Rotation3::from_axis_angle(&Vector3::z_axis(), az)
                * Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
            ViewPose::new(crate::geometry::axis_angle_from_rotation(r.matrix()), center)
        })
        .collect()
}

/// Read and validate a dataset. Intensities are mapped to `[0, 1]` using the
/// declared value range, with clamping.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    manifest.check()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let n = manifest.frame_len()?;
    let stride = manifest.frame_stride;

    let kind = match manifest.mode {
        Mode::Volume3d => {
            let dims = manifest.dims.unwrap();
            let frames = manifest
                .frames
                .iter()
                .step_by(stride)
                .map(|rel| {
                    let p = resolve(&root, rel);
                    let data = manifest.rescale(read_f32_blob(&p, n)?, rel)?;
                    Ok(Grid3 { dims, data })
                })
                .collect::<Result<Vec<_>>>()?;
            DatasetKind::Volume(VolumeSequence::new(frames, manifest.spacing_mm)?)
        }
        Mode::Multiview2d => {
            let [width, height] = manifest.image_dims.unwrap();
            let views = manifest
                .views
                .iter()
                .map(|v| {
                    let frames = v
                        .frames
                        .iter()
                        .step_by(stride)
                        .map(|rel| {
                            let p = resolve(&root, rel);
                            let data = manifest.rescale(read_f32_blob(&p, n)?, rel)?;
                            Ok(Image2 { width, height, data })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ViewSequence { frames })
                })
                .collect::<Result<Vec<_>>>()?;
            let center = manifest.phantom.as_ref().map_or([0.5; 3], |p| p.center);
            let fallback = default_view_poses(views.len(), center);
            let poses = manifest
                .views
                .iter()
                .zip(fallback)
                .map(|(v, f)| v.initial_pose.unwrap_or(f))
                .collect();
            DatasetKind::MultiView(MultiViewSequence::new(views, poses)?)
        }
    };

    let mut masks = Vec::new();
    if let DatasetKind::Volume(v) = &kind {
        let dims = v.dims();
        for m in &manifest.masks {
            if m.frame_index >= manifest.period_t {
                return Err(Error::InvalidData(format!(
                    "mask frame {} is outside the cycle",
                    m.frame_index
                )));
            }
            if m.frame_index % stride != 0 {
                continue;
            }
            let data = read_u8_blob(&resolve(&root, &m.path), dims[0] * dims[1] * dims[2])?;
            masks.push(LabeledMask::new(dims, data, m.frame_index / stride, &m.region_tag)?);
        }
    }

    Ok(Dataset {
        manifest,
        root,
        kind,
        masks,
    })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_masks(dir: &Path, masks: &[LabeledMask]) -> Result<Vec<MaskEntry>> {
    masks
        .iter()
        .map(|m| {
            let tag = if m.region_tag.is_empty() { "mask" } else { &m.region_tag };
            let name = format!("mask_{tag}_{:03}.u8raw", m.frame_index);
            write_u8_blob(&dir.join(&name), &m.data)?;
            Ok(MaskEntry {
                path: name,
                frame_index: m.frame_index,
                region_tag: m.region_tag.clone(),
            })
        })
        .collect()
}

/// Write blobs plus `manifest.json` into `dir`; returns the manifest path.
pub fn write_volume_dataset(
    dir: &Path,
    seq: &VolumeSequence,
    masks: &[LabeledMask],
    phantom: Option<&PhantomSpec>,
    long_axis: Option<LongAxis>,
) -> Result<PathBuf> {
    seq.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(seq.period());
    for (t, f) in seq.frames.iter().enumerate() {
        let name = format!("frame_{t:03}.f32raw");
        write_f32_blob(&dir.join(&name), &f.data)?;
        frames.push(name);
    }
    let manifest = Manifest {
        mode: Mode::Volume3d,
        dims: Some(seq.dims()),
        image_dims: None,
        spacing_mm: seq.spacing_mm,
        period_t: seq.period(),
        frames,
        views: Vec::new(),
        value_min: 0.0,
        value_max: 1.0,
        masks: write_masks(dir, masks)?,
        frame_stride: 1,
        long_axis,
        phantom: phantom.cloned(),
        true_poses: None,
    };
    write_manifest(dir, &manifest)
}

pub fn write_multiview_dataset(
    dir: &Path,
    seq: &MultiViewSequence,
    spacing_mm: [f64; 3],
    phantom: Option<&PhantomSpec>,
    true_poses: Option<&[ViewPose]>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::with_capacity(seq.views.len());
    for (k, (v, pose)) in seq.views.iter().zip(&seq.initial_poses).enumerate() {
        let mut frames = Vec::with_capacity(v.frames.len());
        for (t, img) in v.frames.iter().enumerate() {
            let name = format!("view_{k:02}_frame_{t:03}.f32raw");
            write_f32_blob(&dir.join(&name), &img.data)?;
            frames.push(name);
        }
        views.push(ViewEntry {
            frames,
            initial_pose: Some(*pose),
        });
    }
    let (w, h) = seq.image_size();
    let manifest = Manifest {
        mode: Mode::Multiview2d,
        dims: None,
        image_dims: Some([w, h]),
        spacing_mm,
        period_t: seq.period,
        frames: Vec::new(),
        views,
        value_min: 0.0,
        value_max: 1.0,
        masks: Vec::new(),
        frame_stride: 1,
        long_axis: phantom.map(|p| LongAxis::vertical(p.center, p.outer_radius)),
        phantom: phantom.cloned(),
        true_poses: true_poses.map(<[ViewPose]>::to_vec),
    };
    write_manifest(dir, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VolumeSequence {
        let f0 = Grid3::from_fn([4, 4, 4], |i, j, k| ((i + j + k) as f32) / 9.0);
        let f1 = Grid3::from_fn([4, 4, 4], |i, _, _| i as f32 / 3.0);
        VolumeSequence::new(vec![f0, f1], [1.0, 1.5, 2.0]).unwrap()
    }

    #[test]
    fn smallest_dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny();
        let mask = LabeledMask::new([4, 4, 4], (0..64).map(|i| (i % 3 == 0) as u8).collect(), 1, "lv").unwrap();
        let path = write_volume_dataset(dir.path(), &seq, &[mask.clone()], None, None).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.period(), 2);
        let v = ds.volume().unwrap();
        assert_eq!(v, &seq);
        assert!(v.frames.iter().flat_map(|f| &f.data).all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(ds.masks, vec![mask]);
    }

    #[test]
    fn short_blob_is_a_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_volume_dataset(dir.path(), &tiny(), &[], None, None).unwrap();
        std::fs::write(dir.path().join("frame_001.f32raw"), vec![0u8; 4 * 63]).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn missing_file_and_bad_period_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(&dir.path().join("nope.json")), Err(Error::Io { .. })));
        let path = write_volume_dataset(dir.path(), &tiny(), &[], None, None).unwrap();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m.period_t = 1;
        m.frames.truncate(1);
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::InvalidData(_))));
    }

    #[test]
    fn values_are_rescaled_and_nan_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_volume_dataset(dir.path(), &tiny(), &[], None, None).unwrap();
        let raw: Vec<f32> = (0..64).map(|i| i as f32 * 4.0).collect();
        write_f32_blob(&dir.path().join("frame_000.f32raw"), &raw).unwrap();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m.value_max = 128.0;
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let ds = load_manifest(&path).unwrap();
        let f = &ds.volume().unwrap().frames[0].data;
        assert_eq!(f[16], 0.5);
        assert_eq!(f[63], 1.0);

        let mut bad = raw;
        bad[5] = f32::NAN;
        write_f32_blob(&dir.path().join("frame_000.f32raw"), &bad).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::InvalidData(_))));
    }

    #[test]
    fn large_declaration_sizes() {
        let m: Manifest = serde_json::from_value(serde_json::json!({
            "mode": "volume3d",
            "dims": [224, 176, 208],
            "period_T": 34,
            "frames": (0..34).map(|t| format!("f{t}.f32raw")).collect::<Vec<_>>(),
        }))
        .unwrap();
        m.check().unwrap();
        assert_eq!(m.frame_len().unwrap(), 224 * 176 * 208);
        assert_eq!(m.period_t, 34);
    }

    #[test]
    fn multiview_round_trip_and_default_poses() {
        let dir = tempfile::tempdir().unwrap();
        let img = |s: f32| Image2 {
            width: 3,
            height: 2,
            data: vec![s; 6],
        };
        let views = vec![
            ViewSequence { frames: vec![img(0.1), img(0.2)] },
            ViewSequence { frames: vec![img(0.3), img(0.4)] },
        ];
        let poses = default_view_poses(2, [0.5; 3]);
        let seq = MultiViewSequence::new(views, poses.clone()).unwrap();
        let path = write_multiview_dataset(dir.path(), &seq, [1.0; 3], None, None).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.multiview().unwrap(), &seq);

        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for v in &mut m.views {
            v.initial_pose = None;
        }
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let ds = load_manifest(&path).unwrap();
        let got = &ds.multiview().unwrap().initial_poses;
        // second plane contains the z axis, rotated a quarter turn
        assert!(got[1].rotation_error_deg(&poses[1]) < 1e-9);
        let p = got[1].map_plane(1.0, 0.5);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stride_keeps_every_other_frame() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Grid3> = (0..4).map(|t| Grid3::from_fn([2, 2, 2], |_, _, _| t as f32 / 4.0)).collect();
        let seq = VolumeSequence::new(frames, [1.0; 3]).unwrap();
        let path = write_volume_dataset(dir.path(), &seq, &[], None, None).unwrap();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m.frame_stride = 2;
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.period(), 2);
        assert_eq!(ds.volume().unwrap().frames[1].data[0], 0.5);
    }
}
