//! Tracking and segmentation metrics, and PCA of motion features.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridFrame;
use crate::volume_io::LabeledMask;

/// Norm below which a vector is treated as having no direction.
pub const COSINE_EPS: f64 = 1e-9;

/// Median of the sorted values; the mean of the middle two for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a} predictions for {b} references")));
    }
    if a == 0 {
        return Err(Error::InvalidData("no points to evaluate".into()));
    }
    Ok(())
}

/// Per-point Euclidean errors in millimeters.
pub fn motion_errors_mm(pred: &[[f64; 3]], gt: &[[f64; 3]], grid: &GridFrame) -> Result<Vec<f64>> {
    check_pairs(pred.len(), gt.len())?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = grid.vector_to_mm([p[0] - g[0], p[1] - g[1], p[2] - g[2]]);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect())
}

/// Median tracking error in millimeters.
pub fn mte(pred: &[[f64; 3]], gt: &[[f64; 3]], grid: &GridFrame) -> Result<f64> {
    let mut e = motion_errors_mm(pred, gt, grid)?;
    Ok(median(&mut e).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    /// Mean cosine over usable points, `None` when every point was skipped.
    pub mean: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Mean per-point cosine similarity, skipping near-zero vectors.
pub fn motion_cosine(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<CosineSummary> {
    check_pairs(pred.len(), gt.len())?;
    let sq = |v: &[f64; 3]| v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (p, g) in pred.iter().zip(gt) {
        let (sp, sg) = (sq(p), sq(g));
        if sp.sqrt() <= COSINE_EPS || sg.sqrt() <= COSINE_EPS {
            continue;
        }
        // one square root keeps parallel vectors at exactly +-1
        let c = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / (sp * sg).sqrt();
        sum += c.clamp(-1.0, 1.0);
        evaluated += 1;
    }
    Ok(CosineSummary {
        mean: (evaluated > 0).then(|| sum / evaluated as f64),
        evaluated,
        skipped: pred.len() - evaluated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
    pub intersection: usize,
    pub size_a: usize,
    pub size_b: usize,
}

pub fn overlap_metrics(a: &LabeledMask, b: &LabeledMask) -> Result<Overlap> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!("masks {:?} and {:?}", a.dims, b.dims)));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    let union = na + nb - inter;
    let (dice, jaccard) = if union == 0 {
        (1.0, 1.0)
    } else {
        (2.0 * inter as f64 / (na + nb) as f64, inter as f64 / union as f64)
    };
    Ok(Overlap {
        dice,
        jaccard,
        intersection: inter,
        size_a: na,
        size_b: nb,
    })
}

/// Metrics of one comparison. Fields not computed are left out of the JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mte_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points_evaluated: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points_skipped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hausdorff_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd95: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxels_a: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxels_b: Option<usize>,
    /// Echo of the inputs and options.
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn add_motion(&mut self, pred: &[[f64; 3]], gt: &[[f64; 3]], grid: &GridFrame) -> Result<()> {
        self.mte_mm = Some(mte(pred, gt, grid)?);
        let c = motion_cosine(pred, gt)?;
        self.cosine_similarity = c.mean;
        self.points_evaluated = Some(c.evaluated);
        self.points_skipped = Some(c.skipped);
        Ok(())
    }

    pub fn add_masks(&mut self, a: &LabeledMask, b: &LabeledMask, spacing_mm: [f64; 3], hd95: bool) -> Result<()> {
        let o = overlap_metrics(a, b)?;
        self.dice = Some(o.dice);
        self.jaccard = Some(o.jaccard);
        self.voxels_a = Some(o.size_a);
        self.voxels_b = Some(o.size_b);
        self.hausdorff_mm = Some(hausdorff(a, b, spacing_mm, hd95)?);
        self.hd95 = Some(hd95);
        Ok(())
    }
}

/// Set voxels with at least one unset (or out-of-grid) 6-neighbor.
pub fn boundary_voxels(m: &LabeledMask) -> Vec<[usize; 3]> {
    let d = m.dims;
    let mut out = Vec::new();
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if !m.get(i, j, k) {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == d[0] || j + 1 == d[1] || k + 1 == d[2];
                let open = edge
                    || !m.get(i - 1, j, k)
                    || !m.get(i + 1, j, k)
                    || !m.get(i, j - 1, k)
                    || !m.get(i, j + 1, k)
                    || !m.get(i, j, k - 1)
                    || !m.get(i, j, k + 1);
                if open {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform of a lower envelope of
/// parabolas along one line (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let w2 = w * w;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = w2 * d * d + f[p];
    }
}

/// Squared distance in millimeters from every voxel to the nearest seed.
pub fn squared_distance_field(dims: [usize; 3], seeds: &[[usize; 3]], spacing_mm: [f64; 3]) -> Vec<f64> {
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let mut g = vec![f64::INFINITY; dims[0] * dims[1] * dims[2]];
    for s in seeds {
        g[idx(s[0], s[1], s[2])] = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for u in 0..dims[a] {
            for w in 0..dims[b] {
                let at = |t: usize| {
                    let mut c = [0; 3];
                    c[axis] = t;
                    c[a] = u;
                    c[b] = w;
                    idx(c[0], c[1], c[2])
                };
                for (t, l) in line.iter_mut().enumerate() {
                    *l = g[at(t)];
                }
                edt_1d(&line, spacing_mm[axis], &mut out, &mut v, &mut z);
                for (t, o) in out.iter().enumerate() {
                    g[at(t)] = *o;
                }
            }
        }
    }
    g
}

fn directed_distances(from: &[[usize; 3]], to_field: &[f64], dims: [usize; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| to_field[p[0] + dims[0] * (p[1] + dims[1] * p[2])].sqrt())
        .collect()
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Symmetric surface Hausdorff distance in millimeters. With `hd95` the
/// 95th percentile of each directed distance set replaces the maximum.
pub fn hausdorff(a: &LabeledMask, b: &LabeledMask, spacing_mm: [f64; 3], hd95: bool) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!("masks {:?} and {:?}", a.dims, b.dims)));
    }
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::InvalidData("Hausdorff distance of an empty mask".into()));
    }
    let fa = squared_distance_field(a.dims, &ba, spacing_mm);
    let fb = squared_distance_field(b.dims, &bb, spacing_mm);
    let mut ab = directed_distances(&ba, &fb, a.dims);
    let mut ba_d = directed_distances(&bb, &fa, a.dims);
    Ok(if hd95 {
        percentile(&mut ab, 0.95).max(percentile(&mut ba_d, 0.95))
    } else {
        ab.iter().chain(&ba_d).copied().fold(0.0, f64::max)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit eigenvector per row, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `N x k` projections of the centered data.
    pub scores: Vec<Vec<f64>>,
    pub total_variance: f64,
    /// Set when fewer than `k` components carry variance.
    pub warning: Option<String>,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|e| e / self.total_variance).collect()
    }
}

/// Project rows of `data` onto the top `k` principal axes of the sample
/// covariance. Each axis is signed so its largest-magnitude entry is positive.
pub fn pca_project(data: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidData("PCA needs at least two rows".into()));
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch("PCA rows differ in length".into()));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must lie in 1..={} for {n} rows of {d} features",
            (n - 1).min(d)
        )));
    }
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let tol = eig.eigenvalues.amax().max(f64::MIN_POSITIVE) * 1e-12 * d as f64;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    let kept = k.min(rank);
    let warning = (kept < k).then(|| format!("covariance has rank {rank}; returning {kept} of {k} components"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }

    let mut components = Vec::with_capacity(kept);
    let mut eigenvalues = Vec::with_capacity(kept);
    for &i in order.iter().take(kept) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[i]);
    }
    let scores = (0..n)
        .map(|r| {
            components
                .iter()
                .map(|c| (0..d).map(|j| x[(r, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        scores,
        total_variance,
        warning,
    })
}
