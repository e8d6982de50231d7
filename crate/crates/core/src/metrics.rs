//! Depth metrics with median scaling, absolute trajectory error and ray
//! surface dispersion.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::RaySurface;
use crate::geometry::Pose;
use crate::grid::{pairwise_sum, ImageGrid};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("trajectory too short: need {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("ground-truth trajectory is degenerate (all positions identical)")]
    DegenerateTrajectory,
    #[error("need at least two surfaces")]
    TooFewSurfaces,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Median-scaling factor applied to the prediction.
    pub scale: f64,
    pub count: usize,
}

impl DepthMetrics {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        [
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("scale", self.scale),
            ("count", self.count as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalOptions {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Rescale the prediction by `median(gt) / median(pred)`.
    pub median_scaling: bool,
}

impl Default for DepthEvalOptions {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 80.0,
            median_scaling: true,
        }
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Evaluates pixels where `gt` lies in `(min_depth, max_depth)`, the
/// prediction is positive and `mask` (if any) is set.
pub fn depth_metrics(
    pred: &ImageGrid,
    gt: &ImageGrid,
    mask: Option<&[bool]>,
    opts: &DepthEvalOptions,
) -> Result<DepthMetrics, MetricsError> {
    if !pred.same_shape(gt) || pred.channels() != 1 {
        return Err(MetricsError::Shape("prediction and ground truth differ".into()));
    }
    if mask.is_some_and(|m| m.len() != gt.pixel_count()) {
        return Err(MetricsError::Shape("mask length".into()));
    }
    let (p, g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|&(i, (&p, &g))| {
            g > opts.min_depth
                && g < opts.max_depth
                && p > 0.0
                && p.is_finite()
                && mask.is_none_or(|m| m[i])
        })
        .map(|(_, (&p, &g))| (p, g))
        .unzip();
    if g.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    let scale = if opts.median_scaling {
        median(&g).unwrap() / median(&p).unwrap()
    } else {
        1.0
    };
    let p: Vec<f64> = p
        .iter()
        .map(|v| (v * scale).clamp(opts.min_depth, opts.max_depth))
        .collect();
    let n = g.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| -> f64 {
        let terms: Vec<f64> = p.iter().zip(&g).map(|(&a, &b)| f(a, b)).collect();
        pairwise_sum(&terms) / n
    };
    let frac = |k: i32| {
        let th = 1.25f64.powi(k);
        p.iter().zip(&g).filter(|(&a, &b)| (a / b).max(b / a) < th).count() as f64 / n
    };
    Ok(DepthMetrics {
        abs_rel: mean(&|a, b| (a - b).abs() / b),
        sq_rel: mean(&|a, b| (a - b).powi(2) / b),
        rmse: mean(&|a, b| (a - b).powi(2)).sqrt(),
        rmse_log: mean(&|a, b| (a.ln() - b.ln()).powi(2)).sqrt(),
        delta1: frac(1),
        delta2: frac(2),
        delta3: frac(3),
        scale,
        count: g.len(),
    })
}

/// Similarity transform `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
}

/// Least-squares similarity aligning `pred` onto `gt` (closed-form SVD
/// solution, reflections excluded).
pub fn align_similarity(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(format!("{} vs {} positions", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(MetricsError::TooShort { need: 2, got: gt.len() });
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    if gt.iter().all(|g| (g - mg).norm() < 1e-12) {
        return Err(MetricsError::DegenerateTrajectory);
    }
    let n = gt.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p - mp, g - mg);
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    cov /= n;
    var_p /= n;
    if var_p < 1e-300 {
        // a collapsed prediction aligns best to the gt centroid
        return Ok(Similarity {
            scale: 0.0,
            rotation: Matrix3::identity(),
            translation: mg,
        });
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_p;
    Ok(Similarity {
        scale,
        rotation,
        translation: mg - rotation * mp * scale,
    })
}

/// RMSE of positions after [`align_similarity`].
pub fn ate_positions(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    let sim = align_similarity(pred, gt)?;
    let sq: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (sim.apply(p) - g).norm_squared())
        .collect();
    Ok((pairwise_sum(&sq) / gt.len() as f64).sqrt())
}

/// Absolute trajectory error over camera positions (pose translations).
pub fn ate_full(pred: &[Pose], gt: &[Pose]) -> Result<f64, MetricsError> {
    let p: Vec<_> = pred.iter().map(|x| x.translation).collect();
    let g: Vec<_> = gt.iter().map(|x| x.translation).collect();
    ate_positions(&p, &g)
}

/// Largest distance between any two ground-truth camera positions; the
/// natural length scale for judging [`ate_full`].
pub fn trajectory_extent(gt: &[Pose]) -> f64 {
    let mut extent = 0.0f64;
    for (i, a) in gt.iter().enumerate() {
        for b in &gt[i + 1..] {
            extent = extent.max((a.translation - b.translation).norm());
        }
    }
    extent
}

/// Mean angle in radians between corresponding rays over `mask`.
pub fn mean_angular_error(a: &RaySurface, b: &RaySurface, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MetricsError::Shape("surfaces differ in size".into()));
    }
    let errs: Vec<f64> = a
        .angular_errors(b)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, e)| e)
        .collect();
    if errs.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(pairwise_sum(&errs) / errs.len() as f64)
}

/// Mean and population standard deviation of [`ate_full`] over every
/// window of `snippet` consecutive poses, each aligned independently.
pub fn ate_snippets(pred: &[Pose], gt: &[Pose], snippet: usize) -> Result<(f64, f64), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(format!("{} vs {} poses", pred.len(), gt.len())));
    }
    if snippet < 2 || gt.len() < snippet {
        return Err(MetricsError::TooShort {
            need: snippet.max(2),
            got: gt.len(),
        });
    }
    let errs: Vec<f64> = (0..=gt.len() - snippet)
        .map(|i| ate_full(&pred[i..i + snippet], &gt[i..i + snippet]))
        .collect::<Result<_, _>>()?;
    let n = errs.len() as f64;
    let mean = pairwise_sum(&errs) / n;
    let var: Vec<f64> = errs.iter().map(|e| (e - mean).powi(2)).collect();
    Ok((mean, (pairwise_sum(&var) / n).sqrt()))
}

/// Mean over pixels and components of `std / |mean|` across the surfaces,
/// skipping entries with `|mean| < 1e-6` and pixels outside `mask`.
pub fn surface_cov(surfaces: &[RaySurface], mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    let first = surfaces.get(1).map(|_| &surfaces[0]).ok_or(MetricsError::TooFewSurfaces)?;
    let (h, w) = (first.height(), first.width());
    if surfaces.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(MetricsError::Shape("surfaces differ in size".into()));
    }
    let mut covs = Vec::new();
    for i in 0..h * w {
        if mask.is_some_and(|mk| !mk[i]) {
            continue;
        }
        for c in 0..3 {
            let vals: Vec<f64> = surfaces.iter().map(|s| s.rays()[i][c]).collect();
            covs.extend(entry_cov(&vals));
        }
    }
    if covs.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(pairwise_sum(&covs) / covs.len() as f64)
}

/// Population `std / |mean|`, or `None` when `|mean| < 1e-6`.
fn entry_cov(vals: &[f64]) -> Option<f64> {
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    if mean.abs() < 1e-6 {
        return None;
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    Some(var.sqrt() / mean.abs())
}

/// Flat metric report. Text form is one `key=value` per line (keys sorted);
/// JSON form is `{"kind": ..., "metrics": {key: value}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub metrics: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(kind: impl Into<String>, metrics: BTreeMap<String, f64>) -> Self {
        Self {
            kind: kind.into(),
            metrics,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("kind={}\n", self.kind);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
