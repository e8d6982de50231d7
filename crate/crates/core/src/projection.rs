//! Projection onto a ray-surface camera.
//!
//! A 3D point projects to the pixel whose ray best matches the point's
//! direction. The exhaustive argmax ([`hard_project`]) is exact but neither
//! differentiable nor cheap, so training uses a softmax over a small patch
//! around an anchor pixel and takes the expected pixel coordinate
//! ([`soft_project`]). Similarities are cosines: the direction to the point
//! is normalized, so the temperature does not depend on scene scale.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::RaySurface;
use crate::grid::{downsample_half, downsample_half_backward, GridError, ImageGrid};

/// Weights below `exp(-SKIP)` relative to the patch maximum are dropped.
const SKIP: f64 = 50.0;
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("patch dimensions must be odd and positive, got {h}x{w}")]
    BadPatch { h: usize, w: usize },
    #[error("point coincides with the camera centre")]
    CoincidentPoint,
    #[error("every patch cell is outside the image")]
    AllClamped,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("anchor ({u}, {v}) outside {width}x{height} surface")]
    BadAnchor {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub h: usize,
    pub w: usize,
}

impl PatchSpec {
    pub fn new(h: usize, w: usize) -> Result<Self, ProjectionError> {
        if h == 0 || w == 0 || h % 2 == 0 || w % 2 == 0 {
            return Err(ProjectionError::BadPatch { h, w });
        }
        Ok(Self { h, w })
    }

    pub fn radius_x(&self) -> usize {
        self.w / 2
    }

    pub fn radius_y(&self) -> usize {
        self.h / 2
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { h: 41, w: 41 }
    }
}

/// Cosine similarities between a direction and the rays of an `h x w`
/// window centred on `anchor`. Cells outside the image are clamped: their
/// score is `-inf` and they never take part in the softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPatch {
    pub anchor: [usize; 2],
    pub h: usize,
    pub w: usize,
    pub scores: Vec<f64>,
    pub clamped: Vec<bool>,
}

impl SimilarityPatch {
    /// Pixel coordinates `(u, v)` of cell `(row, col)`.
    pub fn cell_coords(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.anchor[0] as f64 - (self.w / 2) as f64 + col as f64,
            self.anchor[1] as f64 - (self.h / 2) as f64 + row as f64,
        ]
    }

    fn cells(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        (0..self.h * self.w)
            .filter(|&i| !self.clamped[i])
            .map(|i| (i, self.cell_coords(i / self.w, i % self.w)))
    }

    /// Row-major index of the best unclamped cell (first one on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, _) in self.cells() {
            if best.is_none_or(|b| self.scores[i] > self.scores[b]) {
                best = Some(i);
            }
        }
        best
    }
}

fn unit_direction(point: &Vector3<f64>) -> Result<(Vector3<f64>, f64), ProjectionError> {
    let n = point.norm();
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(ProjectionError::CoincidentPoint);
    }
    Ok((point / n, n))
}

pub fn similarity_patch(
    surface: &RaySurface,
    point: &Vector3<f64>,
    anchor: [usize; 2],
    patch: PatchSpec,
) -> Result<SimilarityPatch, ProjectionError> {
    let (width, height) = (surface.width(), surface.height());
    if anchor[0] >= width || anchor[1] >= height {
        return Err(ProjectionError::BadAnchor {
            u: anchor[0],
            v: anchor[1],
            width,
            height,
        });
    }
    let (dir, _) = unit_direction(&(point - surface.center()))?;
    let mut scores = vec![f64::NEG_INFINITY; patch.h * patch.w];
    let mut clamped = vec![true; patch.h * patch.w];
    for row in 0..patch.h {
        let v = anchor[1] as isize - patch.radius_y() as isize + row as isize;
        if v < 0 || v >= height as isize {
            continue;
        }
        for col in 0..patch.w {
            let u = anchor[0] as isize - patch.radius_x() as isize + col as isize;
            if u < 0 || u >= width as isize {
                continue;
            }
            let i = row * patch.w + col;
            scores[i] = surface.ray(u as usize, v as usize).dot(&dir);
            clamped[i] = false;
        }
    }
    Ok(SimilarityPatch {
        anchor,
        h: patch.h,
        w: patch.w,
        scores,
        clamped,
    })
}

/// Adjoint of [`similarity_patch`]: sparse ray gradients `(pixel index,
/// dL/dQ)` and the gradient w.r.t. the point.
pub fn similarity_patch_backward(
    surface: &RaySurface,
    point: &Vector3<f64>,
    patch: &SimilarityPatch,
    grad_scores: &[f64],
) -> Result<(Vec<(usize, Vector3<f64>)>, Vector3<f64>), ProjectionError> {
    let (dir, n) = unit_direction(&(point - surface.center()))?;
    let mut grad_rays = Vec::new();
    let mut grad_dir = Vector3::zeros();
    for (i, [u, v]) in patch.cells() {
        let g = grad_scores[i];
        let idx = v as usize * surface.width() + u as usize;
        let q = surface.rays()[idx];
        grad_rays.push((idx, dir * g));
        grad_dir += q * g;
    }
    let grad_point = (grad_dir - dir * dir.dot(&grad_dir)) / n;
    Ok((grad_rays, grad_point))
}

#[inline]
fn softmax_weight(score: f64, max: f64, tau: f64) -> f64 {
    let z = (score - max) / tau;
    if z < -SKIP {
        0.0
    } else {
        z.exp()
    }
}

/// Temperature whose soft-argmax spread is about a third of a pixel on a
/// surface with the given angular pitch (radians per pixel). Scores are ray
/// cosines, which fall off quadratically with angle, so the temperature has
/// to scale with the squared pitch to keep the spread in pixels constant.
pub fn tau_for_pitch(pitch: f64) -> f64 {
    0.45 * pitch * pitch
}

fn check_tau(tau: f64) -> Result<(), ProjectionError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ProjectionError::BadTemperature(tau))
    }
}

/// Softmax weights over unclamped cells (row-major, zero at clamped cells).
pub fn softmax_weights(patch: &SimilarityPatch, tau: f64) -> Result<Vec<f64>, ProjectionError> {
    check_tau(tau)?;
    let best = patch.argmax().ok_or(ProjectionError::AllClamped)?;
    let max = patch.scores[best];
    let mut w = vec![0.0; patch.scores.len()];
    let mut z = 0.0;
    for (i, _) in patch.cells() {
        w[i] = softmax_weight(patch.scores[i], max, tau);
        z += w[i];
    }
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

/// Soft-argmax: expected cell coordinates under `softmax(scores / tau)`.
pub fn soft_project(patch: &SimilarityPatch, tau: f64) -> Result<[f64; 2], ProjectionError> {
    let w = softmax_weights(patch, tau)?;
    let mut out = [0.0; 2];
    for (i, [u, v]) in patch.cells() {
        out[0] += w[i] * u;
        out[1] += w[i] * v;
    }
    Ok(out)
}

/// Adjoint of [`soft_project`]: gradients w.r.t. the scores and `tau`.
pub fn soft_project_backward(
    patch: &SimilarityPatch,
    tau: f64,
    grad_out: [f64; 2],
) -> Result<(Vec<f64>, f64), ProjectionError> {
    let w = softmax_weights(patch, tau)?;
    let c = soft_project(patch, tau)?;
    let mean_score: f64 = patch.cells().map(|(i, _)| w[i] * patch.scores[i]).sum();
    let mut grad_scores = vec![0.0; patch.scores.len()];
    let mut grad_tau = 0.0;
    for (i, [u, v]) in patch.cells() {
        let proj = grad_out[0] * (u - c[0]) + grad_out[1] * (v - c[1]);
        grad_scores[i] = w[i] * proj / tau;
        grad_tau -= w[i] * (patch.scores[i] - mean_score) * proj / (tau * tau);
    }
    Ok((grad_scores, grad_tau))
}

/// Exhaustive argmax over the whole surface. Ties go to the smallest
/// row-major index. Not differentiable; used as a reference.
pub fn hard_project(surface: &RaySurface, point: &Vector3<f64>) -> Result<[usize; 2], ProjectionError> {
    let (dir, _) = unit_direction(&(point - surface.center()))?;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, q) in surface.rays().iter().enumerate() {
        let s = q.dot(&dir);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Ok([best % surface.width(), best / surface.width()])
}

/// Geometric interpolation from `tau_start` (step 0) to `tau_end` (step
/// `total`).
pub fn anneal_tau(step: usize, total: usize, tau_start: f64, tau_end: f64) -> f64 {
    if total == 0 {
        return tau_end;
    }
    let t = (step.min(total) as f64) / total as f64;
    tau_start * (tau_end / tau_start).powf(t)
}

/// Per-pixel continuous source coordinates plus validity.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl WarpGrid {
    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height * width)
            .map(|i| [(i % width) as f64, (i / width) as f64])
            .collect();
        Self {
            height,
            width,
            coords,
            valid: vec![true; height * width],
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectOptions {
    pub patch: PatchSpec,
    pub tau: f64,
    /// Search on a half-resolution copy of the context surface.
    pub half_res: bool,
    /// Pixels whose softmax puts more than this mass on the window border
    /// are flagged invalid (1.0 disables the check).
    pub max_border_mass: f64,
}

impl ProjectOptions {
    pub fn new(patch: PatchSpec, tau: f64) -> Self {
        Self {
            patch,
            tau,
            half_res: false,
            max_border_mass: 1.0,
        }
    }

    pub fn half_res(mut self, on: bool) -> Self {
        self.half_res = on;
        self
    }
}

/// Intermediate values kept by [`project_cloud_cached`] for the adjoint.
#[derive(Clone, Debug)]
pub struct ProjectionCache {
    search_w: usize,
    search_h: usize,
    scale: usize,
    search_rays: Vec<Vector3<f64>>,
    pixels: Vec<PixelCache>,
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelCache {
    dir: Vector3<f64>,
    norm: f64,
    max: f64,
    z: f64,
    /// Soft-argmax in search-resolution coordinates.
    c: [f64; 2],
    window: [usize; 4],
    active: bool,
}

struct SearchSurface {
    w: usize,
    h: usize,
    scale: usize,
    rays: Vec<Vector3<f64>>,
}

fn search_surface(surface: &RaySurface, half_res: bool) -> Result<SearchSurface, ProjectionError> {
    if half_res {
        let g = downsample_half(&surface.to_grid())?;
        let rays = g
            .data()
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Ok(SearchSurface {
            w: g.width(),
            h: g.height(),
            scale: 2,
            rays,
        })
    } else {
        Ok(SearchSurface {
            w: surface.width(),
            h: surface.height(),
            scale: 1,
            rays: surface.rays().to_vec(),
        })
    }
}

#[inline]
fn to_full(c: f64, scale: usize) -> f64 {
    if scale == 1 {
        c
    } else {
        scale as f64 * c + 0.5 * (scale as f64 - 1.0)
    }
}

/// Projects one point per target pixel into the context surface, searching
/// a patch anchored at the target pixel's own coordinates.
///
/// A pixel is valid when its soft coordinate lies inside the image and the
/// best-matching cell is not on the border of the (image-clipped) window;
/// a maximum on the border means the true projection may lie outside.
pub fn project_cloud(
    surface_c: &RaySurface,
    points: &[Vector3<f64>],
    opts: &ProjectOptions,
) -> Result<WarpGrid, ProjectionError> {
    project_cloud_cached(surface_c, points, opts).map(|(w, _)| w)
}

pub fn project_cloud_cached(
    surface_c: &RaySurface,
    points: &[Vector3<f64>],
    opts: &ProjectOptions,
) -> Result<(WarpGrid, ProjectionCache), ProjectionError> {
    check_tau(opts.tau)?;
    let (width, height) = (surface_c.width(), surface_c.height());
    if points.len() != width * height {
        return Err(ProjectionError::Shape(format!(
            "{} points for a {width}x{height} surface",
            points.len()
        )));
    }
    let search = search_surface(surface_c, opts.half_res)?;
    let (rx, ry) = (opts.patch.radius_x(), opts.patch.radius_y());
    let tau = opts.tau;

    let per_pixel: Vec<(PixelCache, [f64; 2], bool)> = (0..points.len())
        .into_par_iter()
        .map(|j| {
            let (x, y) = (j % width, j / width);
            let own = [x as f64, y as f64];
            let Ok((dir, norm)) = unit_direction(&points[j]) else {
                return (PixelCache::default(), own, false);
            };
            let (ax, ay) = (x / search.scale, y / search.scale);
            let x0 = ax.saturating_sub(rx);
            let x1 = (ax + rx).min(search.w - 1);
            let y0 = ay.saturating_sub(ry);
            let y1 = (ay + ry).min(search.h - 1);

            let mut max = f64::NEG_INFINITY;
            let mut arg = (x0, y0);
            for v in y0..=y1 {
                let row = &search.rays[v * search.w..];
                for u in x0..=x1 {
                    let s = row[u].dot(&dir);
                    if s > max {
                        max = s;
                        arg = (u, v);
                    }
                }
            }
            let mut z = 0.0;
            let (mut cu, mut cv) = (0.0, 0.0);
            let mut border = 0.0;
            for v in y0..=y1 {
                let row = &search.rays[v * search.w..];
                for u in x0..=x1 {
                    let e = softmax_weight(row[u].dot(&dir), max, tau);
                    if e == 0.0 {
                        continue;
                    }
                    z += e;
                    cu += e * u as f64;
                    cv += e * v as f64;
                    if u == x0 || u == x1 || v == y0 || v == y1 {
                        border += e;
                    }
                }
            }
            let c = [cu / z, cv / z];
            let full = [to_full(c[0], search.scale), to_full(c[1], search.scale)];
            let on_border = (x1 > x0 && (arg.0 == x0 || arg.0 == x1))
                || (y1 > y0 && (arg.1 == y0 || arg.1 == y1));
            let inside = full[0] >= 0.0
                && full[1] >= 0.0
                && full[0] <= (width - 1) as f64
                && full[1] <= (height - 1) as f64;
            let saturated = opts.max_border_mass < 1.0 && border / z > opts.max_border_mass;
            let valid = inside && !on_border && !saturated && full.iter().all(|v| v.is_finite());
            let cache = PixelCache {
                dir,
                norm,
                max,
                z,
                c,
                window: [x0, x1, y0, y1],
                active: true,
            };
            (cache, full, valid)
        })
        .collect();

    let mut coords = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    let mut pixels = Vec::with_capacity(points.len());
    for (cache, full, ok) in per_pixel {
        coords.push(full);
        valid.push(ok);
        pixels.push(cache);
    }
    Ok((
        WarpGrid {
            height,
            width,
            coords,
            valid,
        },
        ProjectionCache {
            search_w: search.w,
            search_h: search.h,
            scale: search.scale,
            search_rays: search.rays,
            pixels,
        },
    ))
}

/// Adjoint of [`project_cloud`]. `grad_coords` holds `dL/d(u, v)` at full
/// resolution; returns `(dL/dpoints, dL/drays)` with ray gradients on the
/// full-resolution context surface.
///
/// The ray gradient is gathered per context cell over the target pixels
/// whose windows cover it, so the result does not depend on thread
/// scheduling.
pub fn project_cloud_backward(
    surface_c: &RaySurface,
    opts: &ProjectOptions,
    cache: &ProjectionCache,
    grad_coords: &[[f64; 2]],
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let (width, height) = (surface_c.width(), surface_c.height());
    let tau = opts.tau;
    let scale = cache.scale as f64;
    let sw = cache.search_w;
    let rays = &cache.search_rays;

    // dL/dc in search coordinates
    let g_search: Vec<[f64; 2]> = grad_coords
        .iter()
        .zip(&cache.pixels)
        .map(|(g, p)| {
            if p.active {
                [g[0] * scale, g[1] * scale]
            } else {
                [0.0, 0.0]
            }
        })
        .collect();

    let grad_points: Vec<Vector3<f64>> = (0..cache.pixels.len())
        .into_par_iter()
        .map(|j| {
            let p = &cache.pixels[j];
            let g = g_search[j];
            if !p.active || (g[0] == 0.0 && g[1] == 0.0) {
                return Vector3::zeros();
            }
            let [x0, x1, y0, y1] = p.window;
            let mut grad_dir = Vector3::zeros();
            for v in y0..=y1 {
                for u in x0..=x1 {
                    let q = &rays[v * sw + u];
                    let e = softmax_weight(q.dot(&p.dir), p.max, tau);
                    if e == 0.0 {
                        continue;
                    }
                    let proj = g[0] * (u as f64 - p.c[0]) + g[1] * (v as f64 - p.c[1]);
                    grad_dir += q * (e / p.z * proj / tau);
                }
            }
            (grad_dir - p.dir * p.dir.dot(&grad_dir)) / p.norm
        })
        .collect();

    let (rx, ry) = (opts.patch.radius_x(), opts.patch.radius_y());
    let s = cache.scale;
    let grad_search: Vec<Vector3<f64>> = (0..cache.search_w * cache.search_h)
        .into_par_iter()
        .map(|i| {
            let (iu, iv) = (i % sw, i / sw);
            let q = &rays[i];
            let jx0 = s * iu.saturating_sub(rx);
            let jx1 = (s * (iu + rx) + s - 1).min(width - 1);
            let jy0 = s * iv.saturating_sub(ry);
            let jy1 = (s * (iv + ry) + s - 1).min(height - 1);
            let mut acc = Vector3::zeros();
            for jy in jy0..=jy1 {
                for jx in jx0..=jx1 {
                    let j = jy * width + jx;
                    let p = &cache.pixels[j];
                    let g = g_search[j];
                    if !p.active || (g[0] == 0.0 && g[1] == 0.0) {
                        continue;
                    }
                    let e = softmax_weight(q.dot(&p.dir), p.max, tau);
                    if e == 0.0 {
                        continue;
                    }
                    let proj = g[0] * (iu as f64 - p.c[0]) + g[1] * (iv as f64 - p.c[1]);
                    acc += p.dir * (e / p.z * proj / tau);
                }
            }
            acc
        })
        .collect();

    let grad_rays = if cache.scale == 1 {
        grad_search
    } else {
        let data = grad_search.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let g = ImageGrid::new(cache.search_h, cache.search_w, 3, data).expect("search shape");
        downsample_half_backward(height, width, &g)
            .data()
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect()
    };
    (grad_points, grad_rays)
}
