//! Dense rasters, bilinear sampling and resampling, plus the finite-difference
//! harness used to validate every hand-written adjoint in the crate.
//!
//! Each differentiable operation here comes as a forward function and a
//! `*_backward` function computing the vector-Jacobian product for an
//! upstream gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("data length {len} does not match {height}x{width}x{channels}")]
    DataLength {
        len: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("grid must have at least 2 rows and 2 columns, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("cannot upsample {from_h}x{from_w} to smaller {to_h}x{to_w}")]
    Shrinking {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operation returned a non-finite value at parameter {index}")]
    NonFinite { index: usize },
    #[error("finite-difference step must be positive")]
    BadStep,
}

/// H x W x C raster of reals, row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TryFrom<RawGrid> for ImageGrid {
    type Error = GridError;

    fn try_from(r: RawGrid) -> Result<Self, GridError> {
        ImageGrid::new(r.height, r.width, r.channels, r.data)
    }
}

impl ImageGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if data.len() != height * width * channels {
            return Err(GridError::DataLength {
                len: data.len(),
                height,
                width,
                channels,
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a grid from `f(x, y, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Single channel `c` as a 1-channel grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        ImageGrid::from_fn(self.height, self.width, 1, |x, y, _| self.get(x, y, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> ImageGrid {
        self.map(|v| v * s)
    }

    pub fn axpy(&mut self, a: f64, other: &ImageGrid) {
        debug_assert!(self.same_shape(other));
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += a * s;
        }
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        let prod: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        pairwise_sum(&prod)
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pairwise (cascade) summation; bounds rounding growth to O(log n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Values sampled at continuous coordinates. `values` holds `channels`
/// entries per query.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub channels: usize,
}

impl SampleResult {
    pub fn value(&self, query: usize, c: usize) -> f64 {
        self.values[query * self.channels + c]
    }
}

/// Bilinear stencil: top-left corner and fractional offsets.
#[inline]
fn stencil(size: usize, coord: f64) -> (usize, f64) {
    if size == 1 {
        return (0, 0.0);
    }
    let base = (coord.floor() as usize).min(size - 2);
    (base, coord - base as f64)
}

#[inline]
fn in_bounds(width: usize, height: usize, u: f64, v: f64) -> bool {
    u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64
}

/// Samples `grid` at each `(u, v)`. Queries outside `[0, W-1] x [0, H-1]`
/// come back invalid with zero values.
pub fn bilinear_sample(grid: &ImageGrid, coords: &[[f64; 2]]) -> SampleResult {
    let ch = grid.channels;
    let mut values = vec![0.0; coords.len() * ch];
    let mut valid = vec![false; coords.len()];
    for (q, &[u, v]) in coords.iter().enumerate() {
        if !in_bounds(grid.width, grid.height, u, v) {
            continue;
        }
        valid[q] = true;
        let (x0, fx) = stencil(grid.width, u);
        let (y0, fy) = stencil(grid.height, v);
        let x1 = (x0 + 1).min(grid.width - 1);
        let y1 = (y0 + 1).min(grid.height - 1);
        for c in 0..ch {
            let top = grid.get(x0, y0, c) * (1.0 - fx) + grid.get(x1, y0, c) * fx;
            let bottom = grid.get(x0, y1, c) * (1.0 - fx) + grid.get(x1, y1, c) * fx;
            values[q * ch + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    SampleResult {
        values,
        valid,
        channels: ch,
    }
}

/// Adjoint of [`bilinear_sample`]: gradients w.r.t. the grid values and the
/// query coordinates, given `grad_values` laid out like `SampleResult::values`.
pub fn bilinear_sample_backward(
    grid: &ImageGrid,
    coords: &[[f64; 2]],
    grad_values: &[f64],
) -> (ImageGrid, Vec<[f64; 2]>) {
    let ch = grid.channels;
    let mut grad_grid = ImageGrid::zeros(grid.height, grid.width, ch);
    let mut grad_coords = vec![[0.0; 2]; coords.len()];
    for (q, &[u, v]) in coords.iter().enumerate() {
        if !in_bounds(grid.width, grid.height, u, v) {
            continue;
        }
        let (x0, fx) = stencil(grid.width, u);
        let (y0, fy) = stencil(grid.height, v);
        let x1 = (x0 + 1).min(grid.width - 1);
        let y1 = (y0 + 1).min(grid.height - 1);
        let (dx_ok, dy_ok) = (grid.width > 1, grid.height > 1);
        for c in 0..ch {
            let g = grad_values[q * ch + c];
            if g == 0.0 {
                continue;
            }
            let (a, b) = (grid.get(x0, y0, c), grid.get(x1, y0, c));
            let (d, e) = (grid.get(x0, y1, c), grid.get(x1, y1, c));
            let i00 = grid.index(x0, y0, c);
            let i10 = grid.index(x1, y0, c);
            let i01 = grid.index(x0, y1, c);
            let i11 = grid.index(x1, y1, c);
            grad_grid.data[i00] += g * (1.0 - fx) * (1.0 - fy);
            grad_grid.data[i10] += g * fx * (1.0 - fy);
            grad_grid.data[i01] += g * (1.0 - fx) * fy;
            grad_grid.data[i11] += g * fx * fy;
            if dx_ok {
                grad_coords[q][0] += g * ((b - a) * (1.0 - fy) + (e - d) * fy);
            }
            if dy_ok {
                let top = a * (1.0 - fx) + b * fx;
                let bottom = d * (1.0 - fx) + e * fx;
                grad_coords[q][1] += g * (bottom - top);
            }
        }
    }
    (grad_grid, grad_coords)
}

/// Halves resolution by averaging 2x2 blocks; odd trailing rows/columns
/// average over the cells that exist.
pub fn downsample_half(grid: &ImageGrid) -> Result<ImageGrid, GridError> {
    if grid.height < 2 || grid.width < 2 {
        return Err(GridError::TooSmall {
            height: grid.height,
            width: grid.width,
        });
    }
    let (oh, ow) = (grid.height.div_ceil(2), grid.width.div_ceil(2));
    let mut out = ImageGrid::zeros(oh, ow, grid.channels);
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = (2 * oy)..(2 * oy + 2).min(grid.height);
            let xs = (2 * ox)..(2 * ox + 2).min(grid.width);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..grid.channels {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += grid.get(x, y, c);
                    }
                }
                out.set(ox, oy, c, acc / n);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample_half`] for a source of size `height x width`.
pub fn downsample_half_backward(height: usize, width: usize, grad_out: &ImageGrid) -> ImageGrid {
    let ch = grad_out.channels;
    let mut g = ImageGrid::zeros(height, width, ch);
    for y in 0..height {
        for x in 0..width {
            let (ox, oy) = (x / 2, y / 2);
            let ny = if 2 * oy + 1 < height { 2 } else { 1 };
            let nx = if 2 * ox + 1 < width { 2 } else { 1 };
            let n = (nx * ny) as f64;
            for c in 0..ch {
                g.set(x, y, c, grad_out.get(ox, oy, c) / n);
            }
        }
    }
    g
}

#[inline]
fn align_corners(dst: usize, src: usize, i: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear upsampling with aligned corners: output corners coincide with
/// input corners.
pub fn upsample_bilinear(
    grid: &ImageGrid,
    height: usize,
    width: usize,
) -> Result<ImageGrid, GridError> {
    if height < grid.height || width < grid.width {
        return Err(GridError::Shrinking {
            from_h: grid.height,
            from_w: grid.width,
            to_h: height,
            to_w: width,
        });
    }
    let mut out = ImageGrid::zeros(height, width, grid.channels);
    for y in 0..height {
        let sy = align_corners(height, grid.height, y);
        let (y0, fy) = stencil(grid.height, sy);
        let y1 = (y0 + 1).min(grid.height - 1);
        for x in 0..width {
            let sx = align_corners(width, grid.width, x);
            let (x0, fx) = stencil(grid.width, sx);
            let x1 = (x0 + 1).min(grid.width - 1);
            for c in 0..grid.channels {
                let top = grid.get(x0, y0, c) * (1.0 - fx) + grid.get(x1, y0, c) * fx;
                let bottom = grid.get(x0, y1, c) * (1.0 - fx) + grid.get(x1, y1, c) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`] back onto a source of `src_h x src_w`.
pub fn upsample_bilinear_backward(src_h: usize, src_w: usize, grad_out: &ImageGrid) -> ImageGrid {
    let (height, width, ch) = (grad_out.height, grad_out.width, grad_out.channels);
    let mut g = ImageGrid::zeros(src_h, src_w, ch);
    for y in 0..height {
        let sy = align_corners(height, src_h, y);
        let (y0, fy) = stencil(src_h, sy);
        let y1 = (y0 + 1).min(src_h - 1);
        for x in 0..width {
            let sx = align_corners(width, src_w, x);
            let (x0, fx) = stencil(src_w, sx);
            let x1 = (x0 + 1).min(src_w - 1);
            for c in 0..ch {
                let go = grad_out.get(x, y, c);
                let i00 = g.index(x0, y0, c);
                let i10 = g.index(x1, y0, c);
                let i01 = g.index(x0, y1, c);
                let i11 = g.index(x1, y1, c);
                g.data[i00] += go * (1.0 - fx) * (1.0 - fy);
                g.data[i10] += go * fx * (1.0 - fy);
                g.data[i01] += go * (1.0 - fx) * fy;
                g.data[i11] += go * fx * fy;
            }
        }
    }
    g
}

/// Compares an analytic gradient against central differences.
///
/// `op` returns the scalar value and its gradient at the given parameters.
/// The result is `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(op: F, params: &[f64], eps: f64) -> Result<f64, GridError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(GridError::BadStep);
    }
    let (value, analytic) = op(params);
    if !value.is_finite() {
        return Err(GridError::NonFinite { index: 0 });
    }
    if analytic.len() != params.len() {
        return Err(GridError::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let plus = op(&probe).0;
        probe[i] = params[i] - eps;
        let minus = op(&probe).0;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GridError::NonFinite { index: i });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check`] over the values of a grid.
pub fn grad_check_grid<F>(op: F, grid: &ImageGrid, eps: f64) -> Result<f64, GridError>
where
    F: Fn(&ImageGrid) -> (f64, ImageGrid),
{
    let (h, w, c) = (grid.height, grid.width, grid.channels);
    grad_check(
        |p| {
            let g = ImageGrid::new(h, w, c, p.to_vec()).expect("same shape");
            let (v, grad) = op(&g);
            (v, grad.into_data())
        },
        grid.data(),
        eps,
    )
}
