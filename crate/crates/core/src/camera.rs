//! Pinhole and generic ray-surface camera models.
//!
//! Cameras are central: every ray leaves the origin. A [`RaySurface`] stores
//! one unit direction per pixel, and a learned [`ResidualSurface`] is blended
//! onto a fixed template before renormalization.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ImageGrid;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("depth must be positive, got {depth} at pixel {index}")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("point is behind the camera (z={z})")]
    BehindCamera { z: f64 },
    #[error("ray at pixel {index} is not unit length (norm {norm})")]
    NotUnit { index: usize, norm: f64 },
    #[error("degenerate ray (zero norm) at pixel {index}")]
    Degenerate { index: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("residual weight {0} outside [0, 1]")]
    BadWeight(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::BadFocal { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// "Dummy" calibration used when nothing is known about the camera:
    /// `fx = cx = W/2`, `fy = cy = H/2`.
    pub fn default_for(height: usize, width: usize) -> Self {
        let (w2, h2) = (width as f64 / 2.0, height as f64 / 2.0);
        Self {
            fx: w2,
            fy: h2,
            cx: w2,
            cy: h2,
        }
    }

    /// `K^-1 [u, v, 1]^T`.
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

pub fn pinhole_unproject(
    k: &Intrinsics,
    pixel: [f64; 2],
    depth: f64,
) -> Result<Vector3<f64>, CameraError> {
    if !(depth > 0.0) {
        return Err(CameraError::NonPositiveDepth { index: 0, depth });
    }
    Ok(k.back_project(pixel[0], pixel[1]) * depth)
}

pub fn pinhole_project(k: &Intrinsics, p: &Vector3<f64>) -> Result<[f64; 2], CameraError> {
    if !(p.z > 0.0) {
        return Err(CameraError::BehindCamera { z: p.z });
    }
    Ok([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
}

/// Jacobian of [`pinhole_project`] w.r.t. the point (rows: u, v).
pub fn pinhole_project_jacobian(k: &Intrinsics, p: &Vector3<f64>) -> [[f64; 3]; 2] {
    let iz = 1.0 / p.z;
    [
        [k.fx * iz, 0.0, -k.fx * p.x * iz * iz],
        [0.0, k.fy * iz, -k.fy * p.y * iz * iz],
    ]
}

/// Per-pixel unit ray field of a central camera centred at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySurface {
    height: usize,
    width: usize,
    rays: Vec<Vector3<f64>>,
}

impl RaySurface {
    /// Wraps rays that must already be unit length.
    pub fn new(height: usize, width: usize, rays: Vec<Vector3<f64>>) -> Result<Self, CameraError> {
        if rays.len() != height * width {
            return Err(CameraError::Shape(format!(
                "{} rays for {height}x{width}",
                rays.len()
            )));
        }
        for (index, r) in rays.iter().enumerate() {
            let norm = r.norm();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(CameraError::NotUnit { index, norm });
            }
        }
        Ok(Self {
            height,
            width,
            rays,
        })
    }

    /// Normalizes every ray; zero rays are an error.
    pub fn from_unnormalized(
        height: usize,
        width: usize,
        rays: Vec<Vector3<f64>>,
    ) -> Result<Self, CameraError> {
        if rays.len() != height * width {
            return Err(CameraError::Shape(format!(
                "{} rays for {height}x{width}",
                rays.len()
            )));
        }
        let rays = rays
            .into_iter()
            .enumerate()
            .map(|(index, r)| {
                let n = r.norm();
                if n > 0.0 && n.is_finite() {
                    Ok(r / n)
                } else {
                    Err(CameraError::Degenerate { index })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            height,
            width,
            rays,
        })
    }

    #[cfg(test)]
    pub(crate) fn unchecked_for_tests(height: usize, width: usize, rays: Vec<Vector3<f64>>) -> Self {
        Self {
            height,
            width,
            rays,
        }
    }

    pub fn from_grid(grid: &ImageGrid) -> Result<Self, CameraError> {
        if grid.channels() != 3 {
            return Err(CameraError::Shape(format!(
                "ray surface needs 3 channels, got {}",
                grid.channels()
            )));
        }
        let rays = grid
            .data()
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Self::from_unnormalized(grid.height(), grid.width(), rays)
    }

    pub fn to_grid(&self) -> ImageGrid {
        let data = self.rays.iter().flat_map(|r| [r.x, r.y, r.z]).collect();
        ImageGrid::new(self.height, self.width, 3, data).expect("consistent shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rays(&self) -> &[Vector3<f64>] {
        &self.rays
    }

    pub fn ray(&self, x: usize, y: usize) -> &Vector3<f64> {
        &self.rays[y * self.width + x]
    }

    /// Always the origin: only central cameras are modelled.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::zeros()
    }

    pub fn max_unit_error(&self) -> f64 {
        self.rays
            .iter()
            .map(|r| (r.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Median angle in radians between horizontally and vertically adjacent
    /// rays, counting only pairs with both pixels inside `mask`.
    pub fn angular_pitch(&self, mask: Option<&[bool]>) -> Option<f64> {
        let inside = |i: usize| mask.is_none_or(|m| m[i]);
        let angle = |a: &Vector3<f64>, b: &Vector3<f64>| a.cross(b).norm().atan2(a.dot(b));
        let mut angles = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                if x + 1 < self.width && inside(i) && inside(i + 1) {
                    angles.push(angle(&self.rays[i], &self.rays[i + 1]));
                }
                if y + 1 < self.height && inside(i) && inside(i + self.width) {
                    angles.push(angle(&self.rays[i], &self.rays[i + self.width]));
                }
            }
        }
        crate::metrics::median(&angles)
    }

    /// Angle in radians between corresponding rays of two surfaces.
    pub fn angular_errors(&self, other: &RaySurface) -> Vec<f64> {
        self.rays
            .iter()
            .zip(&other.rays)
            .map(|(a, b)| a.cross(b).norm().atan2(a.dot(b)))
            .collect()
    }
}

/// Learnable per-pixel correction blended onto a template with weight
/// `weight` (the residual ramp, in [0, 1]).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSurface {
    pub height: usize,
    pub width: usize,
    pub residuals: Vec<Vector3<f64>>,
    pub weight: f64,
}

impl ResidualSurface {
    pub fn zeros(height: usize, width: usize, weight: f64) -> Self {
        Self {
            height,
            width,
            residuals: vec![Vector3::zeros(); height * width],
            weight,
        }
    }

    pub fn from_grid(grid: &ImageGrid, weight: f64) -> Result<Self, CameraError> {
        if grid.channels() != 3 {
            return Err(CameraError::Shape("residual needs 3 channels".into()));
        }
        Ok(Self {
            height: grid.height(),
            width: grid.width(),
            residuals: grid
                .data()
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
            weight,
        })
    }
}

pub fn pinhole_template(height: usize, width: usize, k: &Intrinsics, plane_depth: f64) -> RaySurface {
    let mut rays = Vec::with_capacity(height * width);
    for v in 0..height {
        for u in 0..width {
            let p = k.back_project(u as f64, v as f64) * plane_depth;
            rays.push(p.normalize());
        }
    }
    RaySurface {
        height,
        width,
        rays,
    }
}

/// `normalize(Q0 + weight * Qr)` per pixel.
pub fn compose_surface(
    template: &RaySurface,
    residual: &ResidualSurface,
) -> Result<RaySurface, CameraError> {
    if template.height != residual.height || template.width != residual.width {
        return Err(CameraError::Shape(format!(
            "template {}x{} vs residual {}x{}",
            template.height, template.width, residual.height, residual.width
        )));
    }
    if !(0.0..=1.0).contains(&residual.weight) {
        return Err(CameraError::BadWeight(residual.weight));
    }
    if residual.weight == 0.0 {
        return Ok(template.clone());
    }
    let raw = template
        .rays
        .iter()
        .zip(&residual.residuals)
        .map(|(q0, qr)| q0 + qr * residual.weight)
        .collect();
    RaySurface::from_unnormalized(template.height, template.width, raw)
}

/// Adjoint of [`compose_surface`]: gradients w.r.t. the residual vectors and
/// the blend weight.
pub fn compose_surface_backward(
    template: &RaySurface,
    residual: &ResidualSurface,
    grad_rays: &[Vector3<f64>],
) -> (Vec<Vector3<f64>>, f64) {
    let lam = residual.weight;
    let mut grad_weight = 0.0;
    let grads = template
        .rays
        .iter()
        .zip(&residual.residuals)
        .zip(grad_rays)
        .map(|((q0, qr), g)| {
            let raw = q0 + qr * lam;
            let n = raw.norm();
            let q = raw / n;
            let g_raw = (g - q * q.dot(g)) / n;
            grad_weight += g_raw.dot(qr);
            g_raw * lam
        })
        .collect();
    (grads, grad_weight)
}

/// `P(u, v) = D(u, v) * Q(u, v)` (camera centre at the origin).
pub fn ray_unproject(
    surface: &RaySurface,
    depth: &ImageGrid,
) -> Result<Vec<Vector3<f64>>, CameraError> {
    if depth.height() != surface.height || depth.width() != surface.width || depth.channels() != 1
    {
        return Err(CameraError::Shape(format!(
            "depth {}x{}x{} vs surface {}x{}",
            depth.height(),
            depth.width(),
            depth.channels(),
            surface.height,
            surface.width
        )));
    }
    surface
        .rays
        .iter()
        .zip(depth.data())
        .enumerate()
        .map(|(index, (q, &d))| {
            if d > 0.0 {
                Ok(q * d)
            } else {
                Err(CameraError::NonPositiveDepth { index, depth: d })
            }
        })
        .collect()
}

/// Adjoint of [`ray_unproject`]: `(dL/dD, dL/dQ)`.
pub fn ray_unproject_backward(
    surface: &RaySurface,
    depth: &ImageGrid,
    grad_points: &[Vector3<f64>],
) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let gd = surface
        .rays
        .iter()
        .zip(grad_points)
        .map(|(q, g)| q.dot(g))
        .collect();
    let gq = depth
        .data()
        .iter()
        .zip(grad_points)
        .map(|(&d, g)| g * d)
        .collect();
    (gd, gq)
}

/// Maps unconstrained parameters onto depths in `[d_min, d_max]` through a
/// sigmoid on inverse depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Self {
        Self { d_min, d_max }
    }

    fn inv_bounds(&self) -> (f64, f64) {
        (1.0 / self.d_max, 1.0 / self.d_min)
    }

    pub fn decode(&self, x: f64) -> f64 {
        let (lo, hi) = self.inv_bounds();
        let s = sigmoid(x);
        (1.0 / (lo + (hi - lo) * s)).clamp(self.d_min, self.d_max)
    }

    /// `d depth / d x`.
    pub fn decode_grad(&self, x: f64) -> f64 {
        let (lo, hi) = self.inv_bounds();
        let s = sigmoid(x);
        let inv = lo + (hi - lo) * s;
        -(hi - lo) * s * (1.0 - s) / (inv * inv)
    }

    pub fn encode(&self, depth: f64) -> f64 {
        let (lo, hi) = self.inv_bounds();
        let s = ((1.0 / depth - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
        (s / (1.0 - s)).ln()
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        Self::new(0.1, 100.0)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::grad_check;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    #[test]
    fn pinhole_unproject_examples() {
        let k = Intrinsics::new(40.0, 30.0, 12.0, 9.0).unwrap();
        assert_eq!(
            pinhole_unproject(&k, [12.0, 9.0], 5.0).unwrap(),
            Vector3::new(0.0, 0.0, 5.0)
        );
        let unit = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(
            pinhole_unproject(&unit, [2.0, 3.0], 1.0).unwrap(),
            Vector3::new(2.0, 3.0, 1.0)
        );
        let p = pinhole_unproject(&k100(), [150.0, 50.0], 2.0).unwrap();
        assert!((p - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
        assert!(pinhole_unproject(&k, [0.0, 0.0], 0.0).is_err());
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pinhole_project_examples() {
        let k = k100();
        assert_eq!(pinhole_project(&k, &Vector3::new(0.0, 0.0, 3.0)).unwrap(), [50.0, 50.0]);
        let p = pinhole_project(&k, &Vector3::new(1.0, 1.0, 2.0)).unwrap();
        assert!((p[0] - 100.0).abs() < 1e-12 && (p[1] - 100.0).abs() < 1e-12);
        assert!(matches!(
            pinhole_project(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::BehindCamera { .. })
        ));
    }

    #[test]
    fn project_jacobian_matches_differences() {
        let k = Intrinsics::new(80.0, 60.0, 30.0, 20.0).unwrap();
        let w = [0.3, -0.8];
        let f = |x: &[f64]| {
            let p = Vector3::new(x[0], x[1], x[2]);
            let uv = pinhole_project(&k, &p).unwrap();
            let j = pinhole_project_jacobian(&k, &p);
            let g = (0..3).map(|c| w[0] * j[0][c] + w[1] * j[1][c]).collect();
            (w[0] * uv[0] + w[1] * uv[1], g)
        };
        assert!(grad_check(f, &[0.4, -0.3, 2.5], 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn template_examples() {
        let (h, w) = (48, 64);
        let k = Intrinsics::default_for(h, w);
        let t = pinhole_template(h, w, &k, 1.0);
        assert!((t.ray(32, 24) - Vector3::z()).norm() < 1e-15);
        // corner (0,0) with fx = cx = W/2: K^-1 p = (-1, -1, 1)
        let expect = Vector3::new(-1.0, -1.0, 1.0).normalize();
        assert!((t.ray(0, 0) - expect).norm() < 1e-15);
        let t7 = pinhole_template(h, w, &k, 7.0);
        for (a, b) in t.rays().iter().zip(t7.rays()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(t.max_unit_error() < 1e-12);
    }

    #[test]
    fn template_adjacent_angle_monotone() {
        let k = Intrinsics::new(20.0, 20.0, 15.5, 10.0).unwrap();
        let t = pinhole_template(21, 32, &k, 1.0);
        let v = 4;
        let step = |u: usize| t.ray(u, v).angle(t.ray(u + 1, v));
        // moving away from the principal point the per-pixel angle shrinks
        for u in 16..30 {
            assert!(step(u + 1) <= step(u) + 1e-15);
        }
        for u in 1..15 {
            assert!(step(u - 1) <= step(u) + 1e-15);
        }
    }

    #[test]
    fn compose_examples() {
        let k = Intrinsics::default_for(4, 4);
        let t = pinhole_template(4, 4, &k, 1.0);
        let mut r = ResidualSurface::zeros(4, 4, 0.0);
        r.residuals.iter_mut().for_each(|q| *q = Vector3::new(0.3, -0.2, 0.5));
        assert_eq!(compose_surface(&t, &r).unwrap(), t);

        let same = ResidualSurface {
            residuals: t.rays().to_vec(),
            weight: 1.0,
            ..r.clone()
        };
        let c = compose_surface(&t, &same).unwrap();
        for (a, b) in c.rays().iter().zip(t.rays()) {
            assert!((a - b).norm() < 1e-15);
        }

        let t1 = RaySurface::new(1, 1, vec![Vector3::z()]).unwrap();
        let r1 = ResidualSurface {
            height: 1,
            width: 1,
            residuals: vec![Vector3::x()],
            weight: 1.0,
        };
        let c = compose_surface(&t1, &r1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c.ray(0, 0) - Vector3::new(s, 0.0, s)).norm() < 1e-15);

        let bad = ResidualSurface {
            residuals: vec![-Vector3::z()],
            ..r1.clone()
        };
        assert_eq!(compose_surface(&t1, &bad), Err(CameraError::Degenerate { index: 0 }));
    }

    #[test]
    fn unproject_examples() {
        let k = Intrinsics::new(10.0, 12.0, 3.0, 2.0).unwrap();
        let t = pinhole_template(5, 6, &k, 1.0);
        let ones = ImageGrid::filled(5, 6, 1, 1.0);
        let pts = ray_unproject(&t, &ones).unwrap();
        assert_eq!(pts, t.rays().to_vec());

        let d = ImageGrid::filled(5, 6, 1, 4.0);
        let pts = ray_unproject(&t, &d).unwrap();
        assert!((pts[2 * 6 + 3] - Vector3::new(0.0, 0.0, 4.0)).norm() < 1e-15);

        // along-ray depth d*|K^-1 p| reproduces the pinhole point at z-depth d
        let depth = ImageGrid::from_fn(5, 6, 1, |x, y, _| {
            (1.0 + 0.1 * (x + y) as f64) * k.back_project(x as f64, y as f64).norm()
        });
        let pts = ray_unproject(&t, &depth).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let z = 1.0 + 0.1 * (x + y) as f64;
                let want = pinhole_unproject(&k, [x as f64, y as f64], z).unwrap();
                assert!((pts[y * 6 + x] - want).norm() < 1e-12);
                assert!((pts[y * 6 + x].normalize() - t.ray(x, y)).norm() < 1e-12);
            }
        }
        let mut bad = ones.clone();
        bad.set(1, 1, 0, -1.0);
        assert!(matches!(
            ray_unproject(&t, &bad),
            Err(CameraError::NonPositiveDepth { index: 7, .. })
        ));
    }

    #[test]
    fn compose_gradient() {
        let k = Intrinsics::default_for(2, 3);
        let t = pinhole_template(2, 3, &k, 1.0);
        let w: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(0.1 * i as f64, -0.3, 0.7 - 0.05 * i as f64))
            .collect();
        let f = |x: &[f64]| {
            let r = ResidualSurface {
                height: 2,
                width: 3,
                residuals: x[..18].chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
                weight: x[18],
            };
            let s = compose_surface(&t, &r).unwrap();
            let v: f64 = s.rays().iter().zip(&w).map(|(a, b)| a.dot(b)).sum();
            let (g, gw) = compose_surface_backward(&t, &r, &w);
            let mut out: Vec<f64> = g.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            out.push(gw);
            (v, out)
        };
        let mut x: Vec<f64> = (0..18).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect();
        x.push(0.6);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn unproject_gradient() {
        let k = Intrinsics::default_for(2, 2);
        let t = pinhole_template(2, 2, &k, 1.0);
        let w: Vec<Vector3<f64>> = (0..4).map(|i| Vector3::new(0.2, -0.1 * i as f64, 0.5)).collect();
        let f = |x: &[f64]| {
            let d = ImageGrid::new(2, 2, 1, x.to_vec()).unwrap();
            let p = ray_unproject(&t, &d).unwrap();
            let v: f64 = p.iter().zip(&w).map(|(a, b)| a.dot(b)).sum();
            (v, ray_unproject_backward(&t, &d, &w).0)
        };
        assert!(grad_check(f, &[1.0, 2.0, 0.5, 3.0], 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn depth_range_roundtrip_and_gradient() {
        let r = DepthRange::new(0.5, 20.0);
        for &d in &[0.6, 1.0, 3.0, 19.0] {
            assert!((r.decode(r.encode(d)) - d).abs() < 1e-9);
        }
        assert!(r.decode(-50.0) <= 20.0 && r.decode(50.0) >= 0.5);
        let f = |x: &[f64]| (r.decode(x[0]), vec![r.decode_grad(x[0])]);
        assert!(grad_check(f, &[0.3], 1e-6).unwrap() < 1e-8);
    }

    #[test]
    fn angular_pitch_of_pinhole_is_inverse_focal_near_axis() {
        // 3x3 template: every neighbour pair spans atan(1/f) or slightly less
        let f = 50.0;
        let k = Intrinsics::new(f, f, 1.0, 1.0).unwrap();
        let s = pinhole_template(3, 3, &k, 1.0);
        let pitch = s.angular_pitch(None).unwrap();
        let on_axis = (1.0 / f).atan();
        assert!(pitch <= on_axis && pitch > on_axis * 0.999, "{pitch}");
        let mut mask = vec![false; 9];
        mask[4] = true;
        assert_eq!(s.angular_pitch(Some(&mask)), None);
        mask[5] = true;
        assert!((s.angular_pitch(Some(&mask)).unwrap() - on_axis).abs() < 1e-15);
    }
}
