//! Ground-truth renderer: textured planes and boxes seen through pinhole,
//! equidistant fisheye and equiangular catadioptric cameras.
//!
//! Rendered depth is the distance along the unit ray, not planar z. Poses
//! passed to [`render`] are camera-to-world.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, Intrinsics, RaySurface};
use crate::geometry::{euler_to_pose, Pose, PoseParams};
use crate::grid::ImageGrid;
use crate::io::{self, FrameEntry, IoError, Manifest, MANIFEST_VERSION};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid camera: {0}")]
    BadCamera(String),
    #[error("need at least {need} poses, got {got}")]
    TooFewPoses { need: usize, got: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
}

/// One sinusoid of a smooth noise texture. Surface textures read the first
/// two frequency components; solid textures read all three.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub freq: [f64; 3],
    pub phase: f64,
    pub amplitude: [f64; 3],
}

/// Procedural colour as a function of 2D surface coordinates or, for
/// `Solid`, of the 3D hit point (world units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Constant([f64; 3]),
    /// Checker with period `period`, edges smoothed by `tanh(sharpness * .)`.
    Checker {
        period: f64,
        sharpness: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
    /// Base colour plus a sum of sinusoids.
    Noise { base: [f64; 3], waves: Vec<Wave> },
    /// Like `Noise` but in 3D, so colour stays continuous across the creases
    /// of a box.
    Solid { base: [f64; 3], waves: Vec<Wave> },
}

impl Texture {
    /// Band-limited random texture: `count` sinusoids with spatial frequency
    /// at most `max_freq` cycles per unit.
    pub fn smooth_noise(seed: u64, count: usize, max_freq: f64) -> Texture {
        Texture::Noise {
            base: [0.5; 3],
            waves: random_waves(seed, count, max_freq, false),
        }
    }

    /// Solid counterpart of [`Texture::smooth_noise`] with isotropic random
    /// frequency directions.
    pub fn smooth_solid_noise(seed: u64, count: usize, max_freq: f64) -> Texture {
        Texture::Solid {
            base: [0.5; 3],
            waves: random_waves(seed, count, max_freq, true),
        }
    }

    /// The same pattern on geometry enlarged by `c`: spatial frequencies
    /// divide by `c`, so `scaled(c).color(c p) == color(p)`.
    pub fn scaled(&self, c: f64) -> Texture {
        let waves_of = |waves: &[Wave]| {
            waves
                .iter()
                .map(|w| Wave {
                    freq: w.freq.map(|f| f / c),
                    ..*w
                })
                .collect()
        };
        match self {
            Texture::Constant(_) => self.clone(),
            Texture::Checker {
                period,
                sharpness,
                a,
                b,
            } => Texture::Checker {
                period: period * c,
                sharpness: *sharpness,
                a: *a,
                b: *b,
            },
            Texture::Noise { base, waves } => Texture::Noise {
                base: *base,
                waves: waves_of(waves),
            },
            Texture::Solid { base, waves } => Texture::Solid {
                base: *base,
                waves: waves_of(waves),
            },
        }
    }

    /// Colour at surface coordinates `(s, t)` of world point `p`.
    pub fn color(&self, p: &Vector3<f64>, s: f64, t: f64) -> [f64; 3] {
        match self {
            Texture::Solid { base, waves } => sum_waves(base, waves, |f| f[0] * p[0] + f[1] * p[1] + f[2] * p[2]),
            _ => self.eval(s, t),
        }
    }

    /// Colour at surface coordinates; `Solid` textures are read on the
    /// `z = 0` plane.
    pub fn eval(&self, s: f64, t: f64) -> [f64; 3] {
        match self {
            Texture::Constant(c) => *c,
            Texture::Checker {
                period,
                sharpness,
                a,
                b,
            } => {
                let m = (PI * s / period).sin() * (PI * t / period).sin();
                let w = 0.5 + 0.5 * (sharpness * m).tanh();
                [0, 1, 2].map(|c| a[c] * w + b[c] * (1.0 - w))
            }
            Texture::Noise { base, waves } | Texture::Solid { base, waves } => {
                sum_waves(base, waves, |f| f[0] * s + f[1] * t)
            }
        }
    }
}

fn sum_waves(base: &[f64; 3], waves: &[Wave], dot: impl Fn(&[f64; 3]) -> f64) -> [f64; 3] {
    let mut out = *base;
    for wv in waves {
        let v = (2.0 * PI * dot(&wv.freq) + wv.phase).sin();
        for c in 0..3 {
            out[c] += wv.amplitude[c] * v;
        }
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

fn random_waves(seed: u64, count: usize, max_freq: f64, solid: bool) -> Vec<Wave> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = 0.35 / (count as f64).sqrt();
    (0..count)
        .map(|_| {
            let f = max_freq * (0.3 + 0.7 * rng.random::<f64>());
            let a = 2.0 * PI * rng.random::<f64>();
            // uniform direction on the sphere for solid textures
            let z = if solid { 2.0 * rng.random::<f64>() - 1.0 } else { 0.0 };
            let r = (1.0 - z * z).sqrt();
            Wave {
                freq: [f * r * a.cos(), f * r * a.sin(), f * z],
                phase: 2.0 * PI * rng.random::<f64>(),
                amplitude: [
                    amp * (rng.random::<f64>() - 0.5) * 2.0,
                    amp * (rng.random::<f64>() - 0.5) * 2.0,
                    amp * (rng.random::<f64>() - 0.5) * 2.0,
                ],
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Plane through `origin` spanned by orthonormal `u_axis`, `v_axis`.
    /// `half_extent` bounds it to a rectangle; `None` is unbounded.
    Plane {
        origin: [f64; 3],
        u_axis: [f64; 3],
        v_axis: [f64; 3],
        half_extent: Option<[f64; 2]>,
        texture: Texture,
    },
    /// Axis-aligned box, visible from inside and outside.
    AaBox {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub color: [f64; 3],
}

const HIT_EPS: f64 = 1e-9;

impl Primitive {
    /// Fronto-parallel plane `z = depth` (world frame), unbounded.
    pub fn wall_z(depth: f64, texture: Texture) -> Primitive {
        Primitive::Plane {
            origin: [0.0, 0.0, depth],
            u_axis: [1.0, 0.0, 0.0],
            v_axis: [0.0, 1.0, 0.0],
            half_extent: None,
            texture,
        }
    }

    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Plane {
                origin,
                u_axis,
                v_axis,
                half_extent,
                texture,
            } => {
                let (c, u, v) = (Vector3::from(*origin), Vector3::from(*u_axis), Vector3::from(*v_axis));
                let n = u.cross(&v);
                let denom = d.dot(&n);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (c - o).dot(&n) / denom;
                if t <= HIT_EPS {
                    return None;
                }
                let rel = o + d * t - c;
                let (s, r) = (rel.dot(&u), rel.dot(&v));
                if let Some([hu, hv]) = half_extent {
                    if s.abs() > *hu || r.abs() > *hv {
                        return None;
                    }
                }
                Some(Hit {
                    distance: t,
                    color: texture.color(&(o + d * t), s, r),
                })
            }
            Primitive::AaBox { min, max, texture } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut ax0, mut ax1) = (0, 0);
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        ax0 = k;
                    }
                    if b < t1 {
                        t1 = b;
                        ax1 = k;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > HIT_EPS {
                    (t0, ax0)
                } else if t1 > HIT_EPS {
                    (t1, ax1)
                } else {
                    return None;
                };
                let p = o + d * t;
                // texture coordinates: the two in-face axes
                let (i, j) = match axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                Some(Hit {
                    distance: t,
                    color: texture.color(&p, p[i] + 3.0 * axis as f64, p[j]),
                })
            }
        }
    }

    /// Distance from `p` to the primitive's surface.
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane {
                origin,
                u_axis,
                v_axis,
                ..
            } => {
                let n = Vector3::from(*u_axis).cross(&Vector3::from(*v_axis));
                (p - Vector3::from(*origin)).dot(&n).abs()
            }
            Primitive::AaBox { min, max, .. } => {
                // distance to the nearest face plane, for points inside or on the box
                let mut best = f64::INFINITY;
                for k in 0..3 {
                    let outside = (min[k] - p[k]).max(p[k] - max[k]).max(0.0);
                    let inside = (p[k] - min[k]).abs().min((max[k] - p[k]).abs());
                    best = best.min(if outside > 0.0 { outside } else { inside });
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl Scene {
    pub fn empty(background: [f64; 3]) -> Scene {
        Scene {
            primitives: Vec::new(),
            background,
        }
    }

    /// The scene enlarged about the world origin by `c > 0`. Rays from
    /// `c o` then see the colours rays from `o` saw, at `c` times the
    /// distance. Exact for planes and for solid textures; surface textures
    /// on boxes shift phase.
    pub fn scaled(&self, c: f64) -> Scene {
        let primitives = self
            .primitives
            .iter()
            .map(|p| match p {
                Primitive::Plane {
                    origin,
                    u_axis,
                    v_axis,
                    half_extent,
                    texture,
                } => Primitive::Plane {
                    origin: origin.map(|v| v * c),
                    u_axis: *u_axis,
                    v_axis: *v_axis,
                    half_extent: half_extent.map(|e| e.map(|v| v * c)),
                    texture: texture.scaled(c),
                },
                Primitive::AaBox { min, max, texture } => Primitive::AaBox {
                    min: min.map(|v| v * c),
                    max: max.map(|v| v * c),
                    texture: texture.scaled(c),
                },
            })
            .collect();
        Scene {
            primitives,
            background: self.background,
        }
    }

    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(o, d))
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
    }

    /// A smooth-textured back wall with two framed planes in front of it.
    pub fn layered(seed: u64) -> Scene {
        Scene {
            primitives: vec![
                Primitive::wall_z(4.0, Texture::smooth_noise(seed, 12, 1.2)),
                Primitive::Plane {
                    origin: [-0.6, -0.3, 3.0],
                    u_axis: [1.0, 0.0, 0.0],
                    v_axis: [0.0, 1.0, 0.0],
                    half_extent: Some([0.7, 0.6]),
                    texture: Texture::smooth_noise(seed + 1, 10, 1.5),
                },
            ],
            background: [0.2, 0.2, 0.2],
        }
    }

    /// Closed room (inside of a box) with a solid noise texture, so colour is
    /// continuous across the creases. `max_freq` is in cycles per unit.
    pub fn room(seed: u64, half: [f64; 3], max_freq: f64) -> Scene {
        Scene {
            primitives: vec![Primitive::AaBox {
                min: [-half[0], -half[1], -half[2]],
                max: [half[0], half[1], half[2]],
                texture: Texture::smooth_solid_noise(seed, 14, max_freq),
            }],
            background: [0.0; 3],
        }
    }

    /// The 4 x 3 x 4 room used by the acceptance sequences. Paired with
    /// [`corner_trajectory`] every wall is seen within roughly 45 degrees of
    /// its normal, which keeps the texture free of grazing-angle aliasing.
    pub fn corner_room(seed: u64) -> Scene {
        Scene::room(seed, [2.0, 1.5, 2.0], 0.6)
    }
}

/// Analytic camera models. Pixel `(u, v)` is the centre of column `u`,
/// row `v`; the optical axis is `+z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleCamera {
    Pinhole { intrinsics: Intrinsics },
    /// Equidistant fisheye: image radius `r = f * theta`, valid for
    /// `theta <= max_theta`.
    Fisheye {
        f: f64,
        cx: f64,
        cy: f64,
        max_theta: f64,
    },
    /// Equiangular mirror: an annulus `r_min <= r <= r_max` where elevation
    /// above the plane perpendicular to the axis grows linearly in `r`, from
    /// `elev_min` to `elev_max`.
    Catadioptric {
        cx: f64,
        cy: f64,
        r_min: f64,
        r_max: f64,
        elev_min: f64,
        elev_max: f64,
    },
}

/// The three camera families, for selecting a [`OracleCamera::preset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Pinhole,
    Fisheye,
    Catadioptric,
}

impl CameraKind {
    pub const ALL: [CameraKind; 3] = [CameraKind::Pinhole, CameraKind::Fisheye, CameraKind::Catadioptric];

    pub fn name(self) -> &'static str {
        match self {
            CameraKind::Pinhole => "pinhole",
            CameraKind::Fisheye => "fisheye",
            CameraKind::Catadioptric => "catadioptric",
        }
    }
}

impl std::str::FromStr for CameraKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CameraKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SceneError::BadCamera(format!("unknown camera kind `{s}`")))
    }
}

impl OracleCamera {
    /// Default camera of each family for a `height x width` image, centred
    /// on the image. Pinhole: 67 degree horizontal field of view. Fisheye:
    /// image circle of 150 degrees inside the frame. Catadioptric: annulus
    /// from 1/8 to nearly 1/2 of the width, seeing 40 degrees below to 29
    /// degrees above the horizon.
    pub fn preset(kind: CameraKind, height: usize, width: usize) -> OracleCamera {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        match kind {
            CameraKind::Pinhole => OracleCamera::Pinhole {
                intrinsics: Intrinsics {
                    fx: 0.75 * w,
                    fy: 0.75 * w,
                    cx,
                    cy,
                },
            },
            CameraKind::Fisheye => OracleCamera::Fisheye {
                f: 0.375 * w.min(h),
                cx,
                cy,
                max_theta: 1.3,
            },
            CameraKind::Catadioptric => OracleCamera::Catadioptric {
                cx,
                cy,
                r_min: 0.125 * w.min(h),
                r_max: 0.484 * w.min(h),
                elev_min: -0.7,
                elev_max: 0.5,
            },
        }
    }

    pub fn kind(&self) -> CameraKind {
        match self {
            OracleCamera::Pinhole { .. } => CameraKind::Pinhole,
            OracleCamera::Fisheye { .. } => CameraKind::Fisheye,
            OracleCamera::Catadioptric { .. } => CameraKind::Catadioptric,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::BadCamera(m.into()));
        match *self {
            OracleCamera::Pinhole { intrinsics } => {
                Intrinsics::new(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)?;
            }
            OracleCamera::Fisheye { f, max_theta, .. } => {
                if !(f > 0.0) || !(max_theta > 0.0 && max_theta < PI) {
                    return bad("fisheye needs f > 0 and 0 < max_theta < pi");
                }
            }
            OracleCamera::Catadioptric {
                r_min,
                r_max,
                elev_min,
                elev_max,
                ..
            } => {
                if !(r_min >= 0.0 && r_max > r_min) || !(elev_max > elev_min) {
                    return bad("catadioptric needs 0 <= r_min < r_max and elev_min < elev_max");
                }
                if elev_min <= -PI / 2.0 || elev_max >= PI / 2.0 {
                    return bad("catadioptric elevations must lie in (-pi/2, pi/2)");
                }
            }
        }
        Ok(())
    }

    /// Unit ray through pixel `(u, v)` and whether the pixel is inside the
    /// camera's image region. Outside pixels still get the extrapolated ray.
    pub fn unproject(&self, u: f64, v: f64) -> (Vector3<f64>, bool) {
        match *self {
            OracleCamera::Pinhole { intrinsics } => (intrinsics.back_project(u, v).normalize(), true),
            OracleCamera::Fisheye { f, cx, cy, max_theta } => {
                let (dx, dy) = (u - cx, v - cy);
                let r = dx.hypot(dy);
                let theta = r / f;
                let phi = dy.atan2(dx);
                let st = theta.sin();
                (
                    Vector3::new(st * phi.cos(), st * phi.sin(), theta.cos()),
                    theta <= max_theta,
                )
            }
            OracleCamera::Catadioptric {
                cx,
                cy,
                r_min,
                r_max,
                elev_min,
                elev_max,
            } => {
                let (dx, dy) = (u - cx, v - cy);
                let r = dx.hypot(dy);
                let e = elev_min + (r - r_min) / (r_max - r_min) * (elev_max - elev_min);
                let e = e.clamp(-PI / 2.0 + 1e-6, PI / 2.0 - 1e-6);
                let phi = dy.atan2(dx);
                let ce = e.cos();
                (
                    Vector3::new(ce * phi.cos(), ce * phi.sin(), e.sin()),
                    r >= r_min && r <= r_max,
                )
            }
        }
    }

    /// Closed-form projection; `None` when the point is outside the model's
    /// field of view.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let n = p.norm();
        if !(n > 0.0) {
            return None;
        }
        match *self {
            OracleCamera::Pinhole { intrinsics } => {
                crate::camera::pinhole_project(&intrinsics, p).ok()
            }
            OracleCamera::Fisheye { f, cx, cy, max_theta } => {
                let theta = (p.z / n).clamp(-1.0, 1.0).acos();
                if theta > max_theta {
                    return None;
                }
                let phi = p.y.atan2(p.x);
                Some([cx + f * theta * phi.cos(), cy + f * theta * phi.sin()])
            }
            OracleCamera::Catadioptric {
                cx,
                cy,
                r_min,
                r_max,
                elev_min,
                elev_max,
            } => {
                let e = (p.z / n).clamp(-1.0, 1.0).asin();
                if e < elev_min || e > elev_max {
                    return None;
                }
                let r = r_min + (e - elev_min) / (elev_max - elev_min) * (r_max - r_min);
                let phi = p.y.atan2(p.x);
                Some([cx + r * phi.cos(), cy + r * phi.sin()])
            }
        }
    }

    /// Pinhole intrinsics closest to this camera near its centre; used as
    /// the fitting template when only a rough calibration is known.
    pub fn approximate_intrinsics(&self) -> Intrinsics {
        match *self {
            OracleCamera::Pinhole { intrinsics } => intrinsics,
            OracleCamera::Fisheye { f, cx, cy, .. } => Intrinsics { fx: f, fy: f, cx, cy },
            OracleCamera::Catadioptric { cx, cy, r_max, .. } => Intrinsics {
                fx: r_max,
                fy: r_max,
                cx,
                cy,
            },
        }
    }
}

/// Exact unit rays of `camera` at every pixel, plus the in-view mask.
pub fn oracle_ray_surface(
    camera: &OracleCamera,
    height: usize,
    width: usize,
) -> Result<(RaySurface, Vec<bool>), SceneError> {
    camera.validate()?;
    let (rays, mask): (Vec<_>, Vec<_>) = (0..height * width)
        .map(|i| camera.unproject((i % width) as f64, (i / width) as f64))
        .unzip();
    Ok((RaySurface::from_unnormalized(height, width, rays)?, mask))
}

/// Rendered frame: colour image, along-ray depth (0 where invalid) and the
/// validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: ImageGrid,
    pub depth: ImageGrid,
    pub valid: Vec<bool>,
}

/// Renders `scene` from the camera-to-world `pose`.
pub fn render(
    scene: &Scene,
    camera: &OracleCamera,
    pose: &Pose,
    height: usize,
    width: usize,
) -> Result<Rendered, SceneError> {
    let (surface, in_view) = oracle_ray_surface(camera, height, width)?;
    Ok(render_rays(scene, &surface, &in_view, pose))
}

/// Renders with an explicit ray field (`in_view == false` pixels are
/// background with invalid depth).
pub fn render_rays(scene: &Scene, surface: &RaySurface, in_view: &[bool], pose: &Pose) -> Rendered {
    let (h, w) = (surface.height(), surface.width());
    let per_pixel: Vec<([f64; 3], f64, bool)> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            if !in_view[i] {
                return (scene.background, 0.0, false);
            }
            let d = pose.rotation * surface.rays()[i];
            match scene.cast(&pose.translation, &d) {
                Some(hit) => (hit.color, hit.distance, true),
                None => (scene.background, 0.0, false),
            }
        })
        .collect();
    let mut img = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for (c, d, ok) in per_pixel {
        img.extend_from_slice(&c);
        depth.push(d);
        valid.push(ok);
    }
    Rendered {
        image: ImageGrid::new(h, w, 3, img).expect("shape"),
        depth: ImageGrid::new(h, w, 1, depth).expect("shape"),
        valid,
    }
}

/// A rendered sequence as it exists on disk. Rasters are stored in `f32`
/// precision so that a reload reproduces them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub camera: OracleCamera,
    pub frames: Vec<ImageGrid>,
    pub depths: Vec<ImageGrid>,
    /// Camera-to-world poses.
    pub poses: Vec<Pose>,
    pub surface: RaySurface,
    pub surface_mask: Vec<bool>,
}

impl Sequence {
    pub fn height(&self) -> usize {
        self.surface.height()
    }

    pub fn width(&self) -> usize {
        self.surface.width()
    }

    /// Depth validity of frame `i` (positive depth inside the view).
    pub fn depth_valid(&self, i: usize) -> Vec<bool> {
        self.depths[i]
            .data()
            .iter()
            .zip(&self.surface_mask)
            .map(|(&d, &m)| m && d > 0.0)
            .collect()
    }

    /// Ground-truth target-to-context motion `inv(T_c) * T_t`.
    pub fn relative_pose(&self, target: usize, context: usize) -> Pose {
        self.poses[context].inverse().compose(&self.poses[target])
    }
}

/// Camera-to-world poses inside [`Scene::corner_room`], looking into a
/// corner from near `(0.5, 0, 0.5)`. Frame 1 sits at the base pose; the
/// steps between consecutive frames alternate between two fixed motions, so
/// every adjacent pair has the same baseline (about 0.17 units times
/// `translation_scale`) and rotation (about 0.01 rad times `rotation_scale`)
/// however long the sequence.
pub fn corner_trajectory(frames: usize, translation_scale: f64, rotation_scale: f64) -> Vec<Pose> {
    let base = euler_to_pose(&PoseParams::new([0.5, 0.0, 0.5], [0.0, 0.785, 0.0]));
    let (s, r) = (translation_scale, rotation_scale);
    let first = euler_to_pose(&PoseParams::new([-0.15 * s, 0.05 * s, -0.05 * s], [0.0, 0.01 * r, 0.0]));
    let second = euler_to_pose(&PoseParams::new([0.1 * s, 0.12 * s, 0.08 * s], [0.01 * r, 0.0, -0.01 * r]));
    let steps = [first.inverse(), second];
    let mut out = vec![base.compose(&first)];
    for i in 1..frames {
        let next = out[i - 1].compose(&steps[(i - 1) % 2]);
        out.push(next);
    }
    out
}

fn quantize(g: &ImageGrid) -> ImageGrid {
    g.map(|v| v as f32 as f64)
}

fn normalize_f32_surface(grid: &ImageGrid) -> Result<RaySurface, SceneError> {
    let rays = quantize(grid)
        .data()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    Ok(RaySurface::from_unnormalized(grid.height(), grid.width(), rays)?)
}

/// Renders every pose and writes the dataset to `dir` (when given).
pub fn make_sequence(
    scene: &Scene,
    camera: &OracleCamera,
    trajectory: &[Pose],
    height: usize,
    width: usize,
    dir: Option<&Path>,
) -> Result<Sequence, SceneError> {
    if trajectory.len() < 3 {
        return Err(SceneError::TooFewPoses {
            need: 3,
            got: trajectory.len(),
        });
    }
    let (surface, surface_mask) = oracle_ray_surface(camera, height, width)?;
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    for pose in trajectory {
        let r = render_rays(scene, &surface, &surface_mask, pose);
        frames.push(quantize(&r.image));
        depths.push(quantize(&r.depth));
    }
    let seq = Sequence {
        camera: *camera,
        frames,
        depths,
        poses: trajectory.to_vec(),
        surface: normalize_f32_surface(&surface.to_grid())?,
        surface_mask,
    };
    if let Some(dir) = dir {
        write_sequence(&seq, &surface, dir)?;
    }
    Ok(seq)
}

fn write_sequence(seq: &Sequence, surface: &RaySurface, dir: &Path) -> Result<(), SceneError> {
    let mut entries = Vec::new();
    for (i, (img, depth)) in seq.frames.iter().zip(&seq.depths).enumerate() {
        let e = FrameEntry {
            image_png: format!("frames/{i:04}.png"),
            image_pfm: format!("frames/{i:04}.pfm"),
            depth: format!("depth/{i:04}.pfm"),
        };
        io::write_png(&dir.join(&e.image_png), img)?;
        io::write_pfm(&dir.join(&e.image_pfm), img)?;
        io::write_pfm(&dir.join(&e.depth), depth)?;
        entries.push(e);
    }
    io::write_poses(&dir.join("poses.txt"), &seq.poses)?;
    io::write_pfm(&dir.join("surface.pfm"), &surface.to_grid())?;
    let mask = ImageGrid::new(
        seq.height(),
        seq.width(),
        1,
        seq.surface_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
    .expect("shape");
    io::write_pfm(&dir.join("surface_mask.pfm"), &mask)?;
    Manifest {
        version: MANIFEST_VERSION,
        height: seq.height(),
        width: seq.width(),
        camera: serde_json::to_value(seq.camera).expect("camera serializes"),
        frames: entries,
        poses: "poses.txt".into(),
        surface: "surface.pfm".into(),
        surface_mask: "surface_mask.pfm".into(),
    }
    .write(dir)?;
    Ok(())
}

/// Loads a dataset written by [`make_sequence`].
pub fn load_sequence(dir: &Path) -> Result<Sequence, SceneError> {
    let m = Manifest::read(dir)?;
    let manifest_path = dir.join(io::MANIFEST_FILE);
    let camera: OracleCamera = serde_json::from_value(m.camera.clone())
        .map_err(|e| IoError::parse(&manifest_path, "camera", e.to_string()))?;
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    for e in &m.frames {
        let img = io::read_pfm(&dir.join(&e.image_pfm))?;
        let depth = io::read_pfm(&dir.join(&e.depth))?;
        for (g, ch, name) in [(&img, 3, &e.image_pfm), (&depth, 1, &e.depth)] {
            if g.height() != m.height || g.width() != m.width || g.channels() != ch {
                return Err(SceneError::Inconsistent(format!("{name}: wrong dimensions")));
            }
        }
        frames.push(img);
        depths.push(depth);
    }
    let poses = io::read_poses(&dir.join(&m.poses))?;
    if poses.len() != frames.len() {
        return Err(SceneError::Inconsistent(format!(
            "{} poses for {} frames",
            poses.len(),
            frames.len()
        )));
    }
    let surface_grid = io::read_pfm(&dir.join(&m.surface))?;
    let surface = normalize_f32_surface(&surface_grid)?;
    let mask = io::read_pfm(&dir.join(&m.surface_mask))?;
    Ok(Sequence {
        camera,
        frames,
        depths,
        poses,
        surface,
        surface_mask: mask.data().iter().map(|&v| v > 0.5).collect(),
    })
}
