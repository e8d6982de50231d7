//! View synthesis: unproject target pixels with depth, move them into the
//! context frame, soft-project onto the context surface and sample.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::camera::{ray_unproject, ray_unproject_backward, CameraError, RaySurface};
use crate::geometry::{transform_points, transform_points_backward, Pose, PoseParams};
use crate::grid::{bilinear_sample, bilinear_sample_backward, ImageGrid};
use crate::projection::{
    project_cloud_backward, project_cloud_cached, ProjectOptions, ProjectionCache,
    ProjectionError, WarpGrid,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// A target frame, one of its context frames and the target-to-context pose.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub target: ImageGrid,
    pub context: ImageGrid,
    pub pose_params: PoseParams,
}

impl FramePair {
    pub fn new(
        target: ImageGrid,
        context: ImageGrid,
        pose_params: PoseParams,
    ) -> Result<Self, SynthesisError> {
        if !target.same_shape(&context) {
            return Err(SynthesisError::Shape("target and context differ".into()));
        }
        Ok(Self {
            target,
            context,
            pose_params,
        })
    }
}

/// Forward intermediates of [`warp_coords_cached`].
#[derive(Clone, Debug)]
pub struct WarpCache {
    points_t: Vec<Vector3<f64>>,
    projection: ProjectionCache,
}

/// Gradients produced by [`warp_coords_backward`].
#[derive(Clone, Debug)]
pub struct WarpGradients {
    pub depth: Vec<f64>,
    pub rays_t: Vec<Vector3<f64>>,
    pub rays_c: Vec<Vector3<f64>>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Continuous context coordinates of every target pixel.
pub fn warp_coords(
    depth: &ImageGrid,
    surface_t: &RaySurface,
    pose: &Pose,
    surface_c: &RaySurface,
    opts: &ProjectOptions,
) -> Result<WarpGrid, SynthesisError> {
    warp_coords_cached(depth, surface_t, pose, surface_c, opts).map(|(w, _)| w)
}

pub fn warp_coords_cached(
    depth: &ImageGrid,
    surface_t: &RaySurface,
    pose: &Pose,
    surface_c: &RaySurface,
    opts: &ProjectOptions,
) -> Result<(WarpGrid, WarpCache), SynthesisError> {
    if surface_t.height() != surface_c.height() || surface_t.width() != surface_c.width() {
        return Err(SynthesisError::Shape("target and context surfaces differ".into()));
    }
    let points_t = ray_unproject(surface_t, depth)?;
    let points_c = transform_points(pose, &points_t);
    let (warp, projection) = project_cloud_cached(surface_c, &points_c, opts)?;
    Ok((
        warp,
        WarpCache {
            points_t,
            projection,
        },
    ))
}

/// Adjoint of [`warp_coords`] given `dL/d(u, v)` per target pixel.
pub fn warp_coords_backward(
    depth: &ImageGrid,
    surface_t: &RaySurface,
    pose: &Pose,
    surface_c: &RaySurface,
    opts: &ProjectOptions,
    cache: &WarpCache,
    grad_coords: &[[f64; 2]],
) -> WarpGradients {
    let (g_points_c, rays_c) =
        project_cloud_backward(surface_c, opts, &cache.projection, grad_coords);
    let (rotation, translation, g_points_t) =
        transform_points_backward(pose, &cache.points_t, &g_points_c);
    let (depth, rays_t) = ray_unproject_backward(surface_t, depth, &g_points_t);
    WarpGradients {
        depth,
        rays_t,
        rays_c,
        rotation,
        translation,
    }
}

/// Samples `context` at the warp coordinates. The mask is warp validity and
/// sample validity combined; masked-out pixels are zero.
pub fn synthesize(
    context: &ImageGrid,
    warp: &WarpGrid,
) -> Result<(ImageGrid, Vec<bool>), SynthesisError> {
    if context.height() != warp.height || context.width() != warp.width {
        return Err(SynthesisError::Shape("context and warp differ".into()));
    }
    let s = bilinear_sample(context, &warp.coords);
    let mask: Vec<bool> = s.valid.iter().zip(&warp.valid).map(|(a, b)| *a && *b).collect();
    let ch = context.channels();
    let mut values = s.values;
    for (px, &ok) in values.chunks_exact_mut(ch).zip(&mask) {
        if !ok {
            px.fill(0.0);
        }
    }
    let image = ImageGrid::new(context.height(), context.width(), ch, values)
        .map_err(|e| SynthesisError::Shape(e.to_string()))?;
    Ok((image, mask))
}

/// Adjoint of [`synthesize`]: `(dL/dcontext, dL/dcoords)`.
pub fn synthesize_backward(
    context: &ImageGrid,
    warp: &WarpGrid,
    mask: &[bool],
    grad_image: &ImageGrid,
) -> (ImageGrid, Vec<[f64; 2]>) {
    let ch = context.channels();
    let mut g = grad_image.data().to_vec();
    for (px, &ok) in g.chunks_exact_mut(ch).zip(mask) {
        if !ok {
            px.fill(0.0);
        }
    }
    bilinear_sample_backward(context, &warp.coords, &g)
}

/// True where every bilinear tap around each coordinate is valid in the
/// context-side mask `valid` (row-major, `height x width`).
pub fn sample_validity(valid: &[bool], height: usize, width: usize, coords: &[[f64; 2]]) -> Vec<bool> {
    coords
        .iter()
        .map(|&[u, v]| {
            if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
                return false;
            }
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = (u.ceil() as usize, v.ceil() as usize);
            [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(x, y)| valid[y * width + x])
        })
        .collect()
}
