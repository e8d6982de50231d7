//! Direct fitting of per-frame inverse depth, relative poses and a residual
//! ray surface by Adam on the self-supervised photometric objective.
//!
//! Frames `1..N-1` are targets; each is paired with its previous and next
//! frame as context. Every pair owns six pose parameters for the
//! target-to-context motion. The ray surface is `normalize(Q0 + lambda_r *
//! Qr)` with a fixed template `Q0`; the residual `Qr` is either shared by
//! all frames or held per target frame.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    compose_surface, compose_surface_backward, pinhole_template, CameraError, DepthRange,
    Intrinsics, RaySurface, ResidualSurface,
};
use crate::geometry::{euler_to_pose, euler_to_pose_backward, Pose, PoseParams};
use crate::grid::{upsample_bilinear, upsample_bilinear_backward, GridError, ImageGrid};
use crate::io::{self, IoError};
use crate::losses::{
    auto_mask, erode_mask, min_over_context, photometric_backward, photometric_loss, smoothness_backward,
    smoothness_loss, LossError, LossWeights,
};
use crate::projection::{anneal_tau, PatchSpec, ProjectOptions, ProjectionError};
use crate::synthesis::{synthesize, synthesize_backward, warp_coords_backward, warp_coords_cached, SynthesisError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("auto-masking removed every pixel: the sequence is static")]
    StaticSequence,
    #[error("valid-pixel guard still failing at the minimum learning rate (step {step})")]
    Divergence { step: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<ProjectionError> for FitError {
    fn from(e: ProjectionError) -> Self {
        FitError::Synthesis(e.into())
    }
}

/// Optimizer settings. Serialized as flat `key = value` TOML; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// Per-group multipliers on `lr`.
    pub depth_lr_scale: f64,
    pub pose_lr_scale: f64,
    pub residual_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Epochs over which `lambda_r` ramps from 0 to 1.
    pub lambda_r_ramp: usize,
    pub alpha: f64,
    pub lambda_d: f64,
    pub per_frame_surface: bool,
    pub seed: u64,
    pub d_min: f64,
    pub d_max: f64,
    pub half_res_search: bool,
    /// Pixels whose softmax mass on the search-window border exceeds this are
    /// invalid; 1 disables the check.
    pub max_border_mass: f64,
    pub freeze_pose: bool,
    pub learn_residual: bool,
    /// Drop pixels whose warped loss is not below the unwarped loss.
    pub auto_mask: bool,
    /// Auto-masking starts at this epoch. Per-pixel parameters dropped by the
    /// mask get no photometric gradient, so masking from the first step can
    /// freeze regions at their initial depth.
    pub auto_mask_start_epoch: usize,
    /// Residual control-lattice spacing in pixels, upsampled bilinearly to
    /// full resolution; 0 keeps one residual per pixel.
    pub residual_grid: usize,
    /// Half-width of the uniform random pose initialization.
    pub pose_init_noise: f64,
    /// Template intrinsics; a value of 0 selects `W/2` (fx, cx) or `H/2`
    /// (fy, cy).
    pub template_fx: f64,
    pub template_fy: f64,
    pub template_cx: f64,
    pub template_cy: f64,
    /// Pairs with fewer valid pixels than this fraction reject the step.
    pub min_valid_fraction: f64,
    /// Step halvings tried before giving up.
    pub max_retries: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 25,
            lr: 2e-4,
            depth_lr_scale: 1.0,
            pose_lr_scale: 1.0,
            residual_lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patch_h: 41,
            patch_w: 41,
            tau_start: 1.0,
            tau_end: 0.01,
            lambda_r_ramp: 10,
            alpha: 0.85,
            lambda_d: 0.001,
            per_frame_surface: false,
            seed: 0,
            d_min: 0.1,
            d_max: 100.0,
            half_res_search: false,
            max_border_mass: 1.0,
            freeze_pose: false,
            learn_residual: true,
            auto_mask: true,
            auto_mask_start_epoch: 0,
            residual_grid: 0,
            pose_init_noise: 1e-3,
            template_fx: 0.0,
            template_fy: 0.0,
            template_cx: 0.0,
            template_cy: 0.0,
            min_valid_fraction: 0.2,
            max_retries: 8,
        }
    }
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<FitConfig, FitError> {
        let cfg: FitConfig = toml::from_str(text).map_err(|e| FitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.to_string()));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if [self.depth_lr_scale, self.pose_lr_scale, self.residual_lr_scale]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("learning-rate scales must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return bad("need tau_start >= tau_end > 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.lambda_d >= 0.0) {
            return bad("alpha must lie in [0, 1] and lambda_d must be non-negative");
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return bad("need 0 < d_min < d_max");
        }
        if !(self.max_border_mass > 0.0 && self.max_border_mass <= 1.0) {
            return bad("max_border_mass must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.min_valid_fraction) {
            return bad("min_valid_fraction must lie in [0, 1)");
        }
        PatchSpec::new(self.patch_h, self.patch_w).map_err(|e| FitError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda_d: self.lambda_d,
        }
    }

    pub fn depth_range(&self) -> DepthRange {
        DepthRange::new(self.d_min, self.d_max)
    }

    pub fn auto_mask_active(&self, step: usize) -> bool {
        self.auto_mask && step >= self.auto_mask_start_epoch * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        anneal_tau(step, self.total_steps().saturating_sub(1), self.tau_start, self.tau_end)
    }

    pub fn template_intrinsics(&self, height: usize, width: usize) -> Intrinsics {
        let d = Intrinsics::default_for(height, width);
        let pick = |v: f64, fallback: f64| if v > 0.0 { v } else { fallback };
        Intrinsics {
            fx: pick(self.template_fx, d.fx),
            fy: pick(self.template_fy, d.fy),
            cx: pick(self.template_cx, d.cx),
            cy: pick(self.template_cy, d.cy),
        }
    }

    fn project_options(&self, tau: f64) -> ProjectOptions {
        ProjectOptions {
            patch: PatchSpec::new(self.patch_h, self.patch_w).expect("validated"),
            tau,
            half_res: self.half_res_search,
            max_border_mass: self.max_border_mass,
        }
    }

    fn residual_dims(&self, height: usize, width: usize) -> (usize, usize) {
        if self.residual_grid == 0 {
            return (height, width);
        }
        let cells = |n: usize| ((n - 1).div_ceil(self.residual_grid) + 1).clamp(2, n);
        (cells(height), cells(width))
    }
}

/// `min(1, epoch / ramp)`; a ramp of 0 means no ramp.
pub fn lambda_r_schedule(epoch: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        1.0
    } else {
        (epoch as f64 / ramp as f64).min(1.0)
    }
}

/// All optimized quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub height: usize,
    pub width: usize,
    /// Unconstrained inverse-depth parameters, one grid per target frame.
    pub inv_depth_params: Vec<ImageGrid>,
    /// Residual control grids (3 channels); one shared or one per target.
    pub residual_params: Vec<ImageGrid>,
    /// Target-to-context pose parameters, two per target (previous, next).
    pub pose_params: Vec<PoseParams>,
    /// Unit template rays as a 3-channel grid.
    pub template: ImageGrid,
    pub depth_range: DepthRange,
    pub lambda_r: f64,
    pub tau: f64,
    pub step: usize,
}

impl FitState {
    pub fn num_targets(&self) -> usize {
        self.inv_depth_params.len()
    }

    /// Frame index of target `k`.
    pub fn target_frame(&self, k: usize) -> usize {
        k + 1
    }

    /// Pair index of target `k` with its previous (`side = 0`) or next
    /// (`side = 1`) frame.
    pub fn pair_index(k: usize, side: usize) -> usize {
        2 * k + side
    }

    pub fn depth(&self, k: usize) -> ImageGrid {
        let r = self.depth_range;
        self.inv_depth_params[k].map(|x| r.decode(x))
    }

    pub fn depths(&self) -> Vec<ImageGrid> {
        (0..self.num_targets()).map(|k| self.depth(k)).collect()
    }

    pub fn template_surface(&self) -> Result<RaySurface, FitError> {
        Ok(RaySurface::from_grid(&self.template)?)
    }

    fn residual_index(&self, k: usize) -> usize {
        if self.residual_params.len() == 1 {
            0
        } else {
            k
        }
    }

    /// Full-resolution residual of target `k`.
    pub fn residual(&self, k: usize) -> Result<ResidualSurface, FitError> {
        let g = &self.residual_params[self.residual_index(k)];
        let full = if g.height() == self.height && g.width() == self.width {
            g.clone()
        } else {
            upsample_bilinear(g, self.height, self.width)?
        };
        Ok(ResidualSurface::from_grid(&full, self.lambda_r)?)
    }

    /// Composed ray surface used by target `k`.
    pub fn surface(&self, k: usize) -> Result<RaySurface, FitError> {
        Ok(compose_surface(&self.template_surface()?, &self.residual(k)?)?)
    }

    pub fn pose(&self, pair: usize) -> Pose {
        euler_to_pose(&self.pose_params[pair])
    }

    /// Camera-to-world trajectory of every frame, chained from the pair
    /// poses with frame 0 at the origin.
    pub fn trajectory(&self) -> Vec<Pose> {
        let n = self.num_targets() + 2;
        let mut out = Vec::with_capacity(n);
        out.push(Pose::identity());
        // X(t -> c) = inv(T_c) T_t
        out.push(self.pose(Self::pair_index(0, 0)));
        for k in 0..self.num_targets() {
            let t = self.target_frame(k);
            let next = out[t].compose(&self.pose(Self::pair_index(k, 1)).inverse());
            out.push(next);
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.inv_depth_params.iter().map(|g| g.data().len()).sum::<usize>()
            + self.residual_params.iter().map(|g| g.data().len()).sum::<usize>()
            + 6 * self.pose_params.len()
    }

    /// Every parameter in one vector: depths, residuals, poses.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        for g in self.inv_depth_params.iter().chain(&self.residual_params) {
            v.extend_from_slice(g.data());
        }
        for p in &self.pose_params {
            v.extend_from_slice(&p.to_array());
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for g in self.inv_depth_params.iter_mut().chain(self.residual_params.iter_mut()) {
            let n = g.data().len();
            g.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        for p in &mut self.pose_params {
            let mut a = [0.0; 6];
            a.copy_from_slice(&v[off..off + 6]);
            *p = PoseParams::from_array(a);
            off += 6;
        }
    }

    /// Flat-vector ranges of the depth, residual and pose groups.
    pub fn group_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let d: usize = self.inv_depth_params.iter().map(|g| g.data().len()).sum();
        let r: usize = self.residual_params.iter().map(|g| g.data().len()).sum();
        [0..d, d..d + r, d + r..d + r + 6 * self.pose_params.len()]
    }
}

/// Optional starting values; anything left `None` uses the neutral default.
#[derive(Clone, Debug, Default)]
pub struct FitInit {
    pub template: Option<RaySurface>,
    pub pose_params: Option<Vec<PoseParams>>,
    pub depths: Option<Vec<ImageGrid>>,
}

fn check_frames(frames: &[ImageGrid]) -> Result<(), FitError> {
    if frames.len() < 3 {
        return Err(FitError::TooFewFrames(frames.len()));
    }
    if frames.iter().any(|f| !f.same_shape(&frames[0])) {
        return Err(FitError::Shape("frames differ in size".into()));
    }
    Ok(())
}

pub fn initial_state(frames: &[ImageGrid], cfg: &FitConfig, init: &FitInit) -> Result<FitState, FitError> {
    check_frames(frames)?;
    cfg.validate()?;
    let (h, w) = (frames[0].height(), frames[0].width());
    let targets = frames.len() - 2;
    let range = cfg.depth_range();
    let template = match &init.template {
        Some(t) => {
            if t.height() != h || t.width() != w {
                return Err(FitError::Shape("template size".into()));
            }
            t.clone()
        }
        None => pinhole_template(h, w, &cfg.template_intrinsics(h, w), 1.0),
    };
    let inv_depth_params = match &init.depths {
        Some(ds) => {
            if ds.len() != targets {
                return Err(FitError::Shape(format!("{} initial depths for {targets} targets", ds.len())));
            }
            ds.iter().map(|d| d.map(|v| range.encode(v))).collect()
        }
        None => vec![ImageGrid::zeros(h, w, 1); targets],
    };
    let pose_params = match &init.pose_params {
        Some(p) => {
            if p.len() != 2 * targets {
                return Err(FitError::Shape(format!("{} initial poses for {} pairs", p.len(), 2 * targets)));
            }
            p.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let a = cfg.pose_init_noise;
            (0..2 * targets)
                .map(|_| {
                    let mut v = [0.0; 6];
                    for x in &mut v {
                        *x = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
                    }
                    PoseParams::from_array(v)
                })
                .collect()
        }
    };
    let (rh, rw) = cfg.residual_dims(h, w);
    let surfaces = if cfg.per_frame_surface { targets } else { 1 };
    Ok(FitState {
        height: h,
        width: w,
        inv_depth_params,
        residual_params: vec![ImageGrid::zeros(rh, rw, 3); surfaces],
        pose_params,
        template: template.to_grid(),
        depth_range: range,
        lambda_r: 0.0,
        tau: cfg.tau_start,
        step: 0,
    })
}

/// Loss value, flat gradient and per-pair diagnostics of one evaluation.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f64,
    /// Mean over targets of the masked photometric term alone.
    pub photometric: f64,
    pub grad: Vec<f64>,
    /// Fraction of pixels with a valid warp, per pair.
    pub pair_valid: Vec<f64>,
    /// Fraction of pixels kept after auto-masking, per target.
    pub kept: Vec<f64>,
}

struct TargetEval {
    loss: f64,
    photometric: f64,
    grad_params: ImageGrid,
    grad_rays: Vec<Vector3<f64>>,
    grad_pose: [[f64; 6]; 2],
    pair_valid: [f64; 2],
    kept: f64,
}

fn eval_target(
    frames: &[ImageGrid],
    state: &FitState,
    cfg: &FitConfig,
    opts: &ProjectOptions,
    k: usize,
    surface: &RaySurface,
) -> Result<TargetEval, FitError> {
    let t = state.target_frame(k);
    let target = &frames[t];
    let weights = cfg.weights();
    let depth = state.depth(k);
    let n = state.height * state.width;

    let mut warped = Vec::with_capacity(2);
    let mut photos = Vec::with_capacity(2);
    let mut masks = Vec::with_capacity(2);
    let mut unwarped = Vec::with_capacity(2);
    for (side, c) in [t - 1, t + 1].into_iter().enumerate() {
        let pose = state.pose(FitState::pair_index(k, side));
        let (warp, cache) = warp_coords_cached(&depth, surface, &pose, surface, opts)?;
        let (synth, raw) = synthesize(&frames[c], &warp)?;
        // SSIM windows must not touch the zero fill of invalid pixels
        let mask = erode_mask(&raw, state.height, state.width);
        photos.push(photometric_loss(target, &synth, &mask, &weights)?);
        unwarped.push(photometric_loss(target, &frames[c], &vec![true; n], &weights)?);
        masks.push(mask);
        warped.push((pose, warp, cache, synth, raw));
    }
    let best = min_over_context(&photos, &masks)?;
    let identity = min_over_context(&unwarped, &[vec![true; n], vec![true; n]])?;
    let keep = if cfg.auto_mask_active(state.step) {
        auto_mask(&best.loss, &identity.loss)?
    } else {
        vec![true; n]
    };
    let mask: Vec<bool> = keep.iter().zip(&best.valid).map(|(a, b)| *a && *b).collect();
    let count = mask.iter().filter(|&&m| m).count();
    let pair_valid = [0, 1].map(|s| masks[s].iter().filter(|&&m| m).count() as f64 / n as f64);
    if count == 0 {
        return Err(FitError::StaticSequence);
    }
    let photometric = crate::losses::masked_mean(&best.loss, &mask)?;
    let smooth = if weights.lambda_d > 0.0 {
        smoothness_loss(&depth, target)?
    } else {
        0.0
    };

    // backward
    let mut grad_depth = if weights.lambda_d > 0.0 {
        smoothness_backward(&depth, target)?.scaled(weights.lambda_d)
    } else {
        ImageGrid::zeros(state.height, state.width, 1)
    };
    let mut grad_rays = vec![Vector3::zeros(); n];
    let mut grad_pose = [[0.0; 6]; 2];
    let inv = 1.0 / count as f64;
    for side in 0..2 {
        let gmap = ImageGrid::from_fn(state.height, state.width, 1, |x, y, _| {
            let p = y * state.width + x;
            if mask[p] && best.argmin[p] == side {
                inv
            } else {
                0.0
            }
        });
        let (pose, warp, cache, synth, raw) = &warped[side];
        let g_synth = photometric_backward(target, synth, &masks[side], &weights, &gmap)?;
        let (_, g_coords) = synthesize_backward(&frames[[t - 1, t + 1][side]], warp, raw, &g_synth);
        let g = warp_coords_backward(&depth, surface, pose, surface, opts, cache, &g_coords);
        for (gd, v) in grad_depth.data_mut().iter_mut().zip(&g.depth) {
            *gd += v;
        }
        for ((acc, a), b) in grad_rays.iter_mut().zip(&g.rays_t).zip(&g.rays_c) {
            *acc += a + b;
        }
        let pp = state.pose_params[FitState::pair_index(k, side)];
        grad_pose[side] = euler_to_pose_backward(&pp, &g.rotation, &g.translation);
    }
    let range = state.depth_range;
    let params = &state.inv_depth_params[k];
    let grad_params = ImageGrid::from_fn(state.height, state.width, 1, |x, y, _| {
        grad_depth.get(x, y, 0) * range.decode_grad(params.get(x, y, 0))
    });
    Ok(TargetEval {
        loss: photometric + weights.lambda_d * smooth,
        photometric,
        grad_params,
        grad_rays,
        grad_pose,
        pair_valid,
        kept: count as f64 / n as f64,
    })
}

/// Total loss (mean over targets) and its gradient w.r.t. every parameter
/// at the given temperature. `state.lambda_r` weights the residual.
pub fn objective(frames: &[ImageGrid], state: &FitState, cfg: &FitConfig, tau: f64) -> Result<Objective, FitError> {
    check_frames(frames)?;
    if frames.len() != state.num_targets() + 2 {
        return Err(FitError::Shape("frame count does not match the state".into()));
    }
    let opts = cfg.project_options(tau);
    let template = state.template_surface()?;
    let shared = state.residual_params.len() == 1;
    let targets = state.num_targets();
    let scale = 1.0 / targets as f64;

    let mut grad = vec![0.0; state.flat_len()];
    let [dr, rr, pr] = state.group_ranges();
    let (mut loss, mut photometric) = (0.0, 0.0);
    let mut pair_valid = Vec::with_capacity(2 * targets);
    let mut kept = Vec::with_capacity(targets);
    let mut shared_rays = vec![Vector3::zeros(); state.height * state.width];
    let mut static_targets = 0;
    let n = state.height * state.width;
    for k in 0..targets {
        let residual = state.residual(k)?;
        let surface = compose_surface(&template, &residual)?;
        let e = match eval_target(frames, state, cfg, &opts, k, &surface) {
            Err(FitError::StaticSequence) => {
                static_targets += 1;
                kept.push(0.0);
                continue;
            }
            other => other?,
        };
        loss += e.loss * scale;
        photometric += e.photometric * scale;
        pair_valid.extend_from_slice(&e.pair_valid);
        kept.push(e.kept);
        let off = dr.start + k * n;
        for (g, v) in grad[off..off + n].iter_mut().zip(e.grad_params.data()) {
            *g = v * scale;
        }
        for side in 0..2 {
            let off = pr.start + 6 * FitState::pair_index(k, side);
            for (g, v) in grad[off..off + 6].iter_mut().zip(&e.grad_pose[side]) {
                *g = v * scale;
            }
        }
        if shared {
            for (acc, g) in shared_rays.iter_mut().zip(&e.grad_rays) {
                *acc += g * scale;
            }
        } else {
            let scaled: Vec<Vector3<f64>> = e.grad_rays.iter().map(|g| g * scale).collect();
            let g = residual_grad(state, &template, &residual, k, &scaled)?;
            let len = g.len();
            let off = rr.start + k * len;
            grad[off..off + len].copy_from_slice(&g);
        }
    }
    if static_targets == targets {
        return Err(FitError::StaticSequence);
    }
    if shared {
        let residual = state.residual(0)?;
        let g = residual_grad(state, &template, &residual, 0, &shared_rays)?;
        grad[rr.start..rr.start + g.len()].copy_from_slice(&g);
    }
    Ok(Objective {
        loss,
        photometric,
        grad,
        pair_valid,
        kept,
    })
}

/// Pulls ray gradients back through composition and upsampling onto the
/// residual control grid of target `k`.
fn residual_grad(
    state: &FitState,
    template: &RaySurface,
    residual: &ResidualSurface,
    k: usize,
    grad_rays: &[Vector3<f64>],
) -> Result<Vec<f64>, FitError> {
    let (g_res, _) = compose_surface_backward(template, residual, grad_rays);
    let full = ImageGrid::new(
        state.height,
        state.width,
        3,
        g_res.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
    )?;
    let ctrl = &state.residual_params[state.residual_index(k)];
    let g = if ctrl.height() == state.height && ctrl.width() == state.width {
        full
    } else {
        upsample_bilinear_backward(ctrl.height(), ctrl.width(), &full)
    };
    Ok(g.into_data())
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// In-place update with a per-entry learning rate.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let a = lr(i);
            if a == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= a * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Global step indices whose update was rejected by the valid-pixel
    /// guard (each rejection halves the step and retries).
    pub rejected_steps: Vec<usize>,
    /// Mean valid-warp fraction over pairs, per epoch.
    pub valid_fraction: Vec<f64>,
    /// Mean auto-mask kept fraction over targets, per epoch.
    pub kept_fraction: Vec<f64>,
    pub final_loss: f64,
    pub final_photometric: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: FitState,
    /// Mean loss of each epoch's steps.
    pub loss_curve: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

pub fn fit_scene(frames: &[ImageGrid], cfg: &FitConfig) -> Result<FitResult, FitError> {
    fit_scene_with(frames, cfg, &FitInit::default())
}

fn guard_ok(obj: &Objective, cfg: &FitConfig) -> bool {
    obj.loss.is_finite() && obj.pair_valid.iter().all(|&f| f >= cfg.min_valid_fraction)
}

pub fn fit_scene_with(frames: &[ImageGrid], cfg: &FitConfig, init: &FitInit) -> Result<FitResult, FitError> {
    let mut state = initial_state(frames, cfg, init)?;
    let [dr, rr, pr] = state.group_ranges();
    let lr_of = |i: usize| {
        let s = if dr.contains(&i) {
            cfg.depth_lr_scale
        } else if rr.contains(&i) {
            if cfg.learn_residual {
                cfg.residual_lr_scale
            } else {
                0.0
            }
        } else if pr.contains(&i) {
            if cfg.freeze_pose {
                0.0
            } else {
                cfg.pose_lr_scale
            }
        } else {
            0.0
        };
        cfg.lr * s
    };
    let mut adam = Adam::new(state.flat_len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut diag = FitDiagnostics::default();
    let mut curve = Vec::with_capacity(cfg.epochs);

    state.lambda_r = if cfg.learn_residual { lambda_r_schedule(0, cfg.lambda_r_ramp) } else { 0.0 };
    state.tau = cfg.tau_at(0);
    if cfg.auto_mask && !cfg.auto_mask_active(0) {
        // Static detection must not wait for the warm-up to end.
        let probe = FitConfig {
            auto_mask_start_epoch: 0,
            ..cfg.clone()
        };
        objective(frames, &state, &probe, state.tau)?;
    }
    let mut current = objective(frames, &state, cfg, state.tau)?;
    if !current.loss.is_finite() {
        return Err(FitError::NonFinite { step: 0 });
    }
    if !guard_ok(&current, cfg) {
        return Err(FitError::Divergence { step: 0 });
    }

    for epoch in 0..cfg.epochs {
        let lambda_r = if cfg.learn_residual { lambda_r_schedule(epoch, cfg.lambda_r_ramp) } else { 0.0 };
        if lambda_r != state.lambda_r {
            state.lambda_r = lambda_r;
            current = objective(frames, &state, cfg, state.tau)?;
        }
        let mut losses = Vec::with_capacity(cfg.steps_per_epoch);
        let mut valid = Vec::new();
        let mut kept = Vec::new();
        for _ in 0..cfg.steps_per_epoch {
            let step = state.step;
            losses.push(current.loss);
            valid.push(current.pair_valid.iter().sum::<f64>() / current.pair_valid.len().max(1) as f64);
            kept.push(current.kept.iter().sum::<f64>() / current.kept.len() as f64);

            let params = state.to_flat();
            let next_tau = cfg.tau_at(step + 1);
            let mut factor = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_retries {
                let mut trial_adam = adam.clone();
                let mut p = params.clone();
                trial_adam.step(&mut p, &current.grad, |i| lr_of(i) * factor);
                let mut trial = state.clone();
                trial.set_flat(&p);
                trial.tau = next_tau;
                trial.step = step + 1;
                match objective(frames, &trial, cfg, next_tau) {
                    Ok(obj) if guard_ok(&obj, cfg) => {
                        accepted = Some((trial, trial_adam, obj));
                        break;
                    }
                    Ok(_) | Err(FitError::StaticSequence) => {
                        diag.rejected_steps.push(step);
                        factor *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
            let Some((trial, trial_adam, obj)) = accepted else {
                return Err(FitError::Divergence { step });
            };
            state = trial;
            adam = trial_adam;
            current = obj;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        curve.push(mean(&losses));
        diag.valid_fraction.push(mean(&valid));
        diag.kept_fraction.push(mean(&kept));
    }
    diag.final_loss = current.loss;
    diag.final_photometric = current.photometric;
    Ok(FitResult {
        state,
        loss_curve: curve,
        diagnostics: diag,
    })
}

const STATE_FILE: &str = "state.json";

/// Writes `state.json` (exact parameters), decoded depths and composed
/// surfaces as PFM, the chained trajectory and the pair poses.
pub fn export_state(state: &FitState, dir: &Path) -> Result<(), FitError> {
    let json = serde_json::to_string(state).map_err(|e| FitError::Config(e.to_string()))?;
    io::write_bytes(&dir.join(STATE_FILE), json.as_bytes())?;
    for k in 0..state.num_targets() {
        let t = state.target_frame(k);
        io::write_pfm(&dir.join(format!("depth_{t:04}.pfm")), &state.depth(k))?;
        if k == 0 || state.residual_params.len() > 1 {
            let name = if state.residual_params.len() > 1 {
                format!("surface_{t:04}.pfm")
            } else {
                "surface.pfm".to_string()
            };
            io::write_pfm(&dir.join(name), &state.surface(k)?.to_grid())?;
        }
    }
    io::write_poses(&dir.join("poses.txt"), &state.trajectory())?;
    let pairs: Vec<Pose> = (0..state.pose_params.len()).map(|i| state.pose(i)).collect();
    io::write_poses(&dir.join("pair_poses.txt"), &pairs)?;
    Ok(())
}

pub fn import_state(dir: &Path) -> Result<FitState, FitError> {
    let path = dir.join(STATE_FILE);
    let text = io::read_text(&path)?;
    let state: FitState = serde_json::from_str(&text).map_err(|e| {
        FitError::Io(IoError::parse(&path, format!("line {} column {}", e.line(), e.column()), e.to_string()))
    })?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_r_examples() {
        assert_eq!(lambda_r_schedule(0, 10), 0.0);
        assert_eq!(lambda_r_schedule(10, 10), 1.0);
        assert_eq!(lambda_r_schedule(25, 10), 1.0);
        assert_eq!(lambda_r_schedule(5, 10), 0.5);
    }

    #[test]
    fn config_defaults_and_parsing() {
        let d = FitConfig::default();
        assert_eq!((d.lr, d.epochs, d.lambda_r_ramp, d.patch_h, d.patch_w), (2e-4, 20, 10, 41, 41));
        assert_eq!((d.beta1, d.beta2), (0.9, 0.999));
        let back = FitConfig::from_toml(&d.to_toml()).unwrap();
        assert_eq!(back, d);
        let cfg = FitConfig::from_toml("epochs = 3\nlr = 0.01\n").unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.patch_h), (3, 0.01, 41));
        let err = FitConfig::from_toml("epohcs = 3\n").unwrap_err();
        assert!(err.to_string().contains("epohcs"));
        assert!(FitConfig::from_toml("patch_h = 4\n").is_err());
    }

    #[test]
    fn adam_matches_reference_update() {
        // two steps computed by hand
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut p = [1.0];
        adam.step(&mut p, &[0.5], |_| 0.1);
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        let p1 = p[0];
        adam.step(&mut p, &[-0.2], |_| 0.1);
        let m = 0.9 * 0.05 + 0.1 * -0.2;
        let v = 0.999 * 0.00025 + 0.001 * 0.04;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64.powi(2));
        assert!((p[0] - (p1 - 0.1 * mh / (vh.sqrt() + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn trajectory_chains_pair_poses() {
        let frames = vec![ImageGrid::zeros(4, 4, 1); 4];
        let cfg = FitConfig {
            patch_h: 3,
            patch_w: 3,
            ..FitConfig::default()
        };
        // ground truth camera-to-world poses
        let gt: Vec<Pose> = (0..4)
            .map(|i| euler_to_pose(&PoseParams::new([0.1 * i as f64, 0.02, -0.05 * i as f64], [0.01 * i as f64, 0.02, 0.0])))
            .collect();
        let mut pairs = Vec::new();
        for t in 1..3 {
            for c in [t - 1, t + 1] {
                pairs.push(crate::geometry::pose_to_euler(&gt[c].inverse().compose(&gt[t])));
            }
        }
        let init = FitInit {
            pose_params: Some(pairs),
            ..FitInit::default()
        };
        let state = initial_state(&frames, &cfg, &init).unwrap();
        let traj = state.trajectory();
        let base = gt[0].inverse();
        for (a, b) in traj.iter().zip(&gt) {
            let want = base.compose(b);
            assert!((a.rotation - want.rotation).abs().max() < 1e-12);
            assert!((a.translation - want.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let frames = vec![ImageGrid::zeros(5, 6, 3); 5];
        let cfg = FitConfig {
            per_frame_surface: true,
            residual_grid: 2,
            ..FitConfig::default()
        };
        let mut s = initial_state(&frames, &cfg, &FitInit::default()).unwrap();
        assert_eq!(s.residual_params.len(), 3);
        assert_eq!((s.residual_params[0].height(), s.residual_params[0].width()), (3, 4));
        let v: Vec<f64> = (0..s.to_flat().len()).map(|i| i as f64 * 0.001).collect();
        s.set_flat(&v);
        assert_eq!(s.to_flat(), v);
    }
}
