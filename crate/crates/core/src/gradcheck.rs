//! Finite-difference validation of every analytic adjoint used by the loss.
//!
//! Each case reduces an operation to a scalar through fixed random weights
//! and compares the hand-written gradient with central differences. Module
//! operations use [`grid::grad_check`](crate::grid::grad_check); the
//! end-to-end objective is checked on sampled parameters with the error
//! normalized by the largest numeric gradient of each parameter group, since
//! its gradients are far below one and an absolute floor would hide errors.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{
    compose_surface, compose_surface_backward, pinhole_template, ray_unproject, ray_unproject_backward,
    CameraError, DepthRange, Intrinsics, RaySurface, ResidualSurface,
};
use crate::fit::{initial_state, objective, FitConfig, FitError, FitInit};
use crate::geometry::{euler_to_pose, euler_to_pose_backward, transform_points, transform_points_backward, PoseParams};
use crate::grid::{
    bilinear_sample, bilinear_sample_backward, downsample_half, downsample_half_backward, grad_check,
    upsample_bilinear, upsample_bilinear_backward, GridError, ImageGrid,
};
use crate::losses::{
    photometric_backward, photometric_loss, smoothness_backward, smoothness_loss, ssim_backward, ssim_map,
    LossWeights,
};
use crate::projection::{
    project_cloud_backward, project_cloud_cached, similarity_patch, similarity_patch_backward, soft_project,
    soft_project_backward, PatchSpec, ProjectOptions, SimilarityPatch,
};
use crate::scene::{corner_trajectory, make_sequence, OracleCamera, Scene, SceneError};
use crate::synthesis::{synthesize, synthesize_backward};
use crate::WarpGrid;

/// Step for module operations.
pub const EPS: f64 = 1e-5;
/// Step for the end-to-end objective, whose masks are piecewise constant.
pub const END_TO_END_EPS: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{0}")]
    Op(String),
}

fn op_err(e: impl std::fmt::Display) -> GradCheckError {
    GradCheckError::Op(e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(GradCase::passed)
    }

    /// One `name error=.. tol=.. PASS|FAIL` line per case.
    pub fn to_text(&self) -> String {
        self.cases
            .iter()
            .map(|c| {
                format!(
                    "{} error={:.3e} tol={:.0e} {}\n",
                    c.name,
                    c.error,
                    c.tolerance,
                    if c.passed() { "PASS" } else { "FAIL" }
                )
            })
            .collect()
    }
}

struct Suite {
    rng: ChaCha8Rng,
    cases: Vec<GradCase>,
}

impl Suite {
    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    fn grid(&mut self, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> ImageGrid {
        let data = self.uniform(h * w * c, lo, hi);
        ImageGrid::new(h, w, c, data).expect("shape")
    }

    fn push(&mut self, name: &str, error: f64, tolerance: f64) {
        self.cases.push(GradCase {
            name: name.to_string(),
            error,
            tolerance,
        });
    }

    fn op(&mut self, name: &str, error: Result<f64, GridError>) -> Result<(), GradCheckError> {
        self.push(name, error?, OP_TOLERANCE);
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Runs every case; randomness is fully determined by `seed`.
pub fn run_suite(seed: u64) -> Result<GradReport, GradCheckError> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };
    grid_cases(&mut s)?;
    geometry_cases(&mut s)?;
    camera_cases(&mut s)?;
    projection_cases(&mut s)?;
    loss_cases(&mut s)?;
    synthesis_cases(&mut s)?;
    end_to_end_cases(&mut s)?;
    Ok(GradReport { cases: s.cases })
}

fn grid_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    let (h, w, c) = (5, 6, 2);
    let img = s.grid(h, w, c, 0.0, 1.0);
    // keep coordinates away from integer kinks
    let coords: Vec<[f64; 2]> = (0..12)
        .map(|_| {
            let u = s.rng.random_range(0..w - 1) as f64 + s.rng.random_range(0.1..0.9);
            let v = s.rng.random_range(0..h - 1) as f64 + s.rng.random_range(0.1..0.9);
            [u, v]
        })
        .collect();
    let wts = s.uniform(coords.len() * c, -1.0, 1.0);

    let e = grad_check(
        |x| {
            let g = ImageGrid::new(h, w, c, x.to_vec()).expect("shape");
            let r = bilinear_sample(&g, &coords);
            let (gg, _) = bilinear_sample_backward(&g, &coords, &wts);
            (dot(&r.values, &wts), gg.into_data())
        },
        img.data(),
        EPS,
    );
    s.op("grid.bilinear_sample.values", e)?;

    let flat: Vec<f64> = coords.iter().flat_map(|c| *c).collect();
    let e = grad_check(
        |x| {
            let cs: Vec<[f64; 2]> = x.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
            let r = bilinear_sample(&img, &cs);
            let (_, gc) = bilinear_sample_backward(&img, &cs, &wts);
            (dot(&r.values, &wts), gc.into_iter().flatten().collect())
        },
        &flat,
        EPS,
    );
    s.op("grid.bilinear_sample.coords", e)?;

    let big = s.grid(6, 8, 2, 0.0, 1.0);
    let wd = s.uniform(3 * 4 * 2, -1.0, 1.0);
    let e = grad_check(
        |x| {
            let g = ImageGrid::new(6, 8, 2, x.to_vec()).expect("shape");
            let d = downsample_half(&g).expect("even");
            let go = ImageGrid::new(3, 4, 2, wd.clone()).expect("shape");
            (dot(d.data(), &wd), downsample_half_backward(6, 8, &go).into_data())
        },
        big.data(),
        EPS,
    );
    s.op("grid.downsample_half", e)?;

    let small = s.grid(3, 4, 3, -1.0, 1.0);
    let wu = s.uniform(7 * 9 * 3, -1.0, 1.0);
    let e = grad_check(
        |x| {
            let g = ImageGrid::new(3, 4, 3, x.to_vec()).expect("shape");
            let u = upsample_bilinear(&g, 7, 9).expect("grow");
            let go = ImageGrid::new(7, 9, 3, wu.clone()).expect("shape");
            (dot(u.data(), &wu), upsample_bilinear_backward(3, 4, &go).into_data())
        },
        small.data(),
        EPS,
    );
    s.op("grid.upsample_bilinear", e)
}

fn geometry_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    let pts = unflatten(&s.uniform(8 * 3, -2.0, 2.0));
    let wts = unflatten(&s.uniform(8 * 3, -1.0, 1.0));
    let params = {
        let mut p = s.uniform(3, -0.5, 0.5);
        p.extend(s.uniform(3, -0.4, 0.4));
        p
    };
    let value = |pose: &crate::Pose, p: &[Vector3<f64>]| -> f64 {
        transform_points(pose, p).iter().zip(&wts).map(|(a, b)| a.dot(b)).sum()
    };
    let e = grad_check(
        |x| {
            let pp = PoseParams::from_array(x.try_into().expect("six"));
            let pose = euler_to_pose(&pp);
            let (gr, gt, _) = transform_points_backward(&pose, &pts, &wts);
            (value(&pose, &pts), euler_to_pose_backward(&pp, &gr, &gt).to_vec())
        },
        &params,
        EPS,
    );
    s.op("geometry.transform_points.pose_params", e)?;

    let pose = euler_to_pose(&PoseParams::from_array(params.clone().try_into().expect("six")));
    let e = grad_check(
        |x| {
            let p = unflatten(x);
            let (_, _, gp) = transform_points_backward(&pose, &p, &wts);
            (value(&pose, &p), flatten(&gp))
        },
        &flatten(&pts),
        EPS,
    );
    s.op("geometry.transform_points.points", e)?;

    // rotation matrix entries directly (the adjoint consumed by the pose chain)
    let rt: Vec<f64> = pose.rotation.iter().copied().chain(pose.translation.iter().copied()).collect();
    let e = grad_check(
        |x| {
            let r = Matrix3::from_column_slice(&x[..9]);
            let t = Vector3::new(x[9], x[10], x[11]);
            let v: f64 = pts.iter().zip(&wts).map(|(p, w)| (r * p + t).dot(w)).sum();
            let p = crate::Pose { rotation: r, translation: t };
            let (gr, gt, _) = transform_points_backward(&p, &pts, &wts);
            (v, gr.iter().copied().chain(gt.iter().copied()).collect())
        },
        &rt,
        EPS,
    );
    s.op("geometry.transform_points.rotation_translation", e)
}

fn small_template(h: usize, w: usize) -> RaySurface {
    pinhole_template(h, w, &Intrinsics::default_for(h, w), 1.0)
}

fn camera_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    let (h, w) = (4, 5);
    let template = small_template(h, w);
    let residual = s.uniform(h * w * 3, -0.3, 0.3);
    let weight = 0.7;
    let wts = unflatten(&s.uniform(h * w * 3, -1.0, 1.0));
    let surface_of = |x: &[f64], lambda: f64| {
        let r = ResidualSurface {
            height: h,
            width: w,
            residuals: unflatten(x),
            weight: lambda,
        };
        (compose_surface(&template, &r).expect("finite"), r)
    };

    let e = grad_check(
        |x| {
            let (q, r) = surface_of(x, weight);
            let v: f64 = q.rays().iter().zip(&wts).map(|(a, b)| a.dot(b)).sum();
            let (g, _) = compose_surface_backward(&template, &r, &wts);
            (v, flatten(&g))
        },
        &residual,
        EPS,
    );
    s.op("camera.compose_surface.residual", e)?;

    let e = grad_check(
        |x| {
            let (q, r) = surface_of(&residual, x[0]);
            let v: f64 = q.rays().iter().zip(&wts).map(|(a, b)| a.dot(b)).sum();
            let (_, gl) = compose_surface_backward(&template, &r, &wts);
            (v, vec![gl])
        },
        &[weight],
        EPS,
    );
    s.op("camera.compose_surface.weight", e)?;

    let depth = s.grid(h, w, 1, 0.5, 3.0);
    let (surface, res) = surface_of(&residual, weight);
    let unproj_value = |surf: &RaySurface, d: &ImageGrid| -> f64 {
        ray_unproject(surf, d).expect("shape").iter().zip(&wts).map(|(a, b)| a.dot(b)).sum()
    };
    let e = grad_check(
        |x| {
            let d = ImageGrid::new(h, w, 1, x.to_vec()).expect("shape");
            let (gd, _) = ray_unproject_backward(&surface, &d, &wts);
            (unproj_value(&surface, &d), gd)
        },
        depth.data(),
        EPS,
    );
    s.op("camera.ray_unproject.depth", e)?;

    // ray gradient, checked through the unit-norm composition that produces rays
    let e = grad_check(
        |x| {
            let (q, r) = surface_of(x, weight);
            let (_, gq) = ray_unproject_backward(&q, &depth, &wts);
            let (g, _) = compose_surface_backward(&template, &r, &gq);
            (unproj_value(&q, &depth), flatten(&g))
        },
        &residual,
        EPS,
    );
    s.op("camera.ray_unproject.rays", e)?;
    let _ = res;

    let range = DepthRange::new(0.1, 100.0);
    let xs = s.uniform(6, -4.0, 4.0);
    let e = grad_check(
        |x| (x.iter().map(|&v| range.decode(v)).sum(), x.iter().map(|&v| range.decode_grad(v)).collect()),
        &xs,
        EPS,
    );
    s.op("camera.depth_range.decode", e)
}

fn projection_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    // soft-argmax w.r.t. raw scores and temperature
    let (ph, pw) = (3, 5);
    let scores = s.uniform(ph * pw, -0.5, 0.5);
    let g_out = [s.rng.random_range(-1.0..1.0), s.rng.random_range(-1.0..1.0)];
    let mut x = scores.clone();
    x.push(0.3);
    let e = grad_check(
        |x| {
            let p = SimilarityPatch {
                anchor: [3, 2],
                h: ph,
                w: pw,
                scores: x[..ph * pw].to_vec(),
                clamped: vec![false; ph * pw],
            };
            let tau = x[ph * pw];
            let c = soft_project(&p, tau).expect("finite");
            let (mut g, gt) = soft_project_backward(&p, tau, g_out).expect("finite");
            g.push(gt);
            (g_out[0] * c[0] + g_out[1] * c[1], g)
        },
        &x,
        EPS,
    );
    s.op("projection.soft_project", e)?;

    let surf = small_template(6, 6);
    let spec = PatchSpec::new(3, 3).map_err(op_err)?;
    let ws = s.uniform(9, -1.0, 1.0);
    let e = grad_check(
        |x| {
            let p = Vector3::new(x[0], x[1], x[2]);
            let sp = similarity_patch(&surf, &p, [2, 3], spec).expect("patch");
            let (_, gp) = similarity_patch_backward(&surf, &p, &sp, &ws).expect("patch");
            (dot(&sp.scores, &ws), vec![gp.x, gp.y, gp.z])
        },
        &[0.2, 0.1, 1.4],
        EPS,
    );
    s.op("projection.similarity_patch", e)?;

    // project_cloud w.r.t. points and, through composition, w.r.t. rays
    let (h, w) = (8, 8);
    let template = small_template(h, w);
    let residual = s.uniform(h * w * 3, -0.05, 0.05);
    let noise = s.uniform(h * w * 3, -0.03, 0.03);
    let depth = s.uniform(h * w, 1.5, 2.5);
    let wts: Vec<[f64; 2]> = (0..h * w).map(|_| [s.rng.random_range(-1.0..1.0), s.rng.random_range(-1.0..1.0)]).collect();
    for half in [false, true] {
        let opts = ProjectOptions::new(PatchSpec::new(5, 5).map_err(op_err)?, 0.02).half_res(half);
        let surface_of = |x: &[f64]| {
            let r = ResidualSurface {
                height: h,
                width: w,
                residuals: unflatten(x),
                weight: 1.0,
            };
            (compose_surface(&template, &r).expect("finite"), r)
        };
        let (surface, _) = surface_of(&residual);
        let base: Vec<f64> = surface
            .rays()
            .iter()
            .zip(&depth)
            .zip(noise.chunks_exact(3))
            .flat_map(|((r, d), n)| [r.x * d + n[0], r.y * d + n[1], r.z * d + n[2]])
            .collect();
        let eval = |surf: &RaySurface, pts: &[Vector3<f64>]| {
            let (warp, cache) = project_cloud_cached(surf, pts, &opts).expect("projection");
            let v: f64 = warp.coords.iter().zip(&wts).map(|(c, g)| c[0] * g[0] + c[1] * g[1]).sum();
            let (gp, gr) = project_cloud_backward(surf, &opts, &cache, &wts);
            (v, gp, gr)
        };
        let tag = if half { "half" } else { "full" };
        let e = grad_check(
            |x| {
                let (v, gp, _) = eval(&surface, &unflatten(x));
                (v, flatten(&gp))
            },
            &base,
            EPS,
        );
        s.op(&format!("projection.project_cloud.points.{tag}"), e)?;
        let pts = unflatten(&base);
        let e = grad_check(
            |x| {
                let (q, r) = surface_of(x);
                let (v, _, gr) = eval(&q, &pts);
                let (g, _) = compose_surface_backward(&template, &r, &gr);
                (v, flatten(&g))
            },
            &residual,
            EPS,
        );
        s.op(&format!("projection.project_cloud.rays.{tag}"), e)?;
    }
    Ok(())
}

fn loss_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    let (h, w) = (5, 6);
    let a = s.grid(h, w, 2, 0.1, 0.9);
    let b = s.grid(h, w, 2, 0.1, 0.9);
    let wm = s.grid(h, w, 2, -1.0, 1.0);
    let e = grad_check(
        |x| {
            let aa = ImageGrid::new(h, w, 2, x.to_vec()).expect("shape");
            let m = ssim_map(&aa, &b).expect("shape");
            let (ga, _) = ssim_backward(&aa, &b, &wm).expect("shape");
            (dot(m.data(), wm.data()), ga.into_data())
        },
        a.data(),
        EPS,
    );
    s.op("losses.ssim.first", e)?;
    let e = grad_check(
        |x| {
            let bb = ImageGrid::new(h, w, 2, x.to_vec()).expect("shape");
            let m = ssim_map(&a, &bb).expect("shape");
            let (_, gb) = ssim_backward(&a, &bb, &wm).expect("shape");
            (dot(m.data(), wm.data()), gb.into_data())
        },
        b.data(),
        EPS,
    );
    s.op("losses.ssim.second", e)?;

    let target = s.grid(h, w, 3, 0.1, 0.9);
    let synth = s.grid(h, w, 3, 0.1, 0.9);
    let mask: Vec<bool> = (0..h * w).map(|i| i % 7 != 3).collect();
    let wp = s.grid(h, w, 1, 0.0, 1.0);
    let weights = LossWeights::default();
    let e = grad_check(
        |x| {
            let sy = ImageGrid::new(h, w, 3, x.to_vec()).expect("shape");
            let m = photometric_loss(&target, &sy, &mask, &weights).expect("shape");
            let g = photometric_backward(&target, &sy, &mask, &weights, &wp).expect("shape");
            (dot(m.data(), wp.data()), g.into_data())
        },
        synth.data(),
        EPS,
    );
    s.op("losses.photometric", e)?;

    let depth = s.grid(h, w, 1, 0.5, 4.0);
    let e = grad_check(
        |x| {
            let d = ImageGrid::new(h, w, 1, x.to_vec()).expect("shape");
            let v = smoothness_loss(&d, &target).expect("shape");
            (v, smoothness_backward(&d, &target).expect("shape").into_data())
        },
        depth.data(),
        EPS,
    );
    s.op("losses.smoothness", e)
}

fn synthesis_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    let (h, w) = (5, 6);
    let context = s.grid(h, w, 3, 0.0, 1.0);
    let mut warp = WarpGrid::identity(h, w);
    for c in warp.coords.iter_mut() {
        c[0] = (c[0] + s.rng.random_range(-0.45..0.45)).clamp(0.05, (w - 1) as f64 - 0.05);
        c[1] = (c[1] + s.rng.random_range(-0.45..0.45)).clamp(0.05, (h - 1) as f64 - 0.05);
    }
    let wi = s.grid(h, w, 3, -1.0, 1.0);
    let (_, mask) = synthesize(&context, &warp).map_err(op_err)?;
    let e = grad_check(
        |x| {
            let c = ImageGrid::new(h, w, 3, x.to_vec()).expect("shape");
            let (img, _) = synthesize(&c, &warp).expect("shape");
            let (gc, _) = synthesize_backward(&c, &warp, &mask, &wi);
            (dot(img.data(), wi.data()), gc.into_data())
        },
        context.data(),
        EPS,
    );
    s.op("synthesis.synthesize.context", e)?;
    let flat: Vec<f64> = warp.coords.iter().flat_map(|c| *c).collect();
    let e = grad_check(
        |x| {
            let mut wg = warp.clone();
            for (c, p) in wg.coords.iter_mut().zip(x.chunks_exact(2)) {
                *c = [p[0], p[1]];
            }
            let (img, m) = synthesize(&context, &wg).expect("shape");
            let (_, gc) = synthesize_backward(&context, &wg, &m, &wi);
            (dot(img.data(), wi.data()), gc.into_iter().flatten().collect())
        },
        &flat,
        EPS,
    );
    s.op("synthesis.synthesize.coords", e)
}

/// Small fisheye sequence of a textured room, so every path of the
/// objective (auto-mask, residual, both contexts) is exercised.
fn end_to_end_cases(s: &mut Suite) -> Result<(), GradCheckError> {
    let (h, w) = (24, 24);
    let cam = OracleCamera::Fisheye {
        f: 9.0,
        cx: 11.5,
        cy: 11.5,
        max_theta: 1.3,
    };
    let traj = corner_trajectory(3, 1.0, 5.0);
    let scene = Scene::corner_room(7);
    let seq = make_sequence(&scene, &cam, &traj, h, w, None)?;
    let cfg = FitConfig {
        patch_h: 7,
        patch_w: 7,
        residual_grid: 8,
        d_min: 0.5,
        d_max: 10.0,
        ..FitConfig::default()
    };
    let mut state = initial_state(&seq.frames, &cfg, &FitInit::default())?;
    state.lambda_r = 1.0;
    let mut params = state.to_flat();
    for v in params.iter_mut() {
        *v += s.rng.random_range(-0.05..0.05);
    }
    state.set_flat(&params);
    let tau = 4e-3;
    let eval = |p: &[f64]| -> Result<f64, FitError> {
        let mut st = state.clone();
        st.set_flat(p);
        Ok(objective(&seq.frames, &st, &cfg, tau)?.loss)
    };
    let analytic = objective(&seq.frames, &state, &cfg, tau)?.grad;
    let [dr, rr, pr] = state.group_ranges();
    for (name, range, count) in [("depth", dr, 12), ("residual", rr, 12), ("pose", pr, 12)] {
        let idx: Vec<usize> = if range.len() <= count {
            range.collect()
        } else {
            (0..count).map(|_| s.rng.random_range(range.clone())).collect()
        };
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut p = params.clone();
            p[i] = params[i] + END_TO_END_EPS;
            let plus = eval(&p)?;
            p[i] = params[i] - END_TO_END_EPS;
            let minus = eval(&p)?;
            numeric.push((plus - minus) / (2.0 * END_TO_END_EPS));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let error = idx
            .iter()
            .zip(&numeric)
            .map(|(&i, n)| (analytic[i] - n).abs() / scale)
            .fold(0.0, f64::max);
        s.push(&format!("end_to_end.objective.{name}"), error, END_TO_END_TOLERANCE);
    }
    Ok(())
}
