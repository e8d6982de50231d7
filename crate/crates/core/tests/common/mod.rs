//! Invariant checks shared by the property tests and the acceptance sweep.
//! Each takes explicit inputs and returns a description of the first
//! violation.
#![allow(dead_code)]

use nalgebra::Vector3;
use raysurf::camera::{
    compose_surface, pinhole_project, pinhole_template, pinhole_unproject, ray_unproject, Intrinsics, RaySurface,
    ResidualSurface,
};
use raysurf::geometry::{euler_to_pose, transform_points, PoseParams};
use raysurf::grid::{bilinear_sample, upsample_bilinear, ImageGrid};
use raysurf::io::{decode_pfm, encode_pfm};
use raysurf::losses::{min_over_context, photometric_loss, smoothness_loss, ssim_map, LossWeights};
use raysurf::metrics::{ate_full, depth_metrics, DepthEvalOptions};
use raysurf::projection::{project_cloud, similarity_patch, soft_project, PatchSpec, ProjectOptions, SimilarityPatch};
use raysurf::synthesis::synthesize;
use raysurf::{Pose, WarpGrid};

pub type Check = Result<(), String>;

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn grid(h: usize, w: usize, c: usize, data: &[f64]) -> ImageGrid {
    ImageGrid::new(h, w, c, data[..h * w * c].to_vec()).unwrap()
}

// grid

pub fn bilinear_exact_at_integers(g: &ImageGrid) -> Check {
    let coords: Vec<[f64; 2]> = (0..g.pixel_count())
        .map(|i| [(i % g.width()) as f64, (i / g.width()) as f64])
        .collect();
    let s = bilinear_sample(g, &coords);
    ensure(s.values == g.data() && s.valid.iter().all(|&v| v), || "lattice samples differ".into())
}

pub fn bilinear_linear_in_grid(g1: &ImageGrid, g2: &ImageGrid, a: f64, b: f64, coords: &[[f64; 2]]) -> Check {
    let mix: Vec<f64> = g1.data().iter().zip(g2.data()).map(|(x, y)| a * x + b * y).collect();
    let gm = ImageGrid::new(g1.height(), g1.width(), g1.channels(), mix).unwrap();
    let (s1, s2, sm) = (bilinear_sample(g1, coords), bilinear_sample(g2, coords), bilinear_sample(&gm, coords));
    for i in 0..sm.values.len() {
        let want = a * s1.values[i] + b * s2.values[i];
        ensure((sm.values[i] - want).abs() <= 1e-12 * (1.0 + want.abs()), || format!("value {i}: {} vs {want}", sm.values[i]))?;
    }
    Ok(())
}

pub fn upsample_keeps_lattice(g: &ImageGrid, h: usize, w: usize) -> Check {
    let up = upsample_bilinear(g, h, w).map_err(|e| e.to_string())?;
    // align-corners: source pixel (x, y) sits at (x (w-1)/(sw-1), y (h-1)/(sh-1))
    let sx = if g.width() > 1 { (w - 1) as f64 / (g.width() - 1) as f64 } else { 0.0 };
    let sy = if g.height() > 1 { (h - 1) as f64 / (g.height() - 1) as f64 } else { 0.0 };
    let coords: Vec<[f64; 2]> = (0..g.pixel_count())
        .map(|i| [(i % g.width()) as f64 * sx, (i / g.width()) as f64 * sy])
        .collect();
    let s = bilinear_sample(&up, &coords);
    for (i, (a, b)) in s.values.iter().zip(g.data()).enumerate() {
        ensure((a - b).abs() < 1e-12, || format!("lattice value {i}: {a} vs {b}"))?;
    }
    Ok(())
}

// geometry

pub fn euler_is_orthonormal(p: [f64; 6]) -> Check {
    let pose = euler_to_pose(&PoseParams::from_array(p));
    let err = pose.orthonormality_error();
    ensure(err < 1e-12 && pose.rotation.determinant() > 0.0, || format!("orthonormality error {err}"))
}

pub fn transform_preserves_distances(p: [f64; 6], a: Vector3<f64>, b: Vector3<f64>) -> Check {
    let pose = euler_to_pose(&PoseParams::from_array(p));
    let t = transform_points(&pose, &[a, b]);
    let (d0, d1) = ((a - b).norm(), (t[0] - t[1]).norm());
    ensure((d0 - d1).abs() < 1e-9, || format!("{d0} became {d1}"))
}

// camera

pub fn pinhole_round_trip(k: &Intrinsics, uv: [f64; 2], depth: f64) -> Check {
    let p = pinhole_unproject(k, uv, depth).map_err(|e| e.to_string())?;
    let back = pinhole_project(k, &p).map_err(|e| e.to_string())?;
    ensure((back[0] - uv[0]).abs() < 1e-9 && (back[1] - uv[1]).abs() < 1e-9, || format!("{uv:?} -> {back:?}"))
}

pub fn composed_surface_is_unit(template: &RaySurface, residuals: Vec<Vector3<f64>>, weight: f64) -> Check {
    let r = ResidualSurface {
        height: template.height(),
        width: template.width(),
        residuals,
        weight,
    };
    match compose_surface(template, &r) {
        Ok(s) => ensure(s.max_unit_error() < 1e-9, || format!("unit error {}", s.max_unit_error())),
        // a residual that cancels a ray exactly is rejected, never returned
        Err(_) => Ok(()),
    }
}

pub fn unproject_normalize_recovers_rays(surface: &RaySurface, depth: &ImageGrid) -> Check {
    let pts = ray_unproject(surface, depth).map_err(|e| e.to_string())?;
    for (i, (p, r)) in pts.iter().zip(surface.rays()).enumerate() {
        ensure((p.normalize() - r).norm() < 1e-12, || format!("pixel {i}"))?;
    }
    Ok(())
}

pub fn template_angle_monotone(k: &Intrinsics, h: usize, w: usize) -> Check {
    let s = pinhole_template(h, w, k, 1.0);
    for y in 0..h {
        // pairs (x, x+1) ordered by distance of their midpoint from cx
        let mut pairs: Vec<(f64, f64)> = (0..w - 1)
            .map(|x| {
                let a = s.ray(x, y).angle(s.ray(x + 1, y));
                ((x as f64 + 0.5 - k.cx).abs(), a)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for q in pairs.windows(2) {
            if q[1].0 > q[0].0 + 1e-9 {
                ensure(q[1].1 <= q[0].1 + 1e-12, || format!("row {y}: angle grows away from centre"))?;
            }
        }
    }
    Ok(())
}

// projection

pub fn patch(scores: &[f64], h: usize, w: usize) -> SimilarityPatch {
    SimilarityPatch {
        anchor: [w, h],
        h,
        w,
        scores: scores[..h * w].to_vec(),
        clamped: vec![false; h * w],
    }
}

pub fn soft_inside_bounding_box(p: &SimilarityPatch, tau: f64) -> Check {
    let c = soft_project(p, tau).map_err(|e| e.to_string())?;
    let lo = p.cell_coords(0, 0);
    let hi = p.cell_coords(p.h - 1, p.w - 1);
    ensure(
        c[0] >= lo[0] - 1e-12 && c[0] <= hi[0] + 1e-12 && c[1] >= lo[1] - 1e-12 && c[1] <= hi[1] + 1e-12,
        || format!("{c:?} outside {lo:?}..{hi:?}"),
    )
}

/// Only meaningful when the maximum beats the runner-up by a clear margin.
pub fn soft_converges_to_argmax(p: &SimilarityPatch) -> Check {
    let best = p.argmax().ok_or("empty patch")?;
    let target = p.cell_coords(best / p.w, best % p.w);
    let c = soft_project(p, 1e-3).map_err(|e| e.to_string())?;
    ensure((c[0] - target[0]).abs() < 0.01 && (c[1] - target[1]).abs() < 0.01, || format!("{c:?} vs {target:?}"))
}

pub fn similarity_scale_invariant(surface: &RaySurface, point: Vector3<f64>, alpha: f64, anchor: [usize; 2]) -> Check {
    let spec = PatchSpec::new(5, 5).unwrap();
    let a = similarity_patch(surface, &point, anchor, spec).map_err(|e| e.to_string())?;
    let b = similarity_patch(surface, &(point * alpha), anchor, spec).map_err(|e| e.to_string())?;
    for (x, y) in a.scores.iter().zip(&b.scores) {
        ensure(x == y || (x - y).abs() < 1e-15, || format!("score {x} vs {y}"))?;
    }
    Ok(())
}

/// Checked on pixels whose 5x5 search window lies inside the image; at the
/// border the window is one-sided and the soft-argmax is pulled inward.
pub fn pinhole_cloud_round_trip(k: &Intrinsics, h: usize, w: usize, depth: &ImageGrid, tau: f64) -> Check {
    let s = pinhole_template(h, w, k, 1.0);
    let pts = ray_unproject(&s, depth).map_err(|e| e.to_string())?;
    let opts = ProjectOptions::new(PatchSpec::new(5, 5).unwrap(), tau);
    let warp = project_cloud(&s, &pts, &opts).map_err(|e| e.to_string())?;
    let id = WarpGrid::identity(h, w);
    for (i, (a, b)) in warp.coords.iter().zip(&id.coords).enumerate() {
        let (x, y) = (i % w, i / w);
        if x < 2 || y < 2 || x + 2 >= w || y + 2 >= h {
            continue;
        }
        ensure((a[0] - b[0]).abs() < 0.5 && (a[1] - b[1]).abs() < 0.5, || format!("pixel {i}: {a:?}"))?;
    }
    Ok(())
}

// synthesis

pub fn synthesize_linear_in_context(c1: &ImageGrid, c2: &ImageGrid, a: f64, warp: &WarpGrid) -> Check {
    let mix: Vec<f64> = c1.data().iter().zip(c2.data()).map(|(x, y)| a * x + y).collect();
    let cm = ImageGrid::new(c1.height(), c1.width(), c1.channels(), mix).unwrap();
    let (s1, _) = synthesize(c1, warp).map_err(|e| e.to_string())?;
    let (s2, _) = synthesize(c2, warp).map_err(|e| e.to_string())?;
    let (sm, _) = synthesize(&cm, warp).map_err(|e| e.to_string())?;
    for i in 0..sm.data().len() {
        let want = a * s1.data()[i] + s2.data()[i];
        ensure((sm.data()[i] - want).abs() < 1e-12 * (1.0 + want.abs()), || format!("value {i}"))?;
    }
    Ok(())
}

// losses

pub fn ssim_symmetric_and_bounded(a: &ImageGrid, b: &ImageGrid) -> Check {
    let ab = ssim_map(a, b).map_err(|e| e.to_string())?;
    let ba = ssim_map(b, a).map_err(|e| e.to_string())?;
    for (x, y) in ab.data().iter().zip(ba.data()) {
        ensure((x - y).abs() < 1e-12, || format!("ssim {x} vs {y}"))?;
        ensure((-1.0..=1.0).contains(x), || format!("ssim {x} out of bounds"))?;
    }
    let mask = vec![true; a.pixel_count()];
    let l = photometric_loss(a, b, &mask, &LossWeights::default()).map_err(|e| e.to_string())?;
    ensure(l.data().iter().all(|&v| v >= 0.0), || "negative photometric loss".into())
}

pub fn min_over_context_identity_and_monotone(l: &ImageGrid, other: &ImageGrid, bump: &[f64]) -> Check {
    let all = vec![true; l.pixel_count()];
    let same = min_over_context(&[l.clone(), l.clone()], &[all.clone(), all.clone()]).map_err(|e| e.to_string())?;
    ensure(same.loss.data() == l.data(), || "min(L, L) != L".into())?;
    let base = min_over_context(&[l.clone(), other.clone()], &[all.clone(), all.clone()]).map_err(|e| e.to_string())?;
    let raised: Vec<f64> = l.data().iter().zip(bump).map(|(v, b)| v + b.abs()).collect();
    let raised = ImageGrid::new(l.height(), l.width(), 1, raised).unwrap();
    let up = min_over_context(&[raised, other.clone()], &[all.clone(), all]).map_err(|e| e.to_string())?;
    for (a, b) in up.loss.data().iter().zip(base.loss.data()) {
        ensure(a >= b, || format!("raising an input lowered {b} to {a}"))?;
    }
    Ok(())
}

pub fn smoothness_scale_invariant(depth: &ImageGrid, image: &ImageGrid, c: f64) -> Check {
    let a = smoothness_loss(depth, image).map_err(|e| e.to_string())?;
    let b = smoothness_loss(&depth.scaled(c), image).map_err(|e| e.to_string())?;
    ensure((a - b).abs() < 1e-9, || format!("{a} vs {b} at scale {c}"))
}

// metrics

pub fn depth_metrics_scale_invariant(pred: &ImageGrid, gt: &ImageGrid, c: f64) -> Check {
    let o = DepthEvalOptions::default();
    let a = depth_metrics(pred, gt, None, &o).map_err(|e| e.to_string())?;
    let b = depth_metrics(&pred.scaled(c), gt, None, &o).map_err(|e| e.to_string())?;
    for (k, v) in a.to_map() {
        if k == "scale" {
            continue;
        }
        let w = b.to_map()[&k];
        ensure((v - w).abs() < 1e-9 * (1.0 + v.abs()), || format!("{k}: {v} vs {w}"))?;
    }
    ensure(a.delta1 <= a.delta2 && a.delta2 <= a.delta3, || "delta thresholds not monotone".into())
}

pub fn ate_similarity_invariant(pred: &[Pose], gt: &[Pose], g: [f64; 6], c: f64) -> Check {
    let a = ate_full(pred, gt).map_err(|e| e.to_string())?;
    let t = euler_to_pose(&PoseParams::from_array(g));
    let moved: Vec<Pose> = pred
        .iter()
        .map(|p| {
            let q = t.compose(p);
            Pose::new(q.rotation, q.translation * c)
        })
        .collect();
    let b = ate_full(&moved, gt).map_err(|e| e.to_string())?;
    ensure((a - b).abs() < 1e-8 * (1.0 + a), || format!("ate {a} became {b}"))
}

// io

pub fn pfm_bit_exact(g: &ImageGrid) -> Check {
    let bytes = encode_pfm(g)?;
    let back = decode_pfm(&bytes, std::path::Path::new("mem.pfm")).map_err(|e| e.to_string())?;
    let same = back.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == (*b as f32 as f64).to_bits());
    ensure(same && back.same_shape(g), || "pfm round trip changed values".into())
}

pub fn random_pose_params(u: &[f64]) -> [f64; 6] {
    [u[0], u[1], u[2], u[3], u[4], u[5]]
}

pub fn point(u: &[f64]) -> Vector3<f64> {
    Vector3::new(u[0], u[1], u[2])
}
