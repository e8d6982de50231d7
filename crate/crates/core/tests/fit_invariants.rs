use raysurf::fit::{export_state, fit_scene_with, import_state, initial_state, objective, FitConfig, FitError, FitInit};
use raysurf::geometry::{pose_to_euler, Pose, PoseParams};
use raysurf::grid::ImageGrid;
use raysurf::scene::{corner_trajectory, make_sequence, CameraKind, OracleCamera, Scene, Sequence};

const SIZE: usize = 32;

fn sequence(scale: f64) -> Sequence {
    let cam = OracleCamera::preset(CameraKind::Pinhole, SIZE, SIZE);
    let traj: Vec<Pose> = corner_trajectory(3, 1.0, 1.0)
        .into_iter()
        .map(|p| Pose::new(p.rotation, p.translation * scale))
        .collect();
    make_sequence(&Scene::corner_room(7).scaled(scale), &cam, &traj, SIZE, SIZE, None).unwrap()
}

fn gt_pairs(seq: &Sequence) -> Vec<PoseParams> {
    (1..seq.frames.len() - 1)
        .flat_map(|t| [pose_to_euler(&seq.relative_pose(t, t - 1)), pose_to_euler(&seq.relative_pose(t, t + 1))])
        .collect()
}

fn gt_depths(seq: &Sequence) -> Vec<ImageGrid> {
    (1..seq.frames.len() - 1)
        .map(|t| seq.depths[t].map(|d| if d > 0.0 { d } else { 2.0 }))
        .collect()
}

fn small_config() -> FitConfig {
    FitConfig {
        epochs: 3,
        steps_per_epoch: 4,
        lr: 0.05,
        pose_lr_scale: 0.02,
        patch_h: 9,
        patch_w: 9,
        tau_start: 5e-3,
        tau_end: 1e-3,
        d_min: 1.0,
        d_max: 10.0,
        residual_grid: 8,
        auto_mask_start_epoch: 1,
        ..FitConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_fits() {
    let seq = sequence(1.0);
    let cfg = small_config();
    let a = fit_scene_with(&seq.frames, &cfg, &FitInit::default()).unwrap();
    let b = fit_scene_with(&seq.frames, &cfg, &FitInit::default()).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.state.to_flat(), b.state.to_flat());
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn frozen_residual_leaves_template_untouched() {
    let seq = sequence(1.0);
    let cfg = FitConfig {
        learn_residual: false,
        ..small_config()
    };
    let r = fit_scene_with(&seq.frames, &cfg, &FitInit::default()).unwrap();
    let tmpl = r.state.template_surface().unwrap();
    assert_eq!(r.state.surface(0).unwrap().rays(), tmpl.rays());
}

#[test]
fn scaling_the_world_scales_the_depth() {
    // Scaling scene, translations and depth bounds by c must scale every
    // fitted depth by c.
    let c = 2.5;
    let run = |scale: f64| {
        let seq = sequence(scale);
        let cfg = FitConfig {
            d_min: scale,
            d_max: 10.0 * scale,
            freeze_pose: true,
            learn_residual: false,
            ..small_config()
        };
        let init = FitInit {
            template: Some(seq.surface.clone()),
            pose_params: Some(gt_pairs(&seq)),
            depths: None,
        };
        (seq.clone(), fit_scene_with(&seq.frames, &cfg, &init).unwrap())
    };
    let (seq1, r1) = run(1.0);
    let (_, rc) = run(c);
    let (d1, dc) = (r1.state.depth(0), rc.state.depth(0));
    let valid = seq1.depth_valid(1);
    let mut worst: f64 = 0.0;
    for i in (0..valid.len()).filter(|&i| valid[i]) {
        worst = worst.max((dc.data()[i] / (c * d1.data()[i]) - 1.0).abs());
    }
    assert!(worst < 1e-3, "relative depth mismatch {worst}");
    for (a, b) in r1.loss_curve.iter().zip(&rc.loss_curve) {
        assert!((a - b).abs() <= 1e-3 * a.abs(), "{a} vs {b}");
    }
}

#[test]
fn ground_truth_beats_nearby_states() {
    // The truth need not be an exact stationary point (the soft projection
    // is biased by a fraction of a pixel), but every nearby state costs more.
    let seq = sequence(1.0);
    let cfg = FitConfig {
        patch_h: 15,
        patch_w: 15,
        ..small_config()
    };
    let init = FitInit {
        template: Some(seq.surface.clone()),
        pose_params: Some(gt_pairs(&seq)),
        depths: Some(gt_depths(&seq)),
    };
    let tau = 2e-4;
    let gt = initial_state(&seq.frames, &cfg, &init).unwrap();
    let base = objective(&seq.frames, &gt, &cfg, tau).unwrap().loss;
    let [dr, _, pr] = gt.group_ranges();
    let p0 = gt.to_flat();
    for (range, size) in [(dr, 0.1), (pr, 0.01)] {
        for sign in [-1.0, 1.0] {
            let mut p = p0.clone();
            for (j, v) in p[range.clone()].iter_mut().enumerate() {
                *v += sign * size * if j % 2 == 0 { 1.0 } else { -0.5 };
            }
            let mut s = gt.clone();
            s.set_flat(&p);
            let loss = objective(&seq.frames, &s, &cfg, tau).unwrap().loss;
            assert!(loss > base, "perturbed {loss} <= truth {base}");
        }
    }
}

#[test]
fn static_sequence_is_reported() {
    let seq = sequence(1.0);
    let frames = vec![seq.frames[1].clone(); 3];
    let err = fit_scene_with(&frames, &small_config(), &FitInit::default()).unwrap_err();
    assert!(matches!(err, FitError::StaticSequence), "{err:?}");
}

#[test]
fn exported_state_reimports_exactly() {
    let seq = sequence(1.0);
    let r = fit_scene_with(&seq.frames, &small_config(), &FitInit::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_state(&r.state, dir.path()).unwrap();
    let back = import_state(dir.path()).unwrap();
    assert_eq!(back.to_flat(), r.state.to_flat());
    assert_eq!(back, r.state);
}
