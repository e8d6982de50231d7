//! Python bindings: render a synthetic dataset, fit it, evaluate the result.
//! Rasters cross the boundary as `(height, width, channels, values)` with
//! values in row-major, channel-interleaved order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use raysurf::fit::{export_state, fit_scene_with, FitConfig, FitInit};
use raysurf::geometry::pose_to_euler;
use raysurf::io::{self, IoError};
use raysurf::metrics::{ate_full, depth_metrics, trajectory_extent, DepthEvalOptions};
use raysurf::scene::{corner_trajectory, load_sequence, make_sequence, CameraKind, OracleCamera, Scene};

fn value_error(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_error(e: IoError) -> PyErr {
    PyOSError::new_err(e.to_string())
}

/// Renders `frames` views of the textured corner room with a preset camera
/// (`pinhole`, `fisheye` or `catadioptric`) and writes the dataset to `out`.
#[pyfunction]
#[pyo3(signature = (out, camera = "pinhole", seed = 0, frames = 3, height = 64, width = 64))]
fn render(py: Python<'_>, out: PathBuf, camera: &str, seed: u64, frames: usize, height: usize, width: usize) -> PyResult<()> {
    let kind: CameraKind = camera.parse().map_err(value_error)?;
    if height < 2 || width < 2 {
        return Err(value_error("image must be at least 2x2"));
    }
    py.detach(|| {
        let cam = OracleCamera::preset(kind, height, width);
        let trajectory = corner_trajectory(frames, 1.0, 1.0);
        make_sequence(&Scene::corner_room(seed), &cam, &trajectory, height, width, Some(&out)).map(|_| ())
    })
    .map_err(value_error)
}

/// Fits depth, poses and ray surface to the dataset in `data` and exports
/// the state to `out`. `config` is TOML text overriding the defaults.
/// Returns `(final_loss, loss_curve)`.
#[pyfunction]
#[pyo3(signature = (data, out, config = None, seed = 0, template_from_data = false, poses_from_data = false))]
fn fit(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    config: Option<&str>,
    seed: u64,
    template_from_data: bool,
    poses_from_data: bool,
) -> PyResult<(f64, Vec<f64>)> {
    let mut cfg = match config {
        Some(text) => FitConfig::from_toml(text).map_err(value_error)?,
        None => FitConfig::default(),
    };
    cfg.seed = seed;
    py.detach(|| {
        let seq = load_sequence(&data).map_err(value_error)?;
        let n = seq.frames.len();
        let init = FitInit {
            template: template_from_data.then(|| seq.surface.clone()),
            pose_params: poses_from_data.then(|| {
                (1..n - 1)
                    .flat_map(|t| [t - 1, t + 1].map(|c| pose_to_euler(&seq.relative_pose(t, c))))
                    .collect()
            }),
            depths: None,
        };
        let result = fit_scene_with(&seq.frames, &cfg, &init).map_err(value_error)?;
        export_state(&result.state, &out).map_err(value_error)?;
        Ok((result.diagnostics.final_loss, result.loss_curve))
    })
}

/// Depth metrics of the PFM depth map `pred` against `gt`.
#[pyfunction]
#[pyo3(signature = (pred, gt, median_scaling = true))]
fn eval_depth(pred: PathBuf, gt: PathBuf, median_scaling: bool) -> PyResult<BTreeMap<String, f64>> {
    let p = io::read_pfm(&pred).map_err(io_error)?;
    let g = io::read_pfm(&gt).map_err(io_error)?;
    if p.channels() != 1 || !p.same_shape(&g) {
        return Err(value_error("depth maps must be single-channel and the same size"));
    }
    let opts = DepthEvalOptions {
        median_scaling,
        ..DepthEvalOptions::default()
    };
    Ok(depth_metrics(&p, &g, None, &opts).map_err(value_error)?.to_map())
}

/// Similarity-aligned trajectory error of pose file `pred` against `gt`.
#[pyfunction]
fn eval_odom(pred: PathBuf, gt: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    let p = io::read_poses(&pred).map_err(io_error)?;
    let g = io::read_poses(&gt).map_err(io_error)?;
    let ate = ate_full(&p, &g).map_err(value_error)?;
    let extent = trajectory_extent(&g);
    Ok(BTreeMap::from([
        ("ate".to_string(), ate),
        ("extent".to_string(), extent),
        ("ate_over_extent".to_string(), ate / extent),
    ]))
}

/// Reads a PFM file as `(height, width, channels, values)`.
#[pyfunction]
fn read_pfm(path: PathBuf) -> PyResult<(usize, usize, usize, Vec<f64>)> {
    let g = io::read_pfm(&path).map_err(io_error)?;
    Ok((g.height(), g.width(), g.channels(), g.data().to_vec()))
}

/// Runs every adjoint against finite differences. Returns
/// `(all_passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(bool, String)> {
    let report = py.detach(|| raysurf::gradcheck::run_suite(seed)).map_err(value_error)?;
    Ok((report.passed(), report.to_text()))
}

/// Soft-projection temperature for a surface of the given angular pitch.
#[pyfunction]
fn tau_for_pitch(pitch: f64) -> f64 {
    raysurf::projection::tau_for_pitch(pitch)
}

#[pymodule]
fn raysurf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(eval_depth, m)?)?;
    m.add_function(wrap_pyfunction!(eval_odom, m)?)?;
    m.add_function(wrap_pyfunction!(read_pfm, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(tau_for_pitch, m)?)?;
    Ok(())
}
