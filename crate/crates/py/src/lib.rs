//! Python bindings: geometry, metrics, schedules, presets, synthetic data,
//! Grad-CAM++ and checkpoint inference.

use std::path::PathBuf;

use gaze_core::augment::{rgb_pixel, ycbcr_pixel};
use gaze_core::config::{self, Profile};
use gaze_core::eval;
use gaze_core::explain;
use gaze_core::geometry::{self, LandmarkSet, OrientedRect};
use gaze_core::predict;
use gaze_core::synthgen::{self, SynthConfig};
use gaze_core::train::{self, Cyclic, StepDecay};
use ndarray::Array3;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(gaze, GazeError, PyException);

fn err(e: gaze_core::GazeError) -> PyErr {
    let mut msg = e.to_string();
    let mut src = std::error::Error::source(&e);
    while let Some(s) = src {
        msg.push_str(&format!(": {s}"));
        src = s.source();
    }
    GazeError::new_err(msg)
}

type Rect = (f64, f64, f64, f64, f64);

/// Minimum-area enclosing rectangle as `(cx, cy, w, h, angle_deg)`.
#[pyfunction]
fn min_area_rect(points: Vec<[f64; 2]>) -> PyResult<Rect> {
    let r = geometry::min_area_rect(&points).map_err(err)?;
    Ok((r.center[0], r.center[1], r.size.0, r.size.1, r.angle))
}

/// Row-major 0/1 face grid of a rectangle `(cx, cy, w, h, angle_deg)`.
#[pyfunction]
#[pyo3(signature = (frame_w, frame_h, rect, size=25))]
fn face_grid(frame_w: u32, frame_h: u32, rect: Rect, size: usize) -> Vec<u8> {
    let r = OrientedRect {
        center: [rect.0, rect.1],
        size: (rect.2, rect.3),
        angle: rect.4,
    };
    geometry::make_face_grid((frame_w, frame_h), &r, size).cells
}

#[pyfunction]
fn euclidean_error(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    eval::euclidean_error([pred.0, pred.1], [truth.0, truth.1])
}

/// Mean Euclidean distance between paired points.
#[pyfunction]
fn mean_error(preds: Vec<(f64, f64)>, truths: Vec<(f64, f64)>) -> PyResult<f64> {
    if preds.len() != truths.len() {
        return Err(GazeError::new_err(format!("{} predictions vs {} truths", preds.len(), truths.len())));
    }
    let e: Vec<f64> = preds
        .iter()
        .zip(&truths)
        .map(|(p, t)| eval::euclidean_error([p.0, p.1], [t.0, t.1]))
        .collect();
    Ok(eval::pairwise_mean(&e))
}

#[pyfunction]
#[pyo3(signature = (progress, min_lr=5e-4, max_lr=3e-3, period_epochs=8.0))]
fn cyclic_lr(progress: f64, min_lr: f64, max_lr: f64, period_epochs: f64) -> f64 {
    train::cyclic_lr(progress, &Cyclic { min_lr, max_lr, period_epochs })
}

#[pyfunction]
#[pyo3(signature = (epoch, epochs=30, initial=1e-3, final_lr=1e-4, boundary_epoch=15))]
fn step_decay_lr(epoch: usize, epochs: usize, initial: f64, final_lr: f64, boundary_epoch: usize) -> PyResult<f64> {
    train::step_decay_lr(epoch, epochs, &StepDecay { initial, final_lr, boundary_epoch }).map_err(err)
}

#[pyfunction]
fn to_ycbcr(rgb: (u8, u8, u8)) -> (u8, u8, u8) {
    let p = ycbcr_pixel([rgb.0, rgb.1, rgb.2]);
    (p[0], p[1], p[2])
}

#[pyfunction]
fn from_ycbcr(ycc: (u8, u8, u8)) -> (u8, u8, u8) {
    let p = rgb_pixel([ycc.0, ycc.1, ycc.2]);
    (p[0], p[1], p[2])
}

fn profile(name: &str) -> PyResult<Profile> {
    match name {
        "full" => Ok(Profile::Full),
        "toy" => Ok(Profile::Toy),
        other => Err(GazeError::new_err(format!("unknown profile {other:?} (full, toy)"))),
    }
}

/// TOML text of experiment preset `n`.
#[pyfunction]
#[pyo3(signature = (n, profile_name="full"))]
fn preset_toml(n: u32, profile_name: &str) -> PyResult<String> {
    Ok(config::preset(n, profile(profile_name)?).map_err(err)?.to_toml())
}

#[pyfunction]
fn describe_preset(n: u32) -> PyResult<&'static str> {
    config::describe_preset(n).map_err(err)
}

/// Writes a synthetic dataset; returns the number of frames.
#[pyfunction]
#[pyo3(signature = (out_dir, n_subjects=20, frames_per_subject=100, seed=0, pixel_noise_sigma=0.6))]
fn synth_generate(
    py: Python<'_>,
    out_dir: PathBuf,
    n_subjects: usize,
    frames_per_subject: usize,
    seed: u64,
    pixel_noise_sigma: f64,
) -> PyResult<usize> {
    let cfg = SynthConfig {
        n_subjects,
        frames_per_subject,
        seed,
        pixel_noise_sigma,
        ..SynthConfig::default()
    };
    let m = py.detach(|| synthgen::generate(&cfg, &out_dir)).map_err(err)?;
    Ok(m.frames.len())
}

#[pyfunction]
fn mean_predictor_baseline(gaze_range: f64) -> f64 {
    synthgen::mean_predictor_baseline(gaze_range)
}

/// Grad-CAM++ map from `(channels, h, w)` nested lists.
#[pyfunction]
fn gradcam_pp(activations: Vec<Vec<Vec<f64>>>, gradients: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let a = to_array3(&activations).ok_or_else(|| GazeError::new_err("activations are ragged"))?;
    let g = to_array3(&gradients).ok_or_else(|| GazeError::new_err("gradients are ragged"))?;
    Ok(explain::gradcam_pp(a.view(), g.view()).map_err(err)?.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// A trained checkpoint ready for single-frame inference.
#[pyclass]
struct Predictor {
    inner: predict::Predictor,
}

#[pymethods]
impl Predictor {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: predict::Predictor::load(&path).map_err(err)?,
        })
    }

    /// Gaze `(x_cm, y_cm)` for an encoded image and its 68 landmarks.
    fn predict(&self, py: Python<'_>, image: &[u8], landmarks: Vec<[f64; 2]>) -> PyResult<(f64, f64)> {
        let img = image::load_from_memory(image)
            .map_err(|e| GazeError::new_err(format!("undecodable image: {e}")))?
            .to_rgb8();
        let lm = LandmarkSet::new(landmarks, img.dimensions()).map_err(err)?;
        let p = py.detach(|| self.inner.predict_frame(&img, &lm)).map_err(err)?;
        Ok((p[0], p[1]))
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }

    /// Model description as JSON text.
    fn info(&self) -> String {
        serde_json::to_string(&self.inner.info()).expect("info serializes")
    }
}

fn to_array3(v: &[Vec<Vec<f64>>]) -> Option<Array3<f64>> {
    let h = v.first().map_or(0, Vec::len);
    let w = v.first().and_then(|c| c.first()).map_or(0, Vec::len);
    if v.iter().any(|c| c.len() != h || c.iter().any(|r| r.len() != w)) {
        return None;
    }
    let flat: Vec<f64> = v.iter().flatten().flatten().copied().collect();
    Array3::from_shape_vec((v.len(), h, w), flat).ok()
}

#[pymodule]
pub fn gaze(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GazeError", m.py().get_type::<GazeError>())?;
    m.add_class::<Predictor>()?;
    m.add_function(wrap_pyfunction!(min_area_rect, m)?)?;
    m.add_function(wrap_pyfunction!(face_grid, m)?)?;
    m.add_function(wrap_pyfunction!(euclidean_error, m)?)?;
    m.add_function(wrap_pyfunction!(mean_error, m)?)?;
    m.add_function(wrap_pyfunction!(cyclic_lr, m)?)?;
    m.add_function(wrap_pyfunction!(step_decay_lr, m)?)?;
    m.add_function(wrap_pyfunction!(to_ycbcr, m)?)?;
    m.add_function(wrap_pyfunction!(from_ycbcr, m)?)?;
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add_function(wrap_pyfunction!(describe_preset, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(mean_predictor_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(gradcam_pp, m)?)?;
    Ok(())
}
