//! Python bindings for `gesture_diff`.
//!
//! Arrays cross the boundary as nested lists (`list[list[float]]`, one row
//! per frame), so the module has no numpy dependency.

use std::path::PathBuf;

use gesture_diff::audio::{extract_features_range, BeatList, FeatureConfig, Waveform};
use gesture_diff::checkpoint::Checkpoint;
use gesture_diff::diffusion::{self, DiffusionSchedule};
use gesture_diff::generator::{self, GenerationRequest};
use gesture_diff::metrics;
use gesture_diff::tps;
use gesture_diff::trainer::{make_synthetic_dataset, SyntheticConfig};
use gesture_diff::types::{compute_stats, KeypointFrame, KeypointSequence};
use gesture_diff::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: &Rows) -> PyResult<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(PyValueError::new_err("expected a non-empty list of non-empty rows"));
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn frame(points: Vec<[f64; 2]>) -> KeypointFrame {
    KeypointFrame::new(points)
}

/// Linear-beta noise schedule.
#[pyclass(name = "Schedule", frozen)]
pub struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 500, beta_1 = 1e-4, beta_t = 0.02))]
    pub fn new(steps: usize, beta_1: f64, beta_t: f64) -> PyResult<Self> {
        let inner = diffusion::make_schedule(steps, beta_1, beta_t).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    pub fn steps(&self) -> usize {
        self.inner.num_steps()
    }

    pub fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.beta(t))
    }

    pub fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.alpha_bar(t))
    }

    pub fn q_sample(&self, x0: Rows, t: usize, eps: Rows) -> PyResult<Rows> {
        let out = diffusion::q_sample(to_array(&x0)?.view(), t, to_array(&eps)?.view(), &self.inner).map_err(to_py)?;
        Ok(to_rows(&out))
    }
}

#[pyfunction]
pub fn guided_noise(eps_cond: Rows, eps_uncond: Rows, s: f64) -> PyResult<Rows> {
    let out = diffusion::guided_noise(to_array(&eps_cond)?.view(), to_array(&eps_uncond)?.view(), s).map_err(to_py)?;
    Ok(to_rows(&out))
}

#[pyfunction]
pub fn interpolate_overlap(prev: Rows, next: Rows) -> PyResult<Rows> {
    let out = generator::interpolate_overlap(to_array(&prev)?.view(), to_array(&next)?.view()).map_err(to_py)?;
    Ok(to_rows(&out))
}

#[pyfunction]
pub fn segment_starts(total: usize, num_frames: usize, num_init: usize) -> PyResult<Vec<usize>> {
    generator::segment_starts(total, num_frames, num_init).map_err(to_py)
}

/// Per-channel `(mean, std)` over sequences given as `frames x 2K` rows.
#[pyfunction]
pub fn normalization_stats(sequences: Vec<Rows>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let seqs = sequences
        .iter()
        .map(|s| KeypointSequence::from_array(to_array(s)?, 25.0).map_err(to_py))
        .collect::<PyResult<Vec<_>>>()?;
    let st = compute_stats(&seqs).map_err(to_py)?;
    Ok((st.mean, st.std))
}

/// Returns `(affine, weights)`; `affine[d] = [coef_x, coef_y, offset]`.
#[pyfunction]
#[pyo3(signature = (src, dst, lam = tps::DEFAULT_LAMBDA))]
pub fn solve_tps(src: Vec<[f64; 2]>, dst: Vec<[f64; 2]>, lam: f64) -> PyResult<([[f64; 3]; 2], Vec<[f64; 2]>)> {
    let t = tps::solve_tps(&src, &dst, lam).map_err(to_py)?;
    Ok((t.affine, t.weights))
}

/// Solves the spline from `src` to `dst` and maps `points` through it.
#[pyfunction]
#[pyo3(signature = (src, dst, points, lam = tps::DEFAULT_LAMBDA))]
pub fn warp_points(src: Vec<[f64; 2]>, dst: Vec<[f64; 2]>, points: Vec<[f64; 2]>, lam: f64) -> PyResult<Vec<[f64; 2]>> {
    let t = tps::solve_tps(&src, &dst, lam).map_err(to_py)?;
    Ok(tps::apply_tps(&t, &points))
}

#[pyfunction]
#[pyo3(signature = (audio_beats, motion_beats, sigma = metrics::DEFAULT_SIGMA_BC))]
pub fn beat_consistency(audio_beats: Vec<f64>, motion_beats: Vec<f64>, sigma: f64) -> PyResult<f64> {
    let a = BeatList::new(audio_beats).map_err(to_py)?;
    let m = BeatList::new(motion_beats).map_err(to_py)?;
    metrics::beat_consistency(&a, &m, sigma).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (keypoints, fps = 25.0))]
pub fn motion_beats(keypoints: Rows, fps: f64) -> PyResult<Vec<f64>> {
    let seq = KeypointSequence::from_array(to_array(&keypoints)?, fps).map_err(to_py)?;
    Ok(metrics::detect_motion_beats(&seq).map_err(to_py)?.times().to_vec())
}

#[pyfunction]
pub fn audio_beats(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
    let w = Waveform::new(samples, sample_rate).map_err(to_py)?;
    Ok(gesture_diff::audio::detect_audio_beats(&w).times().to_vec())
}

/// `num_frames x 32` log-mel features at 25 fps.
#[pyfunction]
pub fn audio_features(samples: Vec<f64>, sample_rate: u32, num_frames: usize) -> PyResult<Rows> {
    let w = Waveform::new(samples, sample_rate).map_err(to_py)?;
    let f = extract_features_range(&w, 0, num_frames, &FeatureConfig::default()).map_err(to_py)?;
    Ok(to_rows(&f.features))
}

/// Synthetic clips as dicts with `keypoints`, `audio`, `sample_rate` and `beats`.
#[pyfunction]
#[pyo3(signature = (num_clips = 8, frames_per_clip = 128, num_keypoints = 50, seed = 0))]
pub fn make_synthetic(
    py: Python<'_>,
    num_clips: usize,
    frames_per_clip: usize,
    num_keypoints: usize,
    seed: u64,
) -> PyResult<Vec<Py<pyo3::types::PyDict>>> {
    let cfg = SyntheticConfig {
        num_clips,
        frames_per_clip,
        num_keypoints,
        seed,
        ..Default::default()
    };
    let clips = make_synthetic_dataset(&cfg).map_err(to_py)?;
    clips
        .into_iter()
        .map(|c| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("id", &c.clip.id)?;
            d.set_item("keypoints", to_rows(&c.clip.keypoints.as_array().to_owned()))?;
            d.set_item("audio", &c.clip.audio.samples)?;
            d.set_item("sample_rate", c.clip.audio.sample_rate)?;
            d.set_item("beats", c.beats)?;
            Ok(d.unbind())
        })
        .collect()
}

/// A trained checkpoint ready for generation.
#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[new]
    pub fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    pub fn num_keypoints(&self) -> usize {
        self.ckpt.model.config().num_keypoints
    }

    #[getter]
    pub fn num_params(&self) -> usize {
        self.ckpt.model.num_params()
    }

    /// Keypoints (`frames x 2K`, image-normalized) for the whole audio track.
    #[pyo3(signature = (samples, sample_rate, source_keypoints, s = 0.2, seed = 0))]
    pub fn generate(
        &self,
        py: Python<'_>,
        samples: Vec<f64>,
        sample_rate: u32,
        source_keypoints: Vec<[f64; 2]>,
        s: f64,
        seed: u64,
    ) -> PyResult<Rows> {
        let w = Waveform::new(samples, sample_rate).map_err(to_py)?;
        let mut req = GenerationRequest::new(frame(source_keypoints), w.resampled(16_000), seed);
        req.guidance_s = s;
        let g = py
            .detach(|| generator::generate_from_checkpoint(&self.ckpt, &req))
            .map_err(to_py)?;
        Ok(to_rows(&g.keypoints.as_array().to_owned()))
    }
}

#[pymodule]
pub fn gesture_diff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(guided_noise, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(segment_starts, m)?)?;
    m.add_function(wrap_pyfunction!(normalization_stats, m)?)?;
    m.add_function(wrap_pyfunction!(solve_tps, m)?)?;
    m.add_function(wrap_pyfunction!(warp_points, m)?)?;
    m.add_function(wrap_pyfunction!(beat_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(motion_beats, m)?)?;
    m.add_function(wrap_pyfunction!(audio_beats, m)?)?;
    m.add_function(wrap_pyfunction!(audio_features, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    Ok(())
}
