//! Python bindings. Structured results (reports, selections, histories) come
//! back as plain dicts; configs go in as dicts whose keys mirror the Rust
//! field names, with anything omitted taking its default.

use aid_core::epochs::{extract_epochs as core_extract, EpochSet as CoreEpochSet};
use aid_core::evalstats::{self, EvalReport};
use aid_core::intent::{self, TrialScores};
use aid_core::iostream::{read_recording, write_recording};
use aid_core::nnet::{NetConfig, TrainConfig};
use aid_core::pipeline::{self, ModelBundle};
use aid_core::session::{build_schedule as core_build_schedule, SessionConfig, SessionSchedule};
use aid_core::synthgen::{self, default_topography, CalibrationOptions, SubjectModel};
use aid_core::AidError;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(aid_py, DecodeError, PyRuntimeError, "Runtime failure inside the aid pipeline.");

fn err(e: impl Into<AidError>) -> PyErr {
    let e = e.into();
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        DecodeError::new_err(e.to_string())
    }
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, v: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match v {
        None => Ok(T::default()),
        Some(obj) => {
            let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
        }
    }
}

fn subject_from_py(py: Python<'_>, v: Option<&Bound<'_, PyAny>>) -> PyResult<SubjectModel> {
    let Some(obj) = v else { return Ok(SubjectModel::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let (Some(n), None) = (value.get("n_channels").and_then(|n| n.as_u64()), value.get("erp_topography")) {
        value["erp_topography"] = serde_json::json!(default_topography(n as usize));
    }
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Schedule", frozen)]
struct PySchedule {
    inner: SessionSchedule,
}

#[pymethods]
impl PySchedule {
    #[getter]
    fn n_trials(&self) -> usize {
        self.inner.trials.len()
    }

    #[getter]
    fn n_events(&self) -> usize {
        self.inner.events.len()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Schedule(trials={}, events={})", self.inner.trials.len(), self.inner.events.len())
    }
}

#[pyclass(name = "Recording", frozen)]
struct PyRecording {
    inner: synthgen::Recording,
}

#[pymethods]
impl PyRecording {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: read_recording(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_recording(&self.inner, path).map_err(err)
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples
    }

    #[getter]
    fn sampling_rate_hz(&self) -> u32 {
        self.inner.sampling_rate_hz
    }

    /// One dict per stimulus marker.
    fn markers(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.markers)
    }

    fn channel(&self, c: usize) -> PyResult<Vec<f32>> {
        if c >= self.inner.n_channels {
            return Err(PyValueError::new_err(format!("channel {c} out of range ({} channels)", self.inner.n_channels)));
        }
        Ok(self.inner.channel(c).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Recording(channels={}, samples={}, fs={}, markers={})",
            self.inner.n_channels,
            self.inner.n_samples,
            self.inner.sampling_rate_hz,
            self.inner.markers.len()
        )
    }
}

#[pyclass(name = "EpochSet", frozen)]
struct PyEpochSet {
    inner: CoreEpochSet,
}

#[pymethods]
impl PyEpochSet {
    fn __len__(&self) -> usize {
        self.inner.epochs.len()
    }

    #[getter]
    fn n_targets(&self) -> usize {
        self.inner.n_targets()
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    fn labels(&self) -> Vec<bool> {
        self.inner.epochs.iter().map(|e| e.is_target()).collect()
    }

    fn trial_ids(&self) -> Vec<usize> {
        self.inner.trial_ids()
    }

    /// Channel-major samples of epoch `i`.
    fn data(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .epochs
            .get(i)
            .map(|e| e.data.clone())
            .ok_or_else(|| PyValueError::new_err(format!("epoch {i} out of range")))
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelBundle,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelBundle::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.weights.n_channels
    }

    /// Target probability per epoch.
    fn score(&self, py: Python<'_>, epochs: &PyEpochSet) -> PyResult<Vec<f64>> {
        py.detach(|| pipeline::score_epochs(&self.inner, &epochs.inner.epochs)).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (config=None))]
fn build_schedule(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<PySchedule> {
    let cfg: SessionConfig = from_py(py, config)?;
    Ok(PySchedule { inner: core_build_schedule(&cfg).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (schedule, subject=None))]
fn simulate(py: Python<'_>, schedule: &PySchedule, subject: Option<&Bound<'_, PyAny>>) -> PyResult<PyRecording> {
    let subject = subject_from_py(py, subject)?;
    let rec = py.detach(|| synthgen::generate_recording(&schedule.inner, &subject)).map_err(err)?;
    Ok(PyRecording { inner: rec })
}

#[pyfunction]
fn extract_epochs(rec: &PyRecording) -> PyResult<PyEpochSet> {
    Ok(PyEpochSet { inner: core_extract(&rec.inner).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (epochs, folds=10, permutations=10_000, seed=0, net=None, train=None))]
fn evaluate(
    py: Python<'_>,
    epochs: &PyEpochSet,
    folds: usize,
    permutations: usize,
    seed: u64,
    net: Option<&Bound<'_, PyAny>>,
    train: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let (net, train): (NetConfig, TrainConfig) = (from_py(py, net)?, from_py(py, train)?);
    let report = py.detach(|| evalstats::evaluate(&epochs.inner, &net, &train, folds, permutations, seed)).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (predictions, labels, n_permutations=10_000, seed=0))]
fn permutation_test(py: Python<'_>, predictions: Vec<bool>, labels: Vec<bool>, n_permutations: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let r = evalstats::permutation_test(&predictions, &labels, n_permutations, seed).map_err(err)?;
    to_py(py, &r)
}

/// Cohort summary from a list of report dicts as returned by `evaluate`.
#[pyfunction]
#[pyo3(signature = (reports, alpha=0.05))]
fn summarize_cohort(py: Python<'_>, reports: Vec<Bound<'_, PyAny>>, alpha: f64) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    let reports: Vec<EvalReport> = reports
        .iter()
        .map(|r| {
            let text: String = json.call_method1("dumps", (r,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
        })
        .collect::<PyResult<_>>()?;
    to_py(py, &evalstats::summarize_cohort(&reports, alpha).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (target_accuracy, schedule, subject=None, folds=10, seed=0, upper_amplitude_uv=50.0, net=None, train=None))]
#[allow(clippy::too_many_arguments)]
fn calibrate_snr(
    py: Python<'_>,
    target_accuracy: f64,
    schedule: &PySchedule,
    subject: Option<&Bound<'_, PyAny>>,
    folds: usize,
    seed: u64,
    upper_amplitude_uv: f64,
    net: Option<&Bound<'_, PyAny>>,
    train: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let subject = subject_from_py(py, subject)?;
    let opts = CalibrationOptions { net: from_py(py, net)?, train: from_py(py, train)?, folds, seed, upper_amplitude_uv, ..Default::default() };
    let c = py.detach(|| synthgen::calibrate_snr(target_accuracy, &schedule.inner, &subject, &opts)).map_err(err)?;
    to_py(py, &c)
}

/// Returns `(model, history)`.
#[pyfunction]
#[pyo3(signature = (epochs, seed=0, net=None, train=None))]
fn train_model(
    py: Python<'_>,
    epochs: &PyEpochSet,
    seed: u64,
    net: Option<&Bound<'_, PyAny>>,
    train: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let (net, train): (NetConfig, TrainConfig) = (from_py(py, net)?, from_py(py, train)?);
    let (model, history) = py.detach(|| pipeline::train_model(&epochs.inner, &net, &train, seed)).map_err(err)?;
    Ok((PyModel { inner: model }, to_py(py, &history)?))
}

/// One dict per trial: `{"selection": {...}, "target_option": int | None}`.
#[pyfunction]
fn decode_offline(py: Python<'_>, model: &PyModel, rec: &PyRecording) -> PyResult<Py<PyAny>> {
    let decoded = py.detach(|| pipeline::decode_offline(&model.inner, &rec.inner)).map_err(err)?;
    to_py(py, &decoded)
}

/// Streams the recording through the online decoder; returns
/// `(decoded_trials, summary)`.
#[pyfunction]
#[pyo3(signature = (model, rec, chunk=64))]
fn replay_decode(py: Python<'_>, model: &PyModel, rec: &PyRecording, chunk: usize) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let k = rec.inner.markers.iter().map(|m| m.option_position + 1).max().unwrap_or(0);
    let (decoded, summary) = py
        .detach(|| pipeline::replay_decode(&model.inner, rec.inner.clone(), chunk, k, |_| {}))
        .map_err(err)?;
    Ok((to_py(py, &decoded)?, to_py(py, &summary)?))
}

#[pyfunction]
#[pyo3(signature = (probabilities, trial_id=0))]
fn decode_trial(py: Python<'_>, probabilities: Vec<f64>, trial_id: usize) -> PyResult<Py<PyAny>> {
    let s = intent::decode_trial(&TrialScores { trial_id, probabilities, repetition_index: 0 }).map_err(err)?;
    to_py(py, &s)
}

/// Log-odds accumulation over repetitions (one probability list each).
#[pyfunction]
#[pyo3(signature = (repetitions, trial_id=0))]
fn accumulate(py: Python<'_>, repetitions: Vec<Vec<f64>>, trial_id: usize) -> PyResult<Py<PyAny>> {
    let reps: Vec<TrialScores> = repetitions
        .into_iter()
        .enumerate()
        .map(|(r, probabilities)| TrialScores { trial_id, probabilities, repetition_index: r })
        .collect();
    to_py(py, &intent::accumulate(&reps).map_err(err)?)
}

#[pymodule]
fn aid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DecodeError", m.py().get_type::<DecodeError>())?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyRecording>()?;
    m.add_class::<PyEpochSet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(extract_epochs, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_test, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_snr, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(decode_offline, m)?)?;
    m.add_function(wrap_pyfunction!(replay_decode, m)?)?;
    m.add_function(wrap_pyfunction!(decode_trial, m)?)?;
    m.add_function(wrap_pyfunction!(accumulate, m)?)?;
    Ok(())
}
