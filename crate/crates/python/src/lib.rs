//! Python bindings: build, run and persist networks, image raw frames, and
//! drive synthetic experiments. Arrays cross the boundary as plain lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use emg_allconv::data::{generate_synthetic as synth, DatasetManifest, SyntheticConfig};
use emg_allconv::experiment::{self as exp, ExperimentSpec};
use emg_allconv::model::{transfuse, AllConvNet, ArchitectureSpec, Checkpoint, CheckpointMeta};
use emg_allconv::nn::{RngStream, Tensor};
use emg_allconv::signal::{self, IMAGE_PIXELS, IMAGE_SIDE};
use emg_allconv::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Architecture(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn batch(images: &[Vec<f32>]) -> PyResult<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_PIXELS);
    for (i, img) in images.iter().enumerate() {
        if img.len() != IMAGE_PIXELS {
            return Err(PyValueError::new_err(format!("image {i} has {} values, expected {IMAGE_PIXELS}", img.len())));
        }
        data.extend_from_slice(img);
    }
    Tensor::from_vec(&[images.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).map_err(py_err)
}

/// An All-ConvNet classifier over 16x16 images scaled to [0, 1].
#[pyclass(name = "Network", module = "emg_allconv_py")]
struct PyNetwork {
    net: AllConvNet<f32>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (gestures = 8, seed = 0, slim = false))]
    fn new(gestures: usize, seed: u64, slim: bool) -> PyResult<Self> {
        let arch = if slim { ArchitectureSpec::slim(gestures) } else { ArchitectureSpec::full(gestures) };
        let net = AllConvNet::new(arch.map_err(py_err)?, &mut RngStream::new("python/init", seed)).map_err(py_err)?;
        Ok(PyNetwork { net })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyNetwork { net: AllConvNet::from_checkpoint(&ckpt).map_err(py_err)? })
    }

    /// Keeps the first `k` conv layers of a checkpoint frozen and
    /// re-initializes everything above them.
    #[staticmethod]
    #[pyo3(signature = (path, k, seed = 0))]
    fn transfuse(path: PathBuf, k: usize, seed: u64) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let (net, _) = transfuse(&ckpt, k, &mut RngStream::new("python/transfuse", seed)).map_err(py_err)?;
        Ok(PyNetwork { net })
    }

    #[pyo3(signature = (path, tag = "python".to_string(), seed = 0))]
    fn save(&self, path: PathBuf, tag: String, seed: u64) -> PyResult<()> {
        self.net.to_checkpoint(CheckpointMeta { seed, epoch: 0, tag }).save(&path).map_err(py_err)
    }

    #[getter]
    fn gestures(&self) -> usize {
        self.net.gestures()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    #[getter]
    fn trainable_parameter_count(&self) -> usize {
        self.net.trainable_parameter_count()
    }

    #[getter]
    fn frozen_layers(&self) -> usize {
        self.net.mask().frozen_conv_layers()
    }

    fn logits(&self, images: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let out = self.net.infer_logits(&batch(&images)?).map_err(py_err)?;
        Ok(out.data().chunks(self.net.gestures()).map(|r| r.to_vec()).collect())
    }

    fn predict(&self, images: Vec<Vec<f32>>) -> PyResult<Vec<usize>> {
        self.net.predict(&batch(&images)?).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Network(gestures={}, parameters={})", self.net.gestures(), self.net.parameter_count())
    }
}

/// |H(f)| of the power-line band-stop at the given sample rate.
#[pyfunction]
fn filter_magnitude(sample_rate: f64, freq: f64) -> PyResult<f64> {
    Ok(signal::mains_filter(sample_rate).map_err(py_err)?.magnitude(freq))
}

/// Zero-phase power-line filtering of one channel.
#[pyfunction]
fn filter_signal(sample_rate: f64, samples: Vec<f64>) -> PyResult<Vec<f64>> {
    signal::mains_filter(sample_rate).map_err(py_err)?.apply(&samples).map_err(py_err)
}

/// One 128-channel frame in mV to the mirrored 16x16 intensity image (0..255).
#[pyfunction]
fn frame_to_image(frame: Vec<f32>) -> PyResult<Vec<f32>> {
    let half = signal::frame_to_image(&frame).map_err(py_err)?;
    Ok(signal::mirror(&half).map_err(py_err)?.into_pixels())
}

/// Trailing-window majority vote; None when the window is 0 or longer than
/// the stream.
#[pyfunction]
fn majority_vote(predictions: Vec<usize>, window: usize) -> Option<Vec<usize>> {
    exp::majority_vote(&predictions, window)
}

/// Writes a synthetic dataset and returns the manifest path. `config` is a
/// JSON object; missing fields take their defaults.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn generate_synthetic(out_dir: PathBuf, config: Option<&str>) -> PyResult<String> {
    let cfg: SyntheticConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SyntheticConfig::default(),
    };
    synth(&cfg, &out_dir).map_err(py_err)?;
    Ok(out_dir.join("manifest.json").display().to_string())
}

/// Runs every fold of an experiment and returns the results as CSV text.
#[pyfunction]
fn run_experiment(py: Python<'_>, manifest: PathBuf, spec: &str) -> PyResult<String> {
    let spec: ExperimentSpec = serde_json::from_str(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let manifest = DatasetManifest::load(&manifest).map_err(py_err)?;
    let outcome = py
        .detach(|| exp::run_experiment(&manifest, &manifest, &spec))
        .map_err(py_err)?;
    outcome.report.to_csv().map_err(py_err)
}

#[pymodule]
fn emg_allconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(filter_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(filter_signal, m)?)?;
    m.add_function(wrap_pyfunction!(frame_to_image, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("IMAGE_SIDE", IMAGE_SIDE)?;
    Ok(())
}
