//! Python bindings: hyper-kernel masks and structural parameters,
//! architecture matrices, metrics, synthetic scenes, the learning-rate
//! schedule, and the full command-line pipeline.

use hknas_core::cli;
use hknas_core::data::{synth_generate, SynthSpec};
use hknas_core::hyperkernel::{self as hk, Candidate, KernelKind, MaskSet};
use hknas_core::metrics::{ConfusionMatrix, Report};
use hknas_core::mixedop::AlphaMode;
use hknas_core::ndtensor::Tensor;
use hknas_core::optim::{self, OptimConfig};
use hknas_core::searchspace::{self as ss, NetKind, Network, NetworkTemplate, Scene};
use hknas_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Divergence(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hknas_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Core-area sizes of candidates s = 1..S/2 of an S^dims hyper kernel.
#[pyfunction]
#[pyo3(signature = (size = 9, dims = 2))]
fn core_counts(size: usize, dims: usize) -> PyResult<Vec<usize>> {
    let m = MaskSet::new(size, dims).py()?;
    Ok(m.all_candidates().map(|c| m.core_count(c)).collect())
}

/// Flattened 0/1 core mask of candidate `s` (row-major over the footprint).
#[pyfunction]
#[pyo3(signature = (s, size = 9, dims = 2))]
fn core_mask(s: usize, size: usize, dims: usize) -> PyResult<Vec<u8>> {
    let m = MaskSet::new(size, dims).py()?;
    let c = Candidate::new(s).py()?;
    if c.code() >= m.candidates() {
        return Err(PyValueError::new_err(format!(
            "candidate {s} outside 1..={}",
            m.candidates()
        )));
    }
    Ok(m.core_mask(c).to_vec())
}

/// An over-sized kernel holding all candidate kernels as centered crops.
#[pyclass(name = "HyperKernel")]
struct PyHyperKernel {
    inner: hk::HyperKernel,
}

#[pymethods]
impl PyHyperKernel {
    /// Standard-normal weights. `depthwise` needs `dims == 2` and equal channel counts.
    #[new]
    #[pyo3(signature = (dims, out_channels, in_channels, size = 9, depthwise = false, seed = 0))]
    fn new(
        dims: usize,
        out_channels: usize,
        in_channels: usize,
        size: usize,
        depthwise: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let kind = if depthwise {
            KernelKind::Depthwise
        } else {
            KernelKind::Standard
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = hk::HyperKernel::random("kernel", kind, dims, size, out_channels, in_channels, &mut rng).py()?;
        Ok(PyHyperKernel { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.weights.value.shape().to_vec()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.value.data().to_vec()
    }

    #[setter]
    fn set_weights(&mut self, values: Vec<f64>) -> PyResult<()> {
        let shape = self.shape();
        self.inner.weights.value = Tensor::new(shape, values).py()?;
        Ok(())
    }

    /// Mean weight over each candidate's core area.
    fn structural_params(&self) -> Vec<f64> {
        self.inner.structural_params().0
    }

    /// Softmax of the structural parameters.
    fn mixing_weights(&self) -> Vec<f64> {
        self.inner.structural_params().softmax()
    }

    /// The chosen candidate `s`; ties go to the smaller kernel.
    fn argmax(&self) -> usize {
        self.inner.structural_params().argmax().s()
    }

    /// Candidate `s` cropped to extent 2s+1, as `(shape, flat values)`.
    fn crop(&self, s: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.crop(Candidate::new(s).py()?).py()?;
        Ok((t.shape().to_vec(), t.into_data()))
    }
}

/// Grid of per-layer choices, one text row per block.
#[pyclass(name = "Architecture")]
struct PyArchitecture {
    inner: ss::ArchitectureMatrix,
}

#[pymethods]
impl PyArchitecture {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyArchitecture {
            inner: ss::ArchitectureMatrix::parse(text).py()?,
        })
    }

    fn encode(&self) -> String {
        self.inner.encode()
    }

    #[getter]
    fn rows(&self) -> Vec<Vec<String>> {
        self.inner
            .rows
            .iter()
            .map(|r| r.iter().map(|e| e.to_string()).collect())
            .collect()
    }

    /// Parameter count of the network derived under a scene preset.
    #[pyo3(signature = (scene, kind, bands, classes, seed = 0))]
    fn param_count(&self, scene: &str, kind: &str, bands: usize, classes: usize, seed: u64) -> PyResult<usize> {
        let t = preset(scene, kind, bands, classes)?;
        Ok(Network::derived(&t, &self.inner, seed).py()?.param_count())
    }

    fn __str__(&self) -> String {
        self.encode()
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }
}

fn preset(scene: &str, kind: &str, bands: usize, classes: usize) -> PyResult<NetworkTemplate> {
    let scene: Scene = scene.parse().py()?;
    let kind: NetKind = kind.parse().py()?;
    NetworkTemplate::preset(scene, kind, bands, classes).py()
}

/// Parameter count of the search network (every edge keeps its hyper kernel).
#[pyfunction]
#[pyo3(signature = (scene, kind, bands, classes, seed = 0))]
fn supernet_param_count(scene: &str, kind: &str, bands: usize, classes: usize, seed: u64) -> PyResult<usize> {
    let t = preset(scene, kind, bands, classes)?;
    Ok(Network::search(&t, AlphaMode::Hyper, seed).py()?.param_count())
}

/// `(OA, AA, kappa)` of a confusion matrix with reference classes as rows.
#[pyfunction]
fn metrics(rows: Vec<Vec<u64>>) -> PyResult<(f64, f64, f64)> {
    let r = Report::from_confusion(ConfusionMatrix::from_rows(&rows).py()?).py()?;
    Ok((r.oa, r.aa, r.kappa))
}

/// Cosine-annealed learning rate at `epoch` of `epochs`.
#[pyfunction]
#[pyo3(signature = (epoch, epochs, initial_lr = 0.01, min_lr = 0.0))]
fn cosine_lr(epoch: usize, epochs: usize, initial_lr: f64, min_lr: f64) -> PyResult<f64> {
    let cfg = OptimConfig {
        initial_lr,
        min_lr,
        epochs,
        ..OptimConfig::search_defaults(NetKind::Cls1d)
    };
    optim::cosine_lr(epoch, &cfg).py()
}

/// Synthetic labeled scene: `(cube, labels)` with the cube flattened as
/// `(height, width, bands)` and labels 1-based, row-major.
#[pyfunction]
#[pyo3(signature = (classes, height, width, bands, noise = 0.0, seed = 0))]
fn synth(
    classes: usize,
    height: usize,
    width: usize,
    bands: usize,
    noise: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<u16>)> {
    let s = synth_generate(&SynthSpec {
        classes,
        height,
        width,
        bands,
        noise,
        seed,
    })
    .py()?;
    Ok((s.cube.data().to_vec(), s.labels.labels().to_vec()))
}

/// Runs the command-line tool (`["search", "--config", path]` and so on)
/// and returns its exit code.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("hknas".to_string()).chain(args).collect();
    py.detach(|| cli::run_from_args(argv))
}

#[pymodule]
fn hknas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHyperKernel>()?;
    m.add_class::<PyArchitecture>()?;
    m.add_function(wrap_pyfunction!(core_counts, m)?)?;
    m.add_function(wrap_pyfunction!(core_mask, m)?)?;
    m.add_function(wrap_pyfunction!(supernet_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
