//! Python bindings for the `bhfa` core crate.
//!
//! Images cross the boundary as flat row-major lists plus a `[C, H, W]` shape.

use std::path::PathBuf;

use bhfa::encoder::Architecture;
use bhfa::episodes::{synth_blobs as core_synth_blobs, SynthParams};
use bhfa::eval::{frechet_distance as core_frechet, GaussianSummary};
use bhfa::losses::{score_queries as core_score_queries, LossConfig, DEFAULT_TAU};
use bhfa::{checkpoint, distributions, EncoderModel, Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Contract(_) | Error::Config { .. } | Error::InsufficientData(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "DiagGaussian", module = "bhfa_py", frozen)]
struct PyDiagGaussian {
    inner: bhfa::DiagGaussian,
}

#[pymethods]
impl PyDiagGaussian {
    #[new]
    fn new(mean: Vec<f64>, log_std: Vec<f64>) -> PyResult<Self> {
        Ok(PyDiagGaussian { inner: bhfa::DiagGaussian::new(mean, log_std).map_err(py_err)? })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().to_vec()
    }

    #[getter]
    fn log_std(&self) -> Vec<f64> {
        self.inner.log_std().to_vec()
    }

    #[getter]
    fn std(&self) -> Vec<f64> {
        self.inner.std()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn pdf(&self, z: Vec<f64>) -> PyResult<f64> {
        if z.len() != self.inner.dim() {
            return Err(PyValueError::new_err("point has the wrong dimension"));
        }
        Ok(self.inner.pdf(&z))
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }

    fn __repr__(&self) -> String {
        format!("DiagGaussian(dim={})", self.inner.dim())
    }
}

fn wrap(g: bhfa::DiagGaussian) -> PyDiagGaussian {
    PyDiagGaussian { inner: g }
}

fn unwrap_all(gs: &[PyRef<'_, PyDiagGaussian>]) -> Vec<bhfa::DiagGaussian> {
    gs.iter().map(|g| g.inner.clone()).collect()
}

#[pyfunction]
fn bhattacharyya_coefficient(p: PyRef<'_, PyDiagGaussian>, q: PyRef<'_, PyDiagGaussian>) -> PyResult<f64> {
    distributions::bhattacharyya_coefficient(&p.inner, &q.inner).map_err(py_err)
}

#[pyfunction]
fn bhattacharyya_distance(p: PyRef<'_, PyDiagGaussian>, q: PyRef<'_, PyDiagGaussian>) -> PyResult<f64> {
    distributions::bhattacharyya_distance(&p.inner, &q.inner).map_err(py_err)
}

#[pyfunction]
fn hellinger_sq(p: PyRef<'_, PyDiagGaussian>, q: PyRef<'_, PyDiagGaussian>) -> PyResult<f64> {
    distributions::hellinger_sq(&p.inner, &q.inner).map_err(py_err)
}

#[pyfunction]
fn aggregate_prototype(members: Vec<PyRef<'_, PyDiagGaussian>>) -> PyResult<PyDiagGaussian> {
    distributions::aggregate_prototype(&unwrap_all(&members)).map(wrap).map_err(py_err)
}

/// Returns `(probabilities, predictions)`; probabilities is one row per query.
#[pyfunction]
#[pyo3(signature = (queries, prototypes, tau = DEFAULT_TAU))]
fn score_queries(
    queries: Vec<PyRef<'_, PyDiagGaussian>>,
    prototypes: Vec<PyRef<'_, PyDiagGaussian>>,
    tau: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let cfg = LossConfig { tau, ..LossConfig::default() };
    cfg.validate().map_err(py_err)?;
    let scores = core_score_queries(&unwrap_all(&queries), &unwrap_all(&prototypes), &cfg).map_err(py_err)?;
    let rows = (0..scores.n_query).map(|i| scores.row(i).to_vec()).collect();
    Ok((rows, scores.predictions()))
}

fn image(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    if shape.len() != 3 {
        return Err(PyValueError::new_err("image shape must be [C, H, W]"));
    }
    Tensor::new(shape, data).map_err(py_err)
}

#[pyclass(name = "Encoder", module = "bhfa_py")]
struct PyEncoder {
    model: EncoderModel,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (in_channels, side, widths = vec![16, 32, 64], latent = 32, seed = 0))]
    fn new(in_channels: usize, side: usize, widths: Vec<usize>, latent: usize, seed: u64) -> PyResult<Self> {
        let arch = Architecture::new(in_channels, side, widths, latent).map_err(py_err)?;
        Ok(PyEncoder { model: EncoderModel::new(arch, seed) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEncoder { model: checkpoint::load(&path).map_err(py_err)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.model, None).map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    #[getter]
    fn image_shape(&self) -> Vec<usize> {
        self.model.arch().image_shape().to_vec()
    }

    fn encode(&self, py: Python<'_>, data: Vec<f64>, shape: Vec<usize>) -> PyResult<PyDiagGaussian> {
        let img = image(data, shape)?;
        py.detach(|| self.model.encode(&img)).map(wrap).map_err(py_err)
    }

    /// Reconstruction of each image from its latent mean, as flat lists.
    fn reconstruct(&self, py: Python<'_>, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let shape = self.model.arch().image_shape().to_vec();
        let tensors = images.into_iter().map(|d| image(d, shape.clone())).collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let out = py.detach(|| self.model.reconstruct_from_mean(&refs)).map_err(py_err)?;
        Ok(out.into_iter().map(Tensor::into_data).collect())
    }

    fn __repr__(&self) -> String {
        let a = self.model.arch();
        format!("Encoder(in_channels={}, side={}, widths={:?}, latent={})", a.in_channels, a.side, a.widths, a.latent)
    }
}

/// `[(flat_image, class_index), ...]` for the seeded blob generator.
#[pyfunction]
#[pyo3(signature = (n_classes, per_class, side = 16, noise = 0.05, seed = 0))]
fn synth_blobs(n_classes: usize, per_class: usize, side: usize, noise: f64, seed: u64) -> PyResult<Vec<(Vec<f64>, usize)>> {
    let ds = core_synth_blobs(&SynthParams::new(n_classes, per_class, side, noise, seed)).map_err(py_err)?;
    Ok(ds.items().iter().map(|i| (i.image.data().to_vec(), i.class)).collect())
}

fn summary(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<GaussianSummary> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("covariance must be square with the mean's dimension"));
    }
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[i][j]);
    GaussianSummary::new(mean, m).map_err(py_err)
}

#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    core_frechet(&summary(mean_a, cov_a)?, &summary(mean_b, cov_b)?).map_err(py_err)
}

#[pymodule]
fn bhfa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDiagGaussian>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(bhattacharyya_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(bhattacharyya_distance, m)?)?;
    m.add_function(wrap_pyfunction!(hellinger_sq, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_prototype, m)?)?;
    m.add_function(wrap_pyfunction!(score_queries, m)?)?;
    m.add_function(wrap_pyfunction!(synth_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add("DEFAULT_TAU", DEFAULT_TAU)?;
    Ok(())
}
