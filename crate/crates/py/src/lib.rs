//! Python module `pyfeedrep`.
//!
//! Maps are flat row-major lists with explicit width and height. Errors
//! surface as `ValueError`, `OSError` or `RuntimeError` (divergence).

use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use feedrep::control::{self, DcGain, RationalTF};
use feedrep::feedback::{self, DetectorMap, ResidualMap, Threshold};
use feedrep::harness::{self, Experiment, HarnessConfig};
use feedrep::mlp::{self, LossKind, OutputActivation};
use feedrep::stats::{self, MomentSet, UniformErrorModel};
use feedrep::synth::{self, DatasetSpec};
use feedrep::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format(_) | Error::Checksum { .. } => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn threshold(theta1: f64) -> PyResult<Threshold> {
    Threshold::new(theta1).map_err(py_err)
}

fn moments_dict<'py>(py: Python<'py>, m: &MomentSet) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in m.fields() {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyfunction]
fn detector_target(abs_err: f64, theta1: f64) -> PyResult<f64> {
    Ok(feedback::detector_target(abs_err, threshold(theta1)?))
}

#[pyfunction]
fn err_from_detector(phi: f64, theta1: f64) -> PyResult<f64> {
    feedback::err_from_detector(phi, threshold(theta1)?).map_err(py_err)
}

#[pyfunction]
fn compensate(phi1: f64, err: f64) -> f64 {
    feedback::compensate(phi1, err)
}

#[pyfunction]
fn compensate_raw(phi1: f64, err: f64) -> f64 {
    feedback::compensate_raw(phi1, err)
}

/// Compensated map from a residual map and raw detector outputs.
#[pyfunction]
fn compensate_map(phi1: Vec<f64>, detector: Vec<f64>, width: usize, height: usize, theta1: f64) -> PyResult<Vec<f64>> {
    let p = ResidualMap::new(width, height, phi1).map_err(py_err)?;
    let d = DetectorMap::from_raw_clamped(width, height, &detector).map_err(py_err)?;
    let out = feedback::compensate_map(&p, &d, threshold(theta1)?).map_err(py_err)?;
    Ok(out.values().to_vec())
}

#[pyfunction]
fn closed_form_moments(py: Python<'_>, theta1: f64) -> PyResult<Bound<'_, PyDict>> {
    let m = UniformErrorModel::new(theta1).map_err(py_err)?;
    moments_dict(py, &stats::closed_form_moments(m))
}

#[pyfunction]
fn monte_carlo_moments(py: Python<'_>, theta1: f64, n: u64, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let m = UniformErrorModel::new(theta1).map_err(py_err)?;
    moments_dict(py, &stats::monte_carlo_moments(m, n, seed).map_err(py_err)?)
}

#[pyfunction]
fn asymptotic_corr(theta1: f64) -> PyResult<f64> {
    Ok(stats::asymptotic_corr(UniformErrorModel::new(theta1).map_err(py_err)?))
}

/// Rows of `(theta1, exact_corr, asymptotic_corr, mc_corr)`.
#[pyfunction]
fn corr_scan(grid: Vec<f64>, mc_n: u64, seed: u64) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let rows = stats::corr_scan(&grid, mc_n, seed).map_err(py_err)?;
    Ok(rows.iter().map(|r| (r.theta1, r.exact_corr, r.asymptotic_corr, r.mc_corr)).collect())
}

/// Rational transfer function with ascending coefficients.
#[pyclass(name = "TransferFunction", from_py_object)]
#[derive(Clone)]
struct PyTransferFunction {
    inner: RationalTF,
}

#[pymethods]
impl PyTransferFunction {
    #[new]
    fn new(num: Vec<f64>, den: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: RationalTF::new(num, den).map_err(py_err)? })
    }

    #[staticmethod]
    fn integrator(gain: f64) -> Self {
        Self { inner: RationalTF::integrator(gain) }
    }

    #[getter]
    fn num(&self) -> Vec<f64> {
        self.inner.num().coeffs().to_vec()
    }

    #[getter]
    fn den(&self) -> Vec<f64> {
        self.inner.den().coeffs().to_vec()
    }

    fn evaluate(&self, s: Complex64) -> PyResult<Complex64> {
        self.inner.evaluate(s).map_err(py_err)
    }

    fn frequency_response(&self, omega: f64) -> PyResult<Complex64> {
        self.inner.frequency_response(omega).map_err(py_err)
    }

    /// `None` when the gain diverges.
    fn dc_gain(&self) -> Option<f64> {
        match self.inner.dc_gain() {
            DcGain::Finite(g) => Some(g),
            DcGain::Divergent => None,
        }
    }

    fn __add__(&self, other: &Self) -> Self {
        Self { inner: self.inner.add(&other.inner) }
    }

    fn __mul__(&self, other: &Self) -> Self {
        Self { inner: self.inner.mul(&other.inner) }
    }

    fn __truediv__(&self, other: &Self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.div(&other.inner).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        format!("TransferFunction({})", self.inner)
    }
}

#[pyfunction]
fn holistic_closed_loop(t_phi1: &PyTransferFunction, t_phi: &PyTransferFunction) -> PyResult<PyTransferFunction> {
    let inner = control::holistic_closed_loop(&t_phi1.inner, &t_phi.inner).map_err(py_err)?;
    Ok(PyTransferFunction { inner })
}

type GapTuple = (f64, Option<f64>, Option<f64>);

/// Rows of `(omega, open_loop_gap, closed_loop_gap)`; `None` marks a pole.
#[pyfunction]
fn identity_gap(
    t_phi1: &PyTransferFunction,
    t_phi: &PyTransferFunction,
    freqs: Vec<f64>,
) -> PyResult<Vec<GapTuple>> {
    let rows = control::identity_gap(&t_phi1.inner, &t_phi.inner, &freqs).map_err(py_err)?;
    Ok(rows.iter().map(|r| (r.omega, r.open_loop_gap, r.closed_loop_gap)).collect())
}

/// One synthetic sample as a dict of flat `observed`, `residual` and `background` lists.
#[pyfunction]
#[pyo3(signature = (seed, spec_json=None))]
fn generate_sample<'py>(py: Python<'py>, seed: u64, spec_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let spec: DatasetSpec = match spec_json {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => DatasetSpec::default(),
    };
    let s = synth::generate_sample(&spec, seed).map_err(py_err)?;
    let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
    let d = PyDict::new(py);
    d.set_item("side", s.side())?;
    d.set_item("observed", widen(s.observed()))?;
    d.set_item("residual", widen(s.residual_truth()))?;
    d.set_item("background", widen(s.background()))?;
    Ok(d)
}

fn parse_activation(name: &str) -> PyResult<OutputActivation> {
    match name {
        "affine" => Ok(OutputActivation::Affine),
        "unit-interval-squash" => Ok(OutputActivation::UnitIntervalSquash),
        _ => Err(PyValueError::new_err(format!("unknown output activation {name:?}"))),
    }
}

fn parse_loss(name: &str) -> PyResult<LossKind> {
    match name {
        "l1" => Ok(LossKind::L1),
        "l2" => Ok(LossKind::L2),
        _ => Err(PyValueError::new_err(format!("unknown loss {name:?}"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<ndarray::Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    let nrows = rows.len();
    ndarray::Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Fully connected network with tanh hidden units.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: mlp::Mlp,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (layer_sizes, output_activation="affine", seed=0))]
    fn new(layer_sizes: Vec<usize>, output_activation: &str, seed: u64) -> PyResult<Self> {
        let inner = mlp::Mlp::new(&layer_sizes, parse_activation(output_activation)?, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: mlp::load_model(path).map_err(py_err)?.1 })
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes()
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters()
    }

    fn set_parameters(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_parameters(&params).map_err(py_err)
    }

    fn forward(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&input).map_err(py_err)
    }

    /// `(loss, flat gradient)` in the order of `parameters()`.
    #[pyo3(signature = (inputs, targets, loss="l2"))]
    fn grad(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, loss: &str) -> PyResult<(f64, Vec<f64>)> {
        let (x, y) = (matrix(inputs)?, matrix(targets)?);
        let (l, g) = self.inner.grad(x.view(), y.view(), parse_loss(loss)?).map_err(py_err)?;
        Ok((l, g.flatten()))
    }

    #[pyo3(signature = (inputs, targets, learning_rate, loss="l2"))]
    fn sgd_step(&mut self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, learning_rate: f64, loss: &str) -> PyResult<f64> {
        let (x, y) = (matrix(inputs)?, matrix(targets)?);
        let (l, g) = self.inner.grad(x.view(), y.view(), parse_loss(loss)?).map_err(py_err)?;
        self.inner.sgd_step(&g, learning_rate);
        Ok(l)
    }
}

/// Runs a harness experiment from a JSON config; returns the written paths.
#[pyfunction]
fn run_experiment(config_json: &str, experiment: &str) -> PyResult<Vec<String>> {
    let cfg = HarnessConfig::from_json(config_json).map_err(py_err)?;
    let exp: Experiment = serde_json::from_value(serde_json::Value::String(experiment.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown experiment {experiment:?}")))?;
    let files = harness::run(&cfg, exp).map_err(py_err)?;
    Ok(files.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn pyfeedrep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EPSILON_PHI", feedback::EPSILON_PHI)?;
    m.add_function(wrap_pyfunction!(detector_target, m)?)?;
    m.add_function(wrap_pyfunction!(err_from_detector, m)?)?;
    m.add_function(wrap_pyfunction!(compensate, m)?)?;
    m.add_function(wrap_pyfunction!(compensate_raw, m)?)?;
    m.add_function(wrap_pyfunction!(compensate_map, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_moments, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_moments, m)?)?;
    m.add_function(wrap_pyfunction!(asymptotic_corr, m)?)?;
    m.add_function(wrap_pyfunction!(corr_scan, m)?)?;
    m.add_function(wrap_pyfunction!(holistic_closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(identity_gap, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyTransferFunction>()?;
    m.add_class::<PyMlp>()?;
    Ok(())
}
