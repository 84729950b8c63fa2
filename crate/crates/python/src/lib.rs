//! Python bindings: datasets, bases, fitting, cross-validation and the
//! two-stage baseline. Rich results are also available as JSON.

use std::cell::RefCell;

use autodyn::twostage::DEFAULT_REGIONS;
use autodyn::{
    approx_cv, build_flatness_penalty, default_design, fit, generate, se_g, select_model, two_stage, Candidate,
    Dataset, DynamicsConfig, FitOptions, FitResult, GradientFunction, GroundTruth, ParameterState, PenaltyMatrix,
    PenaltySettings, Regime, SplineBasis, Stage2Method, TwoStageFit, TwoStageOptions,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: autodyn::Error) -> PyErr {
    match e {
        autodyn::Error::NoConvergence | autodyn::Error::Diverged { .. } | autodyn::Error::Singular(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(name = "Dataset", module = "pyautodyn", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a long CSV (`subject_id,curve_id,time,value`) or the JSON mirror.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: Dataset::load(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: Dataset::from_csv_reader(text.as_bytes()).map_err(err)? })
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn n_curves(&self) -> usize {
        self.inner.n_curves()
    }

    #[getter]
    fn n_measurements(&self) -> usize {
        self.inner.n_measurements()
    }

    /// `(subject_id, curve_id, times, values)` per curve.
    fn curves(&self) -> Vec<(String, String, Vec<f64>, Vec<f64>)> {
        self.inner
            .subjects
            .iter()
            .flat_map(|s| s.curves.iter().map(|c| (s.id.clone(), c.id.clone(), c.times.clone(), c.values.clone())))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(subjects={}, curves={}, measurements={})",
            self.inner.n_subjects(),
            self.inner.n_curves(),
            self.inner.n_measurements()
        )
    }
}

#[pyclass(name = "SplineBasis", module = "pyautodyn", frozen)]
struct PyBasis {
    inner: SplineBasis,
}

#[pymethods]
impl PyBasis {
    /// Cubic uniform-layout basis centred at `knots`.
    #[staticmethod]
    #[pyo3(signature = (knots, drop_leading = 0))]
    fn uniform(knots: Vec<f64>, drop_leading: usize) -> PyResult<Self> {
        Ok(PyBasis { inner: SplineBasis::uniform(3, knots, drop_leading).map_err(err)? })
    }

    /// Knots `offset + j/m`, `j = 1..=m`.
    #[staticmethod]
    #[pyo3(signature = (m, offset = 0.1))]
    fn equally_spaced(m: usize, offset: f64) -> PyResult<Self> {
        Ok(PyBasis { inner: SplineBasis::equally_spaced(m, offset).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn knots(&self) -> Vec<f64> {
        self.inner.interior_knots().to_vec()
    }

    #[pyo3(signature = (x, deriv = 0))]
    fn eval(&self, x: f64, deriv: usize) -> PyResult<Vec<f64>> {
        self.inner.eval(x, deriv).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("SplineBasis(knots={:?}, dim={})", self.inner.interior_knots(), self.inner.dim())
    }
}

#[pyclass(name = "GroundTruth", module = "pyautodyn", frozen)]
struct PyTruth {
    inner: GroundTruth,
    g: GradientFunction,
}

#[pymethods]
impl PyTruth {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn knots(&self) -> Vec<f64> {
        self.inner.knots.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.clone()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        self.inner.a.clone()
    }

    /// True gradient function.
    fn g(&self, x: f64) -> f64 {
        self.g.value(x)
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }
}

/// Synthetic dataset from one of the built-in designs.
#[pyfunction]
#[pyo3(signature = (regime = "moderate", seed = 1))]
fn simulate(regime: &str, seed: u64) -> PyResult<(PyDataset, PyTruth)> {
    let r: Regime = regime.parse().map_err(err)?;
    let (ds, truth) = generate(&default_design(r), seed).map_err(err)?;
    let g = truth.design.true_gradient().map_err(err)?;
    Ok((PyDataset { inner: ds }, PyTruth { inner: truth, g }))
}

#[pyclass(name = "FitResult", module = "pyautodyn", frozen)]
struct PyFit {
    inner: FitResult,
    basis: SplineBasis,
    penalty: PenaltyMatrix,
    g: GradientFunction,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.state.beta.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.state.theta.clone()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        self.inner.state.a.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn n_lm(&self) -> usize {
        self.inner.n_lm
    }

    #[getter]
    fn n_nr(&self) -> usize {
        self.inner.n_nr
    }

    #[getter]
    fn sse(&self) -> f64 {
        self.inner.loss.sse
    }

    #[getter]
    fn sigma_eps2(&self) -> f64 {
        self.inner.sigma_eps2
    }

    /// `ĝ(x)`
    fn g(&self, x: f64) -> f64 {
        self.g.value(x)
    }

    /// Pointwise standard errors of `ĝ`.
    fn se(&self, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        let info = self
            .inner
            .info
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("information matrices were not computed"))?;
        Ok(se_g(info, self.inner.sigma_eps2, &self.basis, &xs).map_err(err)?.0)
    }

    /// Approximate leave-one-curve-out CV score.
    fn approx_cv(&self, data: &PyDataset) -> PyResult<f64> {
        Ok(approx_cv(&data.inner, &self.inner, &self.basis, &self.penalty).map_err(err)?.score)
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("FitResult(converged={}, beta={:?})", self.inner.converged, self.inner.state.beta)
    }
}

fn make_penalty(basis: &SplineBasis, flatness: Option<(f64, f64)>) -> PyResult<PenaltyMatrix> {
    match flatness {
        Some((a, lr)) => build_flatness_penalty(basis, a, lr, 8).map_err(err),
        None => Ok(PenaltyMatrix::zeros(basis.dim())),
    }
}

/// Fits the model. `known_a` fixes the initial conditions; `flatness` is
/// `(A, lambda_r)` for the boundary penalty `λ_R ∫_A^{2A} (g′)²`.
#[pyfunction]
#[pyo3(signature = (data, basis, lambda1 = 0.04, lambda2 = 0.01, lambda3 = 1.0, known_a = None, flatness = None, adaptive_lm = false, adaptive_nr = true, h = 5e-4))]
#[allow(clippy::too_many_arguments)]
fn fit_model(
    data: &PyDataset,
    basis: &PyBasis,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    known_a: Option<Vec<Vec<f64>>>,
    flatness: Option<(f64, f64)>,
    adaptive_lm: bool,
    adaptive_nr: bool,
    h: f64,
) -> PyResult<PyFit> {
    let b = make_penalty(&basis.inner, flatness)?;
    let pen = PenaltySettings { lambda1, lambda2, lambda3_0: lambda3, a_known: known_a.is_some() };
    let opts = FitOptions { adaptive_lm, adaptive_nr, dynamics: DynamicsConfig::with_h(h), ..Default::default() };
    let mut init = ParameterState::initial(&data.inner, basis.inner.dim());
    if let Some(a) = known_a {
        init.a = a;
        init.alpha = init.mean_a();
    }
    let f = fit(&data.inner, &basis.inner, &b, &pen, &opts, Some(&init)).map_err(err)?;
    let g = f.gradient().map_err(err)?;
    Ok(PyFit { inner: f, basis: basis.inner.clone(), penalty: b, g })
}

/// Ranks bases by approximate CV; returns `(rank, label, score or None)`.
#[pyfunction]
#[pyo3(signature = (data, bases, known_a = None))]
fn select(data: &PyDataset, bases: Vec<PyRef<'_, PyBasis>>, known_a: Option<Vec<Vec<f64>>>) -> PyResult<Vec<(usize, String, Option<f64>)>> {
    let candidates = bases
        .iter()
        .enumerate()
        .map(|(k, b)| Candidate::new(format!("{k}"), b.inner.clone(), None))
        .collect::<autodyn::Result<Vec<_>>>()
        .map_err(err)?;
    let pen = PenaltySettings { a_known: known_a.is_some(), ..Default::default() };
    let ranked =
        select_model(&data.inner, &candidates, &pen, &FitOptions::default(), known_a.as_deref()).map_err(err)?;
    Ok(ranked.into_iter().map(|r| (r.rank, r.label, r.score)).collect())
}

#[pyclass(name = "TwoStageFit", module = "pyautodyn", frozen)]
struct PyTwoStage {
    inner: TwoStageFit,
}

#[pymethods]
impl PyTwoStage {
    fn g(&self, x: f64) -> f64 {
        self.inner.value(x)
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }
}

/// Two-stage baseline; `stage2` is `"local_quadratic"` or `"basis"` (then
/// `basis` is required).
#[pyfunction]
#[pyo3(name = "two_stage", signature = (data, stage2 = "local_quadratic", basis = None))]
fn two_stage_py(data: &PyDataset, stage2: &str, basis: Option<&PyBasis>) -> PyResult<PyTwoStage> {
    let stage2 = match (stage2, basis) {
        ("local_quadratic", _) => Stage2Method::LocalQuadratic,
        ("basis", Some(b)) => Stage2Method::BasisRegression { basis: b.inner.spec() },
        ("basis", None) => return Err(PyValueError::new_err("stage2='basis' needs a basis")),
        (other, _) => return Err(PyValueError::new_err(format!("unknown stage2 {other:?}"))),
    };
    let opts = TwoStageOptions { stage2, ..Default::default() };
    Ok(PyTwoStage { inner: two_stage(&data.inner, &opts).map_err(err)? })
}

/// Per-region `∫(ĝ − g)²` for two Python callables; default regions are
/// `[-0.5,0.2]`, `(0.2,1]`, `(1,1.5]`.
#[pyfunction]
#[pyo3(signature = (g_hat, g_true, regions = None))]
fn region_ise(
    g_hat: &Bound<'_, PyAny>,
    g_true: &Bound<'_, PyAny>,
    regions: Option<Vec<(f64, f64)>>,
) -> PyResult<Vec<f64>> {
    let regions = regions.unwrap_or_else(|| DEFAULT_REGIONS.to_vec());
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let call = |f: &Bound<'_, PyAny>, x: f64| -> f64 {
        match f.call1((x,)).and_then(|v| v.extract::<f64>()) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let out = autodyn::region_ise(|x| call(g_hat, x), |x| call(g_true, x), &regions);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    out.map_err(err)
}

#[pymodule]
fn pyautodyn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyTwoStage>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_model, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(two_stage_py, m)?)?;
    m.add_function(wrap_pyfunction!(region_ise, m)?)?;
    Ok(())
}
