//! Leave-one-curve-out cross-validation and knot-candidate screening.
//!
//! The approximate score replaces each drop-one refit by one Gauss–Newton
//! correction around the full-data estimates:
//!
//! - `θ̃_i = θ̂_i − (D_i + λ₂)⁻¹ J_θ,ilᵀ ε_il`, `D_i = Σ_{l,j} (∂X/∂θ_i)²`;
//! - `β̃ = β̂ − (J_βᵀJ_β + B)⁻¹ J_β,ilᵀ ε_il`;
//! - `ã = argmin_a Σ_j [Y_ilj − X(t_ilj; a, θ̃_i, β̃)]² + λ₁(a − α̂)²`
//!   (or the known `a_il`),
//!
//! and scores `Σ_j [Y_ilj − X(t_ilj; ã, θ̃_i, β̃)]²`. All Jacobians are the
//! ones assembled at convergence; only the `ã` search integrates trajectories.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{build_flatness_penalty, BasisSpec, PenaltyMatrix, SplineBasis};
use crate::data::{CurveIndex, Dataset, ParameterState, PenaltySettings};
use crate::dynamics::{eval_at_times, solve_trajectory, DynamicsConfig, GradientFunction};
use crate::error::{Error, Result};
use crate::optimizer::{assemble_jacobians, curve_values_and_sa, fit, FitOptions, FitResult, JacobianBlocks};

/// Newton iterations and tolerance for the scalar `ã` search.
const A_MAX_ITERS: usize = 10;
const A_TOL: f64 = 1e-8;
const A_MAX_HALVINGS: usize = 10;
/// Default size guard for exact leave-one-curve-out refits.
pub const EXACT_CV_MAX_MEASUREMENTS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveScore {
    pub i: usize,
    pub l: usize,
    pub subject: String,
    pub curve: String,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDesc {
    pub basis: BasisSpec,
    /// Flatness onset `A` of the roughness penalty, if any.
    pub flatness_a: Option<f64>,
    pub lambda_r: f64,
    pub penalties: PenaltySettings,
}

impl ModelDesc {
    fn new(basis: BasisSpec, b: &PenaltyMatrix, penalties: PenaltySettings) -> Self {
        ModelDesc { basis, flatness_a: b.a, lambda_r: b.lambda_r, penalties }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    /// Sum of `per_curve` contributions.
    pub score: f64,
    pub per_curve: Vec<CurveScore>,
    pub model_desc: ModelDesc,
    /// Curves whose correction fell back to the full-data estimates.
    pub degraded: usize,
    /// Exact CV only: drops whose refit did not converge (excluded from the score).
    pub flagged: Vec<CurveIndex>,
    pub warnings: Vec<String>,
}

fn curve_score(ds: &Dataset, (i, l): CurveIndex, contribution: f64) -> CurveScore {
    CurveScore {
        i,
        l,
        subject: ds.subjects[i].id.clone(),
        curve: ds.subjects[i].curves[l].id.clone(),
        contribution,
    }
}

fn sse(y: &[f64], x: &[f64]) -> f64 {
    y.iter().zip(x).map(|(y, x)| (y - x) * (y - x)).sum()
}

/// `argmin_a Σ (Y − X(t; a))² + λ₁ (a − α)²` by damped Gauss–Newton from
/// `a0`. Returns the minimizer and its prediction loss (without the ridge).
pub fn ridge_initial_condition(
    g: &GradientFunction,
    theta: f64,
    times: &[f64],
    values: &[f64],
    lambda1: f64,
    alpha: f64,
    a0: f64,
    cfg: &DynamicsConfig,
) -> Result<(f64, f64)> {
    let objective = |a: f64| -> Result<Option<(f64, Vec<f64>, Vec<f64>)>> {
        match curve_values_and_sa(g, a, theta, times, cfg) {
            Ok((x, sa)) => {
                let q = sse(values, &x) + lambda1 * (a - alpha).powi(2);
                Ok(q.is_finite().then_some((q, x, sa)))
            }
            Err(Error::Diverged { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut a = a0;
    let (mut q, mut x, mut sa) = objective(a)?.ok_or(Error::Diverged { curve: None, t: f64::NAN, bound: cfg.blowup_bound })?;
    for _ in 0..A_MAX_ITERS {
        let jtj: f64 = sa.iter().map(|s| s * s).sum::<f64>() + lambda1;
        if !(jtj > 0.0) {
            break;
        }
        let grad: f64 = sa.iter().zip(values).zip(&x).map(|((s, y), x)| s * (y - x)).sum::<f64>() - lambda1 * (a - alpha);
        let delta = grad / jtj;
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..=A_MAX_HALVINGS {
            let cand = a + step * delta;
            if let Some((qc, xc, sc)) = objective(cand)? {
                if qc <= q {
                    a = cand;
                    (q, x, sa) = (qc, xc, sc);
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved || (step * delta).abs() < A_TOL * a.abs().max(1.0) {
            break;
        }
    }
    Ok((a, sse(values, &x)))
}

/// Approximate leave-one-curve-out score from a converged fit.
pub fn approx_cv(ds: &Dataset, fit: &FitResult, basis: &SplineBasis, b: &PenaltyMatrix) -> Result<CVReport> {
    let state = &fit.state;
    state.check(ds, basis.dim())?;
    let pen = fit.penalties;
    let cfg = fit.dynamics;
    let g = GradientFunction::new(basis, &state.beta)?;
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push("fit did not converge; corrections are taken at the last iterate".into());
    }
    let owned;
    let blocks: &JacobianBlocks = match &fit.blocks {
        Some(bl) if bl.j_beta.ncols() == basis.dim() => bl,
        _ => {
            warnings.push("Jacobians not attached to the fit; reassembled".into());
            owned = assemble_jacobians(ds, state, &g, &cfg)?;
            &owned
        }
    };
    let idx = ds.curve_indices();
    let model_desc = ModelDesc::new(basis.spec(), b, pen);

    if idx.len() == 1 {
        let c = ds.curve(idx[0]);
        let contribution = sse(&c.values, &eval_at_times(&solve_trajectory(&g, state.a[0][0], state.theta[0], &cfg)?, &g, &c.times)?);
        warnings.push("single curve: leave-one-out is undefined; in-sample loss reported".into());
        return Ok(CVReport {
            score: contribution,
            per_curve: vec![curve_score(ds, idx[0], contribution)],
            model_desc,
            degraded: 1,
            flagged: Vec::new(),
            warnings,
        });
    }

    let hb = blocks.j_beta.tr_mul(&blocks.j_beta) + &b.matrix;
    let hb_chol = hb.cholesky();
    if hb_chol.is_none() {
        warnings.push("β Hessian not positive definite; β corrections set to zero".into());
    }
    let h_theta: Vec<f64> = (0..ds.n_subjects())
        .map(|i| blocks.j_theta_i(i).iter().map(|j| j * j).sum::<f64>() + pen.lambda2)
        .collect();

    let results: Vec<(f64, bool)> = idx
        .par_iter()
        .enumerate()
        .map(|(c, &(i, l))| -> Result<(f64, bool)> {
            let rows = blocks.curve_rows[c].clone();
            let curve = ds.curve((i, l));
            let mut degraded = false;
            let beta = match &hb_chol {
                Some(ch) => {
                    let jb = blocks.j_beta.rows(rows.start, rows.len());
                    let e = DVector::from_column_slice(&blocks.eps[rows.clone()]);
                    let d = ch.solve(&jb.tr_mul(&e));
                    state.beta.iter().zip(d.iter()).map(|(b, d)| b - d).collect::<Vec<f64>>()
                }
                None => {
                    degraded = true;
                    state.beta.clone()
                }
            };
            let theta = if h_theta[i] > 0.0 {
                let gt: f64 = blocks.j_theta[rows.clone()].iter().zip(&blocks.eps[rows]).map(|(j, e)| j * e).sum();
                state.theta[i] - gt / h_theta[i]
            } else {
                degraded = true;
                state.theta[i]
            };
            let predict = |beta: &[f64], theta: f64| -> Result<Option<f64>> {
                let g = GradientFunction::new(basis, beta)?;
                if pen.a_known {
                    return match solve_trajectory(&g, state.a[i][l], theta, &cfg) {
                        Ok(sol) => Ok(Some(sse(&curve.values, &eval_at_times(&sol, &g, &curve.times)?))),
                        Err(Error::Diverged { .. }) => Ok(None),
                        Err(e) => Err(e),
                    };
                }
                match ridge_initial_condition(
                    &g,
                    theta,
                    &curve.times,
                    &curve.values,
                    pen.lambda1,
                    state.alpha,
                    state.a[i][l],
                    &cfg,
                ) {
                    Ok((_, loss)) => Ok(Some(loss)),
                    Err(Error::Diverged { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            };
            match predict(&beta, theta)? {
                Some(v) => Ok((v, degraded)),
                None => {
                    let v = predict(&state.beta, state.theta[i])?
                        .ok_or(Error::Diverged { curve: Some((i, l)), t: f64::NAN, bound: cfg.blowup_bound })?;
                    Ok((v, true))
                }
            }
        })
        .collect::<Result<_>>()?;

    let degraded = results.iter().filter(|r| r.1).count();
    if degraded > 0 {
        warnings.push(format!("{degraded} curves used uncorrected full-data estimates"));
    }
    let per_curve: Vec<CurveScore> = idx.iter().zip(&results).map(|(&ix, r)| curve_score(ds, ix, r.0)).collect();
    Ok(CVReport {
        score: per_curve.iter().map(|c| c.contribution).sum(),
        per_curve,
        model_desc,
        degraded,
        flagged: Vec::new(),
        warnings,
    })
}

/// Restriction of a parameter state to the dataset without curve `(i, l)`.
fn drop_state(state: &ParameterState, (i, l): CurveIndex, map: &[Option<usize>]) -> ParameterState {
    let mut theta = Vec::new();
    let mut a = Vec::new();
    for (si, m) in map.iter().enumerate() {
        if m.is_some() {
            theta.push(state.theta[si]);
            let mut ai = state.a[si].clone();
            if si == i {
                ai.remove(l);
            }
            a.push(ai);
        }
    }
    let mut st = ParameterState { beta: state.beta.clone(), theta, a, alpha: 0.0 };
    st.alpha = st.mean_a();
    st
}

/// Exact leave-one-curve-out score by refitting without each curve. `init`
/// seeds every refit (restricted to the remaining curves) and supplies the
/// initial conditions when they are known.
pub fn exact_cv(
    ds: &Dataset,
    basis: &SplineBasis,
    b: &PenaltyMatrix,
    pen: &PenaltySettings,
    opts: &FitOptions,
    init: Option<&ParameterState>,
    max_measurements: usize,
) -> Result<CVReport> {
    if ds.n_measurements() > max_measurements {
        return Err(Error::InvalidArgument(format!(
            "exact CV refits are limited to {max_measurements} measurements, dataset has {}",
            ds.n_measurements()
        )));
    }
    let idx = ds.curve_indices();
    if idx.len() < 2 {
        return Err(Error::InvalidArgument("exact CV needs at least two curves".into()));
    }
    if pen.a_known && init.is_none() {
        return Err(Error::InvalidArgument("known initial conditions require an initial state".into()));
    }
    let opts = FitOptions { inference: false, ..*opts };
    let drops: Vec<Option<f64>> = idx
        .par_iter()
        .map(|&(i, l)| -> Result<Option<f64>> {
            let (sub, map) = ds.without_curve((i, l));
            let init_sub = init.map(|s| drop_state(s, (i, l), &map));
            let refit = fit(&sub, basis, b, pen, &opts, init_sub.as_ref())?;
            if !refit.converged {
                return Ok(None);
            }
            let theta = map[i].map_or(0.0, |k| refit.state.theta[k]);
            let g = GradientFunction::new(basis, &refit.state.beta)?;
            let curve = ds.curve((i, l));
            let cfg = opts.dynamics;
            let loss = if pen.a_known {
                let a = init.expect("checked above").a[i][l];
                sse(&curve.values, &eval_at_times(&solve_trajectory(&g, a, theta, &cfg)?, &g, &curve.times)?)
            } else {
                let a0 = init.map_or(curve.values[0], |s| s.a[i][l]);
                ridge_initial_condition(
                    &g,
                    theta,
                    &curve.times,
                    &curve.values,
                    refit.penalties.lambda1,
                    refit.state.alpha,
                    a0,
                    &cfg,
                )?
                .1
            };
            Ok(Some(loss))
        })
        .collect::<Result<_>>()?;

    let mut per_curve = Vec::new();
    let mut flagged = Vec::new();
    for (&ix, d) in idx.iter().zip(&drops) {
        match d {
            Some(v) => per_curve.push(curve_score(ds, ix, *v)),
            None => flagged.push(ix),
        }
    }
    let mut warnings = Vec::new();
    if !flagged.is_empty() {
        warnings.push(format!("{} refits did not converge and are excluded", flagged.len()));
    }
    Ok(CVReport {
        score: per_curve.iter().map(|c| c.contribution).sum(),
        per_curve,
        model_desc: ModelDesc::new(basis.spec(), b, *pen),
        degraded: 0,
        flagged,
        warnings,
    })
}

/// One model in a selection run.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub label: String,
    pub basis: SplineBasis,
    pub penalty: PenaltyMatrix,
}

impl Candidate {
    /// Candidate with the flatness penalty `λ_R ∫_A^{2A} (g′)²` when
    /// `flatness = Some((A, λ_R))`, otherwise unpenalized.
    pub fn new(label: impl Into<String>, basis: SplineBasis, flatness: Option<(f64, f64)>) -> Result<Self> {
        let penalty = match flatness {
            Some((a, lr)) => build_flatness_penalty(&basis, a, lr, 8)?,
            None => PenaltyMatrix::zeros(basis.dim()),
        };
        Ok(Candidate { label: label.into(), basis, penalty })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedModel {
    /// 1-based; non-convergent candidates come last.
    pub rank: usize,
    pub label: String,
    pub converged: bool,
    pub score: Option<f64>,
    pub report: Option<CVReport>,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

/// Fits every candidate from the default initialization (with `known_a`
/// substituted when given) and ranks by approximate CV.
pub fn select_model(
    ds: &Dataset,
    candidates: &[Candidate],
    pen: &PenaltySettings,
    opts: &FitOptions,
    known_a: Option<&[Vec<f64>]>,
) -> Result<Vec<RankedModel>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate models".into()));
    }
    if pen.a_known && known_a.is_none() {
        return Err(Error::InvalidArgument("known initial conditions were not supplied".into()));
    }
    let mut models: Vec<RankedModel> = candidates
        .par_iter()
        .map(|c| {
            let run = || -> Result<(FitResult, CVReport)> {
                let mut init = ParameterState::initial(ds, c.basis.dim());
                if let Some(a) = known_a {
                    init.a = a.to_vec();
                    init.alpha = init.mean_a();
                }
                let f = fit(ds, &c.basis, &c.penalty, pen, opts, Some(&init))?;
                let r = approx_cv(ds, &f, &c.basis, &c.penalty)?;
                Ok((f, r))
            };
            match run() {
                Ok((f, r)) => RankedModel {
                    rank: 0,
                    label: c.label.clone(),
                    converged: f.converged,
                    score: f.converged.then_some(r.score),
                    report: Some(r),
                    fit: Some(f),
                    error: None,
                },
                Err(e) => RankedModel {
                    rank: 0,
                    label: c.label.clone(),
                    converged: false,
                    score: None,
                    report: None,
                    fit: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    if models.iter().all(|m| !m.converged) {
        return Err(Error::NoConvergence);
    }
    // stable: ties and non-convergent models keep candidate order
    models.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (k, m) in models.iter_mut().enumerate() {
        m.rank = k + 1;
    }
    Ok(models)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            _ => Err(Error::InvalidArgument(format!("unknown criterion {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "knot", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Linear,
    Quadratic,
    Cubic,
    /// `(x − k)₊³`
    Knot(f64),
}

impl Term {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Linear => x,
            Term::Quadratic => x * x,
            Term::Cubic => x * x * x,
            Term::Knot(k) => (x - k).max(0.0).powi(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseResult {
    /// Forced terms first, then selected terms in order of entry.
    pub terms: Vec<Term>,
    pub coefficients: Vec<f64>,
    pub selected_knots: Vec<f64>,
    /// Number of terms chosen by the search (forced terms excluded).
    pub n_selected: usize,
    pub criterion: Criterion,
    pub criterion_value: f64,
    pub n_points: usize,
}

impl StepwiseResult {
    /// The crude regression estimate of `g`.
    pub fn g(&self, x: f64) -> f64 {
        self.terms.iter().zip(&self.coefficients).map(|(t, c)| c * t.eval(x)).sum()
    }
}

/// Rescaled divided differences `e^{−θ_i}(Y_{j+1} − Y_j)/(t_{j+1} − t_j)`
/// against midpoints `(Y_{j+1} + Y_j)/2`, pooled over curves.
pub fn empirical_derivatives(ds: &Dataset, theta0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if theta0.len() != ds.n_subjects() {
        return Err(Error::InvalidArgument(format!(
            "theta0 has length {} but there are {} subjects",
            theta0.len(),
            ds.n_subjects()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ((i, _), c) in ds.curves() {
        if c.len() < 2 {
            return Err(Error::Data(format!("curve {} of subject {} has fewer than 2 measurements", c.id, ds.subjects[i].id)));
        }
        let scale = (-theta0[i]).exp();
        for j in 0..c.len() - 1 {
            xs.push(0.5 * (c.values[j + 1] + c.values[j]));
            ys.push(scale * (c.values[j + 1] - c.values[j]) / (c.times[j + 1] - c.times[j]));
        }
    }
    Ok((xs, ys))
}

/// Least-squares fit of `ys` on `terms`; `None` if the design is rank deficient.
fn ls_fit(terms: &[Term], xs: &[f64], ys: &[f64]) -> Option<(Vec<f64>, f64)> {
    let p = terms.len();
    if p == 0 {
        return Some((Vec::new(), ys.iter().map(|y| y * y).sum()));
    }
    let x = DMatrix::from_fn(xs.len(), p, |r, c| terms[c].eval(xs[r]));
    let y = DVector::from_column_slice(ys);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || svd.singular_values.min() <= 1e-10 * smax {
        return None;
    }
    let coef = svd.solve(&y, 0.0).ok()?;
    let rss = (y - x * &coef).norm_squared();
    Some((coef.iter().copied().collect(), rss))
}

/// Forward stepwise selection over `{x², x³, (x − x_k)₊³}` on the rescaled
/// empirical derivatives. With `intercept`, `1` and `x` are forced in.
pub fn stepwise_knot_candidates(
    ds: &Dataset,
    theta0: &[f64],
    candidate_knots: &[f64],
    criterion: Criterion,
    intercept: bool,
) -> Result<StepwiseResult> {
    let (xs, ys) = empirical_derivatives(ds, theta0)?;
    let n = xs.len();
    let mut distinct = xs.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let forced: Vec<Term> = if intercept { vec![Term::Intercept, Term::Linear] } else { Vec::new() };
    if distinct.len() <= forced.len() {
        return Err(Error::Data(format!(
            "{} distinct abscissas cannot support {} forced terms",
            distinct.len(),
            forced.len()
        )));
    }
    let floor = 1e-12 * ys.iter().map(|y| y * y).sum::<f64>().max(f64::MIN_POSITIVE);
    let per_term = match criterion {
        Criterion::Aic => 2.0,
        Criterion::Bic => (n as f64).ln(),
    };
    let score = |rss: f64, k: usize| n as f64 * (rss.max(floor) / n as f64).ln() + per_term * k as f64;

    let mut terms = forced.clone();
    let (mut coef, rss) =
        ls_fit(&terms, &xs, &ys).ok_or_else(|| Error::Singular("forced stepwise terms are collinear".into()))?;
    let mut best = score(rss, terms.len());
    let mut pool: Vec<Term> = vec![Term::Quadratic, Term::Cubic];
    pool.extend(candidate_knots.iter().map(|&k| Term::Knot(k)));
    loop {
        if terms.len() + 1 >= distinct.len() {
            break;
        }
        let mut choice: Option<(usize, f64, Vec<f64>)> = None;
        for (k, t) in pool.iter().enumerate() {
            let mut trial = terms.clone();
            trial.push(*t);
            if let Some((c, r)) = ls_fit(&trial, &xs, &ys) {
                let s = score(r, trial.len());
                if s < best && choice.as_ref().is_none_or(|(_, bs, _)| s < *bs) {
                    choice = Some((k, s, c));
                }
            }
        }
        match choice {
            Some((k, s, c)) => {
                terms.push(pool.remove(k));
                best = s;
                coef = c;
            }
            None => break,
        }
    }
    let selected_knots = terms
        .iter()
        .filter_map(|t| if let Term::Knot(k) = t { Some(*k) } else { None })
        .collect();
    Ok(StepwiseResult {
        n_selected: terms.len() - forced.len(),
        terms,
        coefficients: coef,
        selected_knots,
        criterion,
        criterion_value: best,
        n_points: n,
    })
}
