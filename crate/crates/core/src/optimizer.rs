//! Block Levenberg–Marquardt sweeps (β, then θ, then a) followed by a joint
//! Gauss–Newton polish.
//!
//! Each sweep linearizes the trajectories around the current estimates:
//!
//! - β: `[JᵀJ + λ₃ diag(JᵀJ) + B] δ = Jᵀε̃ − Bβ*`, with `λ₃ = λ₃⁰ / j` on
//!   sweep `j`, inflated tenfold whenever the step would raise the objective;
//! - θ: per subject `(JᵢᵀJᵢ + λ₂) δᵢ = Jᵢᵀε̃ᵢ − λ₂θᵢ*`, then re-centred to mean
//!   zero along the scale alias `θ − c`, `β e^c`, which leaves every
//!   trajectory unchanged;
//! - a: per curve `(JᵀJ + λ₁) δ = Jᵀε̃ + λ₁(α* − a*)`.
//!
//! θ and a steps that raise the objective are halved until they do not.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, PenaltyMatrix, SplineBasis};
use crate::data::{Dataset, ParameterState, PenaltySettings};
use crate::dynamics::{
    beta_closed_form_at_times, closed_form_ok, eval_at_times, sensitivities_at_times, sensitivities_variational,
    solve_trajectory, CurveSolution, DynamicsConfig, GradientFunction,
};
use crate::error::{Error, Result};
use crate::inference::{info_from_blocks, InfoMatrices};
use crate::objective::{loss_from_residuals, tag_curve, update_variances, LossBreakdown, Ragged, VarianceEstimates};

const MAX_HALVINGS: usize = 10;
const MAX_INFLATIONS: usize = 10;

/// Sensitivities of the fitted values at the measurement times, stacked in
/// `(i, l, j)` order, with the matching residuals.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    /// `m·· × M`; zero columns when only θ and a sensitivities were assembled.
    pub j_beta: DMatrix<f64>,
    pub j_theta: Vec<f64>,
    pub j_a: Vec<f64>,
    pub eps: Vec<f64>,
    pub curve_rows: Vec<Range<usize>>,
    pub subject_rows: Vec<Range<usize>>,
    pub curve_subject: Vec<usize>,
    /// Curves whose sensitivities came from the variational equations.
    pub variational: usize,
    /// Curves whose trajectory left the basis support.
    pub left_support: usize,
}

impl JacobianBlocks {
    pub fn j_theta_i(&self, i: usize) -> &[f64] {
        &self.j_theta[self.subject_rows[i].clone()]
    }

    pub fn eps_i(&self, i: usize) -> &[f64] {
        &self.eps[self.subject_rows[i].clone()]
    }

    pub fn j_a_il(&self, c: usize) -> &[f64] {
        &self.j_a[self.curve_rows[c].clone()]
    }

    pub fn eps_il(&self, c: usize) -> &[f64] {
        &self.eps[self.curve_rows[c].clone()]
    }

    pub fn residuals(&self) -> Ragged {
        self.curve_rows.iter().map(|r| self.eps[r.clone()].to_vec()).collect()
    }

    pub fn sse(&self) -> f64 {
        self.eps.iter().map(|e| e * e).sum()
    }
}

struct CurveEval {
    fitted: Vec<f64>,
    s_a: Vec<f64>,
    s_theta: Vec<f64>,
    s_beta: Vec<f64>,
    variational: bool,
    left_support: bool,
}

fn eval_curve(
    sol: &CurveSolution,
    g: &GradientFunction,
    times: &[f64],
    cfg: &DynamicsConfig,
    with_beta: bool,
) -> Result<CurveEval> {
    let fitted = eval_at_times(sol, g, times)?;
    if closed_form_ok(sol, cfg).is_ok() {
        let scale = sol.theta.exp();
        let g0 = g.value(sol.initial());
        let gf: Vec<f64> = fitted.iter().map(|&x| g.value(x)).collect();
        let s_a = gf.iter().map(|v| v / g0).collect();
        let s_theta = times.iter().zip(&gf).map(|(&t, &v)| scale * t * v).collect();
        let s_beta = if with_beta { beta_closed_form_at_times(sol, g, &fitted, cfg)? } else { Vec::new() };
        return Ok(CurveEval { fitted, s_a, s_theta, s_beta, variational: false, left_support: sol.left_support });
    }
    let grid = sensitivities_variational(sol, g, cfg)?;
    let ts = sensitivities_at_times(sol, &grid, g, times)?;
    Ok(CurveEval {
        fitted,
        s_a: ts.a,
        s_theta: ts.theta,
        s_beta: if with_beta { ts.beta } else { Vec::new() },
        variational: true,
        left_support: sol.left_support,
    })
}

/// Fitted values and `∂X/∂a` of one curve.
pub(crate) fn curve_values_and_sa(
    g: &GradientFunction,
    a: f64,
    theta: f64,
    times: &[f64],
    cfg: &DynamicsConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sol = solve_trajectory(g, a, theta, cfg)?;
    let ev = eval_curve(&sol, g, times, cfg, false)?;
    Ok((ev.fitted, ev.s_a))
}

/// Trajectories of every curve, in `(i, l)` order.
pub(crate) fn solve_all(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<Vec<CurveSolution>> {
    ds.curve_indices()
        .par_iter()
        .map(|&(i, l)| solve_trajectory(g, state.a[i][l], state.theta[i], cfg).map_err(|e| tag_curve(e, (i, l))))
        .collect()
}

fn assemble(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
    with_beta: bool,
) -> Result<JacobianBlocks> {
    let sols = solve_all(ds, state, g, cfg)?;
    assemble_from(ds, &sols, g, cfg, with_beta)
}

/// Jacobian blocks from already integrated trajectories.
pub(crate) fn assemble_from(
    ds: &Dataset,
    sols: &[CurveSolution],
    g: &GradientFunction,
    cfg: &DynamicsConfig,
    with_beta: bool,
) -> Result<JacobianBlocks> {
    let idx = ds.curve_indices();
    let evals: Vec<CurveEval> = idx
        .par_iter()
        .zip(sols.par_iter())
        .map(|(&(i, l), sol)| {
            eval_curve(sol, g, &ds.curve((i, l)).times, cfg, with_beta).map_err(|e| tag_curve(e, (i, l)))
        })
        .collect::<Result<_>>()?;
    let rows = ds.n_measurements();
    let m = if with_beta { g.dim() } else { 0 };
    let mut out = JacobianBlocks {
        j_beta: DMatrix::zeros(rows, m),
        j_theta: Vec::with_capacity(rows),
        j_a: Vec::with_capacity(rows),
        eps: Vec::with_capacity(rows),
        curve_rows: Vec::with_capacity(idx.len()),
        subject_rows: Vec::with_capacity(ds.n_subjects()),
        curve_subject: Vec::with_capacity(idx.len()),
        variational: 0,
        left_support: 0,
    };
    let mut r = 0;
    let mut subject_start = 0;
    for (&(i, l), ev) in idx.iter().zip(&evals) {
        if l == 0 && i > 0 {
            out.subject_rows.push(subject_start..r);
            subject_start = r;
        }
        let c = ds.curve((i, l));
        let start = r;
        for j in 0..c.len() {
            out.j_theta.push(ev.s_theta[j]);
            out.j_a.push(ev.s_a[j]);
            out.eps.push(c.values[j] - ev.fitted[j]);
            for k in 0..m {
                out.j_beta[(r, k)] = ev.s_beta[j * m + k];
            }
            r += 1;
        }
        out.curve_rows.push(start..r);
        out.curve_subject.push(i);
        out.variational += ev.variational as usize;
        out.left_support += ev.left_support as usize;
    }
    out.subject_rows.push(subject_start..r);
    Ok(out)
}

/// All sensitivity blocks and residuals at `state`.
pub fn assemble_jacobians(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<JacobianBlocks> {
    assemble(ds, state, g, cfg, true)
}

/// θ and a blocks only; cheaper because the closed forms need no quadrature.
pub fn assemble_theta_a(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<JacobianBlocks> {
    assemble(ds, state, g, cfg, false)
}

/// Solves the damped β normal equations; returns `β* + δ`.
pub fn lm_step_beta(blocks: &JacobianBlocks, b: &PenaltyMatrix, lambda3: f64, beta_star: &[f64]) -> Result<Vec<f64>> {
    beta_step(blocks, b, lambda3, beta_star, false)
}

/// As [`lm_step_beta`], but a rank-deficient system — coefficients whose
/// basis functions no trajectory reaches — gets the minimum-norm step.
pub fn lm_step_beta_min_norm(
    blocks: &JacobianBlocks,
    b: &PenaltyMatrix,
    lambda3: f64,
    beta_star: &[f64],
) -> Result<Vec<f64>> {
    beta_step(blocks, b, lambda3, beta_star, true)
}

fn beta_step(
    blocks: &JacobianBlocks,
    b: &PenaltyMatrix,
    lambda3: f64,
    beta_star: &[f64],
    min_norm: bool,
) -> Result<Vec<f64>> {
    if !(lambda3 >= 0.0) {
        return Err(Error::InvalidArgument("lambda3 must be nonnegative".into()));
    }
    let j = &blocks.j_beta;
    let jtj = j.tr_mul(j);
    let mut lhs = &jtj + &b.matrix;
    for k in 0..lhs.nrows() {
        lhs[(k, k)] += lambda3 * jtj[(k, k)];
    }
    let eps = DVector::from_column_slice(&blocks.eps);
    let beta = DVector::from_column_slice(beta_star);
    let rhs = j.tr_mul(&eps) - &b.matrix * &beta;
    let delta = solve_rank_checked(lhs, rhs, min_norm)?;
    Ok((beta + delta).iter().copied().collect())
}

fn solve_rank_checked(lhs: DMatrix<f64>, rhs: DVector<f64>, min_norm: bool) -> Result<DVector<f64>> {
    let svd = lhs.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if min_norm && smax > 0.0 {
        return svd.solve(&rhs, 1e-13 * smax).map_err(|e| Error::Singular(e.to_string()));
    }
    if !(smax > 0.0) || smin <= 1e-13 * smax {
        return Err(Error::Singular(format!(
            "normal equations are rank deficient (singular values {smin:.3e} .. {smax:.3e})"
        )));
    }
    svd.solve(&rhs, 0.0).map_err(|e| Error::Singular(e.to_string()))
}

/// Per-subject scalar θ updates before re-centring.
pub fn theta_increments(blocks: &JacobianBlocks, lambda2: f64, theta_star: &[f64]) -> Result<Vec<f64>> {
    (0..theta_star.len())
        .map(|i| {
            let j = blocks.j_theta_i(i);
            let e = blocks.eps_i(i);
            let jtj: f64 = j.iter().map(|v| v * v).sum();
            let jte: f64 = j.iter().zip(e).map(|(a, b)| a * b).sum();
            let den = jtj + lambda2;
            if !(den > 0.0) {
                return Err(Error::Singular(format!("subject {i}: JᵀJ + λ₂ = 0")));
            }
            Ok((jte - lambda2 * theta_star[i]) / den)
        })
        .collect()
}

/// θ update followed by re-centring; returns the new θ (mean zero) and the
/// mean that was removed.
pub fn lm_step_theta(blocks: &JacobianBlocks, lambda2: f64, theta_star: &[f64]) -> Result<(Vec<f64>, f64)> {
    let d = theta_increments(blocks, lambda2, theta_star)?;
    let mut th: Vec<f64> = theta_star.iter().zip(&d).map(|(t, d)| t + d).collect();
    let shift = recenter(&mut th);
    Ok((th, shift))
}

fn recenter(theta: &mut [f64]) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    let m = theta.iter().sum::<f64>() / theta.len() as f64;
    theta.iter_mut().for_each(|t| *t -= m);
    m
}

/// Removes the θ mean and compensates through `β ← e^c β` so that the
/// trajectories are unchanged.
fn recenter_compensated(state: &mut ParameterState) {
    let c = recenter(&mut state.theta);
    if c != 0.0 {
        let f = c.exp();
        state.beta.iter_mut().for_each(|b| *b *= f);
    }
}

/// Per-curve a increments against `α* = mean(a*)`.
pub fn a_increments(blocks: &JacobianBlocks, lambda1: f64, state: &ParameterState) -> Result<Vec<f64>> {
    let alpha = state.mean_a();
    let a = state.a_flat();
    (0..a.len())
        .map(|c| {
            let j = blocks.j_a_il(c);
            let e = blocks.eps_il(c);
            let jtj: f64 = j.iter().map(|v| v * v).sum();
            let jte: f64 = j.iter().zip(e).map(|(a, b)| a * b).sum();
            let den = jtj + lambda1;
            if !(den > 0.0) {
                return Err(Error::Singular(format!("curve {c}: JᵀJ + λ₁ = 0")));
            }
            Ok((jte + lambda1 * (alpha - a[c])) / den)
        })
        .collect()
}

/// a update; returns the new initial conditions and their mean.
pub fn lm_step_a(blocks: &JacobianBlocks, lambda1: f64, state: &ParameterState) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = a_increments(blocks, lambda1, state)?;
    let mut out = state.a.clone();
    let mut k = 0;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v += d[k];
            k += 1;
        }
    }
    let st = ParameterState { a: out, ..state.clone() };
    let alpha = st.mean_a();
    Ok((st.a, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_lm_iters: usize,
    pub max_nr_iters: usize,
    pub tol_rel_obj: f64,
    pub tol_param: f64,
    /// Re-estimate λ₁, λ₂ before every LM sweep.
    pub adaptive_lm: bool,
    /// Re-estimate λ₁, λ₂ before every Newton step.
    pub adaptive_nr: bool,
    pub dynamics: DynamicsConfig,
    /// Compute `Wn` at the final estimate.
    pub inference: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_lm_iters: 200,
            max_nr_iters: 5,
            tol_rel_obj: 1e-8,
            tol_param: 1e-6,
            adaptive_lm: false,
            adaptive_nr: true,
            dynamics: DynamicsConfig::default(),
            inference: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel_obj > 0.0) || !(self.tol_param > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        self.dynamics.steps().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Lm,
    Nr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: Phase,
    pub iter: usize,
    pub loss: LossBreakdown,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Largest absolute parameter change in this iteration.
    pub step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub basis: BasisSpec,
    pub state: ParameterState,
    /// Penalties in force at the end (after any adaptive updates).
    pub penalties: PenaltySettings,
    pub variances: Option<VarianceEstimates>,
    /// `SSE / (m·· − N· − n − M)`, used for standard errors.
    pub sigma_eps2: f64,
    pub loss: LossBreakdown,
    pub loss_trace: Vec<TraceEntry>,
    pub converged: bool,
    pub n_lm: usize,
    pub n_nr: usize,
    pub info: Option<InfoMatrices>,
    pub diagnostics: Vec<String>,
    pub dynamics: DynamicsConfig,
    #[serde(skip)]
    pub blocks: Option<JacobianBlocks>,
}

impl FitResult {
    pub fn gradient(&self) -> Result<GradientFunction> {
        let basis = SplineBasis::try_from(self.basis.clone())?;
        GradientFunction::new(&basis, &self.state.beta)
    }

    pub fn wn(&self) -> Option<&DMatrix<f64>> {
        self.info.as_ref().and_then(|i| i.wn.as_ref())
    }
}

/// Evaluates the objective; divergence counts as `+∞` so that line searches
/// reject the step.
struct Evaluator<'a> {
    ds: &'a Dataset,
    basis: &'a SplineBasis,
    b: &'a PenaltyMatrix,
    cfg: DynamicsConfig,
}

impl Evaluator<'_> {
    fn gradient(&self, state: &ParameterState) -> Result<GradientFunction> {
        GradientFunction::new(self.basis, &state.beta)
    }

    /// Objective, light Jacobian and trajectories at `state`; `None` when the
    /// candidate is non-finite or diverges.
    fn eval(&self, state: ParameterState, pen: &PenaltySettings) -> Result<Option<Progress>> {
        if state.beta.iter().chain(&state.theta).chain(state.a.iter().flatten()).any(|v| !v.is_finite()) {
            return Ok(None);
        }
        let g = self.gradient(&state)?;
        let attempt = solve_all(self.ds, &state, &g, &self.cfg)
            .and_then(|sols| assemble_from(self.ds, &sols, &g, &self.cfg, false).map(|b| (sols, b)));
        match attempt {
            Ok((sols, blocks)) => {
                let loss = loss_from_residuals(&blocks.residuals(), &state, pen, self.b);
                Ok(Some(Progress { state, loss, blocks, sols }))
            }
            Err(Error::Diverged { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn full_blocks(&self, cur: &Progress) -> Result<JacobianBlocks> {
        assemble_from(self.ds, &cur.sols, &self.gradient(&cur.state)?, &self.cfg, true)
    }

    fn start(&self, state: ParameterState, pen: &PenaltySettings) -> Result<Progress> {
        self.eval(state, pen)?.ok_or(Error::Diverged { curve: None, t: f64::NAN, bound: self.cfg.blowup_bound })
    }
}

fn note(diagnostics: &mut Vec<String>, msg: &str) {
    if !diagnostics.iter().any(|d| d == msg) {
        diagnostics.push(msg.to_string());
    }
}

fn max_change(a: &ParameterState, b: &ParameterState) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    d(&a.beta, &b.beta).max(d(&a.theta, &b.theta)).max(d(&a.a_flat(), &b.a_flat()))
}

fn rel_change(old: f64, new: f64) -> f64 {
    (old - new).abs() / old.abs().max(1e-300)
}

struct Progress {
    state: ParameterState,
    loss: LossBreakdown,
    /// θ and a sensitivities with residuals at `state`.
    blocks: JacobianBlocks,
    sols: Vec<CurveSolution>,
}

/// One β → θ → a sweep. Returns the number of accepted blocks.
fn lm_sweep(
    ev: &Evaluator,
    cur: &mut Progress,
    pen: &PenaltySettings,
    lambda3: f64,
    diagnostics: &mut Vec<String>,
) -> Result<usize> {
    let mut accepted = 0;

    let blocks = ev.full_blocks(cur)?;
    let mut lam = lambda3;
    for _ in 0..MAX_INFLATIONS {
        let beta = match lm_step_beta(&blocks, ev.b, lam, &cur.state.beta) {
            Ok(b) => b,
            Err(Error::Singular(_)) => {
                note(diagnostics, "β block rank deficient; minimum-norm steps used");
                lm_step_beta_min_norm(&blocks, ev.b, lam, &cur.state.beta)?
            }
            Err(e) => return Err(e),
        };
        let cand = ParameterState { beta, ..cur.state.clone() };
        if let Some(next) = ev.eval(cand, pen)? {
            if next.loss.total <= cur.loss.total {
                *cur = next;
                accepted += 1;
                break;
            }
        }
        lam = lam.max(1e-6) * 10.0;
    }

    let d = theta_increments(&cur.blocks, pen.lambda2, &cur.state.theta)?;
    if line_search(ev, cur, pen, |st, s| {
        st.theta.iter_mut().zip(&d).for_each(|(t, d)| *t += s * d);
        recenter_compensated(st);
    })? {
        accepted += 1;
    }

    if !pen.a_known {
        let d = a_increments(&cur.blocks, pen.lambda1, &cur.state)?;
        if line_search(ev, cur, pen, |st, s| {
            st.a.iter_mut().flatten().zip(&d).for_each(|(a, d)| *a += s * d);
            st.alpha = st.mean_a();
        })? {
            accepted += 1;
        }
    }
    Ok(accepted)
}

/// Tries `apply(state, s)` for `s = 1, 1/2, …`; keeps the first candidate
/// that does not raise the objective.
fn line_search(
    ev: &Evaluator,
    cur: &mut Progress,
    pen: &PenaltySettings,
    apply: impl Fn(&mut ParameterState, f64),
) -> Result<bool> {
    let mut s = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let mut cand = cur.state.clone();
        apply(&mut cand, s);
        if let Some(next) = ev.eval(cand, pen)? {
            if next.loss.total <= cur.loss.total {
                *cur = next;
                return Ok(true);
            }
        }
        s *= 0.5;
    }
    Ok(false)
}

/// Gauss–Newton system over `(β, θ[, a])`: half-Hessian and descent direction
/// of the objective.
fn newton_system(
    blocks: &JacobianBlocks,
    state: &ParameterState,
    pen: &PenaltySettings,
    b: &PenaltyMatrix,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = blocks.j_beta.ncols();
    let n = state.theta.len();
    let nc = blocks.curve_rows.len();
    let na = if pen.a_known { 0 } else { nc };
    let p = m + n + na;
    let mut h = DMatrix::zeros(p, p);
    let mut grad = DVector::zeros(p);
    h.view_mut((0, 0), (m, m)).copy_from(&(blocks.j_beta.tr_mul(&blocks.j_beta) + &b.matrix));
    let eps = DVector::from_column_slice(&blocks.eps);
    let gb = blocks.j_beta.tr_mul(&eps) - &b.matrix * DVector::from_column_slice(&state.beta);
    grad.rows_mut(0, m).copy_from(&gb);
    for (c, rows) in blocks.curve_rows.iter().enumerate() {
        let i = blocks.curve_subject[c];
        let ti = m + i;
        let ac = m + n + c;
        for r in rows.clone() {
            let (jt, ja, e) = (blocks.j_theta[r], blocks.j_a[r], blocks.eps[r]);
            for k in 0..m {
                let jb = blocks.j_beta[(r, k)];
                h[(k, ti)] += jb * jt;
                if na > 0 {
                    h[(k, ac)] += jb * ja;
                }
            }
            h[(ti, ti)] += jt * jt;
            grad[ti] += jt * e;
            if na > 0 {
                h[(ti, ac)] += jt * ja;
                h[(ac, ac)] += ja * ja;
                grad[ac] += ja * e;
            }
        }
    }
    for i in 0..n {
        h[(m + i, m + i)] += pen.lambda2;
        grad[m + i] -= pen.lambda2 * state.theta[i];
    }
    if na > 0 {
        let a = state.a_flat();
        let abar = state.mean_a();
        let w = pen.lambda1 / na as f64;
        for c in 0..na {
            grad[m + n + c] -= pen.lambda1 * (a[c] - abar);
            for d in 0..na {
                h[(m + n + c, m + n + d)] += if c == d { pen.lambda1 - w } else { -w };
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            h[(r, c)] = h[(c, r)];
        }
    }
    (h, grad)
}

fn apply_newton(state: &mut ParameterState, delta: &DVector<f64>, s: f64, a_known: bool) {
    let m = state.beta.len();
    let n = state.theta.len();
    for k in 0..m {
        state.beta[k] += s * delta[k];
    }
    for i in 0..n {
        state.theta[i] += s * delta[m + i];
    }
    if !a_known {
        let mut c = m + n;
        for v in state.a.iter_mut().flatten() {
            *v += s * delta[c];
            c += 1;
        }
        state.alpha = state.mean_a();
    }
    recenter_compensated(state);
}

/// Outcome of the polish phase.
#[derive(Debug, Clone)]
pub struct PolishOutcome {
    pub state: ParameterState,
    pub loss: LossBreakdown,
    pub penalties: PenaltySettings,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    pub diagnostics: Vec<String>,
}

/// Gauss–Newton steps on the joint objective with step halving. An
/// indefinite system triggers one extra LM sweep instead.
pub fn newton_polish(
    ds: &Dataset,
    state: &ParameterState,
    basis: &SplineBasis,
    pen: &PenaltySettings,
    b: &PenaltyMatrix,
    opts: &FitOptions,
) -> Result<PolishOutcome> {
    let ev = Evaluator { ds, basis, b, cfg: opts.dynamics };
    let cur = ev.start(state.clone(), pen)?;
    polish(&ev, cur, pen, opts).map(|(out, _)| out)
}

fn polish(ev: &Evaluator, mut cur: Progress, pen: &PenaltySettings, opts: &FitOptions) -> Result<(PolishOutcome, Progress)> {
    let (ds, basis, b) = (ev.ds, ev.basis, ev.b);
    let mut pen = *pen;
    let mut diagnostics = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    for it in 1..=opts.max_nr_iters {
        iters = it;
        if opts.adaptive_nr {
            adapt(ds, &mut cur, &mut pen, b, basis.dim(), &mut diagnostics);
        }
        let before = cur.state.clone();
        let old = cur.loss.total;
        let blocks = ev.full_blocks(&cur)?;
        let (h, grad) = newton_system(&blocks, &cur.state, &pen, b);
        let Some(ch) = h.cholesky() else {
            note(&mut diagnostics, "Newton system not positive definite; LM sweep used instead");
            lm_sweep(ev, &mut cur, &pen, 0.0, &mut diagnostics)?;
            let step = max_change(&before, &cur.state);
            trace.push(TraceEntry {
                phase: Phase::Nr,
                iter: it,
                loss: cur.loss,
                lambda1: pen.lambda1,
                lambda2: pen.lambda2,
                step,
            });
            if rel_change(old, cur.loss.total) < opts.tol_rel_obj && step < opts.tol_param {
                converged = true;
                break;
            }
            continue;
        };
        let delta = ch.solve(&grad);
        let predicted = grad.dot(&delta);
        let a_known = pen.a_known;
        let moved = line_search(ev, &mut cur, &pen, |st, s| apply_newton(st, &delta, s, a_known))?;
        let step = max_change(&before, &cur.state);
        trace.push(TraceEntry {
            phase: Phase::Nr,
            iter: it,
            loss: cur.loss,
            lambda1: pen.lambda1,
            lambda2: pen.lambda2,
            step,
        });
        let small_gain = predicted <= opts.tol_rel_obj * old.abs().max(1e-300);
        if (rel_change(old, cur.loss.total) < opts.tol_rel_obj && step < opts.tol_param) || (!moved && small_gain) {
            converged = true;
            break;
        }
        if !moved {
            diagnostics.push(format!("Newton step {it}: line search failed"));
            break;
        }
    }
    let out = PolishOutcome {
        state: cur.state.clone(),
        loss: cur.loss,
        penalties: pen,
        iterations: iters,
        converged,
        trace,
        diagnostics,
    };
    Ok((out, cur))
}

/// Re-estimates λ₁, λ₂ from the current residuals; on failure keeps the
/// previous values and records why (once per message).
fn adapt(
    ds: &Dataset,
    cur: &mut Progress,
    pen: &mut PenaltySettings,
    b: &PenaltyMatrix,
    m_basis: usize,
    diagnostics: &mut Vec<String>,
) {
    match update_variances(ds, &cur.state, &cur.blocks.residuals(), m_basis, pen.a_known) {
        Ok(v) => {
            if !pen.a_known {
                pen.lambda1 = v.lambda1;
            }
            pen.lambda2 = v.lambda2;
            cur.loss = loss_from_residuals(&cur.blocks.residuals(), &cur.state, pen, b);
        }
        Err(e) => {
            note(diagnostics, &format!("adaptive penalties unavailable, keeping previous: {e}"));
        }
    }
}

/// Fits the model: LM sweeps to tolerance (or the iteration cap), then the
/// Newton polish. Non-convergence is reported, not raised.
pub fn fit(
    ds: &Dataset,
    basis: &SplineBasis,
    b: &PenaltyMatrix,
    pen: &PenaltySettings,
    opts: &FitOptions,
    init: Option<&ParameterState>,
) -> Result<FitResult> {
    pen.validate()?;
    opts.validate()?;
    let m = basis.dim();
    if b.dim() != m {
        return Err(Error::InvalidArgument(format!("penalty is {}×{}, basis has {m} functions", b.dim(), b.dim())));
    }
    let mut state = match init {
        Some(s) => s.clone(),
        None if pen.a_known => {
            return Err(Error::InvalidArgument("known initial conditions require an initial state".into()))
        }
        None => ParameterState::initial(ds, m),
    };
    state.check(ds, m)?;
    recenter_compensated(&mut state);
    state.alpha = state.mean_a();

    let ev = Evaluator { ds, basis, b, cfg: opts.dynamics };
    let mut pen_cur = *pen;
    let mut diagnostics = Vec::new();
    let mut cur = ev.start(state, &pen_cur)?;
    let mut trace = vec![TraceEntry {
        phase: Phase::Init,
        iter: 0,
        loss: cur.loss,
        lambda1: pen_cur.lambda1,
        lambda2: pen_cur.lambda2,
        step: 0.0,
    }];

    let mut lm_converged = false;
    let mut n_lm = 0;
    for j in 1..=opts.max_lm_iters {
        n_lm = j;
        if opts.adaptive_lm && j > 1 {
            adapt(ds, &mut cur, &mut pen_cur, b, m, &mut diagnostics);
        }
        let before = cur.state.clone();
        let old = cur.loss.total;
        let accepted = lm_sweep(&ev, &mut cur, &pen_cur, pen_cur.lambda3_0 / j as f64, &mut diagnostics)?;
        let step = max_change(&before, &cur.state);
        trace.push(TraceEntry {
            phase: Phase::Lm,
            iter: j,
            loss: cur.loss,
            lambda1: pen_cur.lambda1,
            lambda2: pen_cur.lambda2,
            step,
        });
        if rel_change(old, cur.loss.total) < opts.tol_rel_obj && step < opts.tol_param {
            lm_converged = true;
            break;
        }
        if accepted == 0 {
            diagnostics.push(format!("LM sweep {j}: no block improved the objective"));
            break;
        }
    }

    let mut converged = lm_converged;
    let mut n_nr = 0;
    if opts.max_nr_iters > 0 {
        let (out, next) = polish(&ev, cur, &pen_cur, opts)?;
        cur = next;
        n_nr = out.iterations;
        converged = out.converged;
        trace.extend(out.trace);
        diagnostics.extend(out.diagnostics);
        pen_cur = out.penalties;
    }

    let blocks = ev.full_blocks(&cur)?;
    if blocks.variational > 0 {
        diagnostics.push(format!("{} curves used variational sensitivities", blocks.variational));
    }
    if blocks.left_support > 0 {
        diagnostics.push(format!("{} trajectories left the basis support and froze", blocks.left_support));
    }
    let variances = match update_variances(ds, &cur.state, &blocks.residuals(), m, pen.a_known) {
        Ok(v) => Some(v),
        Err(e) => {
            diagnostics.push(format!("variance estimates unavailable: {e}"));
            None
        }
    };
    let dof = ds.residual_dof(m);
    let sigma_eps2 = if dof > 0 {
        blocks.sse() / dof as f64
    } else {
        diagnostics.push(format!("residual degrees of freedom {dof} ≤ 0; σ̂ε² uses m··"));
        blocks.sse() / ds.n_measurements() as f64
    };
    let info = if opts.inference {
        let info = info_from_blocks(&blocks, b, pen_cur.lambda2);
        if info.wn.is_none() {
            diagnostics.push(format!("Wn not available: Schur complement condition {:.3e}", info.condition));
        }
        if !pen.a_known {
            diagnostics.push("standard errors treat estimated initial conditions as known (approximate)".into());
        }
        Some(info)
    } else {
        None
    };
    Ok(FitResult {
        basis: basis.spec(),
        state: cur.state,
        penalties: pen_cur,
        variances,
        sigma_eps2,
        loss: cur.loss,
        loss_trace: trace,
        converged,
        n_lm,
        n_nr,
        info,
        diagnostics,
        dynamics: opts.dynamics,
        blocks: Some(blocks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Curve, Subject};
    use crate::objective::residuals;

    fn basis() -> SplineBasis {
        SplineBasis::uniform(3, vec![0.35, 0.6, 0.85, 1.1], 0).unwrap()
    }

    fn instance() -> (Dataset, ParameterState) {
        let ds = Dataset::new(vec![
            Subject {
                id: "1".into(),
                curves: vec![
                    Curve { id: "1".into(), times: vec![0.0, 0.4, 0.8], values: vec![0.3, 0.4, 0.6] },
                    Curve { id: "2".into(), times: vec![0.3, 0.9], values: vec![0.35, 0.7] },
                ],
            },
            Subject {
                id: "2".into(),
                curves: vec![Curve { id: "1".into(), times: vec![0.2, 0.5, 0.95], values: vec![0.3, 0.5, 0.8] }],
            },
        ])
        .unwrap();
        let st = ParameterState {
            beta: vec![0.1, 1.2, 1.6, 0.4],
            theta: vec![0.07, -0.07],
            a: vec![vec![0.25, 0.3], vec![0.22]],
            alpha: 0.77 / 3.0,
        };
        (ds, st)
    }

    #[test]
    fn constant_gradient_theta_column() {
        let b = SplineBasis::clamped(3, vec![0.5, 1.0], -1.0, 3.0, 0).unwrap();
        let g = GradientFunction::new(&b, &vec![0.4; b.dim()]).unwrap();
        let ds = Dataset::new(vec![Subject {
            id: "1".into(),
            curves: vec![Curve { id: "1".into(), times: vec![0.0, 0.3, 0.77], values: vec![0.0; 3] }],
        }])
        .unwrap();
        let st = ParameterState { beta: g.beta().to_vec(), theta: vec![0.2], a: vec![vec![0.25]], alpha: 0.25 };
        let blocks = assemble_jacobians(&ds, &st, &g, &DynamicsConfig::default()).unwrap();
        for (t, jt) in [0.0, 0.3, 0.77].iter().zip(&blocks.j_theta) {
            assert!((jt - 0.2f64.exp() * 0.4 * t).abs() < 1e-13);
        }
        assert_eq!(blocks.j_a[0], 1.0);
    }

    /// `Jᵀε̃` against central differences of `½ SSE`.
    #[test]
    fn gradient_matches_finite_differences() {
        let (ds, st) = instance();
        let cfg = DynamicsConfig::default();
        let g = GradientFunction::new(&basis(), &st.beta).unwrap();
        let blocks = assemble_jacobians(&ds, &st, &g, &cfg).unwrap();
        let half_sse = |s: &ParameterState| {
            let g = GradientFunction::new(&basis(), &s.beta).unwrap();
            0.5 * residuals(&ds, s, &g, &cfg).unwrap().iter().flatten().map(|e| e * e).sum::<f64>()
        };
        let eps = 1e-6;
        let check = |analytic: f64, perturb: &dyn Fn(&mut ParameterState, f64)| {
            let mut p = st.clone();
            let mut q = st.clone();
            perturb(&mut p, eps);
            perturb(&mut q, -eps);
            let fd = (half_sse(&p) - half_sse(&q)) / (2.0 * eps);
            assert!((fd + analytic).abs() <= 1e-4 * fd.abs().max(1e-8), "fd {fd} analytic {}", -analytic);
        };
        for k in 0..4 {
            let jte: f64 = (0..blocks.eps.len()).map(|r| blocks.j_beta[(r, k)] * blocks.eps[r]).sum();
            check(jte, &|s, d| s.beta[k] += d);
        }
        for i in 0..2 {
            let jte: f64 = blocks.j_theta_i(i).iter().zip(blocks.eps_i(i)).map(|(a, b)| a * b).sum();
            check(jte, &|s, d| s.theta[i] += d);
        }
        for (c, &(i, l)) in ds.curve_indices().iter().enumerate() {
            let jte: f64 = blocks.j_a_il(c).iter().zip(blocks.eps_il(c)).map(|(a, b)| a * b).sum();
            check(jte, &|s, d| s.a[i][l] += d);
        }
    }

    fn scalar_blocks(j: &[f64], e: &[f64]) -> JacobianBlocks {
        JacobianBlocks {
            j_beta: DMatrix::from_column_slice(j.len(), 1, j),
            j_theta: j.to_vec(),
            j_a: j.to_vec(),
            eps: e.to_vec(),
            curve_rows: vec![0..j.len()],
            subject_rows: vec![0..j.len()],
            curve_subject: vec![0],
            variational: 0,
            left_support: 0,
        }
    }

    #[test]
    fn scalar_steps_by_hand() {
        let (j, e) = ([0.5, 1.0, 2.0], [0.1, -0.2, 0.3]);
        let blocks = scalar_blocks(&j, &e);
        let (jtj, jte) = (5.25, 0.45);
        let b = PenaltyMatrix::explicit(DMatrix::from_element(1, 1, 0.3)).unwrap();
        let beta = lm_step_beta(&blocks, &b, 0.5, &[0.8]).unwrap();
        let want = 0.8 + (jte - 0.3 * 0.8) / (jtj * 1.5 + 0.3);
        assert!((beta[0] - want).abs() < 1e-14);

        let d = theta_increments(&blocks, 0.01, &[0.2]).unwrap();
        assert!((d[0] - (jte - 0.01 * 0.2) / (jtj + 0.01)).abs() < 1e-14);
        let (th, _) = lm_step_theta(&blocks, 0.01, &[0.2]).unwrap();
        assert_eq!(th, vec![0.0]);

        let st = ParameterState { beta: vec![1.0], theta: vec![0.0], a: vec![vec![0.3]], alpha: 0.3 };
        let (a, alpha) = lm_step_a(&blocks, 0.04, &st).unwrap();
        assert!((a[0][0] - (0.3 + jte / (jtj + 0.04))).abs() < 1e-14);
        assert_eq!(alpha, a[0][0]);
    }

    #[test]
    fn zero_residual_steps_are_null() {
        let blocks = scalar_blocks(&[0.5, 1.0], &[0.0, 0.0]);
        assert_eq!(lm_step_beta(&blocks, &PenaltyMatrix::zeros(1), 0.3, &[0.7]).unwrap(), vec![0.7]);
        assert_eq!(lm_step_theta(&blocks, 0.01, &[0.0]).unwrap().0, vec![0.0]);
        let st = ParameterState { beta: vec![1.0], theta: vec![0.0], a: vec![vec![0.3]], alpha: 0.3 };
        assert_eq!(lm_step_a(&blocks, 0.0, &st).unwrap().0, vec![vec![0.3]]);
    }

    #[test]
    fn damping_shrinks_beta_step() {
        let (ds, st) = instance();
        let g = GradientFunction::new(&basis(), &st.beta).unwrap();
        let blocks = assemble_jacobians(&ds, &st, &g, &DynamicsConfig::default()).unwrap();
        let b = PenaltyMatrix::zeros(4);
        let jtj = blocks.j_beta.tr_mul(&blocks.j_beta);
        let mut last = f64::INFINITY;
        // monotone in the norm scaled by diag(JᵀJ)
        for lam in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4] {
            let nb = lm_step_beta(&blocks, &b, lam, &st.beta).unwrap();
            let norm = (0..4).map(|k| jtj[(k, k)] * (nb[k] - st.beta[k]).powi(2)).sum::<f64>().sqrt();
            assert!(norm <= last);
            last = norm;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn ridge_limit_pulls_a_to_mean() {
        let mut blocks = scalar_blocks(&[1e-12, 1e-12], &[0.1, 0.1]);
        blocks.curve_rows = vec![0..1, 1..2];
        blocks.curve_subject = vec![0, 0];
        let st = ParameterState { beta: vec![1.0], theta: vec![0.0], a: vec![vec![0.2, 0.4]], alpha: 0.3 };
        let (a, alpha) = lm_step_a(&blocks, 1e6, &st).unwrap();
        assert!((a[0][0] - 0.3).abs() < 1e-9 && (a[0][1] - 0.3).abs() < 1e-9);
        assert!((alpha - 0.3).abs() < 1e-12);
    }

    fn noiseless(ds: &Dataset, st: &ParameterState) -> Dataset {
        let g = GradientFunction::new(&basis(), &st.beta).unwrap();
        let fit = crate::objective::fitted_values(ds, st, &g, &DynamicsConfig::default()).unwrap();
        let mut out = ds.clone();
        for (c, f) in out.subjects.iter_mut().flat_map(|s| s.curves.iter_mut()).zip(fit) {
            c.values = f;
        }
        out
    }

    #[test]
    fn recovers_noiseless_truth_with_known_a() {
        let mut subjects = Vec::new();
        let mut a = Vec::new();
        for i in 0..4 {
            let mut curves = Vec::new();
            let mut ai = Vec::new();
            for l in 0..3 {
                let times: Vec<f64> = (0..8).map(|j| (j as f64 + 0.3 * l as f64 + 0.1 * i as f64) / 8.3).collect();
                curves.push(Curve { id: l.to_string(), times, values: vec![0.0; 8] });
                ai.push(0.2 + 0.03 * l as f64 + 0.01 * i as f64);
            }
            subjects.push(Subject { id: i.to_string(), curves });
            a.push(ai);
        }
        let ds = Dataset::new(subjects).unwrap();
        let truth = ParameterState {
            beta: vec![0.1, 1.2, 1.6, 0.4],
            theta: vec![0.1, -0.05, 0.02, -0.07],
            alpha: 0.0,
            a,
        };
        let ds = noiseless(&ds, &truth);
        let pen = PenaltySettings { lambda2: 1e-10, a_known: true, ..Default::default() };
        let opts = FitOptions { adaptive_nr: false, ..Default::default() };
        let init = ParameterState { beta: vec![1.0; 4], theta: vec![0.0; 4], ..truth.clone() };
        let res = fit(&ds, &basis(), &PenaltyMatrix::zeros(4), &pen, &opts, Some(&init)).unwrap();
        assert!(res.converged, "{:?}", res.diagnostics);
        let err = res.state.beta.iter().zip(&truth.beta).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 1e-4, "beta error {err}: {:?}", res.state.beta);
        let mean: f64 = res.state.theta.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn lm_trace_is_monotone_and_deterministic() {
        let (ds, _) = instance();
        let pen = PenaltySettings::default();
        let opts = FitOptions { adaptive_nr: false, ..Default::default() };
        let run = || fit(&ds, &basis(), &PenaltyMatrix::zeros(4), &pen, &opts, None).unwrap();
        let r1 = run();
        for w in r1.loss_trace.windows(2) {
            assert!(w[1].loss.total <= w[0].loss.total);
        }
        let r2 = run();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    }

    /// One curve, one coefficient: the fit must agree with a grid search.
    #[test]
    fn one_dimensional_fit_matches_grid_search() {
        // linear hat without its leading function: g(x) = β (x + 1) / 4
        let b = SplineBasis::clamped(1, vec![], -1.0, 3.0, 1).unwrap();
        assert_eq!(b.dim(), 1);
        let ds = Dataset::new(vec![Subject {
            id: "1".into(),
            curves: vec![Curve { id: "1".into(), times: vec![0.2, 0.5, 0.9], values: vec![0.31, 0.52, 0.7] }],
        }])
        .unwrap();
        let pen = PenaltySettings { a_known: true, ..Default::default() };
        let init = ParameterState { beta: vec![1.0; b.dim()], theta: vec![0.0], a: vec![vec![0.2]], alpha: 0.2 };
        let res = fit(&ds, &b, &PenaltyMatrix::zeros(b.dim()), &pen, &FitOptions::default(), Some(&init)).unwrap();
        let cfg = DynamicsConfig::default();
        let sse = |beta: f64| {
            let st = ParameterState { beta: vec![beta], ..init.clone() };
            let g = GradientFunction::new(&b, &st.beta).unwrap();
            residuals(&ds, &st, &g, &cfg).unwrap().iter().flatten().map(|e| e * e).sum::<f64>()
        };
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for k in 0..=4000 {
            let beta = k as f64 * 1e-3;
            let v = sse(beta);
            if v < best {
                best = v;
                arg = beta;
            }
        }
        assert!((res.state.beta[0] - arg).abs() < 1e-3, "{} vs {arg}", res.state.beta[0]);
    }

    #[test]
    fn polish_never_increases_objective() {
        let (ds, st) = instance();
        let pen = PenaltySettings::default();
        let opts = FitOptions { adaptive_nr: false, ..Default::default() };
        let ev_loss = |s: &ParameterState| {
            let g = GradientFunction::new(&basis(), &s.beta).unwrap();
            crate::objective::loss(&ds, s, &g, &pen, &PenaltyMatrix::zeros(4), &DynamicsConfig::default())
                .unwrap()
                .total
        };
        let out = newton_polish(&ds, &st, &basis(), &pen, &PenaltyMatrix::zeros(4), &opts).unwrap();
        assert!(ev_loss(&out.state) <= ev_loss(&st));
    }
}
