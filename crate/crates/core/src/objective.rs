//! Penalized hierarchical loss
//! `Σ (Y − X̃)² + λ₁ Σ (a − α)² + λ₂ Σ θ² + βᵀBβ`
//! and the plug-in variance estimators behind `λ₁ = σ̂ε²/σ̂a²`, `λ₂ = σ̂ε²/σ̂θ²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::PenaltyMatrix;
use crate::data::{Dataset, ParameterState, PenaltySettings};
use crate::dynamics::{eval_at_times, solve_trajectory, DynamicsConfig, GradientFunction};
use crate::error::{Error, Result};

/// Residuals per curve in `(i, l)` order.
pub type Ragged = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sse: f64,
    pub pen_a: f64,
    pub pen_theta: f64,
    pub pen_beta: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimates {
    pub sigma_eps2: f64,
    pub sigma_a2: f64,
    pub sigma_theta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub(crate) fn tag_curve(e: Error, ix: (usize, usize)) -> Error {
    match e {
        Error::Diverged { curve: None, t, bound } => Error::Diverged { curve: Some(ix), t, bound },
        e => e,
    }
}

/// `X̃_il(t_ilj)` for every curve.
pub fn fitted_values(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<Ragged> {
    let idx = ds.curve_indices();
    idx.par_iter()
        .map(|&(i, l)| {
            let c = ds.curve((i, l));
            let sol = solve_trajectory(g, state.a[i][l], state.theta[i], cfg).map_err(|e| tag_curve(e, (i, l)))?;
            eval_at_times(&sol, g, &c.times)
        })
        .collect()
}

/// `ε̃_ilj = Y_ilj − X̃_il(t_ilj)`.
pub fn residuals(ds: &Dataset, state: &ParameterState, g: &GradientFunction, cfg: &DynamicsConfig) -> Result<Ragged> {
    let fit = fitted_values(ds, state, g, cfg)?;
    Ok(ds
        .curves()
        .zip(fit)
        .map(|((_, c), f)| c.values.iter().zip(&f).map(|(y, x)| y - x).collect())
        .collect())
}

/// Loss from precomputed residuals; sums run in `(i, l, j)` order.
pub fn loss_from_residuals(
    res: &[Vec<f64>],
    state: &ParameterState,
    pen: &PenaltySettings,
    b: &PenaltyMatrix,
) -> LossBreakdown {
    let sse: f64 = res.iter().flatten().map(|e| e * e).sum();
    let pen_a = if pen.a_known {
        0.0
    } else {
        pen.lambda1 * state.a.iter().flatten().map(|a| (a - state.alpha).powi(2)).sum::<f64>()
    };
    let pen_theta = pen.lambda2 * state.theta.iter().map(|t| t * t).sum::<f64>();
    let pen_beta = b.quadratic_form(&state.beta);
    LossBreakdown { sse, pen_a, pen_theta, pen_beta, total: sse + pen_a + pen_theta + pen_beta }
}

pub fn loss(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    pen: &PenaltySettings,
    b: &PenaltyMatrix,
    cfg: &DynamicsConfig,
) -> Result<LossBreakdown> {
    let res = residuals(ds, state, g, cfg)?;
    Ok(loss_from_residuals(&res, state, pen, b))
}

/// Per-measurement terms `ℓ_ilj = ε̃² + λ₁(a_il − α)²/m_il + λ₂θ_i²/m_i·`;
/// their sum plus `βᵀBβ` is the total loss.
pub fn per_measurement_losses(
    ds: &Dataset,
    state: &ParameterState,
    res: &[Vec<f64>],
    pen: &PenaltySettings,
) -> Ragged {
    ds.curves()
        .zip(res)
        .map(|(((i, l), c), r)| {
            let m_il = c.len() as f64;
            let m_i = ds.subjects[i].n_measurements() as f64;
            let share_a =
                if pen.a_known { 0.0 } else { pen.lambda1 * (state.a[i][l] - state.alpha).powi(2) / m_il };
            let share_t = pen.lambda2 * state.theta[i].powi(2) / m_i;
            r.iter().map(|e| e * e + share_a + share_t).collect()
        })
        .collect()
}

/// Plug-in variance estimates from current residuals and parameters.
///
/// `σ̂ε² = SSE / (m·· − N· − n − M)`, `σ̂a² = Σ(a − ā)²/(N· − 1)`,
/// `σ̂θ² = Σθ²/(n − 1)`. With known initial conditions `λ₁` is reported
/// but unused, and a zero `σ̂a²` is not an error.
pub fn update_variances(
    ds: &Dataset,
    state: &ParameterState,
    res: &[Vec<f64>],
    m_basis: usize,
    a_known: bool,
) -> Result<VarianceEstimates> {
    let check = ds.validate_for_variance(m_basis);
    if !check.ok {
        return Err(Error::Variance(check.problems.join("; ")));
    }
    let (n, nc) = (ds.n_subjects(), ds.n_curves());
    if n < 2 || nc < 2 {
        return Err(Error::Variance("need at least two subjects and two curves".into()));
    }
    let sse: f64 = res.iter().flatten().map(|e| e * e).sum();
    let sigma_eps2 = sse / ds.residual_dof(m_basis) as f64;
    let abar = state.mean_a();
    let sigma_a2 = state.a.iter().flatten().map(|a| (a - abar).powi(2)).sum::<f64>() / (nc - 1) as f64;
    let sigma_theta2 = state.theta.iter().map(|t| t * t).sum::<f64>() / (n - 1) as f64;
    if !(sigma_theta2 > 0.0) {
        return Err(Error::Variance("σ̂θ² = 0: λ₂ undefined".into()));
    }
    let lambda1 = if sigma_a2 > 0.0 {
        sigma_eps2 / sigma_a2
    } else if a_known {
        0.0
    } else {
        return Err(Error::Variance("σ̂a² = 0: λ₁ undefined".into()));
    };
    Ok(VarianceEstimates { sigma_eps2, sigma_a2, sigma_theta2, lambda1, lambda2: sigma_eps2 / sigma_theta2 })
}
