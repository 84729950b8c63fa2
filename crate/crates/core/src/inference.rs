//! Asymptotic variance of `β̂` and pointwise standard errors of `ĝ`.
//!
//! `Wn = (An + B − Cnᵀ(Dn + λ₂I)⁻¹Cn)⁻¹`, `V(β̂) = σ̂ε² Wn` and
//! `SE(ĝ(x)) = sqrt(φ(x)ᵀ V φ(x))`, with `An = Σ ∂X/∂β ∂X/∂βᵀ`,
//! `Cn[i] = Σ_i ∂X/∂θ_i ∂X/∂βᵀ`, `Dn[i] = Σ_i (∂X/∂θ_i)²` summed over
//! measurements. Initial conditions are treated as fixed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{PenaltyMatrix, SplineBasis};
use crate::data::{Dataset, ParameterState};
use crate::dynamics::{DynamicsConfig, GradientFunction};
use crate::error::{Error, Result};
use crate::optimizer::{assemble_jacobians, JacobianBlocks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoMatrices {
    pub an: DMatrix<f64>,
    /// `n × M`
    pub cn: DMatrix<f64>,
    /// Diagonal of `Dn`.
    pub dn: Vec<f64>,
    pub lambda2: f64,
    /// `None` when the Schur complement is not positive definite.
    pub wn: Option<DMatrix<f64>>,
    /// 2-norm condition number of the Schur complement.
    pub condition: f64,
}

impl InfoMatrices {
    /// `σ̂ε² Wn`
    pub fn v_beta(&self, sigma_eps2: f64) -> Option<DMatrix<f64>> {
        self.wn.as_ref().map(|w| w * sigma_eps2)
    }

    /// `An + B − Cnᵀ(Dn + λ₂I)⁻¹Cn`
    pub fn schur(&self, b: &PenaltyMatrix) -> DMatrix<f64> {
        let mut s = &self.an + &b.matrix;
        for (i, d) in self.dn.iter().enumerate() {
            let row = self.cn.row(i);
            s -= row.transpose() * row / (d + self.lambda2);
        }
        (&s + s.transpose()) * 0.5
    }
}

pub fn info_from_blocks(blocks: &JacobianBlocks, b: &PenaltyMatrix, lambda2: f64) -> InfoMatrices {
    let m = blocks.j_beta.ncols();
    let n = blocks.subject_rows.len();
    let an = blocks.j_beta.tr_mul(&blocks.j_beta);
    let mut cn = DMatrix::zeros(n, m);
    let mut dn = vec![0.0; n];
    for (i, rows) in blocks.subject_rows.iter().enumerate() {
        for r in rows.clone() {
            let jt = blocks.j_theta[r];
            dn[i] += jt * jt;
            for k in 0..m {
                cn[(i, k)] += jt * blocks.j_beta[(r, k)];
            }
        }
    }
    let mut info = InfoMatrices { an, cn, dn, lambda2, wn: None, condition: f64::INFINITY };
    let s = info.schur(b);
    let sv = s.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    info.condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if let Some(ch) = s.cholesky() {
        let w = ch.inverse();
        info.wn = Some((&w + w.transpose()) * 0.5);
    }
    info
}

/// Information matrices at a fitted state.
pub fn info_matrices(
    ds: &Dataset,
    state: &ParameterState,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
    b: &PenaltyMatrix,
    lambda2: f64,
) -> Result<InfoMatrices> {
    if !(lambda2 >= 0.0) {
        return Err(Error::InvalidArgument("lambda2 must be nonnegative".into()));
    }
    let blocks = assemble_jacobians(ds, state, g, cfg)?;
    Ok(info_from_blocks(&blocks, b, lambda2))
}

/// Pointwise `SE(ĝ(x))`. Negative quadratic forms (round-off) are clamped to
/// zero; the number clamped is returned alongside.
pub fn se_g(info: &InfoMatrices, sigma_eps2: f64, basis: &SplineBasis, xs: &[f64]) -> Result<(Vec<f64>, usize)> {
    let v = info
        .v_beta(sigma_eps2)
        .ok_or_else(|| Error::Singular(format!("Wn unavailable (condition {:.3e})", info.condition)))?;
    se_from_covariance(&v, basis, xs)
}

pub fn se_from_covariance(v: &DMatrix<f64>, basis: &SplineBasis, xs: &[f64]) -> Result<(Vec<f64>, usize)> {
    let mut phi = vec![0.0; basis.dim()];
    let mut clamped = 0;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        basis.eval_into(x, 0, &mut phi)?;
        let p = DVector::from_column_slice(&phi);
        let q = (p.transpose() * v * &p)[(0, 0)];
        if q < 0.0 {
            clamped += 1;
        }
        out.push(q.max(0.0).sqrt());
    }
    Ok((out, clamped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeRow {
    pub x: f64,
    pub g_hat: f64,
    pub se: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// `ĝ ± 2 SE` on a grid.
pub fn se_band(g: &GradientFunction, se: &[f64], xs: &[f64]) -> Vec<SeRow> {
    xs.iter()
        .zip(se)
        .map(|(&x, &s)| {
            let gh = g.value(x);
            SeRow { x, g_hat: gh, se: s, lo95: gh - 2.0 * s, hi95: gh + 2.0 * s }
        })
        .collect()
}

pub fn write_se_csv<W: Write>(w: W, rows: &[SeRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
