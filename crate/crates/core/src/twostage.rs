//! Two-stage baseline: smooth each curve to get `(X̂, X̂′)`, then regress
//! `X̂′` on `X̂`.
//!
//! Stage one uses local linear smoothing for values and local quadratic
//! smoothing for derivatives, each with its own leave-one-out bandwidth.
//! Stage two is either least squares on a spline basis or a local quadratic
//! smoother over `x`.

use nalgebra::{DVector, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, SplineBasis};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a local design counts as singular.
const SINGULAR_TOL: f64 = 1e-10;
const WIDEN_FACTOR: f64 = 1.5;
const MAX_WIDEN: usize = 10;
/// Points per unit length for [`region_ise`].
pub const ISE_POINTS_PER_UNIT: f64 = 2000.0;

/// The three regions used when comparing estimators of `g`.
pub const DEFAULT_REGIONS: [(f64, f64); 3] = [(-0.5, 0.2), (0.2, 1.0), (1.0, 1.5)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Epanechnikov,
}

impl Kernel {
    pub fn weight(self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage2Method {
    /// Least squares on the given basis.
    BasisRegression { basis: BasisSpec },
    LocalQuadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageOptions {
    /// Stage-one bandwidths as fractions of each curve's time range.
    pub bandwidth_grid: Vec<f64>,
    pub stage2: Stage2Method,
    /// Stage-two bandwidths as fractions of the pooled `x̂` range.
    pub stage2_bandwidth_grid: Vec<f64>,
    pub kernel: Kernel,
}

/// `n` points geometrically spaced on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|k| if k + 1 == n { hi } else { lo * (r * k as f64).exp() }).collect()
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        TwoStageOptions {
            bandwidth_grid: geometric_grid(0.05, 1.0, 15),
            stage2: Stage2Method::LocalQuadratic,
            stage2_bandwidth_grid: geometric_grid(0.05, 1.0, 15),
            kernel: Kernel::Epanechnikov,
        }
    }
}

impl TwoStageOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("bandwidth_grid", &self.bandwidth_grid), ("stage2_bandwidth_grid", &self.stage2_bandwidth_grid)] {
            if g.is_empty() || g.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonempty and positive")));
            }
        }
        Ok(())
    }
}

/// Weighted local polynomial fit at `x0`. Returns the coefficients of
/// `1, v, v²` with `v = (x−x0)/h` (unused orders zero), or `None` when the
/// local design is singular. Singularity is judged on the design rescaled by
/// the spread of the support points, so it does not depend on `h`.
fn local_fit(
    xs: &[f64],
    ys: &[f64],
    skip: Option<usize>,
    x0: f64,
    h: f64,
    degree: usize,
    kernel: Kernel,
) -> Option<[f64; 3]> {
    let p = degree + 1;
    let mut pts = Vec::new();
    let mut spread: f64 = 0.0;
    for (j, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        if Some(j) == skip {
            continue;
        }
        let w = kernel.weight((x - x0) / h);
        if w > 0.0 {
            spread = spread.max((x - x0).abs());
            pts.push((x - x0, y, w));
        }
    }
    if pts.len() < p || !(spread > 0.0) {
        return None;
    }
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = [0.0; 3];
    for (d, y, w) in pts {
        let v = d / spread;
        let row = [1.0, v, v * v];
        for r in 0..p {
            xty[r] += w * row[r] * y;
            for c in 0..p {
                xtx[(r, c)] += w * row[r] * row[c];
            }
        }
    }
    let a = xtx.view((0, 0), (p, p)).into_owned();
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let (mx, mn) = (eig.max(), eig.min());
    if !(mn > SINGULAR_TOL * mx) {
        return None;
    }
    let sol = a.cholesky()?.solve(&DVector::from_column_slice(&xty[..p]));
    let r = h / spread;
    let mut out = [0.0; 3];
    for k in 0..p {
        out[k] = sol[k] * r.powi(k as i32);
    }
    Some(out)
}

/// Value (`deriv = 0`) or first derivative (`deriv = 1`) of a local fit.
fn local_estimate(
    xs: &[f64],
    ys: &[f64],
    skip: Option<usize>,
    x0: f64,
    h: f64,
    degree: usize,
    deriv: usize,
    kernel: Kernel,
) -> Option<f64> {
    local_fit(xs, ys, skip, x0, h, degree, kernel).map(|c| if deriv == 0 { c[0] } else { c[1] / h })
}

/// Leave-one-out prediction error of a local polynomial of `degree`, or
/// `None` if some held-out fit is singular.
pub fn loo_score(xs: &[f64], ys: &[f64], h: f64, degree: usize, kernel: Kernel) -> Option<f64> {
    let mut s = 0.0;
    for j in 0..xs.len() {
        let pred = local_estimate(xs, ys, Some(j), xs[j], h, degree, 0, kernel)?;
        s += (ys[j] - pred).powi(2);
    }
    Some(s / xs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    /// Absolute bandwidth.
    pub bandwidth: f64,
    /// LOO score at the chosen bandwidth; `None` when leave-one-out was not
    /// feasible for any bandwidth.
    pub cv_score: Option<f64>,
    /// Number of times the grid was widened.
    pub widened: usize,
}

/// Picks a bandwidth by leave-one-out CV over `grid · scale`. Bandwidths whose
/// full-data fits are singular at some evaluation point are excluded; if all
/// are, the grid is widened. If leave-one-out is infeasible everywhere (too
/// few points), the smallest bandwidth with nonsingular full-data fits is used.
pub fn choose_bandwidth(
    xs: &[f64],
    ys: &[f64],
    eval: &[f64],
    grid: &[f64],
    scale: f64,
    degree: usize,
    kernel: Kernel,
) -> Result<BandwidthChoice> {
    let mut factor = 1.0;
    for widened in 0..=MAX_WIDEN {
        let hs: Vec<f64> = grid.iter().map(|g| g * scale * factor).collect();
        let usable: Vec<f64> = hs
            .iter()
            .copied()
            .filter(|&h| eval.iter().all(|&x0| local_fit(xs, ys, None, x0, h, degree, kernel).is_some()))
            .collect();
        if !usable.is_empty() {
            let mut best: Option<(f64, f64)> = None;
            for &h in &usable {
                if let Some(s) = loo_score(xs, ys, h, degree, kernel) {
                    if best.map_or(true, |(_, b)| s < b) {
                        best = Some((h, s));
                    }
                }
            }
            return Ok(match best {
                Some((h, s)) => BandwidthChoice { bandwidth: h, cv_score: Some(s), widened },
                None => BandwidthChoice { bandwidth: usable[0], cv_score: None, widened },
            });
        }
        factor *= WIDEN_FACTOR;
    }
    Err(Error::Singular(format!("local polynomial of degree {degree} singular at every bandwidth")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCurve {
    pub subject: usize,
    pub curve: usize,
    pub eval_times: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub xprime_hat: Vec<f64>,
    pub value_bandwidth: BandwidthChoice,
    pub deriv_bandwidth: BandwidthChoice,
}

/// Stage one for a single curve, evaluated at `eval` (the observation times
/// when `None`).
pub fn presmooth_curve(times: &[f64], values: &[f64], eval: Option<&[f64]>, opts: &TwoStageOptions) -> Result<SmoothedCurve> {
    opts.validate()?;
    if times.len() != values.len() {
        return Err(Error::InvalidArgument("times and values differ in length".into()));
    }
    if times.len() < 3 {
        return Err(Error::InvalidArgument(format!("curve has {} points; at least 3 needed", times.len())));
    }
    let eval = eval.unwrap_or(times);
    let range = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - times.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(range > 0.0) {
        return Err(Error::InvalidArgument("curve times have zero range".into()));
    }
    let k = opts.kernel;
    let vb = choose_bandwidth(times, values, eval, &opts.bandwidth_grid, range, 1, k)?;
    let db = choose_bandwidth(times, values, eval, &opts.bandwidth_grid, range, 2, k)?;
    let mut x_hat = Vec::with_capacity(eval.len());
    let mut xp_hat = Vec::with_capacity(eval.len());
    for &t in eval {
        // usable bandwidths are nonsingular at every evaluation point
        x_hat.push(local_estimate(times, values, None, t, vb.bandwidth, 1, 0, k).expect("checked nonsingular"));
        xp_hat.push(local_estimate(times, values, None, t, db.bandwidth, 2, 1, k).expect("checked nonsingular"));
    }
    Ok(SmoothedCurve {
        subject: 0,
        curve: 0,
        eval_times: eval.to_vec(),
        x_hat,
        xprime_hat: xp_hat,
        value_bandwidth: vb,
        deriv_bandwidth: db,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage2Estimate {
    BasisRegression { basis: SplineBasis, beta: Vec<f64>, rss: f64 },
    LocalQuadratic { xs: Vec<f64>, ys: Vec<f64>, bandwidth: BandwidthChoice, kernel: Kernel },
}

impl Stage2Estimate {
    /// `ĝ(x)`. The local quadratic widens its bandwidth locally where the
    /// window holds too few points; `NaN` if that never succeeds.
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Stage2Estimate::BasisRegression { basis, beta, .. } => match basis.eval(x, 0) {
                Ok(phi) => phi.iter().zip(beta).map(|(p, b)| p * b).sum(),
                Err(_) => f64::NAN,
            },
            Stage2Estimate::LocalQuadratic { xs, ys, bandwidth, kernel } => {
                let mut h = bandwidth.bandwidth;
                for _ in 0..=4 * MAX_WIDEN {
                    if let Some(v) = local_estimate(xs, ys, None, x, h, 2, 0, *kernel) {
                        return v;
                    }
                    h *= WIDEN_FACTOR;
                }
                f64::NAN
            }
        }
    }
}

/// Stage two on pooled `(x̂, x̂′)` pairs.
pub fn stage2_fit(x_hat: &[f64], xprime_hat: &[f64], opts: &TwoStageOptions) -> Result<Stage2Estimate> {
    opts.validate()?;
    if x_hat.len() != xprime_hat.len() {
        return Err(Error::InvalidArgument("x_hat and xprime_hat differ in length".into()));
    }
    if x_hat.iter().chain(xprime_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stage-two input"));
    }
    match &opts.stage2 {
        Stage2Method::BasisRegression { basis } => {
            let basis = SplineBasis::try_from(basis.clone())?;
            let m = basis.dim();
            if x_hat.len() < m {
                return Err(Error::InvalidArgument(format!("{} pooled points for {m} coefficients", x_hat.len())));
            }
            let x = basis.design_matrix(x_hat, 0)?;
            let y = DVector::from_column_slice(xprime_hat);
            let svd = x.clone().svd(true, true);
            let smax = svd.singular_values.max();
            if !(svd.singular_values.min() > 1e-10 * smax) {
                return Err(Error::Singular("stage-two basis design is rank deficient".into()));
            }
            let beta = svd.solve(&y, 0.0).map_err(|e| Error::Singular(e.into()))?;
            let rss = (&y - &x * &beta).norm_squared();
            Ok(Stage2Estimate::BasisRegression { basis, beta: beta.as_slice().to_vec(), rss })
        }
        Stage2Method::LocalQuadratic => {
            if x_hat.len() < 3 {
                return Err(Error::InvalidArgument(format!("{} pooled points; at least 3 needed", x_hat.len())));
            }
            let mut pairs: Vec<(f64, f64)> = x_hat.iter().copied().zip(xprime_hat.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let range = xs[xs.len() - 1] - xs[0];
            if !(range > 0.0) {
                return Err(Error::Singular("pooled x_hat values are all equal".into()));
            }
            // bandwidth only has to work at the data themselves
            let bw = choose_bandwidth(&xs, &ys, &xs, &opts.stage2_bandwidth_grid, range, 2, opts.kernel)?;
            Ok(Stage2Estimate::LocalQuadratic { xs, ys, bandwidth: bw, kernel: opts.kernel })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageFit {
    pub curves: Vec<SmoothedCurve>,
    /// Curves with fewer than 3 points or no usable bandwidth, as (subject, curve).
    pub skipped: Vec<(usize, usize)>,
    pub stage2: Stage2Estimate,
    pub options: TwoStageOptions,
    pub warnings: Vec<String>,
}

impl TwoStageFit {
    pub fn value(&self, x: f64) -> f64 {
        self.stage2.value(x)
    }
}

/// Both stages on a dataset, pooling each curve's smoothed values at its own
/// observation times.
pub fn two_stage(ds: &Dataset, opts: &TwoStageOptions) -> Result<TwoStageFit> {
    opts.validate()?;
    let idx = ds.curve_indices();
    let results: Vec<Result<Option<SmoothedCurve>>> = idx
        .par_iter()
        .map(|&(i, l)| {
            let c = ds.curve((i, l));
            if c.len() < 3 {
                return Ok(None);
            }
            match presmooth_curve(&c.times, &c.values, None, opts) {
                Ok(mut s) => {
                    s.subject = i;
                    s.curve = l;
                    Ok(Some(s))
                }
                Err(Error::Singular(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for (r, &(i, l)) in results.into_iter().zip(&idx) {
        match r? {
            Some(s) => {
                for (what, b) in [("value", &s.value_bandwidth), ("derivative", &s.deriv_bandwidth)] {
                    if b.widened > 0 {
                        warnings.push(format!("subject {i} curve {l}: {what} bandwidth grid widened {} times", b.widened));
                    }
                    if b.cv_score.is_none() {
                        warnings.push(format!("subject {i} curve {l}: leave-one-out infeasible for {what}; smallest usable bandwidth taken"));
                    }
                }
                curves.push(s);
            }
            None => {
                let why = if ds.curve((i, l)).len() < 3 { "fewer than 3 points" } else { "singular at every bandwidth" };
                warnings.push(format!("subject {i} curve {l}: {why}, skipped"));
                skipped.push((i, l));
            }
        }
    }
    let xh: Vec<f64> = curves.iter().flat_map(|c| c.x_hat.iter().copied()).collect();
    let xp: Vec<f64> = curves.iter().flat_map(|c| c.xprime_hat.iter().copied()).collect();
    let stage2 = stage2_fit(&xh, &xp, opts)?;
    if let Stage2Estimate::LocalQuadratic { bandwidth, .. } = &stage2 {
        if bandwidth.widened > 0 {
            warnings.push(format!("stage-two bandwidth grid widened {} times", bandwidth.widened));
        }
    }
    Ok(TwoStageFit { curves, skipped, stage2, options: opts.clone(), warnings })
}

/// Trapezoid-rule `∫(ĝ − g)²` over each region, at
/// [`ISE_POINTS_PER_UNIT`] intervals per unit length.
pub fn region_ise<F, G>(g_hat: F, g_true: G, regions: &[(f64, f64)]) -> Result<Vec<f64>>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    regions
        .iter()
        .map(|&(lo, hi)| {
            if !(hi > lo) {
                return Err(Error::InvalidArgument(format!("empty region [{lo}, {hi}]")));
            }
            let n = ((hi - lo) * ISE_POINTS_PER_UNIT).ceil().max(1.0) as usize;
            let dx = (hi - lo) / n as f64;
            let mut s = 0.0;
            for k in 0..=n {
                let x = if k == n { hi } else { lo + k as f64 * dx };
                let d = (g_hat(x) - g_true(x)).powi(2);
                s += if k == 0 || k == n { 0.5 * d } else { d };
            }
            let v = s * dx;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite("region ISE"))
            }
        })
        .collect()
}

/// Raw local polynomial fit at `x0`: `(value, first derivative)`; `None` when
/// the local design is singular or `degree > 2`.
pub fn local_polynomial(xs: &[f64], ys: &[f64], x0: f64, h: f64, degree: usize, kernel: Kernel) -> Option<(f64, f64)> {
    if degree > 2 {
        return None;
    }
    local_fit(xs, ys, None, x0, h, degree, kernel).map(|c| (c[0], c[1] / h))
}
