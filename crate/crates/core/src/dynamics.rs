//! Trajectories of `X′(t) = e^θ g(X(t))` on a uniform grid over `[0, 1]` and
//! their parameter sensitivities.
//!
//! Trajectories are integrated with classical RK4. Sensitivities with respect
//! to the initial condition `a`, the scale effect `θ` and the coefficients `β`
//! come from two independent routes:
//!
//! - closed forms, valid while `g` stays away from zero along a strictly
//!   monotone trajectory:
//!   `∂X/∂a = g(X(t)) / g(X(0))`, `∂X/∂θ = e^θ t g(X(t))`,
//!   `∂X/∂β_r = g(X(t)) ∫_{X(0)}^{X(t)} φ_r(x) / g(x)² dx`;
//! - RK4 integration of the linear variational equations along the stored
//!   trajectory, which is what the discrete RK4 map differentiates to.
//!
//! Off-grid values use cubic Hermite interpolation with exact node slopes.
//! A trajectory that leaves the basis support sees `g = 0` and freezes.

use serde::{Deserialize, Serialize};

use crate::basis::{SplineBasis, MAX_DEGREE};
use crate::error::{Error, Result};

const NB: usize = MAX_DEGREE + 1;
/// Bounds the work per grid panel when `1/g²` is badly behaved.
const MAX_SIMPSON_DEPTH: usize = 12;

/// `g(x) = Σ_k β_k φ_k(x)` with a cached piecewise-polynomial form for fast
/// evaluation inside the integrator.
#[derive(Debug, Clone)]
pub struct GradientFunction {
    basis: SplineBasis,
    beta: Vec<f64>,
    /// Taylor coefficients of `g` at the left end of each knot span, indexed
    /// by `span - degree`.
    pieces: Vec<[f64; NB]>,
    /// Left end of each piece.
    starts: Vec<f64>,
    lo: f64,
    hi: f64,
    degree: usize,
}

impl GradientFunction {
    pub fn new(basis: &SplineBasis, beta: &[f64]) -> Result<Self> {
        if beta.len() != basis.dim() {
            return Err(Error::InvalidArgument(format!(
                "beta has length {} but basis dimension is {}",
                beta.len(),
                basis.dim()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("beta"));
        }
        let p = basis.degree();
        let lo_span = basis.span(basis.lo()).expect("lo inside support");
        let hi_span = basis.span(basis.hi()).expect("hi inside support");
        let mut pieces = vec![[0.0; NB]; hi_span + 1 - p];
        for mu in lo_span..=hi_span {
            let x0 = basis.span_start(mu);
            let ders = basis.local_derivatives(mu, x0, p);
            let mut fact = 1.0;
            let piece = &mut pieces[mu - p];
            for (r, row) in ders.iter().enumerate().take(p + 1) {
                if r > 0 {
                    fact *= r as f64;
                }
                let mut acc = 0.0;
                for (j, d) in row.iter().enumerate().take(p + 1) {
                    if let Some(k) = basis.public_index(mu - p + j) {
                        acc += beta[k] * d;
                    }
                }
                piece[r] = acc / fact;
            }
        }
        let starts = (p..=hi_span).map(|mu| basis.span_start(mu)).collect();
        Ok(GradientFunction {
            basis: basis.clone(),
            beta: beta.to_vec(),
            pieces,
            starts,
            lo: basis.lo(),
            hi: basis.hi(),
            degree: p,
        })
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Piece containing `x` (the last one also owns `hi`).
    #[inline]
    fn piece(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let k = self.starts.partition_point(|&s| s <= x);
        let mut k = k.saturating_sub(1).min(self.pieces.len() - 1);
        // zero-length pieces at the top end
        while k > 0 && self.starts[k] >= self.hi {
            k -= 1;
        }
        Some(k)
    }

    /// `g(x)` reusing `hint` as the starting piece; trajectories move
    /// monotonically so the hint is almost always right.
    #[inline]
    fn value_hinted(&self, x: f64, hint: &mut usize) -> f64 {
        let k = *hint;
        let last = self.pieces.len() - 1;
        let inside = x >= self.starts[k] && (if k == last { x <= self.hi } else { x < self.starts[k + 1] });
        if !inside {
            match self.piece(x) {
                Some(j) => *hint = j,
                None => return 0.0,
            }
        }
        let c = &self.pieces[*hint];
        let dx = x - self.starts[*hint];
        let mut v = 0.0;
        for r in (0..=self.degree).rev() {
            v = v * dx + c[r];
        }
        v
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let Some(k) = self.piece(x) else { return 0.0 };
        let c = &self.pieces[k];
        let dx = x - self.starts[k];
        let mut v = 0.0;
        for r in (0..=self.degree).rev() {
            v = v * dx + c[r];
        }
        v
    }

    /// `(g(x), g′(x))`.
    #[inline]
    pub fn value_and_slope(&self, x: f64) -> (f64, f64) {
        let Some(k) = self.piece(x) else { return (0.0, 0.0) };
        let p = self.degree;
        let c = &self.pieces[k];
        let dx = x - self.starts[k];
        let mut v = 0.0;
        let mut d = 0.0;
        for r in (0..=p).rev() {
            d = d * dx + v;
            v = v * dx + c[r];
        }
        (v, d)
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.value_and_slope(x).1
    }

    /// Adds `scale * φ_r(x)` to `out[r]` for every basis function nonzero at `x`.
    #[inline]
    pub(crate) fn add_basis_values(&self, x: f64, scale: f64, out: &mut [f64]) {
        let Some(mu) = self.basis.span(x) else { return };
        let p = self.basis.degree();
        let vals = self.basis.local_values(mu, x);
        for (j, v) in vals.iter().enumerate().take(p + 1) {
            if let Some(k) = self.basis.public_index(mu - p + j) {
                out[k] += scale * v;
            }
        }
    }
}

/// Integration settings shared by every curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Grid spacing; `1/h` must be an integer.
    pub h: f64,
    /// `|X|` above this is treated as divergence.
    pub blowup_bound: f64,
    /// Closed-form sensitivities require `|g| > gradient_floor` along the trajectory.
    pub gradient_floor: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { h: 5e-4, blowup_bound: 1e6, gradient_floor: 1e-10 }
    }
}

impl DynamicsConfig {
    pub fn with_h(h: f64) -> Self {
        DynamicsConfig { h, ..Default::default() }
    }

    /// Number of RK4 steps on `[0, 1]`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {}", self.h)));
        }
        let inv = 1.0 / self.h;
        let n = inv.round();
        if n < 1.0 || (inv - n).abs() > 1e-9 * n {
            return Err(Error::InvalidArgument(format!("1/h = {inv} is not an integer")));
        }
        Ok(n as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMethod {
    ClosedForm,
    Variational,
}

/// Sensitivities on the grid. `beta` is row-major, one row of length `dim`
/// per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSensitivities {
    pub a: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub dim: usize,
    pub method: SensitivityMethod,
}

impl GridSensitivities {
    pub fn beta_row(&self, node: usize) -> &[f64] {
        &self.beta[node * self.dim..(node + 1) * self.dim]
    }
}

/// Gridded trajectory of one curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSolution {
    pub steps: usize,
    pub theta: f64,
    /// Values at `s_k = k / steps`, `k = 0..=steps`.
    pub x: Vec<f64>,
    /// True when the trajectory reached a point where `g = 0` because it left
    /// the basis support (the solution freezes there).
    pub left_support: bool,
    /// `g` on the grid nodes, summarized for the closed-form preconditions.
    pub node_g: NodeGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeGradient {
    /// `min_k |g(x_k)|`
    pub min_abs: f64,
    /// All node values share the sign of `g(a)`.
    pub one_sign: bool,
    /// Node values move strictly in the direction of that sign.
    pub monotone: bool,
}

impl CurveSolution {
    pub fn h(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 / self.steps as f64).collect()
    }

    pub fn initial(&self) -> f64 {
        self.x[0]
    }
}

/// Integrates `steps` RK4 steps of size `h` from `x0`.
pub fn integrate(
    g: &GradientFunction,
    x0: f64,
    theta: f64,
    h: f64,
    steps: usize,
    bound: f64,
) -> Result<(Vec<f64>, bool)> {
    integrate_tracked(g, x0, theta, h, steps, bound).map(|(x, left, _)| (x, left))
}

fn integrate_tracked(
    g: &GradientFunction,
    x0: f64,
    theta: f64,
    h: f64,
    steps: usize,
    bound: f64,
) -> Result<(Vec<f64>, bool, NodeGradient)> {
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial condition"));
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite("theta"));
    }
    let scale = theta.exp();
    let mut x = Vec::with_capacity(steps + 1);
    x.push(x0);
    let mut cur = x0;
    let lo = g.basis().lo();
    let hi = g.basis().hi();
    let mut left_support = !(lo..=hi).contains(&x0);
    let mut hint = 0;
    let g0 = g.value_hinted(x0, &mut hint);
    let sign = g0.signum();
    let mut node = NodeGradient { min_abs: g0.abs(), one_sign: true, monotone: true };
    for k in 0..steps {
        let gk = if k == 0 { g0 } else { g.value_hinted(cur, &mut hint) };
        if k > 0 {
            node.min_abs = node.min_abs.min(gk.abs());
            node.one_sign &= gk.signum() == sign;
        }
        let k1 = scale * gk;
        let k2 = scale * g.value_hinted(cur + 0.5 * h * k1, &mut hint);
        let k3 = scale * g.value_hinted(cur + 0.5 * h * k2, &mut hint);
        let k4 = scale * g.value_hinted(cur + h * k3, &mut hint);
        cur += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !cur.is_finite() || cur.abs() > bound {
            return Err(Error::Diverged { curve: None, t: (k + 1) as f64 * h, bound });
        }
        if !(lo..=hi).contains(&cur) {
            left_support = true;
        }
        node.monotone &= (cur - x[k]) * sign > 0.0;
        x.push(cur);
    }
    let gn = g.value(cur);
    node.min_abs = node.min_abs.min(gn.abs());
    node.one_sign &= gn.signum() == sign;
    Ok((x, left_support, node))
}

/// RK4 solution of `X′ = e^θ g(X)`, `X(0) = a`, on `[0, 1]`.
pub fn solve_trajectory(
    g: &GradientFunction,
    a: f64,
    theta: f64,
    cfg: &DynamicsConfig,
) -> Result<CurveSolution> {
    let steps = cfg.steps()?;
    let (x, left_support, node_g) = integrate_tracked(g, a, theta, 1.0 / steps as f64, steps, cfg.blowup_bound)?;
    Ok(CurveSolution { steps, theta, x, left_support, node_g })
}

#[inline]
fn hermite(s: f64, h: f64, y0: f64, d0: f64, y1: f64, d1: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h * (h10 * d0 + h11 * d1) + h01 * y1
}

/// Grid cell and local coordinate of `t`; `None` when `t` is a node.
fn locate(steps: usize, t: f64) -> Result<(usize, Option<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    let pos = t * steps as f64;
    let k = (pos.floor() as usize).min(steps - 1);
    let s = pos - k as f64;
    if s == 0.0 {
        Ok((k, None))
    } else if s == 1.0 {
        Ok((k + 1, None))
    } else {
        Ok((k, Some(s)))
    }
}

/// Trajectory values at arbitrary times in `[0, 1]`.
pub fn eval_at_times(sol: &CurveSolution, g: &GradientFunction, times: &[f64]) -> Result<Vec<f64>> {
    let scale = sol.theta.exp();
    let h = sol.h();
    times
        .iter()
        .map(|&t| {
            let (k, s) = locate(sol.steps, t)?;
            Ok(match s {
                None => sol.x[k],
                Some(s) => {
                    let (y0, y1) = (sol.x[k], sol.x[k + 1]);
                    hermite(s, h, y0, scale * g.value(y0), y1, scale * g.value(y1))
                }
            })
        })
        .collect()
}

/// Verifies the closed-form preconditions — `|g| > floor` with one sign on
/// every node and a strictly monotone trajectory — and returns `g` at the nodes.
pub fn check_closed_form(sol: &CurveSolution, g: &GradientFunction, cfg: &DynamicsConfig) -> Result<Vec<f64>> {
    let gx: Vec<f64> = sol.x.iter().map(|&x| g.value(x)).collect();
    let sign = gx[0].signum();
    for &v in &gx {
        if !(v.abs() > cfg.gradient_floor) || v.signum() != sign {
            return Err(Error::GradientFloor { floor: cfg.gradient_floor, value: v });
        }
    }
    for w in sol.x.windows(2) {
        if (w[1] - w[0]) * sign <= 0.0 {
            return Err(Error::NotMonotone);
        }
    }
    Ok(gx)
}

/// The closed-form preconditions from the node summary recorded during
/// integration (no extra gradient evaluations).
pub fn closed_form_ok(sol: &CurveSolution, cfg: &DynamicsConfig) -> Result<()> {
    let n = sol.node_g;
    if !(n.min_abs > cfg.gradient_floor) || !n.one_sign {
        return Err(Error::GradientFloor { floor: cfg.gradient_floor, value: n.min_abs });
    }
    if !n.monotone {
        return Err(Error::NotMonotone);
    }
    Ok(())
}

/// Closed-form `∂X/∂β` at measurement times, row-major with `dim` entries per
/// time: `g(X(t)) ∫_a^{X(t)} φ/g²`. `fitted` holds `X` at `times`. The
/// integral is accumulated in state space between consecutive fitted values,
/// split at knots, with adaptive Gauss–Legendre on each piece.
pub fn beta_closed_form_at_times(
    sol: &CurveSolution,
    g: &GradientFunction,
    fitted: &[f64],
    cfg: &DynamicsConfig,
) -> Result<Vec<f64>> {
    closed_form_ok(sol, cfg)?;
    let m = g.dim();
    let mut out = Vec::with_capacity(fitted.len() * m);
    let mut integral = vec![0.0; m];
    let mut quad = GaussScratch::new(m);
    let mut prev = sol.initial();
    for &x in fitted {
        let (u, v) = if prev <= x { (prev, x) } else { (x, prev) };
        let sign = if prev <= x { 1.0 } else { -1.0 };
        if u < v {
            let pts = g.basis().breakpoints_in(u, v);
            for w in pts.windows(2) {
                quad.piece(g, w[0], w[1], sign, &mut integral);
            }
        }
        let gx = g.value(x);
        out.extend(integral.iter().map(|v| gx * v));
        prev = x;
    }
    Ok(out)
}

const GAUSS_NODES: [f64; 4] = [0.1834346424956498, 0.5255324099163290, 0.7966664774136267, 0.9602898564975363];
const GAUSS_WEIGHTS: [f64; 4] = [0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763];

/// 8-point Gauss–Legendre on one piece, bisected until the two halves agree
/// with the whole.
struct GaussScratch {
    whole: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
}

impl GaussScratch {
    fn new(m: usize) -> Self {
        GaussScratch { whole: vec![0.0; m], left: vec![0.0; m], right: vec![0.0; m] }
    }

    fn rule(g: &GradientFunction, u: f64, v: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let half = 0.5 * (v - u);
        let mid = 0.5 * (u + v);
        for (z, w) in GAUSS_NODES.iter().zip(&GAUSS_WEIGHTS) {
            for x in [mid - half * z, mid + half * z] {
                let gv = g.value(x);
                g.add_basis_values(x, w * half / (gv * gv), out);
            }
        }
    }

    fn piece(&mut self, g: &GradientFunction, u: f64, v: f64, sign: f64, acc: &mut [f64]) {
        Self::rule(g, u, v, &mut self.whole);
        let whole = std::mem::take(&mut self.whole);
        self.refine(g, u, v, &whole, sign, acc, MAX_SIMPSON_DEPTH);
        self.whole = whole;
    }

    #[allow(clippy::too_many_arguments)]
    fn refine(&mut self, g: &GradientFunction, u: f64, v: f64, whole: &[f64], sign: f64, acc: &mut [f64], depth: usize) {
        let mid = 0.5 * (u + v);
        Self::rule(g, u, mid, &mut self.left);
        Self::rule(g, mid, v, &mut self.right);
        let mut err = 0.0f64;
        let mut size = 0.0f64;
        for r in 0..acc.len() {
            let both = self.left[r] + self.right[r];
            err = err.max((both - whole[r]).abs());
            size = size.max(both.abs());
        }
        if depth == 0 || err <= 1e-13 * size {
            for r in 0..acc.len() {
                acc[r] += sign * (self.left[r] + self.right[r]);
            }
            return;
        }
        let (l, r) = (self.left.clone(), self.right.clone());
        self.refine(g, u, mid, &l, sign, acc, depth - 1);
        self.refine(g, mid, v, &r, sign, acc, depth - 1);
    }
}

/// Closed-form sensitivities on the grid.
pub fn sensitivities_closed_form(
    sol: &CurveSolution,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<GridSensitivities> {
    let n = sol.steps;
    let m = g.dim();
    let scale = sol.theta.exp();
    let gx = check_closed_form(sol, g, cfg)?;
    let a_sens: Vec<f64> = gx.iter().map(|v| v / gx[0]).collect();
    let theta_sens: Vec<f64> =
        gx.iter().enumerate().map(|(k, v)| scale * (k as f64 / n as f64) * v).collect();

    let mut beta = vec![0.0; (n + 1) * m];
    let mut integral = vec![0.0; m];
    let mut quad = SimpsonScratch::new(m);
    integrand(g, sol.x[0], &mut quad.fa);
    for k in 0..n {
        quad.panel(g, sol.x[k], sol.x[k + 1], &mut integral);
        let row = &mut beta[(k + 1) * m..(k + 2) * m];
        for r in 0..m {
            row[r] = gx[k + 1] * integral[r];
        }
    }
    Ok(GridSensitivities {
        a: a_sens,
        theta: theta_sens,
        beta,
        dim: m,
        method: SensitivityMethod::ClosedForm,
    })
}

/// `φ(x) / g(x)²` into `out`.
fn integrand(g: &GradientFunction, x: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let gv = g.value(x);
    g.add_basis_values(x, 1.0 / (gv * gv), out);
}

/// Buffers for vector-valued adaptive Simpson over consecutive panels. `fa`
/// carries the integrand at the left end of the next panel.
struct SimpsonScratch {
    fa: Vec<f64>,
    fm: Vec<f64>,
    fb: Vec<f64>,
    fl: Vec<f64>,
    fr: Vec<f64>,
    refined: Vec<f64>,
}

impl SimpsonScratch {
    fn new(m: usize) -> Self {
        SimpsonScratch {
            fa: vec![0.0; m],
            fm: vec![0.0; m],
            fb: vec![0.0; m],
            fl: vec![0.0; m],
            fr: vec![0.0; m],
            refined: vec![0.0; m],
        }
    }

    /// Adds `∫_a^b φ/g²` to `acc`; leaves the integrand at `b` in `fa`.
    fn panel(&mut self, g: &GradientFunction, a: f64, b: f64, acc: &mut [f64]) {
        let mid = 0.5 * (a + b);
        integrand(g, mid, &mut self.fm);
        integrand(g, b, &mut self.fb);
        integrand(g, 0.5 * (a + mid), &mut self.fl);
        integrand(g, 0.5 * (mid + b), &mut self.fr);
        let w = b - a;
        let mut ok = true;
        let mut fmax = 0.0f64;
        for r in 0..acc.len() {
            fmax = fmax
                .max(self.fa[r].abs())
                .max(self.fm[r].abs())
                .max(self.fb[r].abs());
        }
        let tol = 1e-13 * w.abs() * fmax;
        for r in 0..acc.len() {
            let whole = w / 6.0 * (self.fa[r] + 4.0 * self.fm[r] + self.fb[r]);
            let halves = w / 12.0
                * (self.fa[r] + 4.0 * self.fl[r] + 2.0 * self.fm[r] + 4.0 * self.fr[r] + self.fb[r]);
            if (halves - whole).abs() > 15.0 * tol {
                ok = false;
                break;
            }
            self.refined[r] = halves + (halves - whole) / 15.0;
        }
        if ok {
            for r in 0..acc.len() {
                acc[r] += self.refined[r];
            }
        } else {
            let v = adaptive_simpson(g, a, b, &self.fa, &self.fm, &self.fb, tol.max(1e-300), MAX_SIMPSON_DEPTH);
            for r in 0..acc.len() {
                acc[r] += v[r];
            }
        }
        std::mem::swap(&mut self.fa, &mut self.fb);
    }
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    g: &GradientFunction,
    a: f64,
    b: f64,
    fa: &[f64],
    fm: &[f64],
    fb: &[f64],
    tol: f64,
    depth: usize,
) -> Vec<f64> {
    let m = fa.len();
    let mid = 0.5 * (a + b);
    let mut fl = vec![0.0; m];
    let mut fr = vec![0.0; m];
    integrand(g, 0.5 * (a + mid), &mut fl);
    integrand(g, 0.5 * (mid + b), &mut fr);
    let w = b - a;
    let mut whole = vec![0.0; m];
    let mut halves = vec![0.0; m];
    let mut err = 0.0f64;
    for r in 0..m {
        whole[r] = w / 6.0 * (fa[r] + 4.0 * fm[r] + fb[r]);
        halves[r] = w / 12.0 * (fa[r] + 4.0 * fl[r] + 2.0 * fm[r] + 4.0 * fr[r] + fb[r]);
        err = err.max((halves[r] - whole[r]).abs());
    }
    if depth == 0 || err <= 15.0 * tol {
        return halves.iter().zip(&whole).map(|(h, w)| h + (h - w) / 15.0).collect();
    }
    let left = adaptive_simpson(g, a, mid, fa, &fl, fm, 0.5 * tol, depth - 1);
    let right = adaptive_simpson(g, mid, b, fm, &fr, fb, 0.5 * tol, depth - 1);
    left.iter().zip(&right).map(|(l, r)| l + r).collect()
}

/// Sensitivities by RK4 on the variational equations, reusing the stored
/// trajectory for the stage values.
pub fn sensitivities_variational(
    sol: &CurveSolution,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<GridSensitivities> {
    let n = sol.steps;
    let m = g.dim();
    let h = sol.h();
    let scale = sol.theta.exp();
    let width = m + 2;
    // state layout: [a, theta, beta_0 .. beta_{m-1}]
    let mut s = vec![0.0; width];
    s[0] = 1.0;
    let mut a_out = Vec::with_capacity(n + 1);
    let mut t_out = Vec::with_capacity(n + 1);
    let mut b_out = Vec::with_capacity((n + 1) * m);
    a_out.push(1.0);
    t_out.push(0.0);
    b_out.extend(std::iter::repeat_n(0.0, m));

    let mut ks: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; width]);
    let mut tmp = vec![0.0; width];
    let weights = [0.0, 0.5, 0.5, 1.0];
    for step in 0..n {
        let x0 = sol.x[step];
        let mut y = x0;
        let mut prev_k = 0.0;
        for stage in 0..4 {
            if stage > 0 {
                y = x0 + weights[stage] * h * prev_k;
            }
            let (gv, gd) = g.value_and_slope(y);
            prev_k = scale * gv;
            let c = scale * gd;
            let w = weights[stage] * h;
            for i in 0..width {
                tmp[i] = if stage == 0 { s[i] } else { s[i] + w * ks[stage - 1][i] };
            }
            let k = &mut ks[stage];
            for i in 0..width {
                k[i] = c * tmp[i];
            }
            k[1] += scale * gv;
            g.add_basis_values(y, scale, &mut k[2..]);
        }
        for i in 0..width {
            s[i] += h / 6.0 * (ks[0][i] + 2.0 * ks[1][i] + 2.0 * ks[2][i] + ks[3][i]);
            if !s[i].is_finite() || s[i].abs() > cfg.blowup_bound {
                return Err(Error::Diverged { curve: None, t: (step + 1) as f64 * h, bound: cfg.blowup_bound });
            }
        }
        a_out.push(s[0]);
        t_out.push(s[1]);
        b_out.extend_from_slice(&s[2..]);
    }
    Ok(GridSensitivities {
        a: a_out,
        theta: t_out,
        beta: b_out,
        dim: m,
        method: SensitivityMethod::Variational,
    })
}

/// Closed form when its preconditions hold, otherwise the variational route.
pub fn sensitivities(
    sol: &CurveSolution,
    g: &GradientFunction,
    cfg: &DynamicsConfig,
) -> Result<GridSensitivities> {
    match sensitivities_closed_form(sol, g, cfg) {
        Ok(s) => Ok(s),
        Err(Error::GradientFloor { .. }) | Err(Error::NotMonotone) => {
            sensitivities_variational(sol, g, cfg)
        }
        Err(e) => Err(e),
    }
}

/// Sensitivities evaluated at measurement times; `beta` is row-major with
/// one row of length `dim` per time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSensitivities {
    pub a: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub dim: usize,
}

impl TimeSensitivities {
    pub fn beta_row(&self, j: usize) -> &[f64] {
        &self.beta[j * self.dim..(j + 1) * self.dim]
    }
}

/// Hermite interpolation of grid sensitivities, with node slopes from the
/// right-hand sides of the variational equations.
pub fn sensitivities_at_times(
    sol: &CurveSolution,
    sens: &GridSensitivities,
    g: &GradientFunction,
    times: &[f64],
) -> Result<TimeSensitivities> {
    let m = sens.dim;
    let h = sol.h();
    let scale = sol.theta.exp();
    let mut out = TimeSensitivities {
        a: Vec::with_capacity(times.len()),
        theta: Vec::with_capacity(times.len()),
        beta: Vec::with_capacity(times.len() * m),
        dim: m,
    };
    let mut phi0 = vec![0.0; m];
    let mut phi1 = vec![0.0; m];
    for &t in times {
        let (k, s) = locate(sol.steps, t)?;
        match s {
            None => {
                out.a.push(sens.a[k]);
                out.theta.push(sens.theta[k]);
                out.beta.extend_from_slice(sens.beta_row(k));
            }
            Some(s) => {
                let (x0, x1) = (sol.x[k], sol.x[k + 1]);
                let (g0, d0) = g.value_and_slope(x0);
                let (g1, d1) = g.value_and_slope(x1);
                let (c0, c1) = (scale * d0, scale * d1);
                out.a.push(hermite(s, h, sens.a[k], c0 * sens.a[k], sens.a[k + 1], c1 * sens.a[k + 1]));
                out.theta.push(hermite(
                    s,
                    h,
                    sens.theta[k],
                    c0 * sens.theta[k] + scale * g0,
                    sens.theta[k + 1],
                    c1 * sens.theta[k + 1] + scale * g1,
                ));
                phi0.iter_mut().for_each(|v| *v = 0.0);
                phi1.iter_mut().for_each(|v| *v = 0.0);
                g.add_basis_values(x0, scale, &mut phi0);
                g.add_basis_values(x1, scale, &mut phi1);
                let r0 = sens.beta_row(k);
                let r1 = sens.beta_row(k + 1);
                for r in 0..m {
                    out.beta.push(hermite(s, h, r0[r], c0 * r0[r] + phi0[r], r1[r], c1 * r1[r] + phi1[r]));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_g() -> GradientFunction {
        let basis = SplineBasis::uniform(3, vec![0.35, 0.6, 0.85, 1.1], 0).unwrap();
        GradientFunction::new(&basis, &[0.1, 1.2, 1.6, 0.4]).unwrap()
    }

    /// Cubic clamped spline reproducing `g(x) = x` via Greville abscissae.
    fn identity_g(lo: f64, hi: f64) -> GradientFunction {
        let basis = SplineBasis::clamped(3, vec![lo + 0.3 * (hi - lo), lo + 0.6 * (hi - lo)], lo, hi, 0).unwrap();
        let t = basis.knot_vector();
        let beta: Vec<f64> = (0..basis.dim()).map(|k| (t[k + 1] + t[k + 2] + t[k + 3]) / 3.0).collect();
        GradientFunction::new(&basis, &beta).unwrap()
    }

    fn constant_g(c: f64) -> GradientFunction {
        let basis = SplineBasis::clamped(3, vec![0.5, 1.0], -1.0, 3.0, 0).unwrap();
        GradientFunction::new(&basis, &vec![c; basis.dim()]).unwrap()
    }

    fn sup_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        diff / scale.max(1e-300)
    }

    #[test]
    fn piecewise_cache_matches_basis_sum() {
        let g = sim_g();
        for i in 0..=400 {
            let x = -0.3 + 2.0 * i as f64 / 400.0;
            let phi = g.basis().eval(x, 0).unwrap();
            let dphi = g.basis().eval(x, 1).unwrap();
            let direct: f64 = phi.iter().zip(g.beta()).map(|(p, b)| p * b).sum();
            let slope: f64 = dphi.iter().zip(g.beta()).map(|(p, b)| p * b).sum();
            let (v, d) = g.value_and_slope(x);
            assert!((v - direct).abs() < 1e-13, "x={x}");
            assert!((d - slope).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn constant_gradient_is_exact() {
        let g = constant_g(0.4);
        let sol = solve_trajectory(&g, 0.25, 0.0, &DynamicsConfig::with_h(1e-3)).unwrap();
        for (k, x) in sol.x.iter().enumerate() {
            assert!((x - (0.25 + 0.4 * k as f64 * 1e-3)).abs() < 1e-13);
        }
        let times = [0.0, 0.1234, 0.5, 0.77777, 1.0];
        let th = 0.3;
        let sol = solve_trajectory(&g, 0.25, th, &DynamicsConfig::with_h(1e-3)).unwrap();
        let v = eval_at_times(&sol, &g, &times).unwrap();
        for (t, x) in times.iter().zip(&v) {
            assert!((x - (0.25 + th.exp() * 0.4 * t)).abs() < 1e-13);
        }
    }

    #[test]
    fn exponential_solution() {
        let g = identity_g(0.0, 5.0);
        let sol = solve_trajectory(&g, 1.0, 0.0, &DynamicsConfig::with_h(1e-3)).unwrap();
        assert!((sol.x[1000] - std::f64::consts::E).abs() < 1e-10);
        let half = eval_at_times(&sol, &g, &[0.5, 0.0005]).unwrap();
        assert!((half[0] - 0.5f64.exp()).abs() < 1e-9);
        assert_eq!(half[0], sol.x[500]);
        assert!((half[1] - 0.0005f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let g = identity_g(0.0, 5.0);
        let err = |h: f64| {
            let sol = solve_trajectory(&g, 1.0, 0.0, &DynamicsConfig::with_h(h)).unwrap();
            (sol.x[sol.steps] - std::f64::consts::E).abs()
        };
        let e = [err(1e-2), err(5e-3), err(2.5e-3)];
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn grid_refinement_self_oracle() {
        let g = sim_g();
        let coarse = solve_trajectory(&g, 0.25, 0.0, &DynamicsConfig::with_h(5e-4)).unwrap();
        let fine = solve_trajectory(&g, 0.25, 0.0, &DynamicsConfig::with_h(5e-5)).unwrap();
        let dev = (0..=coarse.steps).fold(0.0f64, |m, k| m.max((coarse.x[k] - fine.x[10 * k]).abs()));
        assert!(dev < 1e-10, "deviation {dev}");
    }

    #[test]
    fn monotone_and_semigroup() {
        let g = sim_g();
        let cfg = DynamicsConfig::with_h(1e-3);
        let sol = solve_trajectory(&g, 0.22, 0.1, &cfg).unwrap();
        assert!(sol.x.windows(2).all(|w| w[1] >= w[0]));
        let (first, _) = integrate(&g, 0.22, 0.1, 1e-3, 500, 1e6).unwrap();
        let (second, _) = integrate(&g, first[500], 0.1, 1e-3, 500, 1e6).unwrap();
        assert!((second[500] - sol.x[1000]).abs() < 1e-10);
    }

    #[test]
    fn divergence_is_reported() {
        let basis = SplineBasis::clamped(1, vec![], 0.0, 1e9, 0).unwrap();
        // g(x) = x on [0, 1e9]: X(1) = a e^{e^θ}
        let g = GradientFunction::new(&basis, &[0.0, 1e9]).unwrap();
        let err = solve_trajectory(&g, 1.0, 3.0, &DynamicsConfig::with_h(1e-3)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn leaving_support_freezes() {
        let g = constant_g(5.0);
        let sol = solve_trajectory(&g, 0.0, 0.0, &DynamicsConfig::with_h(1e-3)).unwrap();
        assert!(sol.left_support);
        assert!(sol.x[1000] <= 3.0 + 5.0e-3);
        assert_eq!(sol.x[999], sol.x[1000]);
    }

    #[test]
    fn closed_form_initial_and_constant_cases() {
        let g = constant_g(0.4);
        let cfg = DynamicsConfig::with_h(1e-3);
        let th = -0.2f64;
        let sol = solve_trajectory(&g, 0.25, th, &cfg).unwrap();
        let s = sensitivities_closed_form(&sol, &g, &cfg).unwrap();
        assert_eq!(s.a[0], 1.0);
        assert_eq!(s.theta[0], 0.0);
        assert!(s.beta_row(0).iter().all(|&v| v == 0.0));
        for k in 0..=sol.steps {
            assert!((s.a[k] - 1.0).abs() < 1e-14);
            assert!((s.theta[k] - th.exp() * 0.4 * k as f64 / 1000.0).abs() < 1e-14);
        }
        let v = sensitivities_variational(&sol, &g, &cfg).unwrap();
        // Along the direction c·1, ∂X/∂β · 1 = e^θ t (partition of unity).
        for k in (0..=sol.steps).step_by(50) {
            let cf: f64 = s.beta_row(k).iter().sum();
            let vr: f64 = v.beta_row(k).iter().sum();
            let t = k as f64 / 1000.0;
            assert!((cf - th.exp() * t).abs() < 1e-8);
            assert!((vr - th.exp() * t).abs() < 1e-8);
        }
    }

    fn fd_check(a: f64, theta: f64) {
        let g = sim_g();
        let cfg = DynamicsConfig::with_h(5e-4);
        let sol = solve_trajectory(&g, a, theta, &cfg).unwrap();
        let cf = sensitivities_closed_form(&sol, &g, &cfg).unwrap();
        let vr = sensitivities_variational(&sol, &g, &cfg).unwrap();
        let eps = 1e-6;
        let traj = |a: f64, th: f64, beta: &[f64]| {
            let gg = GradientFunction::new(g.basis(), beta).unwrap();
            solve_trajectory(&gg, a, th, &cfg).unwrap().x
        };
        let beta = g.beta().to_vec();
        let fd_a: Vec<f64> = traj(a + eps, theta, &beta)
            .iter()
            .zip(traj(a - eps, theta, &beta))
            .map(|(p, q)| (p - q) / (2.0 * eps))
            .collect();
        let fd_t: Vec<f64> = traj(a, theta + eps, &beta)
            .iter()
            .zip(traj(a, theta - eps, &beta))
            .map(|(p, q)| (p - q) / (2.0 * eps))
            .collect();
        assert!(sup_rel(&fd_a, &cf.a) < 1e-4);
        assert!(sup_rel(&fd_t, &cf.theta) < 1e-4);
        assert!(sup_rel(&cf.a, &vr.a) < 1e-6);
        assert!(sup_rel(&cf.theta, &vr.theta) < 1e-6);
        for r in 0..beta.len() {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[r] += eps;
            bm[r] -= eps;
            let fd: Vec<f64> =
                traj(a, theta, &bp).iter().zip(traj(a, theta, &bm)).map(|(p, q)| (p - q) / (2.0 * eps)).collect();
            let c: Vec<f64> = (0..=sol.steps).map(|k| cf.beta_row(k)[r]).collect();
            let v: Vec<f64> = (0..=sol.steps).map(|k| vr.beta_row(k)[r]).collect();
            assert!(sup_rel(&fd, &c) < 1e-4, "beta_{r} closed vs fd {}", sup_rel(&fd, &c));
            assert!(sup_rel(&c, &v) < 1e-6, "beta_{r} closed vs variational {}", sup_rel(&c, &v));
        }
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        fd_check(0.3, 0.05);
        fd_check(0.2, -0.15);
    }

    #[test]
    fn closed_form_at_times_matches_grid_routes() {
        let g = sim_g();
        let cfg = DynamicsConfig::default();
        for (a, theta) in [(0.3, 0.05), (0.2, -0.15), (0.26, 0.0)] {
            let sol = solve_trajectory(&g, a, theta, &cfg).unwrap();
            assert!(closed_form_ok(&sol, &cfg).is_ok());
            let times = [0.0, 0.0371, 0.25, 0.5, 0.50013, 0.9, 1.0];
            let fitted = eval_at_times(&sol, &g, &times).unwrap();
            let direct = beta_closed_form_at_times(&sol, &g, &fitted, &cfg).unwrap();
            let vr = sensitivities_variational(&sol, &g, &cfg).unwrap();
            let via_grid = sensitivities_at_times(&sol, &vr, &g, &times).unwrap();
            let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (d, v) in direct.iter().zip(&via_grid.beta) {
                assert!((d - v).abs() < 1e-6 * scale, "{d} vs {v}");
            }
        }
    }

    #[test]
    fn node_summary_matches_full_check() {
        let g = sim_g();
        let cfg = DynamicsConfig::default();
        for (a, theta) in [(0.3, 0.05), (-0.3, 0.0), (1.2, 0.0)] {
            let sol = solve_trajectory(&g, a, theta, &cfg).unwrap();
            assert_eq!(closed_form_ok(&sol, &cfg).is_ok(), check_closed_form(&sol, &g, &cfg).is_ok());
        }
    }

    #[test]
    fn closed_form_rejects_vanishing_gradient() {
        let basis = SplineBasis::uniform(3, vec![0.35, 0.6, 0.85, 1.1], 0).unwrap();
        // starts outside the support, where g = 0
        let g = GradientFunction::new(&basis, &[0.1, 1.2, 1.6, 0.4]).unwrap();
        let cfg = DynamicsConfig::with_h(1e-3);
        let sol = solve_trajectory(&g, -0.3, 0.0, &cfg).unwrap();
        assert!(sol.left_support);
        assert!(sensitivities_closed_form(&sol, &g, &cfg).is_err());
        let s = sensitivities(&sol, &g, &cfg).unwrap();
        assert_eq!(s.method, SensitivityMethod::Variational);
    }

    #[test]
    fn time_sensitivities_interpolate() {
        let g = sim_g();
        let cfg = DynamicsConfig::with_h(5e-4);
        let (a, th) = (0.27, 0.08);
        let sol = solve_trajectory(&g, a, th, &cfg).unwrap();
        let sens = sensitivities(&sol, &g, &cfg).unwrap();
        let times = [0.0, 0.01234, 0.5, 0.70001, 1.0];
        let ts = sensitivities_at_times(&sol, &sens, &g, &times).unwrap();
        let eps = 1e-6;
        let at = |a: f64, th: f64| {
            let s = solve_trajectory(&g, a, th, &cfg).unwrap();
            eval_at_times(&s, &g, &times).unwrap()
        };
        let (p, q) = (at(a, th + eps), at(a, th - eps));
        for j in 0..times.len() {
            let fd = (p[j] - q[j]) / (2.0 * eps);
            assert!((fd - ts.theta[j]).abs() <= 1e-5 * (1e-3 + fd.abs()), "j={j}");
            let closed = th.exp() * times[j] * g.value(eval_at_times(&sol, &g, &[times[j]]).unwrap()[0]);
            assert!((closed - ts.theta[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn steps_validation() {
        assert_eq!(DynamicsConfig::with_h(5e-4).steps().unwrap(), 2000);
        assert!(DynamicsConfig::with_h(0.3).steps().is_err());
        assert!(DynamicsConfig::with_h(-1.0).steps().is_err());
    }
}
