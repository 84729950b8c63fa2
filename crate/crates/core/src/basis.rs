//! B-spline bases for the gradient function and quadratic penalties on them.
//!
//! Two knot layouts are supported:
//!
//! - [`KnotLayout::Clamped`]: interior knots inside `[lo, hi]` with the boundary
//!   knots repeated `degree + 1` times. Dimension is `interior + degree + 1`.
//! - [`KnotLayout::Uniform`]: the listed knots are the *centres* of the basis
//!   functions (odd degree only). The knot vector is the listed knots extended
//!   by `(degree + 1) / 2` copies of the outer spacing on each side, so `M`
//!   knots give exactly `M` functions. This is the layout used by the
//!   simulation designs ("`M` cubic B-splines with knots at ...").
//!
//! Outside `[lo, hi]` every basis value and derivative is zero.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spline degree.
pub const MAX_DEGREE: usize = 5;

const NB: usize = MAX_DEGREE + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnotLayout {
    #[default]
    Clamped,
    Uniform,
}

/// Serializable description of a [`SplineBasis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub interior_knots: Vec<f64>,
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    #[serde(default)]
    pub drop_leading: usize,
    #[serde(default)]
    pub layout: KnotLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct SplineBasis {
    degree: usize,
    interior_knots: Vec<f64>,
    lo: f64,
    hi: f64,
    drop_leading: usize,
    layout: KnotLayout,
    /// Knot vector used for evaluation. For the uniform layout it is padded by
    /// `degree` extra knots on each side so that the tails of the outermost
    /// functions can be evaluated with the standard span algorithm.
    eval_knots: Vec<f64>,
    /// Index in `eval_knots` function numbering of the first full-basis function.
    offset: usize,
    full_dim: usize,
}

impl TryFrom<BasisSpec> for SplineBasis {
    type Error = Error;

    fn try_from(spec: BasisSpec) -> Result<Self> {
        match spec.layout {
            KnotLayout::Clamped => {
                let (lo, hi) = match (spec.lo, spec.hi) {
                    (Some(lo), Some(hi)) => (lo, hi),
                    _ => return Err(Error::InvalidBasis("clamped layout needs lo and hi".into())),
                };
                SplineBasis::clamped(spec.degree, spec.interior_knots, lo, hi, spec.drop_leading)
            }
            KnotLayout::Uniform => {
                let basis =
                    SplineBasis::uniform(spec.degree, spec.interior_knots, spec.drop_leading)?;
                for (given, actual) in [(spec.lo, basis.lo), (spec.hi, basis.hi)] {
                    if let Some(v) = given {
                        if (v - actual).abs() > 1e-9 * (1.0 + actual.abs()) {
                            return Err(Error::InvalidBasis(format!(
                                "uniform layout boundary {v} does not match derived {actual}"
                            )));
                        }
                    }
                }
                Ok(basis)
            }
        }
    }
}

impl From<SplineBasis> for BasisSpec {
    fn from(b: SplineBasis) -> Self {
        BasisSpec {
            degree: b.degree,
            interior_knots: b.interior_knots,
            lo: Some(b.lo),
            hi: Some(b.hi),
            drop_leading: b.drop_leading,
            layout: b.layout,
        }
    }
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::InvalidBasis(format!("degree {degree} exceeds {MAX_DEGREE}")));
    }
    Ok(())
}

impl SplineBasis {
    /// Clamped basis on `[lo, hi]`.
    pub fn clamped(
        degree: usize,
        interior_knots: Vec<f64>,
        lo: f64,
        hi: f64,
        drop_leading: usize,
    ) -> Result<Self> {
        check_degree(degree)?;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidBasis(format!("bad boundary [{lo}, {hi}]")));
        }
        let mut prev = lo;
        for &k in &interior_knots {
            if !(k.is_finite() && k > prev && k < hi) {
                return Err(Error::InvalidBasis(format!(
                    "interior knots must be strictly increasing inside ({lo}, {hi}); got {k}"
                )));
            }
            prev = k;
        }
        let mut knots = vec![lo; degree + 1];
        knots.extend_from_slice(&interior_knots);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        let full_dim = interior_knots.len() + degree + 1;
        Self::finish(degree, interior_knots, lo, hi, drop_leading, KnotLayout::Clamped, knots, 0, full_dim)
    }

    /// Uniform-layout basis whose functions are centred at `centres`.
    pub fn uniform(degree: usize, centres: Vec<f64>, drop_leading: usize) -> Result<Self> {
        check_degree(degree)?;
        if degree % 2 == 0 {
            return Err(Error::InvalidBasis("uniform layout requires an odd degree".into()));
        }
        if centres.len() < 2 {
            return Err(Error::InvalidBasis("uniform layout needs at least two knots".into()));
        }
        if centres.iter().any(|k| !k.is_finite()) || centres.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidBasis("knots must be finite and strictly increasing".into()));
        }
        let pad = degree.div_ceil(2);
        let left = centres[1] - centres[0];
        let right = centres[centres.len() - 1] - centres[centres.len() - 2];
        let first = centres[0];
        let last = centres[centres.len() - 1];
        let lo = first - pad as f64 * left;
        let hi = last + pad as f64 * right;
        // `pad + degree` knots beyond each end; the outer `degree` ones only
        // serve evaluation and never carry a basis function of their own.
        let ext = pad + degree;
        let mut knots = Vec::with_capacity(centres.len() + 2 * ext);
        for j in (1..=ext).rev() {
            knots.push(first - j as f64 * left);
        }
        knots.extend_from_slice(&centres);
        for j in 1..=ext {
            knots.push(last + j as f64 * right);
        }
        let full_dim = centres.len();
        Self::finish(degree, centres, lo, hi, drop_leading, KnotLayout::Uniform, knots, degree, full_dim)
    }

    /// Equally spaced uniform-layout knots `offset + j / m`, `j = 1..=m`.
    pub fn equally_spaced(m: usize, offset: f64) -> Result<Self> {
        let centres = (1..=m).map(|j| offset + j as f64 / m as f64).collect();
        Self::uniform(3, centres, 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        degree: usize,
        interior_knots: Vec<f64>,
        lo: f64,
        hi: f64,
        drop_leading: usize,
        layout: KnotLayout,
        eval_knots: Vec<f64>,
        offset: usize,
        full_dim: usize,
    ) -> Result<Self> {
        if drop_leading > 2 {
            return Err(Error::InvalidBasis("drop_leading must be 0, 1 or 2".into()));
        }
        if drop_leading >= full_dim {
            return Err(Error::InvalidBasis("drop_leading removes every basis function".into()));
        }
        Ok(SplineBasis { degree, interior_knots, lo, hi, drop_leading, layout, eval_knots, offset, full_dim })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn drop_leading(&self) -> usize {
        self.drop_leading
    }

    pub fn layout(&self) -> KnotLayout {
        self.layout
    }

    /// Basis dimension `M`.
    pub fn dim(&self) -> usize {
        self.full_dim - self.drop_leading
    }

    /// Full knot vector (without evaluation padding).
    pub fn knot_vector(&self) -> &[f64] {
        let pad = match self.layout {
            KnotLayout::Clamped => 0,
            KnotLayout::Uniform => self.degree,
        };
        &self.eval_knots[pad..self.eval_knots.len() - pad]
    }

    pub fn spec(&self) -> BasisSpec {
        self.clone().into()
    }

    /// Index of the knot span containing `x`, or `None` outside `[lo, hi]`.
    pub(crate) fn span(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let p = self.degree;
        let t = &self.eval_knots;
        let last = t.len() - p - 2;
        // first index whose knot is > x, minus one
        let idx = t.partition_point(|&k| k <= x);
        let mut mu = idx.saturating_sub(1).clamp(p, last);
        // x == hi: step back over zero-length spans
        while mu > p && t[mu + 1] <= t[mu] {
            mu -= 1;
        }
        Some(mu)
    }

    /// Left end of span `mu` (evaluation-knot numbering).
    pub(crate) fn span_start(&self, mu: usize) -> f64 {
        self.eval_knots[mu]
    }

    /// Maps evaluation-knot function index to public basis index.
    #[inline]
    pub(crate) fn public_index(&self, ext_index: usize) -> Option<usize> {
        let k = ext_index.checked_sub(self.offset + self.drop_leading)?;
        (k < self.dim()).then_some(k)
    }

    /// Nonzero basis values on span `mu`: entry `j` belongs to evaluation
    /// function `mu - degree + j`.
    #[inline]
    pub(crate) fn local_values(&self, mu: usize, x: f64) -> [f64; NB] {
        let p = self.degree;
        let t = &self.eval_knots;
        let mut n = [0.0; NB];
        let mut left = [0.0; NB];
        let mut right = [0.0; NB];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Nonzero basis functions and derivatives up to `order` on span `mu`;
    /// `ders[k][j]` is the k-th derivative of evaluation function `mu - degree + j`.
    pub(crate) fn local_derivatives(&self, mu: usize, x: f64, order: usize) -> [[f64; NB]; NB] {
        let p = self.degree;
        let n = order.min(p);
        let t = &self.eval_knots;
        let mut ndu = [[0.0; NB]; NB];
        let mut left = [0.0; NB];
        let mut right = [0.0; NB];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = [[0.0; NB]; NB];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let p_i = p as isize;
        for r in 0..=p_i {
            let mut a = [[0.0; NB]; 2];
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=n as isize {
                let mut d = 0.0;
                let rk = r - k;
                let pk = p_i - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { -rk };
                let j2 = if r - 1 <= pk { k - 1 } else { p_i - r };
                for j in j1..=j2 {
                    let (ju, rkj) = (j as usize, (rk + j) as usize);
                    a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[(pk + 1) as usize][rkj];
                    d += a[s2][ju] * ndu[rkj][pk as usize];
                }
                if r <= pk {
                    let ku = k as usize;
                    a[s2][ku] = -a[s1][ku - 1] / ndu[(pk + 1) as usize][r as usize];
                    d += a[s2][ku] * ndu[r as usize][pk as usize];
                }
                ders[k as usize][r as usize] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=n {
            for j in 0..=p {
                ders[k][j] *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    /// Writes basis values (or derivatives) at `x` into `out` (length `M`).
    pub fn eval_into(&self, x: f64, deriv_order: usize, out: &mut [f64]) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite("x"));
        }
        if deriv_order > self.degree {
            return Err(Error::DerivativeOrder { order: deriv_order, degree: self.degree });
        }
        assert_eq!(out.len(), self.dim(), "output length must equal basis dimension");
        out.iter_mut().for_each(|v| *v = 0.0);
        let Some(mu) = self.span(x) else { return Ok(()) };
        let p = self.degree;
        let row = if deriv_order == 0 {
            self.local_values(mu, x)
        } else {
            self.local_derivatives(mu, x, deriv_order)[deriv_order]
        };
        for (j, v) in row.iter().take(p + 1).enumerate() {
            if let Some(k) = self.public_index(mu - p + j) {
                out[k] = *v;
            }
        }
        Ok(())
    }

    /// `(φ_k^{(d)}(x))_{k=1..M}`; all zeros outside `[lo, hi]`.
    pub fn eval(&self, x: f64, deriv_order: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, deriv_order, &mut out)?;
        Ok(out)
    }

    /// Design matrix with one row per abscissa.
    pub fn design_matrix(&self, xs: &[f64], deriv_order: usize) -> Result<DMatrix<f64>> {
        let m = self.dim();
        let mut mat = DMatrix::zeros(xs.len(), m);
        let mut row = vec![0.0; m];
        for (i, &x) in xs.iter().enumerate() {
            self.eval_into(x, deriv_order, &mut row)?;
            for k in 0..m {
                mat[(i, k)] = row[k];
            }
        }
        Ok(mat)
    }

    /// Distinct knots (evaluation numbering) lying strictly inside `(a, b)`.
    pub(crate) fn breakpoints_in(&self, a: f64, b: f64) -> Vec<f64> {
        let mut pts = vec![a];
        for &k in &self.eval_knots {
            if k > a && k < b && k > *pts.last().unwrap() {
                pts.push(k);
            }
        }
        pts.push(b);
        pts
    }
}

/// Quadratic penalty `βᵀ B β` on the basis coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
    pub lambda_r: f64,
    /// Flatness onset; `None` for explicitly supplied matrices.
    pub a: Option<f64>,
}

impl PenaltyMatrix {
    pub fn zeros(m: usize) -> Self {
        PenaltyMatrix { matrix: DMatrix::zeros(m, m), lambda_r: 0.0, a: None }
    }

    /// Wraps an explicit matrix after checking symmetry and numerical PSD.
    pub fn explicit(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidArgument("penalty matrix must be square".into()));
        }
        let asym = (&matrix - matrix.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + matrix.abs().max()) {
            return Err(Error::InvalidArgument("penalty matrix must be symmetric".into()));
        }
        let eig = nalgebra::SymmetricEigen::new(matrix.clone());
        if eig.eigenvalues.iter().any(|&e| e < -1e-10) {
            return Err(Error::InvalidArgument("penalty matrix must be positive semidefinite".into()));
        }
        Ok(PenaltyMatrix { matrix, lambda_r: 0.0, a: None })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, beta: &[f64]) -> f64 {
        let m = self.dim();
        let mut acc = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..m {
                row += self.matrix[(i, j)] * beta[j];
            }
            acc += beta[i] * row;
        }
        acc
    }

    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        let m = self.dim();
        (0..m).map(|i| (0..m).map(|j| self.matrix[(i, j)] * beta[j]).sum()).collect()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `λ_R ∫_A^{2A} φ′(x) φ′(x)ᵀ dx` by Gauss–Legendre with `quad_points` nodes
/// per knot span intersected with `[A, 2A]`.
pub fn build_flatness_penalty(
    basis: &SplineBasis,
    a: f64,
    lambda_r: f64,
    quad_points: usize,
) -> Result<PenaltyMatrix> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!("flatness onset A must be positive, got {a}")));
    }
    if !(lambda_r >= 0.0) || !lambda_r.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda_R must be nonnegative, got {lambda_r}")));
    }
    if quad_points < 2 {
        return Err(Error::InvalidArgument("quad_points must be at least 2".into()));
    }
    let m = basis.dim();
    let mut mat = DMatrix::zeros(m, m);
    if lambda_r > 0.0 && basis.degree() > 0 {
        let (nodes, weights) = gauss_legendre(quad_points);
        let lo = a.max(basis.lo());
        let hi = (2.0 * a).min(basis.hi());
        if lo < hi {
            let pts = basis.breakpoints_in(lo, hi);
            let mut d1 = vec![0.0; m];
            for w in pts.windows(2) {
                let (u, v) = (w[0], w[1]);
                let half = 0.5 * (v - u);
                let mid = 0.5 * (u + v);
                for (z, wt) in nodes.iter().zip(&weights) {
                    let x = mid + half * z;
                    basis.eval_into(x, 1, &mut d1)?;
                    let scale = wt * half;
                    for i in 0..m {
                        if d1[i] == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            mat[(i, j)] += scale * d1[i] * d1[j];
                        }
                    }
                }
            }
            mat *= lambda_r;
        }
    }
    Ok(PenaltyMatrix { matrix: mat, lambda_r, a: Some(a) })
}
