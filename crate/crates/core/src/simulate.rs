//! Synthetic longitudinal data from a known gradient function.
//!
//! The default designs use `g` with coefficients `(0.1, 1.2, 1.6, 0.4)` on
//! cubic B-splines centred at `(0.35, 0.6, 0.85, 1.1)`, `θ_i ~ N(0, σθ²)`,
//! `a_il ~ c_a χ²_{k_a}` with mean 0.25 and SD 0.05, measurement times
//! i.i.d. uniform on `[0, 1]`, and Gaussian noise with SD 0.01.
//!
//! Randomness is ChaCha8 seeded from the user seed. Subject `i` draws `θ_i`
//! from stream `(i+1) << 32`; curve `(i, l)` draws its size, initial
//! condition, times and noise from stream `((i+1) << 32) | (l+1)`. Curves are
//! therefore independent of generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::data::{Curve, Dataset, ParameterState, Subject};
use crate::dynamics::{eval_at_times, solve_trajectory, DynamicsConfig, GradientFunction};
use crate::error::{Error, Result};

pub const TRUE_BETA: [f64; 4] = [0.1, 1.2, 1.6, 0.4];
pub const TRUE_KNOTS: [f64; 4] = [0.35, 0.6, 0.85, 1.1];
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), stream (i+1)<<32 | (l+1)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Moderate,
    Sparse,
    VeryDense,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "moderate" => Ok(Regime::Moderate),
            "sparse" => Ok(Regime::Sparse),
            "very_dense" => Ok(Regime::VeryDense),
            _ => Err(Error::InvalidArgument(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ADistribution {
    /// `c · χ²_k`
    ScaledChiSquare { c: f64, k: f64 },
    Normal { mean: f64, sd: f64 },
    Fixed { value: f64 },
}

impl ADistribution {
    /// Scaled χ² with the given mean and SD: `c = σ²/(2α)`, `k = α/c`.
    pub fn chi_square_matching(alpha: f64, sigma_a: f64) -> Self {
        let c = sigma_a * sigma_a / (2.0 * alpha);
        ADistribution::ScaledChiSquare { c, k: alpha / c }
    }

    pub fn mean_sd(&self) -> (f64, f64) {
        match *self {
            ADistribution::ScaledChiSquare { c, k } => (c * k, (2.0 * c * c * k).sqrt()),
            ADistribution::Normal { mean, sd } => (mean, sd),
            ADistribution::Fixed { value } => (value, 0.0),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(match *self {
            ADistribution::ScaledChiSquare { c, k } => {
                c * ChiSquared::new(k).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng)
            }
            ADistribution::Normal { mean, sd } => {
                Normal::new(mean, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng)
            }
            ADistribution::Fixed { value } => value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub regime: Regime,
    pub n_subjects: usize,
    pub curves_per_subject: usize,
    /// Inclusive range of measurements per curve, drawn uniformly.
    pub m_range: (usize, usize),
    pub beta_true: Vec<f64>,
    pub knots_true: Vec<f64>,
    pub sigma_theta: f64,
    pub alpha: f64,
    pub sigma_a: f64,
    pub sigma_eps: f64,
    pub a_dist: ADistribution,
    pub h: f64,
}

pub fn default_design(regime: Regime) -> SimDesign {
    let (m_range, curves, sigma_theta) = match regime {
        Regime::Moderate => ((5, 20), 20, 0.1),
        Regime::Sparse => ((3, 8), 20, 0.1),
        Regime::VeryDense => ((60, 100), 1, 0.0),
    };
    SimDesign {
        regime,
        n_subjects: 10,
        curves_per_subject: curves,
        m_range,
        beta_true: TRUE_BETA.to_vec(),
        knots_true: TRUE_KNOTS.to_vec(),
        sigma_theta,
        alpha: 0.25,
        sigma_a: 0.05,
        sigma_eps: 0.01,
        a_dist: ADistribution::chi_square_matching(0.25, 0.05),
        h: 5e-4,
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_subjects == 0 || self.curves_per_subject == 0 {
            return bad("design needs at least one subject and one curve");
        }
        if self.m_range.0 == 0 || self.m_range.0 > self.m_range.1 {
            return bad("measurement range must be nonempty and positive");
        }
        if self.sigma_theta < 0.0 || self.sigma_eps < 0.0 || self.sigma_a < 0.0 {
            return bad("standard deviations must be nonnegative");
        }
        if self.beta_true.len() != self.knots_true.len() {
            return bad("one coefficient per knot is required");
        }
        DynamicsConfig::with_h(self.h).steps().map(|_| ())
    }

    /// Basis of the true gradient: one cubic B-spline centred at each knot.
    pub fn true_basis(&self) -> Result<SplineBasis> {
        SplineBasis::uniform(3, self.knots_true.clone(), 0)
    }

    pub fn true_gradient(&self) -> Result<GradientFunction> {
        GradientFunction::new(&self.true_basis()?, &self.beta_true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    pub knots: Vec<f64>,
    pub theta: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub seed: u64,
    pub design: SimDesign,
    pub rng: String,
    /// Noise-free trajectory values at the measurement times.
    pub noiseless: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn state(&self) -> ParameterState {
        let mut st =
            ParameterState { beta: self.beta.clone(), theta: self.theta.clone(), a: self.a.clone(), alpha: 0.0 };
        st.alpha = st.mean_a();
        st
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn subject_stream(i: usize) -> u64 {
    ((i as u64) + 1) << 32
}

fn curve_stream(i: usize, l: usize) -> u64 {
    subject_stream(i) | ((l as u64) + 1)
}

/// Draws a dataset and its ground truth; identical for identical seeds.
pub fn generate(design: &SimDesign, seed: u64) -> Result<(Dataset, GroundTruth)> {
    design.validate()?;
    let g = design.true_gradient()?;
    let cfg = DynamicsConfig::with_h(design.h);
    let theta: Vec<f64> = (0..design.n_subjects)
        .map(|i| {
            let mut rng = stream_rng(seed, subject_stream(i));
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            design.sigma_theta * z
        })
        .collect();

    type CurveDraw = (f64, Vec<f64>, Vec<f64>, Vec<f64>);
    let pairs: Vec<(usize, usize)> =
        (0..design.n_subjects).flat_map(|i| (0..design.curves_per_subject).map(move |l| (i, l))).collect();
    let draws: Vec<CurveDraw> = pairs
        .par_iter()
        .map(|&(i, l)| {
            let mut rng = stream_rng(seed, curve_stream(i, l));
            let m = rng.random_range(design.m_range.0..=design.m_range.1);
            let a = design.a_dist.sample(&mut rng)?;
            let mut times: Vec<f64> = Vec::with_capacity(m);
            while times.len() < m {
                let t: f64 = rng.random::<f64>();
                if !times.contains(&t) {
                    times.push(t);
                }
            }
            times.sort_by(f64::total_cmp);
            let sol = solve_trajectory(&g, a, theta[i], &cfg)?;
            let x = eval_at_times(&sol, &g, &times)?;
            let y = x
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    v + design.sigma_eps * z
                })
                .collect();
            Ok((a, times, x, y))
        })
        .collect::<Result<_>>()?;

    let mut subjects = Vec::with_capacity(design.n_subjects);
    let mut a_all = Vec::with_capacity(design.n_subjects);
    let mut noiseless = Vec::with_capacity(pairs.len());
    let mut it = draws.into_iter();
    for i in 0..design.n_subjects {
        let mut curves = Vec::with_capacity(design.curves_per_subject);
        let mut ai = Vec::with_capacity(design.curves_per_subject);
        for l in 0..design.curves_per_subject {
            let (a, times, x, y) = it.next().expect("one draw per curve");
            curves.push(Curve { id: (l + 1).to_string(), times, values: y });
            ai.push(a);
            noiseless.push(x);
        }
        subjects.push(Subject { id: (i + 1).to_string(), curves });
        a_all.push(ai);
    }
    let ds = Dataset::new(subjects)?;
    let truth = GroundTruth {
        beta: design.beta_true.clone(),
        knots: design.knots_true.clone(),
        theta,
        a: a_all,
        seed,
        design: design.clone(),
        rng: RNG_NAME.into(),
        noiseless,
    };
    Ok((ds, truth))
}
