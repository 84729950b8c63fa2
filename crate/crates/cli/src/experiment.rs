//! Replicated simulation comparisons shared by `compare` and the acceptance
//! target.

use autodyn::twostage::{region_ise, two_stage, Stage2Method, TwoStageOptions, DEFAULT_REGIONS};
use autodyn::{
    fit, generate, Dataset, FitOptions, FitResult, GroundTruth, ParameterState, PenaltyMatrix,
    PenaltySettings, Result, SimDesign, SplineBasis,
};
use serde::{Deserialize, Serialize};

pub const REGION_LABELS: [&str; 3] = ["[-0.5,0.2]", "(0.2,1]", "(1,1.5]"];

/// Fit from the default start; with `truth`, initial conditions are set to
/// the true ones and held fixed.
pub fn hierarchical_fit(
    ds: &Dataset,
    truth: Option<&GroundTruth>,
    basis: &SplineBasis,
    b: &PenaltyMatrix,
    pen: &PenaltySettings,
    opts: &FitOptions,
) -> Result<FitResult> {
    let mut init = ParameterState::initial(ds, basis.dim());
    let mut pen = *pen;
    if let Some(t) = truth {
        init.a = t.a.clone();
        init.alpha = init.mean_a();
        pen.a_known = true;
    }
    fit(ds, basis, b, &pen, opts, Some(&init))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateIse {
    pub replicate: usize,
    pub seed: u64,
    pub method: String,
    pub converged: bool,
    /// One entry per region of [`REGION_LABELS`].
    pub ise: Vec<f64>,
}

/// One replicate: hierarchical fit(s) on the true basis plus both two-stage
/// variants, scored by region ISE against the true `g`.
pub fn compare_replicate(design: &SimDesign, replicate: usize, seed: u64, with_a_unknown: bool) -> Result<Vec<ReplicateIse>> {
    let (ds, truth) = generate(design, seed)?;
    let basis = design.true_basis()?;
    let g_true = design.true_gradient()?;
    let b = PenaltyMatrix::zeros(basis.dim());
    let opts = FitOptions { inference: false, ..Default::default() };
    let mut rows = Vec::new();
    let mut push = |method: &str, converged: bool, ise: Vec<f64>| {
        rows.push(ReplicateIse { replicate, seed, method: method.into(), converged, ise })
    };

    let f = hierarchical_fit(&ds, Some(&truth), &basis, &b, &PenaltySettings::default(), &opts)?;
    let gh = f.gradient()?;
    push("hierarchical_a_known", f.converged, region_ise(|x| gh.value(x), |x| g_true.value(x), &DEFAULT_REGIONS)?);
    if with_a_unknown {
        let f = hierarchical_fit(&ds, None, &basis, &b, &PenaltySettings::default(), &opts)?;
        let gh = f.gradient()?;
        push("hierarchical", f.converged, region_ise(|x| gh.value(x), |x| g_true.value(x), &DEFAULT_REGIONS)?);
    }
    let lq = two_stage(&ds, &TwoStageOptions::default())?;
    push("two_stage_local_quadratic", true, region_ise(|x| lq.value(x), |x| g_true.value(x), &DEFAULT_REGIONS)?);
    let bo = TwoStageOptions { stage2: Stage2Method::BasisRegression { basis: basis.spec() }, ..Default::default() };
    let br = two_stage(&ds, &bo)?;
    push("two_stage_true_basis", true, region_ise(|x| br.value(x), |x| g_true.value(x), &DEFAULT_REGIONS)?);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub region: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Sample mean and SD (`n − 1` denominator).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

/// Mean / median / SD of the ISE per method and region, methods in order of
/// first appearance.
pub fn summarize(rows: &[ReplicateIse]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = Vec::new();
    for m in methods {
        for (k, label) in REGION_LABELS.iter().enumerate() {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.ise[k]).collect();
            let (mean, sd) = mean_sd(&v);
            out.push(SummaryRow { method: m.into(), region: (*label).into(), n: v.len(), mean, median: median(&v), sd });
        }
    }
    out
}
