use std::path::{Path, PathBuf};

use autodyn::inference::{se_band, write_se_csv};
use autodyn::selection::StepwiseResult;
use autodyn::simulate::RNG_NAME;
use autodyn::twostage::{region_ise, two_stage, Stage2Method, TwoStageOptions, DEFAULT_REGIONS};
use autodyn::{
    build_flatness_penalty, default_design, generate, se_g, select_model, stepwise_knot_candidates, Candidate,
    Criterion, Dataset, DynamicsConfig, FitOptions, GroundTruth, PenaltyMatrix, PenaltySettings, SplineBasis,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::experiment::{compare_replicate, hierarchical_fit, summarize, ReplicateIse, REGION_LABELS};
use crate::manifest::{OutDir, RunManifest};
use crate::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 3;

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn build_basis(b: &BasisArgs) -> Result<SplineBasis, CliError> {
    let centres = match (&b.knots, b.m) {
        (Some(k), _) => k.clone(),
        (None, m) => {
            let m = m.unwrap_or(4);
            if m < 2 {
                return Err(CliError::Input("--M must be at least 2".into()));
            }
            (1..=m).map(|j| b.knot_offset + j as f64 / m as f64).collect()
        }
    };
    SplineBasis::uniform(3, centres, b.drop_leading).map_err(|e| CliError::Input(e.to_string()))
}

fn penalty_matrix(p: &PenaltyArgs, basis: &SplineBasis) -> Result<PenaltyMatrix, CliError> {
    match p.flat_a {
        Some(a) => build_flatness_penalty(basis, a, p.lambda_r, 8).map_err(|e| CliError::Input(e.to_string())),
        None if p.lambda_r != 0.0 => Err(CliError::Input("--lambdaR requires --A".into())),
        None => Ok(PenaltyMatrix::zeros(basis.dim())),
    }
}

fn settings(p: &PenaltyArgs) -> (PenaltySettings, FitOptions) {
    let pen = PenaltySettings { lambda1: p.lambda1, lambda2: p.lambda2, lambda3_0: p.lambda3, a_known: p.a_known };
    let opts = FitOptions {
        adaptive_lm: p.adaptive_lm,
        adaptive_nr: p.adaptive_nr,
        max_lm_iters: p.max_lm_iters,
        dynamics: DynamicsConfig::with_h(p.grid_h),
        ..Default::default()
    };
    (pen, opts)
}

fn truth_path(explicit: &Option<PathBuf>, data: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join("truth.json"))
}

/// Ground truth when `--a-known` is set; its absence is an input error.
fn known_truth(p: &PenaltyArgs, data: &Path, ds: &Dataset, m: &mut RunManifest) -> Result<Option<GroundTruth>, CliError> {
    if !p.a_known {
        return Ok(None);
    }
    let path = truth_path(&p.truth, data);
    if !path.exists() {
        return Err(CliError::Input(format!("--a-known needs the ground-truth sidecar; {} not found", path.display())));
    }
    let t = GroundTruth::load(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let shape_ok = t.a.len() == ds.n_subjects() && t.a.iter().zip(&ds.subjects).all(|(a, s)| a.len() == s.curves.len());
    if !shape_ok {
        return Err(CliError::Input("ground-truth initial conditions do not match the data layout".into()));
    }
    m.add_input(&path)?;
    Ok(Some(t))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect()
}

fn value_range(ds: &Dataset) -> (f64, f64) {
    ds.curves()
        .flat_map(|(_, c)| c.values.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

pub fn simulate(a: &SimulateArgs) -> Result<(i32, OutDir), CliError> {
    let mut design = default_design(a.regime.into());
    if let Some(n) = a.n_subjects {
        design.n_subjects = n;
    }
    if let Some(n) = a.curves_per_subject {
        design.curves_per_subject = n;
    }
    if let Some(s) = a.sigma_eps {
        design.sigma_eps = s;
    }
    if let Some(s) = a.sigma_theta {
        design.sigma_theta = s;
    }
    design.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let (ds, truth) = generate(&design, a.seed)?;
    let mut m = RunManifest::new("simulate", a)?;
    m.seed = Some(a.seed);
    m.rng = Some(RNG_NAME.to_string());
    let mut out = OutDir::create(&a.out, m)?;
    let mut csv = Vec::new();
    ds.write_csv(&mut csv)?;
    out.write("data.csv", &csv)?;
    out.write_json("truth.json", &truth)?;
    Ok((EXIT_OK, out))
}

pub fn fit_cmd(a: &FitArgs) -> Result<(i32, OutDir), CliError> {
    let ds = load_data(&a.data)?;
    let basis = build_basis(&a.basis)?;
    let b = penalty_matrix(&a.penalty, &basis)?;
    let (pen, opts) = settings(&a.penalty);
    let mut m = RunManifest::new("fit", a)?;
    m.add_input(&a.data)?;
    let truth = known_truth(&a.penalty, &a.data, &ds, &mut m)?;
    let f = hierarchical_fit(&ds, truth.as_ref(), &basis, &b, &pen, &opts)?;
    let g = f.gradient()?;
    let (lo, hi) = value_range(&ds);
    let xs = linspace(lo, hi, a.grid_n.max(1));
    let mut diagnostics = f.diagnostics.clone();
    let se = match f.info.as_ref().map(|info| se_g(info, f.sigma_eps2, &basis, &xs)) {
        Some(Ok((se, clamped))) => {
            if clamped > 0 {
                diagnostics.push(format!("{clamped} negative SE quadratic forms clamped to zero"));
            }
            se
        }
        Some(Err(e)) => {
            diagnostics.push(format!("standard errors unavailable: {e}"));
            vec![f64::NAN; xs.len()]
        }
        None => vec![f64::NAN; xs.len()],
    };
    let mut out = OutDir::create(&a.out, m)?;
    let mut result = f.clone();
    result.diagnostics = diagnostics;
    out.write_json("fit.json", &result)?;
    let mut csv = Vec::new();
    write_se_csv(&mut csv, &se_band(&g, &se, &xs))?;
    out.write("g_hat.csv", &csv)?;
    Ok((if f.converged { EXIT_OK } else { EXIT_NOT_CONVERGED }, out))
}

/// Entry of a `--candidates-file` JSON list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSpec {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default, rename = "M")]
    pub m: Option<usize>,
    #[serde(default)]
    pub knots: Option<Vec<f64>>,
    #[serde(default)]
    pub offset: Option<f64>,
    #[serde(default)]
    pub drop_leading: usize,
    #[serde(default, rename = "A")]
    pub flat_a: Option<f64>,
    #[serde(default)]
    pub lambda_r: Option<f64>,
}

impl CandidateSpec {
    fn build(&self, p: &PenaltyArgs) -> Result<Candidate, CliError> {
        let ba = BasisArgs {
            knots: self.knots.clone(),
            m: self.m,
            knot_offset: self.offset.unwrap_or(0.1),
            drop_leading: self.drop_leading,
        };
        let basis = build_basis(&ba)?;
        let label = self.label.clone().unwrap_or_else(|| match (&self.knots, self.m) {
            (Some(k), _) => format!("knots={k:?}"),
            (None, m) => format!("M={}", m.unwrap_or(4)),
        });
        let flat = match (self.flat_a.or(p.flat_a), self.lambda_r.unwrap_or(p.lambda_r)) {
            (Some(a), lr) => Some((a, lr)),
            (None, lr) if lr != 0.0 => return Err(CliError::Input(format!("candidate {label}: lambda_r requires A"))),
            _ => None,
        };
        Candidate::new(label, basis, flat).map_err(|e| CliError::Input(e.to_string()))
    }
}

#[derive(Debug, Serialize)]
struct RankingRow<'a> {
    rank: usize,
    label: &'a str,
    converged: bool,
    score: Option<f64>,
    n_lm: Option<usize>,
    n_nr: Option<usize>,
    error: Option<&'a str>,
}

pub fn select(a: &SelectArgs) -> Result<(i32, OutDir), CliError> {
    let ds = load_data(&a.data)?;
    let mut m = RunManifest::new("select", a)?;
    m.add_input(&a.data)?;
    let specs: Vec<CandidateSpec> = match &a.candidates_file {
        Some(p) => {
            m.add_input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => (2..=6)
            .map(|k| CandidateSpec {
                label: None,
                m: Some(k),
                knots: None,
                offset: None,
                drop_leading: 0,
                flat_a: None,
                lambda_r: None,
            })
            .collect(),
    };
    let candidates = specs.iter().map(|s| s.build(&a.penalty)).collect::<Result<Vec<_>, _>>()?;
    let (pen, opts) = settings(&a.penalty);
    let truth = known_truth(&a.penalty, &a.data, &ds, &mut m)?;
    let ranked = select_model(&ds, &candidates, &pen, &opts, truth.as_ref().map(|t| t.a.as_slice()))?;

    let stepwise: Option<StepwiseResult> = match a.stepwise {
        Some(c) => {
            let crit = match c {
                CriterionArg::Aic => Criterion::Aic,
                CriterionArg::Bic => Criterion::Bic,
            };
            let (lo, hi) = value_range(&ds);
            let knots: Vec<f64> = (1..20).map(|k| lo + (hi - lo) * k as f64 / 20.0).collect();
            Some(stepwise_knot_candidates(&ds, &vec![0.0; ds.n_subjects()], &knots, crit, false)?)
        }
        None => None,
    };

    let mut out = OutDir::create(&a.out, m)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in &ranked {
        wr.serialize(RankingRow {
            rank: r.rank,
            label: &r.label,
            converged: r.converged,
            score: r.score,
            n_lm: r.fit.as_ref().map(|f| f.n_lm),
            n_nr: r.fit.as_ref().map(|f| f.n_nr),
            error: r.error.as_deref(),
        })
        .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let csv = wr.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    out.write("ranking.csv", &csv)?;
    out.write_json("selection.json", &ranked)?;
    if let Some(s) = &stepwise {
        out.write_json("stepwise.json", s)?;
    }
    Ok((EXIT_OK, out))
}

#[derive(Debug, Serialize)]
struct RegionIse {
    region: String,
    lo: f64,
    hi: f64,
    ise: f64,
}

pub fn two_stage_cmd(a: &TwoStageArgs) -> Result<(i32, OutDir), CliError> {
    let ds = load_data(&a.data)?;
    let mut m = RunManifest::new("two-stage", a)?;
    m.add_input(&a.data)?;
    let stage2 = match a.stage2 {
        Stage2Arg::LocalQuadratic => Stage2Method::LocalQuadratic,
        Stage2Arg::Basis => Stage2Method::BasisRegression { basis: build_basis(&a.basis)?.spec() },
    };
    let opts = TwoStageOptions { stage2, ..Default::default() };
    let fit = two_stage(&ds, &opts)?;
    let xs = linspace(DEFAULT_REGIONS[0].0, DEFAULT_REGIONS[2].1, a.grid_n.max(1));
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["x", "g_hat"]).map_err(|e| CliError::Internal(e.to_string()))?;
    for &x in &xs {
        wr.write_record([x.to_string(), fit.value(x).to_string()]).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let csv = wr.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    let ise = match &a.truth {
        Some(p) => {
            m.add_input(p)?;
            let t = GroundTruth::load(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let g = t.design.true_gradient()?;
            let v = region_ise(|x| fit.value(x), |x| g.value(x), &DEFAULT_REGIONS)?;
            Some(
                REGION_LABELS
                    .iter()
                    .zip(DEFAULT_REGIONS)
                    .zip(v)
                    .map(|((l, (lo, hi)), ise)| RegionIse { region: (*l).into(), lo, hi, ise })
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let mut out = OutDir::create(&a.out, m)?;
    out.write("g_hat.csv", &csv)?;
    out.write_json("two_stage.json", &fit)?;
    if let Some(ise) = ise {
        out.write_json("ise.json", &ise)?;
    }
    Ok((EXIT_OK, out))
}

#[derive(Debug, Serialize)]
struct PerReplicateRow<'a> {
    replicate: usize,
    seed: u64,
    method: &'a str,
    converged: bool,
    region: &'a str,
    ise: f64,
}

pub fn compare(a: &CompareArgs) -> Result<(i32, OutDir), CliError> {
    if a.replicates == 0 {
        return Err(CliError::Input("--replicates must be positive".into()));
    }
    let design = default_design(a.regime.into());
    let rows: Vec<ReplicateIse> = (0..a.replicates)
        .into_par_iter()
        .map(|r| compare_replicate(&design, r, a.seed + r as u64, a.with_a_unknown))
        .collect::<autodyn::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut m = RunManifest::new("compare", a)?;
    m.seed = Some(a.seed);
    m.rng = Some(RNG_NAME.to_string());
    let mut out = OutDir::create(&a.out, m)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        for (k, label) in REGION_LABELS.iter().enumerate() {
            wr.serialize(PerReplicateRow {
                replicate: r.replicate,
                seed: r.seed,
                method: &r.method,
                converged: r.converged,
                region: label,
                ise: r.ise[k],
            })
            .map_err(|e| CliError::Internal(e.to_string()))?;
        }
    }
    out.write("per_replicate.csv", &wr.into_inner().map_err(|e| CliError::Internal(e.to_string()))?)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for s in summarize(&rows) {
        wr.serialize(s).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    out.write("table.csv", &wr.into_inner().map_err(|e| CliError::Internal(e.to_string()))?)?;
    Ok((EXIT_OK, out))
}
