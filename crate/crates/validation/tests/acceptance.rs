//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run alone with `cargo test -p autodyn-validation --test acceptance`; pass
//! criterion ids (`c1 … c9`, `plant`) as arguments to run a subset. Exits
//! nonzero if any selected criterion fails.

use std::ffi::OsString;
use std::path::Path;
use std::time::Instant;

use autodyn::dynamics::{sensitivities_closed_form, sensitivities_variational};
use autodyn::optimizer::assemble_jacobians;
use autodyn::simulate::{TRUE_BETA, TRUE_KNOTS};
use autodyn::twostage::DEFAULT_REGIONS;
use autodyn::{
    approx_cv, build_flatness_penalty, default_design, eval_at_times, exact_cv, fit, generate, info_matrices, loss,
    region_ise, se_g, select_model, solve_trajectory, Candidate, Curve, Dataset, DynamicsConfig, FitOptions,
    GradientFunction, ParameterState, PenaltyMatrix, PenaltySettings, Regime, SplineBasis, Subject,
};
use autodyn_cli::experiment::{compare_replicate, hierarchical_fit, median};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal};

type Outcome = Result<(bool, String), String>;

fn sup_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale.max(1e-300)
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn true_g() -> GradientFunction {
    let basis = SplineBasis::uniform(3, TRUE_KNOTS.to_vec(), 0).unwrap();
    GradientFunction::new(&basis, &TRUE_BETA).unwrap()
}

/// Closed-form vs variational vs central differences over 50 draws.
fn c1() -> Outcome {
    let g = true_g();
    let cfg = DynamicsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let chi = ChiSquared::new(50.0).unwrap();
    let nt = Normal::new(0.0, 0.1).unwrap();
    let eps = 1e-6;
    let (mut worst_cv, mut worst_fd) = (0.0f64, 0.0f64);
    let traj = |beta: &[f64], a: f64, th: f64| -> Result<Vec<f64>, String> {
        let gg = GradientFunction::new(g.basis(), beta).map_err(e2s)?;
        Ok(solve_trajectory(&gg, a, th, &cfg).map_err(e2s)?.x)
    };
    let fd = |p: Vec<f64>, q: Vec<f64>| -> Vec<f64> { p.iter().zip(q).map(|(p, q)| (p - q) / (2.0 * eps)).collect() };
    for _ in 0..50 {
        let a = 0.005 * chi.sample(&mut rng);
        let th = nt.sample(&mut rng);
        let beta = TRUE_BETA.to_vec();
        let sol = solve_trajectory(&g, a, th, &cfg).map_err(e2s)?;
        let cf = sensitivities_closed_form(&sol, &g, &cfg).map_err(e2s)?;
        let vr = sensitivities_variational(&sol, &g, &cfg).map_err(e2s)?;
        let fa = fd(traj(&beta, a + eps, th)?, traj(&beta, a - eps, th)?);
        let ft = fd(traj(&beta, a, th + eps)?, traj(&beta, a, th - eps)?);
        worst_cv = worst_cv.max(sup_rel(&cf.a, &vr.a)).max(sup_rel(&cf.theta, &vr.theta));
        worst_fd = worst_fd.max(sup_rel(&fa, &cf.a)).max(sup_rel(&ft, &cf.theta));
        worst_fd = worst_fd.max(sup_rel(&fa, &vr.a)).max(sup_rel(&ft, &vr.theta));
        // β columns can vanish identically, so scale by the whole β block
        let (mut scale, mut d_cv, mut d_fd) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..beta.len() {
            let (mut bp, mut bm) = (beta.clone(), beta.clone());
            bp[r] += eps;
            bm[r] -= eps;
            let f = fd(traj(&bp, a, th)?, traj(&bm, a, th)?);
            for k in 0..=sol.steps {
                let (c, v) = (cf.beta_row(k)[r], vr.beta_row(k)[r]);
                scale = scale.max(c.abs());
                d_cv = d_cv.max((c - v).abs());
                d_fd = d_fd.max((f[k] - c).abs()).max((f[k] - v).abs());
            }
        }
        worst_cv = worst_cv.max(d_cv / scale);
        worst_fd = worst_fd.max(d_fd / scale);
    }
    Ok((
        worst_cv < 1e-6 && worst_fd < 1e-4,
        format!("closed vs variational {worst_cv:.2e} (< 1e-6), vs central differences {worst_fd:.2e} (< 1e-4)"),
    ))
}

/// Empirical RK4 order on X′ = X.
fn c2() -> Outcome {
    let basis = SplineBasis::clamped(1, vec![], 0.0, 5.0, 0).map_err(e2s)?;
    let g = GradientFunction::new(&basis, &[0.0, 5.0]).map_err(e2s)?;
    let err = |h: f64| -> Result<f64, String> {
        let sol = solve_trajectory(&g, 1.0, 0.0, &DynamicsConfig::with_h(h)).map_err(e2s)?;
        Ok((sol.x[sol.steps] - std::f64::consts::E).abs())
    };
    let e = [err(1e-2)?, err(5e-3)?, err(2.5e-3)?];
    let orders: Vec<f64> = e.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let ok = orders.iter().all(|p| (3.8..=4.2).contains(p));
    Ok((ok, format!("orders {:.3}, {:.3} (errors {:.2e}, {:.2e}, {:.2e})", orders[0], orders[1], e[0], e[1], e[2])))
}

/// Approximate vs exact leave-one-curve-out CV on the tiny instance.
fn c3() -> Outcome {
    let mut design = default_design(Regime::Moderate);
    design.n_subjects = 3;
    design.curves_per_subject = 3;
    design.m_range = (4, 4);
    let (ds, truth) = generate(&design, 1).map_err(e2s)?;
    let basis = SplineBasis::equally_spaced(3, 0.1).map_err(e2s)?;
    let b = PenaltyMatrix::zeros(basis.dim());
    let pen = PenaltySettings { a_known: true, ..Default::default() };
    let opts = FitOptions { adaptive_nr: false, ..Default::default() };
    let mut init = ParameterState::initial(&ds, basis.dim());
    init.a = truth.a.clone();
    init.alpha = init.mean_a();
    let f = fit(&ds, &basis, &b, &pen, &opts, Some(&init)).map_err(e2s)?;
    let approx = approx_cv(&ds, &f, &basis, &b).map_err(e2s)?;
    let exact = exact_cv(&ds, &basis, &b, &pen, &opts, Some(&f.state), 500).map_err(e2s)?;
    let rel = (approx.score - exact.score).abs() / exact.score;
    Ok((
        rel <= 0.05 && exact.flagged.is_empty(),
        format!(
            "approx {:.5e}, exact {:.5e}, relative difference {:.3} (<= 0.05); full fit converged {}, refits flagged {}",
            approx.score,
            exact.score,
            rel,
            f.converged,
            exact.flagged.len()
        ),
    ))
}

struct ModerateRuns {
    m4_converged: usize,
    m4_selected: usize,
    mise: f64,
    mspe: f64,
    picks: Vec<String>,
}

/// Moderate design, a known, candidates M = 2..6, seeds 1..=10.
fn moderate_runs() -> Result<ModerateRuns, String> {
    let design = default_design(Regime::Moderate);
    let pen = PenaltySettings { a_known: true, ..Default::default() };
    let opts = FitOptions::default();
    let g_true = design.true_gradient().map_err(e2s)?;
    let mut runs = ModerateRuns { m4_converged: 0, m4_selected: 0, mise: 0.0, mspe: 0.0, picks: Vec::new() };
    let reps = 10;
    for seed in 1..=reps {
        let (ds, truth) = generate(&design, seed).map_err(e2s)?;
        let cands = (2..=6)
            .map(|m| Candidate::new(format!("M={m}"), SplineBasis::equally_spaced(m, 0.1)?, None))
            .collect::<autodyn::Result<Vec<_>>>()
            .map_err(e2s)?;
        let ranked = select_model(&ds, &cands, &pen, &opts, Some(&truth.a)).map_err(e2s)?;
        runs.picks.push(ranked[0].label.clone());
        if ranked[0].label == "M=4" {
            runs.m4_selected += 1;
        }
        let m4 = ranked.iter().find(|r| r.label == "M=4").ok_or("M=4 missing")?;
        if m4.converged {
            runs.m4_converged += 1;
        }
        let f = m4.fit.as_ref().ok_or_else(|| format!("seed {seed}: M=4 fit failed: {:?}", m4.error))?;
        let gh = f.gradient().map_err(e2s)?;
        let (lo, hi) = ds
            .curves()
            .flat_map(|(_, c)| c.values.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        runs.mise += region_ise(|x| gh.value(x), |x| g_true.value(x), &[(lo, hi)]).map_err(e2s)?[0] / reps as f64;
        let th = &f.state.theta;
        runs.mspe += th.iter().zip(&truth.theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / th.len() as f64
            / reps as f64;
    }
    Ok(runs)
}

fn c4(r: &ModerateRuns) -> Outcome {
    Ok((
        r.m4_converged >= 9 && r.m4_selected >= 7,
        format!("M=4 converged {}/10 (>= 9), selected {}/10 (>= 7); picks {:?}", r.m4_converged, r.m4_selected, r.picks),
    ))
}

fn c5(r: &ModerateRuns) -> Outcome {
    Ok((r.mise < 5e-3 && r.mspe < 5e-3, format!("MISE {:.3e} (< 5e-3), MSPE(theta) {:.3e} (< 5e-3)", r.mise, r.mspe)))
}

/// Sparse design: two-stage (local quadratic) vs hierarchical with a known.
fn c6() -> Outcome {
    let design = default_design(Regime::Sparse);
    let mut hier = Vec::new();
    let mut two = Vec::new();
    for (r, seed) in (1..=10u64).enumerate() {
        for row in compare_replicate(&design, r, seed, false).map_err(e2s)? {
            match row.method.as_str() {
                "hierarchical_a_known" => hier.push(row.ise[1]),
                "two_stage_local_quadratic" => two.push(row.ise[1]),
                _ => {}
            }
        }
    }
    let (mh, mt) = (median(&hier), median(&two));
    let ratio = mt / mh;
    Ok((ratio >= 5.0, format!("median ISE on (0.2,1]: two-stage {mt:.3e}, hierarchical {mh:.3e}, ratio {ratio:.1} (>= 5)")))
}

/// Sparse design: averaged SE of ĝ vs cross-replicate SD.
fn c7() -> Outcome {
    let design = default_design(Regime::Sparse);
    let basis = design.true_basis().map_err(e2s)?;
    let b = PenaltyMatrix::zeros(basis.dim());
    let xs: Vec<f64> = (1..=50).map(|k| 0.2 + 0.8 * k as f64 / 50.0).collect();
    let mut ghat = Vec::new();
    let mut se_sum = vec![0.0; xs.len()];
    let reps = 20;
    for seed in 1..=reps {
        let (ds, truth) = generate(&design, seed).map_err(e2s)?;
        let f = hierarchical_fit(&ds, Some(&truth), &basis, &b, &PenaltySettings::default(), &FitOptions::default())
            .map_err(e2s)?;
        let info = f.info.as_ref().ok_or("information matrices missing")?;
        let (se, _) = se_g(info, f.sigma_eps2, &basis, &xs).map_err(e2s)?;
        for (s, v) in se_sum.iter_mut().zip(se) {
            *s += v / reps as f64;
        }
        let g = f.gradient().map_err(e2s)?;
        ghat.push(xs.iter().map(|&x| g.value(x)).collect::<Vec<_>>());
    }
    let mut ratios = Vec::new();
    for k in 0..xs.len() {
        let v: Vec<f64> = ghat.iter().map(|g| g[k]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        ratios.push(se_sum[k] / sd);
    }
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    Ok((lo >= 0.8 && hi <= 2.5, format!("SE / empirical SD over 50 points in (0.2,1]: min {lo:.3}, max {hi:.3} (within [0.8, 2.5])")))
}

/// Loss, information matrices and region ISE against brute-force loops.
fn c8() -> Outcome {
    let mut design = default_design(Regime::Sparse);
    design.n_subjects = 3;
    design.curves_per_subject = 2;
    let (ds, truth) = generate(&design, 5).map_err(e2s)?;
    let basis = design.true_basis().map_err(e2s)?;
    let mut state = truth.state();
    state.beta = vec![0.12, 1.1, 1.7, 0.35];
    state.alpha = 0.24;
    let g = GradientFunction::new(&basis, &state.beta).map_err(e2s)?;
    let cfg = DynamicsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
    let bm = &r * r.transpose() * 0.1;
    let b = PenaltyMatrix::explicit(bm.clone()).map_err(e2s)?;
    let pen = PenaltySettings { lambda1: 0.3, lambda2: 0.07, ..Default::default() };

    let got = loss(&ds, &state, &g, &pen, &b, &cfg).map_err(e2s)?;
    let mut sse = 0.0;
    for (i, s) in ds.subjects.iter().enumerate() {
        for (l, c) in s.curves.iter().enumerate() {
            let sol = solve_trajectory(&g, state.a[i][l], state.theta[i], &cfg).map_err(e2s)?;
            let x = eval_at_times(&sol, &g, &c.times).map_err(e2s)?;
            for j in 0..c.len() {
                sse += (c.values[j] - x[j]) * (c.values[j] - x[j]);
            }
        }
    }
    let mut pa = 0.0;
    for row in &state.a {
        for a in row {
            pa += 0.3 * (a - 0.24) * (a - 0.24);
        }
    }
    let mut pt = 0.0;
    for t in &state.theta {
        pt += 0.07 * t * t;
    }
    let mut pb = 0.0;
    for p in 0..4 {
        for q in 0..4 {
            pb += state.beta[p] * bm[(p, q)] * state.beta[q];
        }
    }
    let want = sse + pa + pt + pb;
    let loss_err = (got.total - want).abs() / want;

    let info = info_matrices(&ds, &state, &g, &cfg, &b, 0.07).map_err(e2s)?;
    let jb = assemble_jacobians(&ds, &state, &g, &cfg).map_err(e2s)?;
    let n = ds.n_subjects();
    let mut an = DMatrix::<f64>::zeros(4, 4);
    let mut cn = DMatrix::<f64>::zeros(n, 4);
    let mut dn = vec![0.0; n];
    let mut row = 0;
    for ((i, _), c) in ds.curves() {
        for _ in 0..c.len() {
            for p in 0..4 {
                for q in 0..4 {
                    an[(p, q)] += jb.j_beta[(row, p)] * jb.j_beta[(row, q)];
                }
                cn[(i, p)] += jb.j_theta[row] * jb.j_beta[(row, p)];
            }
            dn[i] += jb.j_theta[row] * jb.j_theta[row];
            row += 1;
        }
    }
    let mut schur = &an + &bm;
    for i in 0..n {
        for p in 0..4 {
            for q in 0..4 {
                schur[(p, q)] -= cn[(i, p)] * cn[(i, q)] / (dn[i] + 0.07);
            }
        }
    }
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).abs().max() / b.abs().max();
    let info_err = rel(&info.an, &an)
        .max(rel(&info.cn, &cn))
        .max(dn.iter().zip(&info.dn).fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / a.abs())))
        .max(rel(&info.schur(&b), &schur));

    let f = |x: f64| (2.0 * x).sin() + x * x;
    let gt = |x: f64| g.value(x);
    let got_ise = region_ise(f, gt, &DEFAULT_REGIONS).map_err(e2s)?;
    let mut ise_err = 0.0f64;
    for (k, &(lo, hi)) in DEFAULT_REGIONS.iter().enumerate() {
        let n = ((hi - lo) * 2000.0_f64).ceil() as usize;
        let dx = (hi - lo) / n as f64;
        let mut s = 0.0;
        for j in 0..=n {
            let x = if j == n { hi } else { lo + j as f64 * dx };
            let w = if j == 0 || j == n { 0.5 } else { 1.0 };
            s += w * (f(x) - gt(x)).powi(2);
        }
        ise_err = ise_err.max((got_ise[k] - s * dx).abs() / (s * dx));
    }
    let worst = loss_err.max(info_err).max(ise_err);
    Ok((worst <= 1e-12, format!("relative errors: loss {loss_err:.1e}, info matrices {info_err:.1e}, region ISE {ise_err:.1e} (<= 1e-12)")))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

/// Every command twice, at different thread counts, into the same directory.
fn c9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let root = tmp.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let sim = root.join("sim");
    let data = sim.join("data.csv");
    let cands = root.join("candidates.json");
    std::fs::write(&cands, r#"[{"M": 3}, {"M": 4}]"#).map_err(e2s)?;
    let cfg = root.join("fit.cfg");
    std::fs::write(&cfg, "# fit settings\nlambda2 = 0.01\nadaptive-nr = true\n").map_err(e2s)?;
    let out = root.join("out");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["simulate".into(), "--regime".into(), "sparse".into(), "--seed".into(), "7".into(), "--out".into(), s(&sim)]),
        ("fit", vec!["--config".into(), s(&cfg), "fit".into(), "--data".into(), s(&data), "--a-known".into(), "--out".into(), s(&out)]),
        ("select", vec!["select".into(), "--data".into(), s(&data), "--a-known".into(), "--candidates-file".into(), s(&cands), "--out".into(), s(&out)]),
        ("two-stage", vec!["two-stage".into(), "--data".into(), s(&data), "--truth".into(), s(&sim.join("truth.json")), "--out".into(), s(&out)]),
        ("compare", vec!["compare".into(), "--replicates".into(), "2".into(), "--out".into(), s(&out)]),
    ];
    let mut notes = Vec::new();
    let mut all = true;
    for (name, args) in commands {
        let dir = if name == "simulate" { sim.clone() } else { out.clone() };
        let mut runs = Vec::new();
        for threads in ["1", "3"] {
            let _ = std::fs::remove_dir_all(&dir);
            let mut argv: Vec<OsString> = vec!["autodyn".into(), "--threads".into(), threads.into()];
            argv.extend(args.iter().map(OsString::from));
            let code = autodyn_cli::run(argv);
            runs.push((code, read_dir_bytes(&dir)));
        }
        // keep the simulated data for the later commands
        let same = runs[0] == runs[1];
        let ok = same && runs[0].0 == 0;
        all &= ok;
        notes.push(format!("{name}:{}", if ok { "identical" } else if same { "identical, nonzero exit" } else { "DIFFERS" }));
    }
    Ok((all, notes.join(" ")))
}

/// Plant-shaped data: g(0) = g′(0) = 0 by construction, flat beyond A.
fn plant() -> Outcome {
    // growth rate vanishing at a mature size of 1.2, so trajectories saturate
    let a_flat = 0.8;
    let truth = |x: f64| 6.0 * x * x * (1.0 - x / 1.2).max(0.0);
    let basis = SplineBasis::clamped(3, vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2], 0.0, 1.6, 2).map_err(e2s)?;
    // true curves from a fine solve of the exact g
    let xs_fit: Vec<f64> = (0..=160).map(|k| k as f64 / 100.0).collect();
    let design = basis.design_matrix(&xs_fit, 0).map_err(e2s)?;
    let y = nalgebra::DVector::from_iterator(xs_fit.len(), xs_fit.iter().map(|&x| truth(x)));
    let beta_true = design.clone().svd(true, true).solve(&y, 1e-12).map_err(e2s)?;
    let g_true = GradientFunction::new(&basis, beta_true.as_slice()).map_err(e2s)?;
    let cfg = DynamicsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let nt = Normal::new(0.0, 0.1).unwrap();
    let mut subjects = Vec::new();
    for i in 0..6 {
        let th: f64 = nt.sample(&mut rng);
        let mut curves = Vec::new();
        for l in 0..4 {
            let a = 0.2 + 0.3 * rng.random::<f64>();
            let mut t: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            t.sort_by(f64::total_cmp);
            let sol = solve_trajectory(&g_true, a, th, &cfg).map_err(e2s)?;
            let x = eval_at_times(&sol, &g_true, &t).map_err(e2s)?;
            let values = x.iter().map(|v| v + noise.sample(&mut rng)).collect();
            curves.push(Curve { id: format!("{}", l + 1), times: t, values });
        }
        subjects.push(Subject { id: format!("{}", i + 1), curves });
    }
    let ds = Dataset::new(subjects).map_err(e2s)?;
    let pen = PenaltySettings { lambda1: 0.0, ..Default::default() };
    // penalties are fixed here: adaptive updates would re-estimate λ₁ away from 0
    let opts = FitOptions { inference: false, adaptive_nr: false, ..Default::default() };
    let mut flat = Vec::new();
    let mut at_zero = 0.0f64;
    let mut prev: Option<ParameterState> = None;
    let mut converged = 0;
    let lambdas = [0.0, 1e-3, 1e-2, 1e-1, 1.0];
    for &lr in &lambdas {
        let b = build_flatness_penalty(&basis, a_flat, lr, 8).map_err(e2s)?;
        let f = fit(&ds, &basis, &b, &pen, &opts, prev.as_ref()).map_err(e2s)?;
        converged += f.converged as usize;
        let g = f.gradient().map_err(e2s)?;
        at_zero = at_zero.max(g.value(0.0).abs()).max(g.slope(0.0).abs());
        // ∫_A^{2A} (ĝ′)² by composite Simpson
        let n = 2000;
        let h = a_flat / n as f64;
        let mut s = 0.0;
        for k in 0..=n {
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g.slope(a_flat + k as f64 * h).powi(2);
        }
        flat.push(s * h / 3.0);
        prev = Some(f.state.clone());
    }
    let monotone = flat.windows(2).all(|w| w[1] <= w[0]);
    Ok((
        at_zero == 0.0 && monotone,
        format!(
            "max |g(0)|, |g'(0)| = {at_zero:e} (== 0); flatness integral over lambda_R {lambdas:?}: {} (non-increasing); converged {converged}/{}",
            flat.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", "),
            lambdas.len()
        ),
    ))
}

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let mut failed = Vec::new();
    let mut report = |id: &str, title: &str, f: &dyn Fn() -> Outcome| {
        if !want(id) {
            return;
        }
        let t0 = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} {id} {title}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
        if !ok {
            failed.push(id.to_string());
        }
    };
    report("c1", "sensitivity correctness", &c1);
    report("c2", "RK4 order", &c2);
    report("c3", "approximate CV fidelity", &c3);
    if want("c4") || want("c5") {
        let t0 = Instant::now();
        let runs = moderate_runs();
        println!("     moderate replicates fitted in {:.1}s", t0.elapsed().as_secs_f64());
        let runs = runs.as_ref().map_err(|e| e.clone());
        report("c4", "model selection", &|| runs.clone().and_then(c4));
        report("c5", "accuracy", &|| runs.clone().and_then(c5));
    }
    report("c6", "two-stage comparison", &c6);
    report("c7", "SE calibration", &c7);
    report("c8", "brute-force oracles", &c8);
    report("c9", "CLI determinism", &c9);
    report("plant", "plant-shaped invariants", &plant);
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: FAILED {}", failed.join(", "));
        std::process::exit(1);
    }
}
