use autodyn::{
    approx_cv, default_design, exact_cv, fit, generate, Dataset, FitOptions, ParameterState, PenaltyMatrix,
    PenaltySettings, Regime, SplineBasis,
};

fn known_a_fit(
    ds: &Dataset,
    a: &[Vec<f64>],
    basis: &SplineBasis,
    opts: &FitOptions,
) -> (autodyn::FitResult, PenaltySettings) {
    let pen = PenaltySettings { a_known: true, ..Default::default() };
    let mut init = ParameterState::initial(ds, basis.dim());
    init.a = a.to_vec();
    init.alpha = init.mean_a();
    let f = fit(ds, basis, &PenaltyMatrix::zeros(basis.dim()), &pen, opts, Some(&init)).unwrap();
    (f, pen)
}

#[test]
fn simulated_noise_has_design_variance() {
    let design = default_design(Regime::Moderate);
    let (ds, truth) = generate(&design, 11).unwrap();
    let mut ss = 0.0;
    let mut n = 0;
    for (((_, c), clean), _) in ds.curves().zip(truth.noiseless.iter()).zip(0..) {
        for (y, x) in c.values.iter().zip(clean) {
            ss += (y - x) * (y - x);
            n += 1;
        }
    }
    let var = ss / n as f64;
    let target = design.sigma_eps * design.sigma_eps;
    assert!((var / target - 1.0).abs() < 0.2, "residual variance {var:e} vs {target:e}");
}

#[test]
fn csv_round_trip_is_exact() {
    let (ds, _) = generate(&default_design(Regime::Sparse), 4).unwrap();
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn true_model_fit_recovers_noise_level() {
    let design = default_design(Regime::Moderate);
    let (ds, truth) = generate(&design, 2).unwrap();
    let basis = design.true_basis().unwrap();
    let (f, _) = known_a_fit(&ds, &truth.a, &basis, &FitOptions::default());
    assert!(f.converged);
    assert!((f.sigma_eps2 / 1e-4 - 1.0).abs() < 0.3, "sigma_eps2 = {:e}", f.sigma_eps2);
    let g = f.gradient().unwrap();
    let g0 = design.true_gradient().unwrap();
    for k in 0..=20 {
        let x = 0.3 + 0.6 * k as f64 / 20.0;
        assert!((g.value(x) - g0.value(x)).abs() < 0.05, "x = {x}");
    }
}

#[test]
fn approximate_cv_tracks_exact_on_low_leverage_instance() {
    let mut design = default_design(Regime::Moderate);
    // curve leverage ≈ (M + n) / ΣN ≈ 0.1, where one-step corrections are accurate
    design.n_subjects = 3;
    design.curves_per_subject = 20;
    design.m_range = (8, 12);
    let (ds, truth) = generate(&design, 3).unwrap();
    let basis = SplineBasis::equally_spaced(3, 0.1).unwrap();
    let b = PenaltyMatrix::zeros(basis.dim());
    let opts = FitOptions { adaptive_nr: false, ..Default::default() };
    let (f, pen) = known_a_fit(&ds, &truth.a, &basis, &opts);
    let approx = approx_cv(&ds, &f, &basis, &b).unwrap();
    let exact = exact_cv(&ds, &basis, &b, &pen, &opts, Some(&f.state), 1000).unwrap();
    assert!(exact.flagged.is_empty());
    let rel = (approx.score - exact.score).abs() / exact.score;
    assert!(rel < 0.05, "approx {:e} exact {:e}", approx.score, exact.score);
}
