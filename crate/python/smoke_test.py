"""Smoke test for the pyautodyn extension module.

Build and install first, e.g.  maturin develop -m crates/python/Cargo.toml
(or  pip install --no-build-isolation ./crates/python ).
"""

import json
import math

import pyautodyn as ad


def main():
    data, truth = ad.simulate("sparse", seed=3)
    assert data.n_subjects == 10 and data.n_curves == 200, data
    assert data.n_measurements == sum(len(t) for _, _, t, _ in data.curves())

    again = ad.Dataset.from_csv(data.to_csv())
    assert again.n_measurements == data.n_measurements

    basis = ad.SplineBasis.uniform(truth.knots)
    assert basis.dim == 4
    assert abs(sum(b * p for b, p in zip(truth.beta, basis.eval(0.5))) - truth.g(0.5)) < 1e-12

    fit = ad.fit_model(data, basis, known_a=truth.a)
    assert fit.converged
    xs = [0.2 + 0.8 * k / 49 for k in range(1, 50)]
    worst = max(abs(fit.g(x) - truth.g(x)) for x in xs)
    assert worst < 0.05, worst
    se = fit.se(xs)
    assert all(s > 0 and math.isfinite(s) for s in se)
    assert json.loads(fit.to_json())["converged"] is True

    cv = fit.approx_cv(data)
    assert cv >= 0 and math.isfinite(cv)

    ts = ad.two_stage(data)
    hier, base = (ad.region_ise(f, truth.g, [(0.2, 1.0)])[0] for f in (fit.g, ts.g))
    assert hier < base, (hier, base)

    print(f"ok: beta={['%.3f' % b for b in fit.beta]} cv={cv:.4g} ise hierarchical={hier:.3g} two-stage={base:.3g}")


if __name__ == "__main__":
    main()
