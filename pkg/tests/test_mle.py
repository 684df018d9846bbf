import json

import numpy as np
import pytest

from geoprofile.likelihood import evaluate_batch
from geoprofile.mle import (
    FitError,
    FitResult,
    ProfileObjective,
    default_bounds,
    fit_mle,
    fit_with_companions,
    wald_intervals,
)
from geoprofile.model import NaturalParams
from geoprofile.reparam import to_internal, to_natural
from geoprofile.sim import SimDesign, simulate_grf

TRUE = NaturalParams(1500.0, 1500.0, 0.0, 0.5, 0.2)


@pytest.fixture(scope="module")
def sim_data():
    design = SimDesign(TRUE, 1.0, (2.0, 1.0, 1.0), n=100, replicates=1, seed=11)
    return simulate_grf(design, 0)


@pytest.fixture(scope="module")
def fixed_fit(sim_data):
    return fit_mle(sim_data, fix_kappa=0.5, transform=False)


def test_fix_kappa_is_exact_and_four_dimensional(fixed_fit):
    assert fixed_fit.kappaHat == 0.5
    assert fixed_fit.mleNatural.kappa == 0.5
    assert fixed_fit.hessianNames == ["gamma1", "nu", "gamma2", "gamma3"]
    assert all(len(row["x"]) == 4 for row in fixed_fit.trace)
    assert fixed_fit.convergence in ("converged", "boundary")


def test_maximality_against_truth(sim_data, fixed_fit):
    g = evaluate_batch(sim_data, TRUE.as_array()[None], [1.0], transform=False)
    assert fixed_fit.logLikAtMax >= g.logLik[0, 0]


def test_refit_from_optimum_is_fixed_point(sim_data, fixed_fit):
    x0 = fixed_fit.mleInternal.copy()
    refit = fit_mle(sim_data, fix_kappa=0.5, transform=False, init=x0, n_starts=1, hessian=False,
                    regime=fixed_fit.regime)
    assert refit.logLikAtMax - fixed_fit.logLikAtMax < 1e-6


def test_trace_is_bounded_by_optimum(fixed_fit):
    lls = [row["logLik"] for row in fixed_fit.trace]
    assert max(lls) <= fixed_fit.logLikAtMax + 1e-9
    assert np.all(np.diff(np.maximum.accumulate(lls)) >= 0)


def test_estimates_solve_the_normal_equations(sim_data, fixed_fit):
    nat = to_natural(fixed_fit.mleInternal, fixed_fit.regime)
    from geoprofile.matern import matern_batch

    V = matern_batch(sim_data.coords, nat[None])[0]
    Vi = np.linalg.inv(V)
    X, y = sim_data.X, sim_data.y
    beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    r = y - X @ beta
    np.testing.assert_allclose(fixed_fit.betaHat, beta, rtol=1e-8, atol=1e-8)
    assert fixed_fit.sigmaSqHat == pytest.approx(r @ Vi @ r / sim_data.n, rel=1e-8)


def test_restriction_and_budget(bundled):
    main, fixed = fit_with_companions(bundled, (0.5, 10.0))
    for f in fixed:
        assert f.logLikAtMax <= main.logLikAtMax + 1e-6
    assert main.evalsBestStart <= 500


def test_json_roundtrip(tmp_path, fixed_fit):
    fixed_fit.to_json(tmp_path / "fit.json")
    obj = json.loads((tmp_path / "fit.json").read_text())
    assert obj["fixKappa"] == 0.5
    assert obj["natural"]["kappa"] == 0.5
    assert obj["logLikAtMax"] == fixed_fit.logLikAtMax
    assert list(obj["beta"].values()) == list(map(float, fixed_fit.betaHat))
    assert np.allclose(obj["hessian"], fixed_fit.hessian)


def _quadratic_fit(neg_hessian, names, lam=2.0):
    internal = to_internal(TRUE.as_array(), "log")
    H = -np.atleast_2d(neg_hessian)
    try:
        np.linalg.cholesky(-H)
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = np.full_like(H, np.nan)
    return FitResult(internal, "log", lam, np.array([2.0]), 1.0, 0.0, hessian=H, hessianNames=names,
                     waldCov=cov, betaCov=np.array([[0.25]]), n=50, covariateNames=("b",))


def test_wald_on_exact_quadratic():
    # log-likelihood -(theta - 2)^2 / (2 * 0.25)
    fit = _quadratic_fit([[4.0]], ["lambda"])
    w = wald_intervals(fit, 0.95)
    est, lo, hi = w["boxcox"]
    assert est == 2.0
    assert lo == pytest.approx(2 - 1.959963984540054 * 0.5, abs=1e-9)
    assert hi == pytest.approx(2 + 1.959963984540054 * 0.5, abs=1e-9)
    assert w["b"][2] - w["b"][1] == pytest.approx(2 * 1.959963984540054 * 0.5)
    w80 = wald_intervals(fit, 0.8)
    assert w80["b"][2] - 2.0 == pytest.approx(1.2815515655446004 * 0.5)
    assert np.isnan(w["combinedRange"][1])  # not a free coordinate here


def test_wald_is_nan_without_positive_information():
    fit = _quadratic_fit([[1.0, 0.0], [0.0, -2.0]], ["gamma1", "lambda"])
    w = wald_intervals(fit, 0.9)
    assert np.isnan(w["boxcox"][1]) and np.isnan(w["combinedRange"][2])
    assert np.isfinite(w["b"][1])


def test_objective_dimensions(sim_data):
    assert ProfileObjective(sim_data).dim == 6
    assert ProfileObjective(sim_data, fix_kappa=1.0, transform=False).dim == 4
    obj = ProfileObjective(sim_data, fix_lambda=0.5)
    assert obj.dim == 5 and np.all(obj.lambdas(np.zeros(5)) == 0.5)
    b = default_bounds(sim_data, obj)
    assert len(b) == 5 and b[1][0] == pytest.approx(np.log(0.05))


def test_all_starts_failing_raises(sim_data):
    with pytest.raises(FitError) as err:
        fit_mle(sim_data, mode="ML", transform=False, bounds=[(1e3, 1e3 + 1e-9)] + [(0, 0)] * 4)
    assert err.value.best is not None
