import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from geoprofile.likelihood import LikGrid, evaluate_batch
from geoprofile.model import Dataset
from geoprofile.profiles import (
    CiRow,
    ConfidenceInterval,
    ProfileError,
    UpperHullSurface,
    curve_from_points,
    likelihood_ci,
    profile_1d,
    profile_2d,
    profile_beta,
    profile_sigma,
    read_ci_table,
    upper_hull,
    write_ci_table,
)
from geoprofile.reparam import to_natural
from oracles import gaussian_cloud, gaussian_profile

MEAN = np.array([14.0, 0.3, 0.5, 0.2, -0.1])
A = np.array([[1.0, 0.2, 0.1, 0.0, 0.3], [0.0, 0.5, 0.1, 0.0, 0.0], [0.0, 0.0, 0.3, 0.05, 0.0],
              [0.0, 0.0, 0.0, 0.4, 0.1], [0.0, 0.0, 0.0, 0.0, 0.6]])
COV = A @ A.T


def grid_from_cloud(pts, ll):
    K = len(ll)
    return LikGrid(params=to_natural(pts, "log"), lambdaGrid=np.array([1.0]), logLik=ll[:, None],
                   sigmaHat=np.ones((K, 1)), betaHat=np.zeros((K, 1, 0)), status=np.ones(K, bool),
                   internal=pts, regime="log")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=60))
def test_hull_dominates_cloud(pts):
    x, y = np.array(pts).T
    if np.unique(x).size < 3:
        with pytest.raises(ProfileError):
            curve_from_points("t", x, y)
        return
    c = curve_from_points("t", x, y)
    assert np.all(c(x) >= y - c.reference - 1e-10)
    assert np.all(np.diff(c.abscissa) > 0)
    assert c.pll.max() == 0.0
    ci = likelihood_ci(c, 0.9)
    assert ci.lo <= c.argmax <= ci.hi


def test_parabola_cloud_vertices_on_parabola():
    rng = np.random.default_rng(0)
    x = np.linspace(-3, 3, 41)
    y = -(x**2)
    xo = rng.uniform(-3, 3, 200)
    yo = -(xo**2) - rng.uniform(0.05, 2, 200)
    c = curve_from_points("t", np.r_[x, xo], np.r_[y, yo])
    np.testing.assert_allclose(c.pll, -(c.abscissa**2), atol=1e-12)
    q = np.linspace(-3, 3, 997)
    gap = (6 / 40) ** 2 / 4  # max chord gap of a unit parabola with this spacing
    assert np.all(c(q) <= -(q**2) + 1e-12) and np.all(c(q) >= -(q**2) - gap - 1e-12)
    assert np.isneginf(c(3.5))


def test_duplicates_keep_largest():
    c = curve_from_points("t", [0, 1, 1, 2], [0, -5, 1, 0])
    assert c.cloudPll[c.cloudX == 1][0] == 0
    assert len(upper_hull([0, 1, 1, 2], [0, -5, 1, 0])) == 3


@pytest.mark.parametrize("i,name", [(0, "gamma1"), (2, "nu"), (4, "aniso2")])
def test_gaussian_profile_oracle(i, name):
    rng = np.random.default_rng(i)
    sd = math.sqrt(COV[i, i])
    ridge = MEAN[i] + np.linspace(-3.5, 3.5, 141) * sd
    pts, ll = gaussian_cloud(MEAN, COV, i, ridge, 3000, rng)
    c = profile_1d(grid_from_cloud(pts, ll), name, level=0.9)
    exact = gaussian_profile(MEAN, COV, i, c.abscissa)
    np.testing.assert_allclose(c.pll, exact, atol=1e-8)
    assert c.isHullVertex.sum() == len(ridge)
    half = sd * math.sqrt(stats.chi2.ppf(0.9, 1))
    assert c.ci.lo == pytest.approx(MEAN[i] - half, abs=1e-3)
    assert c.ci.hi == pytest.approx(MEAN[i] + half, abs=1e-3)


def test_derived_parameter_argmax_is_invariant():
    rng = np.random.default_rng(1)
    pts, ll = gaussian_cloud(MEAN, COV, 0, MEAN[0] + np.linspace(-3, 3, 61), 500, rng)
    g = grid_from_cloud(pts, ll)
    a = profile_1d(g, "gamma1").argmax
    b = profile_1d(g, "combinedRange").argmax
    assert b == pytest.approx(math.exp(a / 2), rel=1e-12)


def test_ci_worked_example():
    x = np.linspace(-2, 4, 60001)
    c = curve_from_points("t", x, -2 * (x - 1) ** 2)
    ci = likelihood_ci(c, 0.9)
    assert stats.chi2.ppf(0.9, 1) == pytest.approx(2.7055, abs=1e-4)
    h = math.sqrt(stats.chi2.ppf(0.9, 1) / 4)
    assert ci.lo == pytest.approx(1 - h, abs=1e-6) and ci.hi == pytest.approx(1 + h, abs=1e-6)
    assert h == pytest.approx(math.sqrt(1.3528 / 2), abs=1e-4)
    inner = likelihood_ci(c, 0.5)
    assert ci.lo < inner.lo < inner.hi < ci.hi


def test_flat_side_gets_marker_and_physical_bound_is_plain():
    x = np.linspace(0.5, 100, 200)
    c = curve_from_points("shape", x, -5 * np.exp(-x))
    ci = likelihood_ci(c, 0.95)
    assert ci.hiMarker == ">100" and ci.hi == 100
    assert ci.labels()[1] == ">100"
    x = np.linspace(0.0005, 2, 400)
    c = curve_from_points("nugget", x, -(x**2), lower_bound=0.0)
    ci = likelihood_ci(c, 0.9)
    assert ci.lo == 0.0 and ci.loMarker is None
    c.lowerBound = None
    assert likelihood_ci(c, 0.9).loMarker is not None


def test_lambda_profile_is_plain_interpolation():
    K = 4
    ll = np.array([[-3.0, -1.0, -2.5], [-2.0, -4.0, -1.5], [-9, -9, -9], [-8, -8, -8.0]])
    g = LikGrid(np.zeros((K, 5)), np.array([0.0, 0.5, 1.0]), ll, np.ones((K, 3)), np.zeros((K, 3, 0)),
                np.ones(K, bool), internal=np.zeros((K, 5)))
    c = profile_1d(g, "boxcox")
    np.testing.assert_array_equal(c.pll, [-1.0, 0.0, -0.5])
    assert c.isHullVertex.all()


def _iid_dataset(n=40, seed=0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 1000, size=(n, 2))
    y = 3 + rng.normal(size=n)
    return Dataset(coords, y, np.ones((n, 1)))


def test_beta_profile_matches_ols_oracle():
    d = _iid_dataset()
    # vanishing range: the correlation matrix is the identity
    g = evaluate_batch(d, np.array([[1e-3, 1e-3, 0.0, 0.5, 0.0]]), [1.0], transform=False)
    bg = np.linspace(2, 4, 41)
    c = profile_beta(g.summaries, 0, bg)
    n = d.n
    sse = ((d.y[:, None] - bg[None]) ** 2).sum(0)
    oracle = -0.5 * n * (np.log(sse / n) + math.log(2 * math.pi) + 1)
    np.testing.assert_allclose(c.cloudPll + c.reference, oracle, rtol=1e-12)


def test_beta_at_set_estimate_recovers_loglik(bundled):
    rng = np.random.default_rng(3)
    params = np.column_stack([rng.uniform(2e3, 6e3, 3), rng.uniform(1e3, 3e3, 3), rng.uniform(0, 1, 3),
                              rng.uniform(0.5, 3, 3), rng.uniform(0, 0.4, 3)])
    g = evaluate_batch(bundled, params, [0.3, 0.7])
    for k in range(3):
        for m in range(2):
            sub = evaluate_batch(bundled, params[k : k + 1], [g.lambdaGrid[m]]).summaries
            for p in range(2):
                b = g.betaHat[k, m, p]
                c = profile_beta(sub, p, [b - 1, b, b + 1])
                assert c.cloudPll[1] + c.reference == pytest.approx(g.logLik[k, m], abs=1e-8)


def test_sigma_profile_single_set(bundled):
    g = evaluate_batch(bundled, np.array([[4000.0, 1600.0, 0.6, 1.5, 0.15]]), [0.5])
    s_hat = g.sigmaHat[0, 0]
    grid = s_hat * np.geomspace(0.25, 4, 2001)
    c = profile_sigma(g.summaries, grid)
    step = grid[1] / grid[0]
    assert c.argmax / s_hat == pytest.approx(1.0, abs=step - 1)
    at = profile_sigma(g.summaries, [s_hat * 0.5, s_hat, s_hat * 2])
    assert at.cloudPll[1] + at.reference == pytest.approx(g.logLik[0, 0], abs=1e-8)
    beyond = c.cloudPll[grid > 3 * s_hat]
    assert np.all(np.diff(beyond) < 0)
    with pytest.raises(ProfileError):
        profile_sigma(g.summaries, [0.0, 1.0])


def test_upper_surface_below_concave_quadratic():
    rng = np.random.default_rng(5)
    x, y = rng.uniform(-1, 1, (2, 400))

    def f(a, b):
        return -(a**2) - 0.5 * b**2 + 0.3 * a * b

    s = UpperHullSurface(x, y, f(x, y))
    np.testing.assert_allclose(s(x, y), f(x, y), atol=1e-10)
    qx, qy = rng.uniform(-0.7, 0.7, (2, 500))
    v = s(qx, qy)
    assert np.all(v[np.isfinite(v)] <= f(qx, qy)[np.isfinite(v)] + 1e-10)
    assert np.isnan(s(5.0, 5.0))


def test_surface_collinear_cloud_raises():
    t = np.linspace(0, 1, 20)
    with pytest.raises(ProfileError):
        UpperHullSurface(t, 2 * t, -t)
    with pytest.raises(ProfileError):
        UpperHullSurface([0, 1, 0], [0, 0, 1], [0, 0, 0])


def test_profile_2d_on_gaussian_cloud(tmp_path):
    rng = np.random.default_rng(2)
    pts = MEAN + rng.normal(size=(800, 5)) * np.sqrt(np.diag(COV))
    dx = pts - MEAN
    ll = -0.5 * np.einsum("ni,ij,nj->n", dx, np.linalg.inv(COV), dx)
    g = grid_from_cloud(pts, ll)
    surf = profile_2d(g, ("gamma2", "gamma3"), n_grid=31, limits=((-3, 3), (-3, 3)))
    assert surf.pll.shape == (31, 31)
    assert np.isnan(surf.pll[0, 0])
    assert np.nanmax(surf.pll) <= 0 and surf.hullSpace == ("aniso1", "aniso2")
    assert set(surf.contours) == {0.5, 0.8, 0.9, 0.95}
    surf.to_csv(tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "aniso1,aniso2,pll" and len(rows) == 31 * 31 + 1 and "NA" in rows[1]
    ar = profile_2d(g, ("anisoRatio", "anisoAngleRadians"), n_grid=11)
    assert ar.pll.shape == (11, 11)
    with pytest.raises(ProfileError):
        profile_2d(g, ("sdNugget", "range"))


def test_ci_table_roundtrip(tmp_path):
    rows = [CiRow("shape", "kappa", 3.5, ConfidenceInterval(0.9, 0.6, 100, hiMarker=">100"),
                  ConfidenceInterval(0.9, np.nan, np.nan, "wald")),
            CiRow("x1", "beta2", 1.25, ConfidenceInterval(0.9, 1.0, 1.5), None)]
    write_ci_table(rows, tmp_path / "t.csv")
    back = read_ci_table(tmp_path / "t.csv")
    assert back[0]["likelihood_ciHi"] == ">100" and back[0]["wald_ciLo"] == "NA"
    assert float(back[1]["likelihood_ciLo"]) == 1.0 and back[1]["wald_ciHi"] == "NA"
