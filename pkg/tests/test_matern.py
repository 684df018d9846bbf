import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoprofile.matern import anisotropic_distance, matern_batch, matern_rho, rotation
from oracles import corr_matrix, matern_mp


@pytest.mark.parametrize("kappa", [0.1, 0.3, 0.5, 0.75, 1.0, 1.5, 2.5, 7.3, 20.0, 49.9, 50.0, 100.0, 300.0, 999.0])
def test_matern_matches_mpmath(kappa):
    ds = np.array([1e-6, 1e-3, 0.01, 0.1, 0.3, 0.7, 1.0, 1.5, 2.5, 4.0])
    got = matern_rho(ds, kappa)
    want = np.array([matern_mp(d, kappa) for d in ds])
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-14)


def test_matern_special_cases():
    d = np.linspace(0, 3, 31)
    np.testing.assert_array_equal(matern_rho(d, 0.5), np.exp(-2 * d))
    np.testing.assert_array_equal(matern_rho(d, 1e6), np.exp(-2 * d**2))
    for k in (0.1, 0.5, 2, 10, 100):
        assert matern_rho(0.0, k) == 1.0


def test_matern_rejects_bad_input():
    with pytest.raises(ValueError):
        matern_rho(1.0, 0.0)
    with pytest.raises(ValueError):
        matern_rho(-1.0, 1.0)


@settings(max_examples=50)
@given(st.floats(0.2, 50), st.floats(0, 5), st.floats(0, 5))
def test_matern_monotone_in_distance(kappa, a, b):
    lo, hi = sorted((a, b))
    assert matern_rho(hi, kappa) <= matern_rho(lo, kappa) + 1e-12


def test_gaussian_limit_is_approached():
    d = np.linspace(0.05, 2, 20)
    gaps = [np.abs(matern_rho(d, k, kappa_gauss=np.inf) - np.exp(-2 * d**2)).max() for k in (50, 200, 999)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 2e-3


@settings(max_examples=40)
@given(st.floats(1, 100), st.floats(1, 100), st.floats(-3, 3), st.floats(-50, 50), st.floats(-50, 50))
def test_distance_matches_matrix_form(px, py, ang, hx, hy):
    h = np.array([hx, hy])
    want = np.linalg.norm(np.diag([1 / px, 1 / py]) @ rotation(ang) @ h)
    assert anisotropic_distance(h, px, py, ang) == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_batch_matches_loop_oracle_and_is_symmetric():
    rng = np.random.default_rng(3)
    coords = rng.uniform(0, 50, (12, 2))
    params = np.array([[30, 10, 0.4, 1.3, 0.2], [5, 20, -1.0, 0.5, 0.0], [15, 15, 0.0, 3.0, 1.0]])
    V = matern_batch(coords, params)
    for k, p in enumerate(params):
        np.testing.assert_allclose(V[k], corr_matrix(coords, *p), rtol=1e-11, atol=1e-14)
        np.testing.assert_array_equal(V[k], V[k].T)
        np.testing.assert_array_equal(np.diag(V[k]), 1 + p[4])
        assert np.linalg.eigvalsh(V[k]).min() > 0


def test_batch_out_argument_and_dtype():
    coords = np.array([[0.0, 0], [1, 0], [0, 2]])
    out = np.zeros((1, 3, 3), dtype=np.float32)
    res = matern_batch(coords, [[1, 1, 0, 0.5, 0]], out=out)
    assert res is out and out.dtype == np.float32
    with pytest.raises(ValueError):
        matern_batch(coords, [[1, 1, 0, 0.5]])


@pytest.mark.parametrize("kappa", [0.7, 1.0, 1.5, 2.0, 3.0, 40.0])
def test_tiny_distance_correlation_is_one(kappa):
    d = np.array([1e-300, 1e-200, 1e-12])
    np.testing.assert_allclose(matern_rho(d, np.full(3, kappa)), 1.0, atol=1e-10)
