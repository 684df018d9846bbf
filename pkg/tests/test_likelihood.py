import numpy as np
import pytest

from conftest import random_dataset, random_natural
from geoprofile.likelihood import (
    LikGrid,
    evaluate_batch,
    full_log_lik,
    reml_determinant_identity,
    response_block,
)
from geoprofile.model import Dataset, NaturalParams, ScaleParams
from oracles import dense_profile


@pytest.mark.parametrize("mode", ["ML", "REML"])
def test_matches_dense_oracle(mode):
    rng = np.random.default_rng(11)
    for _ in range(8):
        d = random_dataset(rng, n=int(rng.integers(6, 18)), p=int(rng.integers(1, 4)))
        params = np.array([random_natural(rng) for _ in range(3)])
        lams = np.array([0.0, 0.5, 1.3])
        g = evaluate_batch(d, params, lams, mode)
        assert g.status.all()
        for k in range(3):
            for m, lam in enumerate(lams):
                ll, beta, s2 = dense_profile(d.coords, d.y, d.X, params[k], lam, mode)
                assert g.logLik[k, m] == pytest.approx(ll, abs=1e-8)
                np.testing.assert_allclose(g.betaHat[k, m], beta, rtol=1e-8, atol=1e-10)
                assert g.sigmaHat[k, m] ** 2 == pytest.approx(s2, rel=1e-8)


def test_profile_equals_full_likelihood_at_estimates():
    rng = np.random.default_rng(2)
    d = random_dataset(rng, n=14, p=2)
    nat = NaturalParams.from_array(random_natural(rng), lam=0.4)
    g = evaluate_batch(d, nat.as_array()[None], [0.4])
    full = full_log_lik(d, nat, ScaleParams(g.sigmaHat[0, 0] ** 2, g.betaHat[0, 0]))
    assert g.logLik[0, 0] == pytest.approx(full, abs=1e-9)


def test_batch_size_does_not_change_results():
    rng = np.random.default_rng(3)
    d = random_dataset(rng, n=12, p=2)
    params = np.array([random_natural(rng) for _ in range(9)])
    a = evaluate_batch(d, params, [0.5, 1.0], batch_size=400)
    b = evaluate_batch(d, params, [0.5, 1.0], batch_size=2)
    np.testing.assert_array_equal(a.logLik, b.logLik)
    np.testing.assert_array_equal(a.betaHat, b.betaHat)


def test_invalid_sets_are_flagged():
    rng = np.random.default_rng(4)
    d = random_dataset(rng, n=10, p=1)
    d = Dataset(np.vstack([d.coords[:9], d.coords[:1]]), d.y, d.X)  # duplicate location
    params = np.array([[20, 20, 0, 1.0, 0.0], [20, 20, 0, 1.0, 0.3]])
    g = evaluate_batch(d, params, [1.0])
    assert g.status.tolist() == [False, True]
    assert g.logLik[0, 0] == -np.inf and np.isfinite(g.logLik[1, 0])
    assert g.best() == (1, 0)


def test_no_covariates_and_raw_response():
    rng = np.random.default_rng(5)
    d = random_dataset(rng, n=10, p=0, positive=False)
    p = random_natural(rng)
    g = evaluate_batch(d, p[None], transform=False)
    ll, _, _ = dense_profile(d.coords, d.y, d.X, p, transform=False)
    assert g.logLik[0, 0] == pytest.approx(ll, abs=1e-9)
    assert g.betaHat.shape == (1, 1, 0)


def test_summaries_layout():
    rng = np.random.default_rng(6)
    d = random_dataset(rng, n=12, p=2)
    p = random_natural(rng)
    g = evaluate_batch(d, p[None], [0.5, 1.0])
    s = g.summaries
    Y, jac = response_block(d, [0.5, 1.0])
    from oracles import corr_matrix

    Vi = np.linalg.inv(corr_matrix(d.coords, *p))
    np.testing.assert_allclose(s.ssqY[0], np.diag(Y.T @ Vi @ Y), rtol=1e-9)
    np.testing.assert_allclose(s.ssqXY[0], d.X.T @ Vi @ Y, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(s.ssqXX[0], d.X.T @ Vi @ d.X, rtol=1e-9)
    np.testing.assert_allclose(s.jacobian, jac)
    np.testing.assert_allclose(s.ssqResidual, s.ssqY - s.ssqBetahat, rtol=1e-12)


def test_reml_identities():
    rng = np.random.default_rng(7)
    for _ in range(5):
        d = random_dataset(rng, n=int(rng.integers(6, 14)), p=int(rng.integers(1, 4)))
        nat = NaturalParams.from_array(random_natural(rng), lam=0.7)
        r = reml_determinant_identity(d, nat, sigmaSq=rng.uniform(0.5, 2))
        assert r["detLhs"] == pytest.approx(r["detRhs"], abs=1e-8)
        assert r["quadLhs"] == pytest.approx(r["quadRhs"], rel=1e-8)


def test_grid_csv(tmp_path):
    rng = np.random.default_rng(8)
    d = random_dataset(rng, n=8, p=2)
    g = evaluate_batch(d, np.array([random_natural(rng)]), [0.5, 1.0])
    assert isinstance(g, LikGrid)
    g.to_csv(tmp_path / "g.csv", d.covariateNames)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0].startswith("setIndex,lambda,logLik,sigmaHat,beta_1,beta_2,status")
    assert len(lines) == 3
    assert (tmp_path / "g.csv.json").exists()


def test_argument_checks():
    rng = np.random.default_rng(9)
    d = random_dataset(rng, n=8, p=2)
    with pytest.raises(ValueError):
        evaluate_batch(d, [random_natural(rng)], mode="XX")
    with pytest.raises(ValueError):
        evaluate_batch(d, [random_natural(rng)], batch_size=0)
