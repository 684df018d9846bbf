"""Batched ML/REML profile likelihoods and their retained summary statistics.

One LDL^T factorisation per covariance parameter set serves every Box-Cox
exponent: the transformed responses for all M exponents form an n x M block
placed in front of the design matrix, and the crossproduct of the whitened
block ``(Y', X)^T V^-1 (Y', X)`` holds everything needed afterwards.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import batchlinalg as bl
from .matern import matern_batch
from .model import NATURAL_NAMES, Dataset, NaturalParams, ScaleParams, boxcox_transform

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
RESID_TOL = 1e-8
MODES = ("ML", "REML")


@dataclass
class LikSummaries:
    """Retained statistics per parameter set (rows) and Box-Cox value (columns).

    ``ssqYX[k]`` is the (M + p) square matrix ``(Y', X)^T V_k^-1 (Y', X)``;
    its leading M x M block has ``y'^T V^-1 y'`` on the diagonal, the trailing
    p x p block is ``X^T V^-1 X`` and the lower-left block is ``X^T V^-1 y'``.
    """

    n: int
    p: int
    mode: str
    lambdaGrid: np.ndarray
    jacobian: np.ndarray
    detVar: np.ndarray
    detReml: np.ndarray
    ssqYX: np.ndarray
    ssqBetahat: np.ndarray
    ssqResidual: np.ndarray

    @property
    def M(self) -> int:
        return self.lambdaGrid.shape[0]

    @property
    def ssqY(self) -> np.ndarray:
        """``y'^T V^-1 y'``, shape (K, M)."""
        M = self.M
        return np.diagonal(self.ssqYX[:, :M, :M], axis1=1, axis2=2)

    @property
    def ssqXY(self) -> np.ndarray:
        """``X^T V^-1 y'``, shape (K, p, M)."""
        M = self.M
        return self.ssqYX[:, M:, :M]

    @property
    def ssqXX(self) -> np.ndarray:
        """``X^T V^-1 X``, shape (K, p, p)."""
        M = self.M
        return self.ssqYX[:, M:, M:]


@dataclass
class LikGrid:
    """Profile log-likelihoods over K covariance sets and M Box-Cox values."""

    params: np.ndarray
    lambdaGrid: np.ndarray
    logLik: np.ndarray
    sigmaHat: np.ndarray
    betaHat: np.ndarray
    status: np.ndarray
    mode: str = "ML"
    transform: bool = True
    summaries: LikSummaries | None = None
    internal: np.ndarray | None = None
    regime: str = "log"
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.params.shape[0]

    @property
    def M(self) -> int:
        return self.lambdaGrid.shape[0]

    def best(self):
        """Index ``(k, m)`` of the largest log-likelihood."""
        k, m = np.unravel_index(np.nanargmax(np.where(np.isfinite(self.logLik), self.logLik, -np.inf)), self.logLik.shape)
        return int(k), int(m)

    def max_over_lambda(self) -> np.ndarray:
        return np.max(self.logLik, axis=1)

    def to_csv(self, path, covariate_names=None) -> None:
        """Write ``setIndex,lambda,logLik,sigmaHat,beta_1..beta_p,status`` rows
        and a JSON sidecar (``<path>.json``) with the parameter sets."""
        path = Path(path)
        p = self.betaHat.shape[2]
        names = [f"beta_{i + 1}" for i in range(p)]
        with path.open("w", encoding="utf-8") as fh:
            fh.write(",".join(["setIndex", "lambda", "logLik", "sigmaHat", *names, "status"]) + "\n")
            for k in range(self.K):
                for m in range(self.M):
                    vals = [str(k), repr(float(self.lambdaGrid[m])), repr(float(self.logLik[k, m])),
                            repr(float(self.sigmaHat[k, m]))]
                    vals += [repr(float(b)) for b in self.betaHat[k, m]]
                    vals.append("valid" if self.status[k] else "invalid")
                    fh.write(",".join(vals) + "\n")
        sidecar = {
            "mode": self.mode,
            "transform": self.transform,
            "regime": self.regime,
            "naturalNames": list(NATURAL_NAMES),
            "params": self.params.tolist(),
            "covariateNames": list(covariate_names) if covariate_names else None,
        }
        if self.internal is not None:
            sidecar["internal"] = self.internal.tolist()
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1), encoding="utf-8")


def response_block(d: Dataset, lambda_grid, transform: bool = True):
    """Transformed responses (n, M) and the per-lambda log-Jacobian (M,)."""
    lams = np.atleast_1d(np.asarray(lambda_grid, dtype=float))
    if not transform:
        return d.y[:, None].copy(), np.zeros(1)
    Y = np.column_stack([boxcox_transform(d.y, lam) for lam in lams])
    jac = (lams - 1.0) * d.sum_log_y
    return Y, jac


def _beta_from_factor(Q, P, c):
    # beta = Q^-T P^-1 c, back substitution on the unit upper triangle Q^T
    K, p, M = c.shape
    z = c / P[:, :, None]
    beta = np.empty_like(z)
    for i in range(p - 1, -1, -1):
        acc = z[:, i, :].copy()
        for j in range(i + 1, p):
            acc -= Q[:, j, i][:, None] * beta[:, j, :]
        beta[:, i, :] = acc
    return beta


def _profile_terms(resid, logdetV, detReml, jac, n, p, mode):
    # returns (logLik, sigmaSqHat) for residual quadratic forms resid (K, M)
    df = n if mode == "ML" else n - p
    with np.errstate(divide="ignore", invalid="ignore"):
        sig2 = resid / df
        m2 = df * np.log(sig2) + logdetV[:, None] - 2.0 * jac[None, :] + n * LOG2PI + df
        if mode == "REML":
            m2 = m2 + detReml[:, None]
    return -0.5 * m2, sig2


def evaluate_batch(
    d: Dataset,
    params,
    lambda_grid=(1.0,),
    mode: str = "ML",
    batch_size: int = 400,
    transform: bool = True,
    dtype=np.float64,
    keep_summaries: bool = True,
) -> LikGrid:
    """Profile log-likelihood for every (parameter set, Box-Cox value) pair.

    ``params`` is (K, 5) in ``NATURAL_NAMES`` order.  Sets are processed in
    waves of ``batch_size``; a set whose variance matrix (or ``X^T V^-1 X``)
    fails to factorise gets ``status = False`` and log-likelihood ``-inf``.
    With ``transform=False`` the raw response is used and ``lambda_grid`` is
    ignored.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    params = np.atleast_2d(np.asarray(params, dtype=float))
    K = params.shape[0]
    if K < 1:
        raise ValueError("need at least one parameter set")
    lams = np.atleast_1d(np.asarray(lambda_grid, dtype=float)) if transform else np.array([1.0])
    Y, jac = response_block(d, lams, transform)
    n, p, M = d.n, d.p, lams.shape[0]
    if mode == "REML" and n <= p:
        raise ValueError("REML needs n > p")
    B = np.ascontiguousarray(np.column_stack([Y, d.X]), dtype=dtype)

    logLik = np.full((K, M), -np.inf)
    sigmaHat = np.full((K, M), np.nan)
    betaHat = np.full((K, M, p), np.nan)
    status = np.zeros(K, dtype=bool)
    detVar = np.full(K, np.nan)
    detReml = np.zeros(K)
    ssqYX = np.full((K, M + p, M + p), np.nan) if keep_summaries else None
    ssqBetahat = np.full((K, M), np.nan)
    ssqResidual = np.full((K, M), np.nan)

    for start in range(0, K, batch_size):
        sl = slice(start, min(start + batch_size, K))
        V = matern_batch(d.coords, params[sl], dtype=dtype)
        fac = bl.chol_batch(V)
        del V
        C = bl.backsolve_batch(fac, B)
        ssq, okc = bl.crossprod_batch(C, fac.D, "Dinverse")
        del C
        ssq = ssq.astype(np.float64, copy=False)
        ok = fac.status & okc
        yy = np.diagonal(ssq[:, :M, :M], axis1=1, axis2=2)
        if p > 0:
            XX = ssq[:, M:, M:]
            XY = np.ascontiguousarray(ssq[:, M:, :M])
            facX = bl.chol_batch(XX, overwrite=False)
            ok &= facX.status
            c = bl.backsolve_batch(facX, XY)
            P = facX.D
            with np.errstate(divide="ignore", invalid="ignore"):
                sbh = np.sum(c * c / P[:, :, None], axis=1)
                beta = _beta_from_factor(facX.packed, P, c)
            dr = facX.logDet
        else:
            sbh = np.zeros_like(yy)
            beta = np.zeros((yy.shape[0], 0, M))
            dr = np.zeros(yy.shape[0])
        resid = yy - sbh
        tol = RESID_TOL * np.abs(yy)
        bad = resid < -tol
        resid = np.where(bad, np.nan, np.maximum(resid, 0.0))
        ll, s2 = _profile_terms(resid, fac.logDet, dr, jac, n, p, mode)
        cell_ok = ok[:, None] & np.isfinite(ll)
        ok &= np.all(cell_ok, axis=1)
        ll = np.where(cell_ok, ll, -np.inf)

        logLik[sl] = ll
        sigmaHat[sl] = np.where(cell_ok, np.sqrt(np.where(cell_ok, s2, 0.0)), np.nan)
        betaHat[sl] = np.transpose(beta, (0, 2, 1))
        status[sl] = ok
        detVar[sl] = fac.logDet
        detReml[sl] = dr
        if keep_summaries:
            ssqYX[sl] = ssq
        ssqBetahat[sl] = sbh
        ssqResidual[sl] = resid

    nbad = int(np.sum(~status))
    if nbad:
        log.info("%d of %d parameter sets flagged invalid", nbad, K)
    summaries = None
    if keep_summaries:
        summaries = LikSummaries(n, p, mode, lams, jac, detVar, detReml, ssqYX, ssqBetahat, ssqResidual)
    return LikGrid(params, lams, logLik, sigmaHat, betaHat, status, mode, transform, summaries)


def full_log_lik(d: Dataset, natural: NaturalParams, scale: ScaleParams, transform: bool = True) -> float:
    """Log-likelihood at fully specified parameters, by dense linear algebra."""
    if scale.sigmaSq <= 0:
        raise ValueError("sigmaSq must be positive")
    V = matern_batch(d.coords, natural.as_array())[0]
    cf = scipy.linalg.cho_factor(scale.sigmaSq * V, lower=True)
    if transform:
        ystar = boxcox_transform(d.y, natural.lam)
        jac = (natural.lam - 1.0) * d.sum_log_y
    else:
        ystar, jac = d.y, 0.0
    r = ystar - d.X @ np.asarray(scale.beta, dtype=float)
    quad = float(r @ scipy.linalg.cho_solve(cf, r))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    m2 = quad + logdet - 2.0 * jac + d.n * LOG2PI
    return -0.5 * m2


def contrast_matrix(X: np.ndarray) -> np.ndarray:
    """(n - p) x n matrix A of full row rank with ``A X = 0``, built from
    linearly independent rows of ``I - X (X^T X)^-1 X^T``."""
    n = X.shape[0]
    if X.shape[1] == 0:
        return np.eye(n)
    p = X.shape[1]
    S = np.eye(n) - X @ np.linalg.solve(X.T @ X, X.T)
    _, R, piv = scipy.linalg.qr(S.T, pivoting=True)
    rank = int(np.sum(np.abs(np.diag(R)) > 1e-10 * abs(R[0, 0])))
    if rank < n - p:
        raise np.linalg.LinAlgError(f"could only select {rank} independent rows, need {n - p}")
    return S[np.sort(piv[: n - p])]


def reml_determinant_identity(d: Dataset, natural: NaturalParams, sigmaSq: float = 1.0,
                              transform: bool = True) -> dict:
    """Both sides of the two error-contrast identities used for REML.

    Returns log-determinants ``detLhs = log|A s2V A^T|`` and
    ``detRhs = log|s2V| + log|X^T (s2V)^-1 X| + log|A A^T| - log|X^T X|``
    (the last two terms are the A-dependent constant), and the quadratic forms
    ``quadLhs = y*^T (s2 A V A^T)^-1 y*`` and
    ``quadRhs = (y - X b)^T (s2 V)^-1 (y - X b)`` with b the GLS estimate.
    """
    X = d.X
    V = sigmaSq * matern_batch(d.coords, natural.as_array())[0]
    y = boxcox_transform(d.y, natural.lam) if transform else d.y
    A = contrast_matrix(X)

    def logdet(M):
        sign, val = np.linalg.slogdet(M)
        if sign <= 0:
            raise np.linalg.LinAlgError("matrix not positive definite")
        return val

    AVA = A @ V @ A.T
    det_lhs = logdet(AVA)
    det_rhs = logdet(V) + logdet(A @ A.T)
    ystar = A @ y
    quad_lhs = float(ystar @ np.linalg.solve(AVA, ystar))
    if X.shape[1]:
        Vi_X = np.linalg.solve(V, X)
        XtViX = X.T @ Vi_X
        det_rhs += logdet(XtViX) - logdet(X.T @ X)
        b = np.linalg.solve(XtViX, Vi_X.T @ y)
        r = y - X @ b
    else:
        r = y
    quad_rhs = float(r @ np.linalg.solve(V, r))
    return {"detLhs": det_lhs, "detRhs": det_rhs, "quadLhs": quad_lhs, "quadRhs": quad_rhs}
