"""Maximum likelihood fits of the covariance and Box-Cox parameters.

The profile log-likelihood (regression coefficients and variance profiled
out) is maximised over the internal coordinates and the Box-Cox exponent with
L-BFGS-B.  Gradients and Hessians come from central differences whose
stencils are evaluated as one likelihood batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .likelihood import evaluate_batch
from .model import Dataset, NaturalParams
from .repsampler import QuadApprox, numeric_hessian
from .profiles import parameter_values
from .reparam import (
    INTERNAL_NAMES,
    kappa_regime,
    kappa_to_tilde,
    tilde_to_kappa,
    to_internal,
    to_natural,
)

log = logging.getLogger(__name__)

KAPPA_IDX = INTERNAL_NAMES.index("kappaTilde")
NU_IDX = INTERNAL_NAMES.index("nu")
LOG_KAPPA_BOUNDS = (np.log(0.05), np.log(1000.0))
LAMBDA_BOUNDS = (-2.0, 2.0)
BIG = 1e12


class FitError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class ProfileObjective:
    """Profile log-likelihood as a function of optimisation vectors.

    An optimisation vector holds the free internal coordinates (all five, or
    four when the shape is fixed) followed by the Box-Cox exponent when it is
    estimated.  :meth:`values` evaluates many vectors with a single call to
    :func:`evaluate_batch` over the distinct covariance sets and exponents.
    """

    def __init__(self, d: Dataset, mode="ML", regime="log", fix_kappa=None, fix_lambda=None,
                 transform=True, batch_size=400):
        self.d = d
        self.mode = mode
        self.regime = regime
        self.fix_kappa = fix_kappa
        self.transform = transform
        self.fix_lambda = fix_lambda if transform else None
        self.batch_size = batch_size
        self.free = [i for i in range(5) if not (fix_kappa is not None and i == KAPPA_IDX)]
        self.has_lambda = transform and fix_lambda is None
        self.n_sets = 0
        self.n_calls = 0

    @property
    def dim(self) -> int:
        return len(self.free) + int(self.has_lambda)

    @property
    def names(self) -> list:
        names = [INTERNAL_NAMES[i] for i in self.free]
        return names + ["lambda"] if self.has_lambda else names

    def internal(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], 5))
        out[:, self.free] = x[:, : len(self.free)]
        if self.fix_kappa is not None:
            out[:, KAPPA_IDX] = kappa_to_tilde(self.fix_kappa, self.regime)
        return out

    def lambdas(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.has_lambda:
            return x[:, -1]
        return np.full(x.shape[0], 1.0 if self.fix_lambda is None else float(self.fix_lambda))

    def values(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        omega = self.internal(x)
        lams = self.lambdas(x)
        uo, io = np.unique(omega, axis=0, return_inverse=True)
        ul, il = np.unique(lams, return_inverse=True)
        nat = to_natural(uo, self.regime)
        ok = np.all(np.isfinite(nat), axis=1) & (nat[:, 3] > 0)
        vals = np.full((uo.shape[0], ul.shape[0]), -np.inf)
        if np.any(ok):
            grid = evaluate_batch(self.d, nat[ok], ul, self.mode, self.batch_size,
                                  transform=self.transform, keep_summaries=False)
            vals[ok] = grid.logLik
        self.n_sets += int(ok.sum())
        self.n_calls += 1
        return vals[io.ravel(), il.ravel()]

    def value_and_grad(self, x, step=1e-5):
        """Negative log-likelihood and its central-difference gradient."""
        x = np.asarray(x, dtype=float)
        k = x.size
        h = step * np.maximum(1.0, np.abs(x))
        pts = np.vstack([x, x + np.diag(h), x - np.diag(h)])
        f = self.values(pts)
        f0 = f[0]
        if not np.isfinite(f0):
            return BIG, np.zeros(k)
        g = (f[1 : k + 1] - f[k + 1 :]) / (2.0 * h)
        g = np.where(np.isfinite(g), g, 0.0)
        return -f0, -g


@dataclass
class FitResult:
    mleInternal: np.ndarray
    regime: str
    lambdaHat: float
    betaHat: np.ndarray
    sigmaSqHat: float
    logLikAtMax: float
    mode: str = "ML"
    transform: bool = True
    fixKappa: float | None = None
    fixLambda: float | None = None
    convergence: str = "converged"
    nIter: int = 0
    nEvals: int = 0
    evalsBestStart: int = 0
    evalsPerStart: list = field(default_factory=list)
    hessian: np.ndarray | None = None
    hessianNames: list = field(default_factory=list)
    waldCov: np.ndarray | None = None
    betaCov: np.ndarray | None = None
    quad: QuadApprox | None = None
    bounds: list = field(default_factory=list)
    starts: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    n: int = 0
    covariateNames: tuple = ()

    @property
    def mleNatural(self) -> NaturalParams:
        nat = to_natural(self.mleInternal, self.regime)
        return NaturalParams.from_array(nat, lam=self.lambdaHat)

    @property
    def sigmaHat(self) -> float:
        return float(np.sqrt(self.sigmaSqHat))

    @property
    def waldInfo(self):
        """Inverse observed information over ``hessianNames``."""
        return self.waldCov

    @property
    def kappaHat(self) -> float:
        return float(tilde_to_kappa(self.mleInternal[KAPPA_IDX], self.regime))

    def to_dict(self) -> dict:
        nat = self.mleNatural
        return {
            "mode": self.mode,
            "transform": self.transform,
            "regime": self.regime,
            "fixKappa": self.fixKappa,
            "fixLambda": self.fixLambda,
            "internal": dict(zip(INTERNAL_NAMES, map(float, self.mleInternal))),
            "natural": {
                "phiX": nat.phiX, "phiY": nat.phiY, "phiA": nat.phiA, "kappa": nat.kappa,
                "nuggetSq": nat.nuggetSq, "anisoRatio": nat.anisoRatio,
                "combinedRange": nat.combinedRange,
            },
            "lambdaHat": self.lambdaHat,
            "beta": dict(zip(self.covariateNames, map(float, self.betaHat))),
            "sigmaSqHat": self.sigmaSqHat,
            "sigmaHat": self.sigmaHat,
            "tauSqHat": self.sigmaSqHat * nat.nuggetSq,
            "logLikAtMax": self.logLikAtMax,
            "convergence": self.convergence,
            "nIter": self.nIter,
            "nEvals": self.nEvals,
            "evalsPerStart": self.evalsPerStart,
            "hessianNames": self.hessianNames,
            "hessian": None if self.hessian is None else self.hessian.tolist(),
            "waldCov": None if self.waldCov is None else np.where(np.isfinite(self.waldCov), self.waldCov, None).tolist(),
            "betaCov": None if self.betaCov is None else self.betaCov.tolist(),
            "bounds": self.bounds,
            "starts": self.starts,
            "n": self.n,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def distance_range(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(coords), 1)
    return float(dist[iu].min()), float(dist[iu].max())


def range_guess(d: Dataset, transform=True) -> float:
    """Range heuristic from the empirical semivariogram of OLS residuals.

    Returns the scaled range at which an exponential correlation would fall
    to 0.25, placed at the first lag whose semivariance reaches three quarters
    of the residual variance.
    """
    y = np.log(d.y) if transform and np.all(d.y > 0) else d.y
    beta, *_ = np.linalg.lstsq(d.X, y, rcond=None)
    r = y - d.X @ beta
    iu, ju = np.triu_indices(d.n, 1)
    dist = np.hypot(*(d.coords[iu] - d.coords[ju]).T)
    gam = 0.5 * (r[iu] - r[ju]) ** 2
    edges = np.linspace(0.0, dist.max() / 2.0, 16)
    sill = np.var(r)
    lag = dist.max() / 4.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (dist > lo) & (dist <= hi)
        if sel.sum() >= 5 and gam[sel].mean() >= 0.75 * sill:
            lag = 0.5 * (lo + hi)
            break
    return lag / (np.log(4.0) / 2.0)


def default_bounds(d: Dataset, obj: ProfileObjective, regime="log"):
    dmin, dmax = distance_range(d.coords)
    b = {
        "gamma1": (np.log(dmin**2), np.log((10.0 * dmax) ** 2)),
        "kappaTilde": LOG_KAPPA_BOUNDS if regime == "log" else (1000.0**-0.5, 0.05**-0.5),
        "nu": (0.0, 10.0),
        "gamma2": (-20.0, 20.0),
        "gamma3": (-20.0, 20.0),
        "lambda": LAMBDA_BOUNDS,
    }
    return [tuple(map(float, b[name])) for name in obj.names]


def _start_vectors(d, obj, init, bounds):
    if init is not None:
        x = np.asarray(init, dtype=float)
        if len(x) != obj.dim:
            # full internal vector, optionally followed by lambda
            lam = x[5] if len(x) > 5 else 1.0
            x = x[:5][obj.free]
            if obj.has_lambda:
                x = np.append(x, lam)
        starts = [x]
    else:
        r0 = range_guess(d, obj.transform)
        starts = []
        for scale in (1.0, 0.5, 2.0):
            nat = np.array([r0 * scale, r0 * scale, 0.0, 1.0, 0.25])
            it = to_internal(nat, obj.regime)
            it[3], it[4] = 0.2, 0.2
            x = it[obj.free]
            if obj.has_lambda:
                x = np.append(x, 1.0)
            starts.append(x)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return [np.clip(s, lo, hi) for s in starts]


def _run_start(obj, x0, bounds, maxiter):
    trace = []

    def fun(x):
        f, g = obj.value_and_grad(x)
        trace.append({"x": np.array(x, dtype=float).tolist(), "logLik": float(-f)})
        return f, g

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": maxiter, "maxcor": 20, "ftol": 1e-12, "gtol": 1e-7})
    return res, trace


def fit_mle(d: Dataset, mode="ML", fix_kappa=None, fix_lambda=None, transform=True, init=None,
            bounds=None, regime=None, n_starts=3, maxiter=300, batch_size=400,
            hessian=True, hessian_step=1e-3) -> FitResult:
    """Maximise the profile likelihood over (internal coordinates, lambda).

    Optimisation always runs with ``log(kappa)`` as the shape coordinate; the
    reported internal coordinates, Hessian and quadratic approximation use
    ``regime`` (chosen from the fitted shape when not given).
    """
    opt = ProfileObjective(d, mode, "log", fix_kappa, fix_lambda, transform, batch_size)
    bounds = bounds or default_bounds(d, opt, "log")
    starts = _start_vectors(d, opt, init, bounds)[: max(1, n_starts)]
    best, best_trace, best_evals = None, [], 0
    evals_per_start = []
    for x0 in starts:
        before = opt.n_sets
        try:
            res, trace = _run_start(opt, x0, bounds, maxiter)
        except Exception as exc:  # noqa: BLE001
            log.warning("start %s failed: %s", x0, exc)
            continue
        evals_per_start.append(opt.n_sets - before)
        if not np.isfinite(res.fun) or res.fun >= BIG:
            continue
        if best is None or res.fun < best.fun:
            best, best_trace, best_evals = res, trace, evals_per_start[-1]
    if best is None:
        raise FitError("all optimiser starts failed", best=starts[0])
    x = best.x
    internal_log = opt.internal(x)[0]
    kappa_hat = float(np.exp(internal_log[KAPPA_IDX])) if fix_kappa is None else float(fix_kappa)
    if regime is None:
        regime = kappa_regime(kappa_hat)
    internal = internal_log.copy()
    internal[KAPPA_IDX] = kappa_to_tilde(kappa_hat, regime)
    lam_hat = float(opt.lambdas(x)[0])

    grid = evaluate_batch(d, to_natural(internal, regime)[None], [lam_hat], mode,
                          transform=transform)
    if not grid.status[0]:
        raise FitError("likelihood invalid at the optimum", best=x)
    s = grid.summaries
    p = d.p
    XX = s.ssqXX[0]
    sig2 = float(grid.sigmaHat[0, 0] ** 2)
    beta_cov = sig2 * np.linalg.inv(XX) if p else np.zeros((0, 0))

    conv = "converged" if best.success else "maxIter"
    ib = [i for i, nm in enumerate(opt.names)]
    lo = np.array([bounds[i][0] for i in ib])
    hi = np.array([bounds[i][1] for i in ib])
    near = np.minimum(np.abs(x - lo), np.abs(hi - x)) < 1e-6
    names = opt.names
    if internal[NU_IDX] < 1e-6 or ("kappaTilde" in names and near[names.index("kappaTilde")]):
        conv = "boundary"

    fit = FitResult(
        mleInternal=internal, regime=regime, lambdaHat=lam_hat, betaHat=grid.betaHat[0, 0].copy(),
        sigmaSqHat=sig2, logLikAtMax=float(grid.logLik[0, 0]), mode=mode, transform=transform,
        fixKappa=fix_kappa, fixLambda=fix_lambda, convergence=conv, nIter=int(best.nit),
        nEvals=opt.n_sets, evalsBestStart=best_evals, evalsPerStart=evals_per_start, betaCov=beta_cov, bounds=[list(b) for b in bounds],
        starts=[s_.tolist() for s_ in starts], trace=best_trace, n=d.n,
        covariateNames=d.covariateNames,
    )
    if hessian:
        attach_hessian(fit, d, step=hessian_step, batch_size=batch_size)
    return fit


def attach_hessian(fit: FitResult, d: Dataset, step=1e-3, batch_size=400) -> FitResult:
    """Finite-difference Hessian at the optimum, Wald covariance and the
    quadratic approximation used for representative points.

    The quadratic approximation takes the covariance block of the Hessian
    (cross terms with lambda are ignored) and the lambda curvature separately.
    """
    obj = ProfileObjective(d, fit.mode, fit.regime, fit.fixKappa, fit.fixLambda, fit.transform, batch_size)
    x = fit.mleInternal[obj.free]
    if obj.has_lambda:
        x = np.append(x, fit.lambdaHat)
    H, _ = numeric_hessian(obj.values, x, step=step)
    fit.hessian = H
    fit.hessianNames = obj.names
    negH = -H
    try:
        np.linalg.cholesky(negH)
        fit.waldCov = np.linalg.inv(negH)
    except np.linalg.LinAlgError:
        log.warning("observed information not positive definite; Wald intervals unavailable")
        fit.waldCov = np.full_like(H, np.nan)
    nw = len(obj.free)
    lam_curv = float(H[-1, -1]) if obj.has_lambda else np.nan
    label = "mle" if fit.fixKappa is None else f"kappa={fit.fixKappa:g}"
    fit.quad = QuadApprox.from_hessian(fit.mleInternal, H[:nw, :nw], dims=tuple(obj.free),
                                       lambdaHat=fit.lambdaHat, lambdaCurvature=lam_curv, label=label)
    return fit


WALD_PARAMS = ("gamma1", "combinedRange", "range", "shape", "nugget", "aniso1", "aniso2",
               "anisoRatio", "anisoAngleRadians", "boxcox")


def _derived_value(name, full, regime):
    if name == "boxcox":
        return float(full[5])
    return float(parameter_values(name, full[None, :5], regime)[0])


def wald_intervals(fit: FitResult, level: float = 0.95) -> dict:
    """Wald intervals ``est +- z * se`` keyed by parameter name.

    Regression coefficients use the plug-in covariance ``s2 (X^T V^-1 X)^-1``;
    covariance parameters use the inverse observed information of the profile
    likelihood, carried to derived quantities by the delta method.  Entries
    are ``(estimate, lo, hi)`` with NaN bounds where the information is not
    positive definite or the parameter is fixed.
    """
    z = stats.norm.ppf(0.5 + level / 2.0)
    out = {}
    for i, name in enumerate(fit.covariateNames):
        se = np.sqrt(fit.betaCov[i, i]) if fit.betaCov is not None else np.nan
        b = float(fit.betaHat[i])
        out[name] = (b, b - z * se, b + z * se)
    sig = fit.sigmaHat
    se_sig = sig / np.sqrt(2.0 * fit.n) if fit.n else np.nan
    out["sdSpatial"] = (sig, sig - z * se_sig, sig + z * se_sig)
    if fit.hessian is None:
        return out
    names = fit.hessianNames
    full = np.append(fit.mleInternal, fit.lambdaHat)
    pos = {"gamma1": 0, "kappaTilde": 1, "nu": 2, "gamma2": 3, "gamma3": 4, "lambda": 5}
    idx = [pos[nm] for nm in names]
    cov = fit.waldCov
    var_nu = np.nan
    for pname in WALD_PARAMS + ("nu",):

        def f(v, pname=pname):
            return _derived_value(pname, v, fit.regime)

        est = f(full)
        g = np.zeros(len(idx))
        for j, fi in enumerate(idx):
            h = 1e-6 * max(1.0, abs(full[fi]))
            up, dn = full.copy(), full.copy()
            up[fi] += h
            dn[fi] -= h
            g[j] = (f(up) - f(dn)) / (2.0 * h)
        if pname != "nu" and not np.any(g != 0):
            # parameter does not depend on any free coordinate (fixed)
            out[pname] = (est, np.nan, np.nan)
            continue
        var = float(g @ cov @ g) if np.all(np.isfinite(cov)) else np.nan
        se = np.sqrt(var) if var >= 0 else np.nan
        if pname == "nu":
            var_nu = var
            continue
        out[pname] = (est, est - z * se, est + z * se)
    # tau = sigma * nu, treating the two estimates as uncorrelated
    nu = abs(float(fit.mleInternal[NU_IDX]))
    tau = sig * nu
    se_tau = np.sqrt(nu**2 * se_sig**2 + sig**2 * var_nu) if np.isfinite(var_nu) else np.nan
    out["sdNugget"] = (tau, tau - z * se_tau, tau + z * se_tau)
    return out


def fit_with_companions(d: Dataset, fixed_kappas=(), mode="ML", transform=True, fix_lambda=None,
                        batch_size=400, n_starts=3, hessian_step=1e-3):
    """Free fit plus one fixed-shape fit per value in ``fixed_kappas``.

    The fixed fits double as extra starting points: when one of them beats
    the free fit, the free fit is restarted from it.  All fits share the shape
    coordinate regime chosen from the final free estimate.
    """
    kw = dict(mode=mode, transform=transform, fix_lambda=fix_lambda, batch_size=batch_size)
    main = fit_mle(d, n_starts=n_starts, hessian=False, **kw)
    fixed = [fit_mle(d, fix_kappa=k, regime="log", n_starts=n_starts, hessian=False, **kw)
             for k in fixed_kappas]
    better = [f for f in fixed if f.logLikAtMax > main.logLikAtMax + 1e-8]
    if better:
        top = max(better, key=lambda f: f.logLikAtMax)
        x0 = top.mleInternal.copy()
        x0[KAPPA_IDX] = np.log(top.fixKappa)
        lo, hi = LOG_KAPPA_BOUNDS
        x0[KAPPA_IDX] = np.clip(x0[KAPPA_IDX], lo, hi)
        if transform and fix_lambda is None:
            x0 = np.append(x0, top.lambdaHat)
        refit = fit_mle(d, init=x0, n_starts=1, hessian=False, **kw)
        if refit.logLikAtMax > main.logLikAtMax:
            main = refit
    regime = main.regime
    for f in fixed:
        f.regime = regime
        f.mleInternal[KAPPA_IDX] = kappa_to_tilde(f.fixKappa, regime)
    attach_hessian(main, d, step=hessian_step, batch_size=batch_size)
    for f in fixed:
        attach_hessian(f, d, step=hessian_step, batch_size=batch_size)
    return main, fixed
