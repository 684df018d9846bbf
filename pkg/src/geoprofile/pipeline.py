"""End-to-end profile likelihood run: fits, representative points, batch
evaluation, profiles and the confidence interval table."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .likelihood import LikGrid, evaluate_batch
from .mle import FitResult, fit_with_companions, wald_intervals
from .model import Dataset
from .profiles import (
    COVARIANCE_PARAMS,
    PARAMETERS,
    CiRow,
    ConfidenceInterval,
    ProfileCurve,
    ProfileError,
    canonical_name,
    likelihood_ci,
    parameter_values,
    profile_1d,
    profile_2d,
    profile_beta,
    profile_sigma,
)
from .repsampler import (
    DEFAULT_ALPHAS,
    DEFAULT_FIXED_ALPHAS,
    DEFAULT_FIXED_KAPPAS,
    RepresentativeSet,
    build_representative_set,
    lambda_grid,
)

log = logging.getLogger(__name__)

DEFAULT_PARAMS = COVARIANCE_PARAMS


@dataclass
class RunConfig:
    data: str | None = None
    covariates: list | None = None
    mode: str = "ML"
    fixedKappas: tuple = DEFAULT_FIXED_KAPPAS
    alphas: tuple = DEFAULT_ALPHAS
    fixedAlphas: tuple = DEFAULT_FIXED_ALPHAS
    pointsMain: int = 726
    pointsFixed: int = 120
    lambdaGridSize: int = 33
    batchSize: int = 400
    ciLevel: float = 0.90
    threads: int | None = None
    seed: int = 0
    outDir: str = "out"
    precision: str = "double"
    params: tuple = DEFAULT_PARAMS
    pairs: tuple = ()
    transform: bool = True
    fixKappa: float | None = None
    fixLambda: float | None = None
    betaGridSize: int = 201
    sigmaGridSize: int = 201
    surfaceGridSize: int = 101

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass
class PipelineResult:
    fit: FitResult
    fixedFits: list
    repset: RepresentativeSet
    grid: LikGrid
    curves: dict
    table: list
    surfaces: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def _widening_grid(center, se, size, evaluate, level, max_doublings=4):
    # widen the span until both sides drop below the interval threshold
    span = 4.0
    curve = None
    for _ in range(max_doublings + 1):
        grid = center + np.linspace(-span, span, size) * se
        curve = evaluate(grid)
        ci = likelihood_ci(curve, level)
        if ci.loMarker is None and ci.hiMarker is None:
            break
        span *= 2.0
    curve.ci = likelihood_ci(curve, level)
    return curve


def _sigma_curve(grid, fit, cfg, level):
    s = grid.summaries
    lo, hi = 0.25, 4.0
    curve = None
    for _ in range(4):
        sg = fit.sigmaHat * np.geomspace(lo, hi, cfg.sigmaGridSize)
        curve = profile_sigma(s, sg, grid.status, level)
        if curve.ci.loMarker is None and curve.ci.hiMarker is None:
            break
        lo, hi = lo / 4.0, hi * 4.0
    return curve


def _wald_ci(w, name, level):
    if name not in w:
        return None
    est, lo, hi = w[name]
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return ConfidenceInterval(level, np.nan, np.nan, "wald")
    return ConfidenceInterval(level, float(lo), float(hi), "wald")


def estimate_of(name: str, fit: FitResult) -> float:
    name = canonical_name(name)
    if name == "boxcox":
        return fit.lambdaHat
    if name == "sdSpatial":
        return fit.sigmaHat
    if name == "sdNugget":
        return fit.sigmaHat * abs(float(fit.mleInternal[2]))
    return float(parameter_values(name, fit.mleInternal, fit.regime)[0])


def validate_params(names) -> list:
    bad = [n for n in names if canonical_name(n) not in PARAMETERS]
    if bad:
        raise ProfileError(f"unknown parameter(s) {bad}; valid: {sorted(PARAMETERS) + ['gamma2', 'gamma3']}")
    return [canonical_name(n) for n in names]


def run_pipeline(d: Dataset, cfg: RunConfig, fits=None) -> PipelineResult:
    """Fit, build the representative set, evaluate it and profile.

    ``fits`` may supply a precomputed ``(main, fixed_list)`` pair.
    """
    t0 = time.perf_counter()
    timings = {}
    params = validate_params(cfg.params)
    for pair in cfg.pairs:
        validate_params(pair)
    kappas = () if cfg.fixKappa is not None else tuple(cfg.fixedKappas)
    if fits is None:
        if cfg.fixKappa is not None:
            from .mle import fit_mle

            main = fit_mle(d, cfg.mode, fix_kappa=cfg.fixKappa, fix_lambda=cfg.fixLambda,
                           transform=cfg.transform, batch_size=cfg.batchSize)
            fits = (main, [])
        else:
            fits = fit_with_companions(d, kappas, cfg.mode, cfg.transform, cfg.fixLambda, cfg.batchSize)
    main, fixed = fits
    timings["fit"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    if cfg.transform and cfg.fixLambda is None:
        lams = lambda_grid(main.lambdaHat, main.quad.lambdaCurvature, cfg.lambdaGridSize)
    else:
        lams = np.array([main.lambdaHat])
    rs = build_representative_set(
        main.quad, [f.quad for f in fixed], alphas=cfg.alphas, fixed_alphas=cfg.fixedAlphas,
        n_main=cfg.pointsMain, n_fixed=cfg.pointsFixed, regime=main.regime, seed=cfg.seed, lambdas=lams,
    )
    timings["representative"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    dtype = np.float32 if cfg.precision == "single" else np.float64
    grid = evaluate_batch(d, rs.natural, lams, cfg.mode, cfg.batchSize, transform=cfg.transform, dtype=dtype)
    grid.internal = rs.internal
    grid.regime = rs.regime
    timings["evaluate"] = time.perf_counter() - t2

    t3 = time.perf_counter()
    level = cfg.ciLevel
    wald = wald_intervals(main, level)
    curves: dict[str, ProfileCurve] = {}
    rows: list[CiRow] = []
    for i, name in enumerate(d.covariateNames):
        se = np.sqrt(main.betaCov[i, i])

        def ev(g, i=i, name=name):
            return profile_beta(grid.summaries, i, g, grid.status, name=name)

        c = _widening_grid(main.betaHat[i], se, cfg.betaGridSize, ev, level)
        curves[name] = c
        rows.append(CiRow(name, f"beta{i + 1}", float(main.betaHat[i]), c.ci, _wald_ci(wald, name, level)))
    c = _sigma_curve(grid, main, cfg, level)
    curves["sdSpatial"] = c
    rows.append(CiRow("sdSpatial", "sigma", main.sigmaHat, c.ci, _wald_ci(wald, "sdSpatial", level)))

    wanted = [p for p in COVARIANCE_PARAMS if p in params] + [p for p in params if p not in COVARIANCE_PARAMS]
    for name in wanted:
        if name == "sdSpatial" or (name == "boxcox" and grid.M < 3):
            continue
        if name in ("shape", "kappaTilde") and cfg.fixKappa is not None:
            continue
        try:
            c = profile_1d(grid, name, level=level)
        except ProfileError as exc:
            log.warning("no profile for %s: %s", name, exc)
            continue
        curves[name] = c
        rows.append(CiRow(name, PARAMETERS[name][0], estimate_of(name, main), c.ci, _wald_ci(wald, name, level)))
    surfaces = {}
    for pair in cfg.pairs:
        surfaces[tuple(pair)] = profile_2d(grid, pair, n_grid=cfg.surfaceGridSize)
    timings["profiles"] = time.perf_counter() - t3
    timings["total"] = time.perf_counter() - t0
    return PipelineResult(main, list(fixed), rs, grid, curves, rows, surfaces, timings)
