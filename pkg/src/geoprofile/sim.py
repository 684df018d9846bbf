"""Gaussian random field simulation and confidence interval coverage studies."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import batchlinalg as bl
from .matern import matern_batch
from .model import Dataset, DatasetError, NaturalParams, boxcox_inverse, validate_dataset
from .profiles import canonical_name, parameter_values
from .reparam import to_internal

log = logging.getLogger(__name__)

COVERAGE_PARAMS = ("combinedRange", "shape", "nugget", "aniso1", "aniso2", "boxcox")


def uniform_coords(n: int, side: float, rng, min_sep_frac: float = 0.01) -> np.ndarray:
    """``n`` uniform points on a square, rejecting any point closer than
    ``min_sep_frac * side`` to one already accepted."""
    sep2 = (min_sep_frac * side) ** 2
    pts = np.empty((n, 2))
    k = 0
    tries = 0
    while k < n:
        cand = rng.uniform(0.0, side, 2)
        tries += 1
        if tries > 1000 * n:
            raise ValueError("cannot place points with the requested separation")
        if k and np.min(np.sum((pts[:k] - cand) ** 2, axis=1)) < sep2:
            continue
        pts[k] = cand
        k += 1
    return pts


@dataclass
class CovariateRule:
    """Covariate ``(coord / scale) ** power`` built from one coordinate axis."""

    name: str
    coord: str = "x"
    scale: float = 1.0
    power: float = 1.0

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        c = coords[:, 0 if self.coord == "x" else 1]
        return (c / self.scale) ** self.power


def study_b_covariates():
    return [CovariateRule("x1", "x", 10000.0, 1.0), CovariateRule("x2", "x", 10000.0, 2.0)]


@dataclass
class SimDesign:
    """Generative model for simulated datasets.

    The spatial effect has variance ``sigmaSq`` and correlation given by
    ``trueParams``; independent noise has variance ``sigmaSq * nuggetSq``.
    Coordinates are drawn once from ``seed`` unless supplied.
    """

    trueParams: NaturalParams
    sigmaSq: float = 1.0
    beta: tuple = (2.0, 1.0, 1.0)
    covariates: list = field(default_factory=study_b_covariates)
    n: int = 100
    side: float = 9000.0
    coords: np.ndarray | None = None
    replicates: int = 100
    ciLevel: float = 0.80
    seed: int = 0
    injectFailures: tuple = ()

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.sigmaSq >= 0:
            raise ValueError("sigmaSq must be non-negative")
        if len(self.beta) != len(self.covariates) + 1:
            raise ValueError("beta needs one entry per covariate plus the intercept")
        if self.coords is None:
            rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2**31,)))
            self.coords = uniform_coords(self.n, self.side, rng)
        else:
            self.coords = np.asarray(self.coords, dtype=float)
            self.n = self.coords.shape[0]

    @property
    def tauSq(self) -> float:
        return self.sigmaSq * self.trueParams.nuggetSq

    def design_matrix(self) -> np.ndarray:
        cols = [np.ones(self.n)] + [rule(self.coords) for rule in self.covariates]
        return np.column_stack(cols)

    @property
    def covariate_names(self) -> tuple:
        return ("(Intercept)",) + tuple(r.name for r in self.covariates)

    def truth(self) -> dict:
        """True value of every reported parameter."""
        p = self.trueParams
        internal = to_internal(p.as_array(), "log")
        out = dict(zip(self.covariate_names, map(float, self.beta)))
        out["sdSpatial"] = math.sqrt(self.sigmaSq)
        for name in ("combinedRange", "range", "anisoRatio", "anisoAngleRadians", "aniso1", "aniso2"):
            out[name] = float(parameter_values(name, internal, "log")[0])
        out["shape"] = p.kappa
        out["nugget"] = p.nuggetSq
        out["sdNugget"] = math.sqrt(self.tauSq)
        out["boxcox"] = p.lam
        return out

    def to_dict(self) -> dict:
        p = self.trueParams
        return {
            "trueParams": {"phiX": p.phiX, "phiY": p.phiY, "phiA": p.phiA, "kappa": p.kappa,
                           "nuggetSq": p.nuggetSq, "lambda": p.lam},
            "sigmaSq": self.sigmaSq,
            "beta": list(self.beta),
            "covariates": [asdict(r) for r in self.covariates],
            "n": self.n,
            "side": self.side,
            "coords": self.coords.tolist(),
            "replicates": self.replicates,
            "ciLevel": self.ciLevel,
            "seed": self.seed,
            "injectFailures": list(self.injectFailures),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SimDesign":
        tp = dict(obj["trueParams"])
        lam = tp.pop("lambda", 1.0)
        return cls(
            trueParams=NaturalParams(lam=lam, **tp),
            sigmaSq=obj.get("sigmaSq", 1.0),
            beta=tuple(obj.get("beta", (2.0, 1.0, 1.0))),
            covariates=[CovariateRule(**c) for c in obj.get("covariates", [asdict(r) for r in study_b_covariates()])],
            n=obj.get("n", 100),
            side=obj.get("side", 9000.0),
            coords=None if obj.get("coords") is None else np.asarray(obj["coords"]),
            replicates=obj.get("replicates", 100),
            ciLevel=obj.get("ciLevel", 0.80),
            seed=obj.get("seed", 0),
            injectFailures=tuple(obj.get("injectFailures", ())),
        )

    @classmethod
    def from_json(cls, path) -> "SimDesign":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def study_b_design(replicates=100, n=100, seed=0, **kw) -> SimDesign:
    """Isotropic design: range 1000 on a 9 km square, shape 2, noise sd 0.8."""
    params = NaturalParams(1000.0, 1000.0, 0.0, 2.0, 0.64)
    return SimDesign(params, 1.0, (2.0, 1.0, 1.0), study_b_covariates(), n=n, replicates=replicates,
                     seed=seed, **kw)


def study_a_design(replicates=100, n=100, seed=0, **kw) -> SimDesign:
    """Anisotropic variant: ratio 2, angle 0.2, otherwise as the isotropic one."""
    phiX = 1000.0
    params = NaturalParams(phiX, phiX / 2.0, 0.2, 2.0, 0.64)
    return SimDesign(params, 1.0, (5.0, 1.0, 1.0), study_b_covariates(), n=n, replicates=replicates,
                     seed=seed, **kw)


def replicate_rng(seed: int, replicate: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def simulate_grf(design: SimDesign, replicate: int = 0) -> Dataset:
    """Draw one dataset: ``y = X beta + U + noise`` on the design coordinates.

    The draw uses one LDL factorisation of the full covariance.  When the
    design's Box-Cox exponent differs from 1 the inverse transform is applied.
    """
    p = design.trueParams
    rng = replicate_rng(design.seed, replicate)
    z = rng.standard_normal(design.n)
    if design.sigmaSq == 0:
        draw = np.zeros(design.n)
    else:
        V = design.sigmaSq * matern_batch(design.coords, p.as_array()[None])
        fac = bl.chol_batch(V)
        if not fac.status[0]:
            raise ValueError("true covariance matrix is not positive definite")
        draw = fac.L[0] @ (np.sqrt(fac.D[0]) * z)
    X = design.design_matrix()
    if replicate in design.injectFailures:
        X[:, -1] = X[:, 0]
    y = X @ np.asarray(design.beta, dtype=float) + draw
    if p.lam != 1.0:
        y = boxcox_inverse(y, p.lam)
    return Dataset(design.coords, y, X, design.covariate_names)


# ------------------------------------------------------------------ coverage


def _hit(ci, truth) -> bool | None:
    if ci is None or not (np.isfinite(ci.lo) and np.isfinite(ci.hi)):
        return None
    lo_ok = truth >= ci.lo or ci.loMarker is not None
    hi_ok = truth <= ci.hi or ci.hiMarker is not None
    return bool(lo_ok and hi_ok)


def _width(ci):
    if ci is None or not (np.isfinite(ci.lo) and np.isfinite(ci.hi)):
        return np.nan
    return float(ci.hi - ci.lo)


def coverage_config(design: SimDesign, base=None):
    """Pipeline settings for one replicate: shape fixed at the truth and,
    without a Box-Cox transform, the raw response."""
    from .pipeline import RunConfig

    cfg = base if base is not None else RunConfig()
    transform = design.trueParams.lam != 1.0
    return replace(cfg, fixKappa=design.trueParams.kappa, transform=transform,
                   pointsMain=min(cfg.pointsMain, 120), ciLevel=design.ciLevel,
                   params=COVERAGE_PARAMS, pairs=())


def run_replicate(design: SimDesign, r: int, cfg=None) -> dict:
    from .pipeline import run_pipeline

    cfg = coverage_config(design, cfg)
    truth = design.truth()
    try:
        d = simulate_grf(design, r)
        validate_dataset(d, require_positive=cfg.transform)
        res = run_pipeline(d, cfg)
    except Exception as exc:  # noqa: BLE001
        log.warning("replicate %d failed: %s", r, exc)
        return {"replicate": r, "failed": True, "error": f"{type(exc).__name__}: {exc}"}
    rows = {}
    for row in res.table:
        name = canonical_name(row.name)
        if name not in truth:
            continue
        t = truth[name]
        rows[name] = {
            "estimate": row.estimate,
            "likelihood": [row.likelihood.lo, row.likelihood.hi] if row.likelihood else None,
            "wald": [row.wald.lo, row.wald.hi] if row.wald else None,
            "likelihoodHit": _hit(row.likelihood, t),
            "waldHit": _hit(row.wald, t),
            "likelihoodWidth": _width(row.likelihood),
            "waldWidth": _width(row.wald),
        }
    return {"replicate": r, "failed": False, "convergence": res.fit.convergence, "params": rows}


@dataclass
class CoverageReport:
    design: dict
    parameters: list
    truth: dict
    replicates: list
    level: float

    @property
    def failures(self) -> list:
        return [r["replicate"] for r in self.replicates if r["failed"]]

    def _values(self, name, key):
        out = []
        for r in self.replicates:
            if r["failed"] or name not in r["params"]:
                continue
            v = r["params"][name][key]
            if v is not None and not (isinstance(v, float) and math.isnan(v)):
                out.append(v)
        return out

    def coverage(self, name: str, method: str = "likelihood") -> float:
        hits = self._values(name, f"{method}Hit")
        return float(np.mean(hits)) if hits else float("nan")

    def widths(self, name: str, method: str = "likelihood") -> dict:
        w = np.asarray(self._values(name, f"{method}Width"), dtype=float)
        if w.size == 0:
            return {"mean": float("nan"), "median": float("nan"), "n": 0}
        return {"mean": float(w.mean()), "median": float(np.median(w)), "n": int(w.size)}

    def rows(self) -> list[dict]:
        out = []
        for name in self.parameters:
            row = {"parameter": name, "truth": self.truth.get(name, float("nan"))}
            for method in ("likelihood", "wald"):
                row[f"{method}_coverage"] = self.coverage(name, method)
                row[f"{method}_n"] = len(self._values(name, f"{method}Hit"))
                row[f"{method}_meanWidth"] = self.widths(name, method)["mean"]
            row["failures"] = len(self.failures)
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        rows = self.rows()
        cols = ["parameter", "truth", "likelihood_coverage", "wald_coverage", "likelihood_n", "wald_n",
                "likelihood_meanWidth", "wald_meanWidth", "failures"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})

    def to_dict(self) -> dict:
        return {"level": self.level, "design": self.design, "truth": self.truth,
                "summary": self.rows(), "failures": self.failures, "replicates": self.replicates}

    def to_json(self, path) -> None:
        def clean(o):
            if isinstance(o, float) and not math.isfinite(o):
                return None
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            if isinstance(o, list):
                return [clean(v) for v in o]
            return o

        with open(path, "w", encoding="utf-8") as fh:
            json.dump(clean(self.to_dict()), fh, indent=1)


def _run_one(args):
    design, r, cfg = args
    return run_replicate(design, r, cfg)


def run_coverage(design: SimDesign, cfg=None, workers: int = 1, progress=None) -> CoverageReport:
    """Simulate, fit and profile every replicate, then tabulate coverage.

    Replicates that fail are logged and excluded from the coverage
    denominators.  Results do not depend on ``workers``.
    """
    jobs = [(design, r, cfg) for r in range(design.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_one(job))
            if progress is not None:
                progress(results[-1])
    params = list(design.covariate_names) + list(COVERAGE_PARAMS)
    truth = {k: v for k, v in design.truth().items() if k in params}
    return CoverageReport(design.to_dict(), params, truth, results, design.ciLevel)


__all__ = ["SimDesign", "CovariateRule", "CoverageReport", "simulate_grf", "run_coverage",
           "run_replicate", "study_a_design", "study_b_design", "uniform_coords", "DatasetError"]
