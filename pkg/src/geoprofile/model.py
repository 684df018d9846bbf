"""Data containers, parameter types and the Box-Cox transform.

Covariance parameters live in two coordinate systems.  ``NaturalParams`` holds
the ranges, angle, shape and nugget ratio as they enter the Matern correlation;
the optimiser and the representative-point sampler work in the internal
coordinates defined in :mod:`geoprofile.reparam`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

# column order used for arrays of natural covariance parameters
NATURAL_NAMES = ("phiX", "phiY", "phiA", "kappa", "nuggetSq")

LAMBDA_LOG_TOL = 1e-10


class DatasetError(ValueError):
    """Raised when input data violate a model requirement."""


def normalize_anisotropy(phiX, phiY, phiA):
    """Return ranges and angle with ``phiX >= phiY`` and angle in (-pi/2, pi/2].

    Swapping the two ranges is compensated by a quarter turn of the angle, so
    the induced distance is unchanged.  Works elementwise on arrays.
    """
    phiX = np.asarray(phiX, dtype=float)
    phiY = np.asarray(phiY, dtype=float)
    phiA = np.asarray(phiA, dtype=float)
    swap = phiX < phiY
    bigger = np.where(swap, phiY, phiX)
    smaller = np.where(swap, phiX, phiY)
    angle = np.where(swap, phiA + np.pi / 2, phiA)
    angle = wrap_angle(angle)
    return bigger, smaller, angle


def wrap_angle(angle):
    """Map angles onto (-pi/2, pi/2] using the period-pi equivalence."""
    angle = np.asarray(angle, dtype=float)
    wrapped = angle - np.pi * np.ceil((angle - np.pi / 2) / np.pi)
    # ceil puts exact multiples of the upper edge at -pi/2; move them up
    return np.where(wrapped <= -np.pi / 2, wrapped + np.pi, wrapped)


@dataclass(frozen=True)
class NaturalParams:
    """Matern covariance parameters plus the Box-Cox exponent.

    Construction normalises the anisotropy so that ``phiX >= phiY`` and
    ``phiA`` lies in (-pi/2, pi/2].
    """

    phiX: float
    phiY: float
    phiA: float = 0.0
    kappa: float = 0.5
    nuggetSq: float = 0.0
    lam: float = 1.0

    def __post_init__(self):
        if not (self.phiX > 0 and self.phiY > 0):
            raise ValueError("ranges must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.nuggetSq < 0:
            raise ValueError("nuggetSq must be non-negative")
        phiX, phiY, phiA = normalize_anisotropy(self.phiX, self.phiY, self.phiA)
        object.__setattr__(self, "phiX", float(phiX))
        object.__setattr__(self, "phiY", float(phiY))
        object.__setattr__(self, "phiA", float(phiA))

    @property
    def anisoRatio(self) -> float:
        return self.phiX / self.phiY

    @property
    def combinedRange(self) -> float:
        return math.sqrt(self.phiX * self.phiY)

    def as_array(self) -> np.ndarray:
        """Covariance part in ``NATURAL_NAMES`` order."""
        return np.array([self.phiX, self.phiY, self.phiA, self.kappa, self.nuggetSq])

    @classmethod
    def from_array(cls, row, lam: float = 1.0) -> "NaturalParams":
        phiX, phiY, phiA, kappa, nuggetSq = (float(v) for v in row)
        return cls(phiX, phiY, phiA, kappa, nuggetSq, lam)


@dataclass(frozen=True)
class ScaleParams:
    """Spatial variance, observation variance and regression coefficients."""

    sigmaSq: float
    beta: np.ndarray
    tauSq: float = 0.0

    @classmethod
    def from_fit(cls, sigmaSq: float, beta, nuggetSq: float) -> "ScaleParams":
        return cls(float(sigmaSq), np.asarray(beta, dtype=float), float(sigmaSq * nuggetSq))


@dataclass(frozen=True)
class BoxCox:
    lam: float

    def __call__(self, y):
        return boxcox_transform(y, self.lam)

    def inverse(self, z):
        return boxcox_inverse(z, self.lam)


def _check_positive(y: np.ndarray) -> None:
    bad = np.flatnonzero(~(y > 0))
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"Box-Cox needs positive responses; y[{i}] = {y[i]!r}")


def boxcox_transform(y, lam: float) -> np.ndarray:
    """Box-Cox transform ``(y**lam - 1)/lam``, or ``log(y)`` when ``|lam| < 1e-10``."""
    y = np.asarray(y, dtype=float)
    _check_positive(y)
    if abs(lam) < LAMBDA_LOG_TOL:
        return np.log(y)
    # expm1 keeps accuracy for small lam * log(y)
    return np.expm1(lam * np.log(y)) / lam


def boxcox_inverse(z, lam: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if abs(lam) < LAMBDA_LOG_TOL:
        return np.exp(z)
    lz = lam * z
    if np.any(lz <= -1.0):
        raise DatasetError("values outside the range of the Box-Cox transform")
    return np.exp(np.log1p(lz) / lam)


def boxcox_jacobian_log(y, lam: float) -> float:
    """Log-Jacobian ``(lam - 1) * sum(log y)``, added to the log-likelihood."""
    y = np.asarray(y, dtype=float)
    _check_positive(y)
    return float((lam - 1.0) * np.sum(np.log(y)))


@dataclass(frozen=True)
class Dataset:
    """Locations, positive responses and a design matrix.

    The intercept, if any, is an explicit column of ``X``.
    """

    coords: np.ndarray
    y: np.ndarray
    X: np.ndarray
    covariateNames: tuple = field(default=())

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X = np.ascontiguousarray(X)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        names = tuple(self.covariateNames) or tuple(f"beta{i}" for i in range(X.shape[1]))
        object.__setattr__(self, "covariateNames", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def sum_log_y(self) -> float:
        _check_positive(self.y)
        return float(np.sum(np.log(self.y)))


def validate_dataset(d: Dataset, require_positive: bool = True) -> None:
    """Raise :class:`DatasetError` describing the first violated requirement."""
    n, p = d.n, d.p
    if d.coords.shape != (n, 2):
        raise DatasetError(f"coords must be {n}x2, got {d.coords.shape}")
    if d.X.shape[0] != n:
        raise DatasetError(f"X has {d.X.shape[0]} rows but y has {n}")
    if len(d.covariateNames) != p:
        raise DatasetError("covariateNames length does not match X columns")
    if n < p + 2:
        raise DatasetError(f"need n >= p + 2 observations (n={n}, p={p})")
    for arr, label in ((d.coords, "coords"), (d.y, "y"), (d.X, "X")):
        if not np.all(np.isfinite(arr)):
            idx = np.argwhere(~np.isfinite(arr))[0]
            raise DatasetError(f"non-finite value in {label} at index {tuple(int(i) for i in idx)}")
    if require_positive:
        _check_positive(d.y)
    order = np.lexsort((d.coords[:, 1], d.coords[:, 0]))
    sc = d.coords[order]
    same = np.all(sc[1:] == sc[:-1], axis=1)
    if np.any(same):
        j = int(np.flatnonzero(same)[0])
        a, b = sorted((int(order[j]), int(order[j + 1])))
        raise DatasetError(f"duplicate location at rows {a} and {b}")
    if p and np.linalg.matrix_rank(d.X) < p:
        raise DatasetError(f"design matrix is rank deficient (rank < {p})")


def read_csv(path, covariates=None, intercept: bool = True) -> Dataset:
    """Read a dataset with header ``x,y,response,<covariate...>``.

    ``covariates`` selects a subset of the covariate columns (all by default).
    An intercept column named ``(Intercept)`` is prepended when requested.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header[:3] != ["x", "y", "response"]:
            raise DatasetError(f"{path}: header must start with x,y,response")
        available = header[3:]
        chosen = list(available if covariates is None else covariates)
        missing = [c for c in chosen if c not in available]
        if missing:
            raise DatasetError(f"{path}: unknown covariate column(s) {missing}")
        cols = [0, 1, 2] + [header.index(c) for c in chosen]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not v.strip() for v in rec):
                continue
            if len(rec) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(rec[c]) for c in cols])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: missing or non-numeric value") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr))[0][0]) + 2
        raise DatasetError(f"{path}:{bad}: missing value")
    X = arr[:, 3:]
    names = chosen
    if intercept:
        X = np.column_stack([np.ones(len(arr)), X])
        names = ["(Intercept)"] + chosen
    return Dataset(arr[:, :2], arr[:, 2], X, tuple(names))


def write_csv(d: Dataset, path, intercept_col: bool = True) -> None:
    """Write ``d`` in the format accepted by :func:`read_csv`."""
    names = list(d.covariateNames)
    X = d.X
    if intercept_col and names and names[0] == "(Intercept)":
        names, X = names[1:], X[:, 1:]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "response", *names])
        for i in range(d.n):
            w.writerow([repr(float(v)) for v in (*d.coords[i], d.y[i], *X[i])])
