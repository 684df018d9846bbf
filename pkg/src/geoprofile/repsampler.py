"""Quadratic approximation of the profile likelihood and representative points.

Points are placed on ellipsoids ``(w - w_hat)^T (-H) (w - w_hat) = c`` where
``c`` runs through upper chi-square quantiles, starting from a max-min spread
configuration on the unit sphere.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .reparam import INTERNAL_NAMES, to_natural

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.00001, 0.01, 0.1, 0.2, 0.25, 0.3, 0.5, 0.8, 0.9, 0.95, 0.99, 0.999)
# kappa-fixed families drop the two outermost levels (10 contours)
DEFAULT_FIXED_ALPHAS = DEFAULT_ALPHAS[1:-1]
DEFAULT_FIXED_KAPPAS = (0.5, 0.9, 10.0, 20.0, 100.0)
POINTS_PER_CONTOUR = {5: 726, 4: 120}
NU = INTERNAL_NAMES.index("nu")


class HessianError(RuntimeError):
    pass


def chi2_upper(alpha, df):
    """Upper ``alpha`` quantile of the chi-square distribution."""
    return stats.chi2.isf(alpha, df)


def hessian_stencil(dim: int) -> np.ndarray:
    """Unit offsets: the centre, +-e_i, and the four sign pairs for each i < j."""
    pts = [np.zeros(dim)]
    for i in range(dim):
        for s in (1.0, -1.0):
            e = np.zeros(dim)
            e[i] = s
            pts.append(e)
    for i in range(dim):
        for j in range(i + 1, dim):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                e = np.zeros(dim)
                e[i], e[j] = si, sj
                pts.append(e)
    return np.array(pts)


def _hessian_from_values(f, dim, h):
    H = np.empty((dim, dim))
    f0 = f[0]
    for i in range(dim):
        fp, fm = f[1 + 2 * i], f[2 + 2 * i]
        H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
    idx = 1 + 2 * dim
    for i in range(dim):
        for j in range(i + 1, dim):
            fpp, fpm, fmp, fmm = f[idx : idx + 4]
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            idx += 4
    return 0.5 * (H + H.T)


def numeric_hessian(objective, center, step: float = 1e-3, relative: bool = True):
    """Central-difference Hessian of ``objective`` at ``center``.

    ``objective`` maps an (N, dim) array of points to N values in a single
    call, so the whole stencil is evaluated as one batch.  Steps are
    ``step * max(1, |center_i|)`` when ``relative``.  A non-finite stencil
    value shrinks the step tenfold once before giving up.

    Returns ``(H, f_center)``.
    """
    center = np.asarray(center, dtype=float)
    dim = center.size
    unit = hessian_stencil(dim)
    h = step * (np.maximum(1.0, np.abs(center)) if relative else np.ones(dim))
    for attempt in range(2):
        pts = center + unit * h
        f = np.asarray(objective(pts), dtype=float)
        if np.all(np.isfinite(f)):
            return _hessian_from_values(f, dim, h), float(f[0])
        if attempt == 0:
            log.warning("non-finite likelihood on Hessian stencil; shrinking step")
            h = h / 10.0
    bad = pts[int(np.flatnonzero(~np.isfinite(f))[0])]
    raise HessianError(f"objective not finite at stencil point {bad.tolist()}")


def repair_eigenvalues(eig, big: float = 100.0, floor: float = 0.1) -> np.ndarray:
    """Absolute values; if the largest exceeds ``big``, raise small ones to ``floor``."""
    d = np.abs(np.asarray(eig, dtype=float))
    if not np.any(d > 0):
        raise HessianError("degenerate Hessian")
    if d.max() > big:
        d = np.where(d < floor, floor, d)
    return d


def _spread_run(x, s_pow, max_iter, patience, tol):
    eta = 0.2
    best, best_d, last_imp = x.copy(), 0.0, 0
    for it in range(max_iter):
        G = x @ x.T
        d2 = np.maximum(2.0 - 2.0 * G, 1e-300)
        np.fill_diagonal(d2, np.inf)
        dmin2 = d2.min()
        dmin = np.sqrt(dmin2)
        if dmin > best_d + tol:
            last_imp = it
        if dmin > best_d:
            best, best_d = x.copy(), dmin
        if it - last_imp >= patience:
            break
        # Riesz-type repulsion normalised by the closest pair
        w = np.power(dmin2 / d2, s_pow)
        f = x * w.sum(axis=1, keepdims=True) - w @ x
        f -= np.sum(f * x, axis=1, keepdims=True) * x
        nf = np.linalg.norm(f, axis=1, keepdims=True)
        x = x + eta * dmin * f / np.maximum(nf, 1e-300)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        eta *= 0.995
    return best, best_d


def bundled_sphere_path(dim: int, n: int) -> Path:
    return Path(str(resources.files("geoprofile") / "data" / f"sphere_{dim}_{n}.npy"))


@lru_cache(maxsize=32)
def _sphere_points_cached(dim, n, seed, restarts, max_iter, use_bundled=True):
    # the default configurations are shipped precomputed (see tools/)
    if use_bundled and (seed, restarts, max_iter) == (0, 3, 3000):
        path = bundled_sphere_path(dim, n)
        if path.is_file():
            pts = np.load(path)
            pts.setflags(write=False)
            return pts
    rng = np.random.default_rng(seed)
    best, best_d = None, -1.0
    for _ in range(restarts):
        x = rng.normal(size=(n, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        pts, d = _spread_run(x, dim + 1, max_iter, 100, 1e-4)
        if d > best_d:
            best, best_d = pts, d
    best.setflags(write=False)
    return best


def sphere_points(dim: int, n: int, seed: int = 0, restarts: int = 3, max_iter: int = 3000,
                  use_bundled: bool = True) -> np.ndarray:
    """``n`` unit vectors in ``R^dim`` spread to maximise the closest-pair distance.

    Random starts are pushed apart by a repulsion whose weights are sharply
    concentrated on near neighbours; each run stops once the minimum distance
    has improved by less than 1e-4 over 100 iterations.  The best of
    ``restarts`` runs is returned.  Deterministic given ``seed``.
    """
    if n < dim + 1:
        raise ValueError("need n >= dim + 1 points")
    return np.array(_sphere_points_cached(int(dim), int(n), int(seed), int(restarts), int(max_iter),
                                          bool(use_bundled)))


def min_pairwise_distance(x) -> float:
    G = x @ x.T
    np.fill_diagonal(G, -np.inf)
    return float(np.sqrt(max(2.0 - 2.0 * G.max(), 0.0)))


@dataclass
class QuadApprox:
    """Quadratic model around a maximum in the internal coordinates ``dims``.

    ``center`` is the full 5-vector of internal coordinates; coordinates not
    in ``dims`` stay fixed (e.g. the shape in a kappa-fixed fit).
    """

    center: np.ndarray
    negHessian: np.ndarray
    eigVecs: np.ndarray
    eigVals: np.ndarray
    lambdaHat: float = 1.0
    lambdaCurvature: float = np.nan
    dims: tuple = (0, 1, 2, 3, 4)
    label: str = "mle"

    @property
    def dim(self) -> int:
        return len(self.dims)

    @classmethod
    def from_hessian(cls, center, H, dims=(0, 1, 2, 3, 4), **kw) -> "QuadApprox":
        negH = -0.5 * (np.asarray(H) + np.asarray(H).T)
        vals, vecs = np.linalg.eigh(negH)
        vals = repair_eigenvalues(vals)
        return cls(np.asarray(center, dtype=float), negH, vecs, vals, dims=tuple(dims), **kw)

    def quadratic_form(self, points) -> np.ndarray:
        """``(w - c)^T E diag(D) E^T (w - c)`` over the free coordinates."""
        delta = np.atleast_2d(points)[:, list(self.dims)] - self.center[list(self.dims)]
        proj = delta @ self.eigVecs
        return np.sum(proj * proj * self.eigVals, axis=1)


@dataclass
class RepresentativeSet:
    internal: np.ndarray
    alpha: np.ndarray
    provenance: list
    regime: str = "log"
    lambdaGrid: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def __len__(self) -> int:
        return self.internal.shape[0]

    @property
    def natural(self) -> np.ndarray:
        return to_natural(self.internal, self.regime)

    def concat(self, other: "RepresentativeSet") -> "RepresentativeSet":
        return RepresentativeSet(
            np.vstack([self.internal, other.internal]),
            np.concatenate([self.alpha, other.alpha]),
            list(self.provenance) + list(other.provenance),
            self.regime,
            self.lambdaGrid,
        )

    def to_csv(self, path) -> None:
        """Rows ``gamma1,kappaTilde,nu,gamma2,gamma3,alpha,provenance`` after
        comment lines carrying the shape regime and the Box-Cox grid."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            fh.write(f"# regime={self.regime}\n")
            fh.write("# lambdaGrid=" + " ".join(repr(float(v)) for v in self.lambdaGrid) + "\n")
            w = csv.writer(fh)
            w.writerow([*INTERNAL_NAMES, "alpha", "provenance"])
            for row, a, prov in zip(self.internal, self.alpha, self.provenance):
                w.writerow([repr(float(v)) for v in row] + [repr(float(a)), prov])

    @classmethod
    def from_csv(cls, path) -> "RepresentativeSet":
        regime, lams = "log", [1.0]
        rows, alphas, prov = [], [], []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh]
        body = []
        for ln in lines:
            if ln.startswith("# regime="):
                regime = ln.split("=", 1)[1].strip()
            elif ln.startswith("# lambdaGrid="):
                lams = [float(v) for v in ln.split("=", 1)[1].split()]
            elif not ln.startswith("#"):
                body.append(ln)
        reader = csv.reader(body)
        header = next(reader)
        if header[:5] != list(INTERNAL_NAMES):
            raise ValueError(f"{path}: unexpected header {header}")
        for rec in reader:
            if not rec:
                continue
            rows.append([float(v) for v in rec[:5]])
            alphas.append(float(rec[5]))
            prov.append(rec[6])
        return cls(np.array(rows), np.array(alphas), prov, regime, np.array(lams))


def _random_rotation(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def contour_points(q: QuadApprox, alphas=DEFAULT_ALPHAS, n_per_contour=None, seed: int = 0,
                   regime: str = "log", sphere_seed: int = 0) -> RepresentativeSet:
    """Points on the ellipsoids ``quadratic_form = chi2_upper(alpha, dim)``.

    Each level reuses the same spread sphere configuration under its own
    seeded random rotation, mapped by ``w = c + sqrt(q) E D^(-1/2) x``.
    """
    dim = q.dim
    n = n_per_contour or POINTS_PER_CONTOUR.get(dim, 120)
    base = sphere_points(dim, n, sphere_seed)
    rng = np.random.default_rng(seed)
    scale = q.eigVecs / np.sqrt(q.eigVals)
    blocks, alpha_col, prov = [], [], []
    for a in alphas:
        c = chi2_upper(a, dim)
        x = base @ _random_rotation(rng, dim).T
        pts = np.tile(q.center, (n, 1))
        pts[:, list(q.dims)] += np.sqrt(c) * x @ scale.T
        blocks.append(pts)
        alpha_col.append(np.full(n, a))
        prov += [f"contour({a:g},{dim})|{q.label}"] * n
    return RepresentativeSet(np.vstack(blocks), np.concatenate(alpha_col), prov, regime)


def repair_nugget(rs: RepresentativeSet, seed: int = 0) -> RepresentativeSet:
    """Replace negative sampled ``nu``: a random half (rounded down) become 0,
    the others get ``nu^2 ~ Uniform(0, 2)``."""
    internal = rs.internal.copy()
    neg = np.flatnonzero(internal[:, NU] < 0)
    if neg.size:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(neg)
        zero, unif = perm[: neg.size // 2], perm[neg.size // 2 :]
        internal[zero, NU] = 0.0
        internal[unif, NU] = np.sqrt(rng.uniform(0.0, 2.0, size=unif.size))
    return RepresentativeSet(internal, rs.alpha.copy(), list(rs.provenance), rs.regime, rs.lambdaGrid)


def lambda_grid(center: float, curvature: float, m: int, level: float = 0.99) -> np.ndarray:
    """``m`` equally spaced Box-Cox values between the 1% and 99% quantiles of
    the Gaussian approximation ``N(center, -1/curvature)``, plus ``center``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m == 1:
        return np.array([float(center)])
    if curvature < 0 and np.isfinite(curvature):
        half = stats.norm.ppf(level) / np.sqrt(-curvature)
    else:
        log.warning("Box-Cox curvature %r is not negative; using center +- 1", curvature)
        half = 1.0
    grid = np.linspace(center - half, center + half, m)
    near = np.isclose(grid, center, rtol=0, atol=1e-12)
    if np.any(near):
        grid[near] = center
    else:
        grid = np.append(grid, center)
    return np.sort(grid)


def representative_count(n_main: int, n_alpha: int, n_fixed_families: int,
                         n_fixed_alpha: int, n_fixed: int) -> int:
    """Rows produced by :func:`build_representative_set` (MLE rows included)."""
    return 1 + n_fixed_families + n_alpha * n_main + n_fixed_families * n_fixed_alpha * n_fixed


def build_representative_set(main: QuadApprox, fixed=(), alphas=DEFAULT_ALPHAS,
                             fixed_alphas=DEFAULT_FIXED_ALPHAS, n_main=None, n_fixed=None,
                             regime: str = "log", seed: int = 0, lambdas=None) -> RepresentativeSet:
    """MLE rows, then contour families for the full fit and each fixed-shape fit,
    with negative nuggets repaired.  Seeds for each family derive from ``seed``."""
    ss = np.random.SeedSequence(seed)
    child = ss.spawn(len(fixed) + 2)
    seeds = [int(c.generate_state(1)[0]) for c in child]
    mles = [main] + list(fixed)
    rs = RepresentativeSet(
        np.array([q.center for q in mles]),
        np.full(len(mles), np.nan),
        [f"MLE|{q.label}" for q in mles],
        regime,
    )
    rs = rs.concat(contour_points(main, alphas, n_main, seeds[0], regime))
    for i, q in enumerate(fixed):
        rs = rs.concat(contour_points(q, fixed_alphas, n_fixed, seeds[i + 1], regime))
    rs = repair_nugget(rs, seeds[-1])
    if lambdas is not None:
        rs.lambdaGrid = np.asarray(lambdas, dtype=float)
    return rs
