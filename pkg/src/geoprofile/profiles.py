"""Profile likelihood curves, surfaces and likelihood-based intervals.

A batch of likelihood evaluations is a cloud of points.  For a scalar
function of the parameters, the upper convex hull of (value, log-likelihood)
pairs gives a concave, piecewise-linear profile estimate; the same idea in
two dimensions uses the upper facets of a 3-D hull.  Regression coefficients
and the spatial standard deviation have closed-form profiles computed from the
stored crossproducts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import contourpy
import numpy as np
from scipy import stats
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .likelihood import LikGrid, LikSummaries
from .reparam import INTERNAL_NAMES, combined_range, kappa_to_tilde, to_natural

LOG_2PI = math.log(2.0 * math.pi)


class ProfileError(ValueError):
    pass


# name -> (notation, physical lower bound or None)
PARAMETERS = {
    "gamma1": ("gamma1", None),
    "kappaTilde": ("kappaTilde", None),
    "nu": ("nu", 0.0),
    "aniso1": ("gamma2", None),
    "aniso2": ("gamma3", None),
    "range": ("phiX", 0.0),
    "combinedRange": ("sqrt(phiX*phiY)", 0.0),
    "anisoRatio": ("phiR", 1.0),
    "shape": ("kappa", 0.0),
    "nugget": ("nu^2", 0.0),
    "sdNugget": ("tau", 0.0),
    "anisoAngleRadians": ("phiA", None),
    "boxcox": ("lambda", None),
    "sdSpatial": ("sigma", 0.0),
}
COVARIANCE_PARAMS = ("range", "combinedRange", "anisoRatio", "shape", "nugget", "sdNugget",
                     "anisoAngleRadians", "aniso1", "aniso2", "boxcox")
INTERNAL_ALIASES = {"gamma2": "aniso1", "gamma3": "aniso2"}


def canonical_name(name: str) -> str:
    return INTERNAL_ALIASES.get(name, name)


def parameter_values(name: str, internal: np.ndarray, regime: str) -> np.ndarray:
    """Value of a covariance parameter for each row of internal coordinates."""
    internal = np.atleast_2d(internal)
    name = canonical_name(name)
    col = {"gamma1": 0, "kappaTilde": 1, "nu": 2, "aniso1": 3, "aniso2": 4}
    if name in col:
        return internal[:, col[name]].copy()
    if name == "combinedRange":
        return combined_range(internal)
    if name == "anisoRatio":
        return 1.0 + internal[:, 3] ** 2 + internal[:, 4] ** 2
    nat = to_natural(internal, regime)
    idx = {"range": 0, "anisoAngleRadians": 2, "shape": 3, "nugget": 4}
    if name in idx:
        return nat[:, idx[name]]
    raise ProfileError(f"unknown parameter {name!r}")


# --------------------------------------------------------------------- 1-D


def upper_hull(x, y) -> np.ndarray:
    """Indices of the upper convex hull vertices of the points (x, y).

    Points sharing an abscissa keep only the largest ordinate; the result is
    ordered by increasing x.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.lexsort((-y, x))
    xs = x[order]
    keep = np.ones(len(xs), dtype=bool)
    keep[1:] = xs[1:] != xs[:-1]
    cand = order[keep]
    hull: list[int] = []
    for i in cand:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(int(i))
    return np.array(hull, dtype=int)


@dataclass
class ConfidenceInterval:
    level: float
    lo: float
    hi: float
    method: str = "likelihood"
    loMarker: str | None = None
    hiMarker: str | None = None

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    @staticmethod
    def _fmt(v, marker, digits):
        if marker is not None:
            return marker
        if v is None or not np.isfinite(v):
            return "NA"
        return f"{v:.{digits}g}"

    def labels(self, digits: int = 6):
        return self._fmt(self.lo, self.loMarker, digits), self._fmt(self.hi, self.hiMarker, digits)


@dataclass
class ProfileCurve:
    """Piecewise-linear profile log-likelihood, shifted so its maximum is 0.

    ``abscissa``/``pll`` hold the interpolation nodes (hull vertices, or every
    point for curves built without a hull).  ``cloudX``/``cloudPll`` keep the
    per-abscissa maxima of the raw points for export.
    """

    paramName: str
    abscissa: np.ndarray
    pll: np.ndarray
    cloudX: np.ndarray
    cloudPll: np.ndarray
    isHullVertex: np.ndarray
    space: str = "natural"
    reference: float = 0.0
    lowerBound: float | None = None
    ci: ConfidenceInterval | None = None

    @property
    def hullPoints(self) -> np.ndarray:
        return np.column_stack([self.abscissa, self.pll])

    @property
    def argmax(self) -> float:
        return float(self.abscissa[np.argmax(self.pll)])

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.abscissa, self.pll)
        return np.where((x < self.abscissa[0]) | (x > self.abscissa[-1]), -np.inf, out)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["abscissa", "pll", "isHullVertex"])
            for x, p, h in zip(self.cloudX, self.cloudPll, self.isHullVertex):
                w.writerow([repr(float(x)), repr(float(p)), int(bool(h))])


def _dedupe_max(x, y):
    order = np.lexsort((-y, x))
    xs = x[order]
    keep = np.ones(len(xs), dtype=bool)
    keep[1:] = xs[1:] != xs[:-1]
    return xs[keep], y[order][keep]


def curve_from_points(name, x, y, hull=True, space="natural", lower_bound=None,
                      reference=None) -> ProfileCurve:
    """Profile curve from a scatter of (abscissa, log-likelihood) values."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if np.unique(x).size < 3:
        raise ProfileError(f"{name}: need at least 3 distinct abscissa values")
    cx, cy = _dedupe_max(x, y)
    ref = float(cy.max()) if reference is None else float(reference)
    if hull:
        idx = upper_hull(cx, cy)
        vertex = np.zeros(cx.size, dtype=bool)
        vertex[idx] = True
    else:
        vertex = np.ones(cx.size, dtype=bool)
    return ProfileCurve(name, cx[vertex], cy[vertex] - ref, cx, cy - ref, vertex, space, ref,
                        lower_bound)


def _omega_cloud(grid: LikGrid):
    best = grid.max_over_lambda()
    ok = np.isfinite(best)
    return grid.internal[ok], best[ok]


def profile_1d(grid: LikGrid, param: str, space: str = "natural", level: float | None = None) -> ProfileCurve:
    """Hull-based profile for a covariance parameter, or lambda (``boxcox``).

    Each covariance set contributes its best log-likelihood over the lambda
    grid.  Lambda itself is profiled by the maximum over sets at each grid
    value, interpolated without a hull.
    """
    name = canonical_name(param)
    if name not in PARAMETERS or name == "sdSpatial":
        raise ProfileError(f"unknown parameter {param!r}; valid: {sorted(PARAMETERS)}")
    lower = PARAMETERS[name][1]
    if name == "boxcox":
        y = np.max(np.where(grid.status[:, None], grid.logLik, -np.inf), axis=0)
        curve = curve_from_points(name, grid.lambdaGrid, y, hull=False, space=space)
    elif name == "sdNugget":
        nu = np.abs(grid.internal[:, 2])[:, None]
        tau = grid.sigmaHat * nu
        curve = curve_from_points(name, tau, grid.logLik, space=space, lower_bound=lower)
    else:
        internal, best = _omega_cloud(grid)
        x = parameter_values(name, internal, grid.regime)
        space = "internal" if name in ("gamma1", "kappaTilde", "nu", "aniso1", "aniso2") else space
        curve = curve_from_points(name, x, best, space=space, lower_bound=lower)
    if level is not None:
        curve.ci = likelihood_ci(curve, level)
    return curve


def likelihood_ci(curve: ProfileCurve, level: float) -> ConfidenceInterval:
    """Interval where the profile stays within ``chi2_1(level)/2`` of its max.

    Endpoints come from linear inverse interpolation between nodes.  A side
    that never drops below the threshold reports the edge of the explored
    domain with a ``<``/``>`` marker, except at a physical lower bound which is
    reported plainly.
    """
    thr = -stats.chi2.ppf(level, 1) / 2.0
    x, y = curve.abscissa, curve.pll
    i0 = int(np.argmax(y))
    lo = hi = None
    for j in range(i0, 0, -1):
        if y[j - 1] < thr:
            x1, y1, x2, y2 = x[j - 1], y[j - 1], x[j], y[j]
            lo = x1 + (thr - y1) * (x2 - x1) / (y2 - y1)
            break
    for j in range(i0, len(x) - 1):
        if y[j + 1] < thr:
            x1, y1, x2, y2 = x[j], y[j], x[j + 1], y[j + 1]
            hi = x1 + (thr - y1) * (x2 - x1) / (y2 - y1)
            break
    lo_m = hi_m = None
    if lo is None:
        lo = float(x[0])
        # an explored edge within 1% of the span from a physical bound is the bound
        span = float(x[-1] - x[0])
        at_bound = curve.lowerBound is not None and lo - curve.lowerBound <= 1e-2 * span
        if at_bound:
            lo = float(curve.lowerBound)
        else:
            lo_m = f"<{lo:.4g}"
    if hi is None:
        hi = float(x[-1])
        hi_m = f">{hi:.4g}"
    return ConfidenceInterval(level, float(lo), float(hi), "likelihood", lo_m, hi_m)


# -------------------------------------------------------- closed-form profiles


def _beta_quadratic(s: LikSummaries, p_idx: int):
    """Coefficients with ``residual(beta_p) = c0 + c1*beta_p + c2*beta_p**2``
    per (set, lambda) after profiling out the other coefficients."""
    yy = s.ssqY
    xy = s.ssqXY
    XX = s.ssqXX
    p = s.p
    rest = [j for j in range(p) if j != p_idx]
    xy_p = xy[:, p_idx, :]
    xx_pp = XX[:, p_idx, p_idx]
    ok = np.ones(yy.shape[0], dtype=bool)
    if not rest:
        return yy, -2.0 * xy_p, np.broadcast_to(xx_pp[:, None], yy.shape), ok
    A = XX[:, rest][:, :, rest]
    a = xy[:, rest, :]
    b = XX[:, rest, p_idx]
    ok = np.linalg.cond(A) < 1e12
    A = np.where(ok[:, None, None], A, np.eye(len(rest)))
    Ainv_a = np.linalg.solve(A, a)
    Ainv_b = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    c0 = yy - np.einsum("kim,kim->km", a, Ainv_a)
    c1 = -2.0 * (xy_p - np.einsum("ki,kim->km", b, Ainv_a))
    c2 = xx_pp - np.einsum("ki,ki->k", b, Ainv_b)
    return c0, c1, np.broadcast_to(c2[:, None], yy.shape), ok


def profile_beta(s: LikSummaries, p_idx: int, beta_grid, status=None, name=None,
                 level: float | None = None) -> ProfileCurve:
    """Profile of one regression coefficient over every stored (set, lambda).

    The coefficient enters as a fixed offset; the remaining coefficients and
    the variance are profiled analytically using the ML form of the
    likelihood.  Sets with an ill-conditioned reduced design block are skipped.
    """
    beta_grid = np.asarray(beta_grid, dtype=float)
    c0, c1, c2, ok = _beta_quadratic(s, p_idx)
    valid = ok[:, None] & np.isfinite(c0)
    if status is not None:
        valid &= np.asarray(status)[:, None]
    n = s.n
    const = s.detVar[:, None] - 2.0 * s.jacobian[None, :] + n * LOG_2PI + n
    vals = np.empty(beta_grid.size)
    for g, b in enumerate(beta_grid):
        resid = c0 + c1 * b + c2 * b * b
        with np.errstate(divide="ignore", invalid="ignore"):
            m2 = n * np.log(resid / n) + const
        m2 = np.where(valid & (resid > 0), m2, np.inf)
        vals[g] = -0.5 * np.min(m2)
    label = name or f"beta{p_idx}"
    curve = curve_from_points(label, beta_grid, vals, hull=False)
    if level is not None:
        curve.ci = likelihood_ci(curve, level)
    return curve


def profile_sigma(s: LikSummaries, sigma_grid, status=None, level: float | None = None) -> ProfileCurve:
    """Profile of the spatial standard deviation over every stored (set, lambda).

    For REML summaries the restricted likelihood with ``n - p`` degrees of
    freedom is used.
    """
    sigma_grid = np.asarray(sigma_grid, dtype=float)
    if np.any(sigma_grid <= 0):
        raise ProfileError("sigma grid values must be positive")
    n, p = s.n, s.p
    resid = s.ssqResidual
    if s.mode == "REML":
        dof = n - p
        const = s.detVar[:, None] + s.detReml[:, None] - 2.0 * s.jacobian[None, :] + n * LOG_2PI
    else:
        dof = n
        const = s.detVar[:, None] - 2.0 * s.jacobian[None, :] + n * LOG_2PI
    valid = np.isfinite(resid) & np.isfinite(const)
    if status is not None:
        valid &= np.asarray(status)[:, None]
    vals = np.empty(sigma_grid.size)
    for g, sg in enumerate(sigma_grid):
        s2 = sg * sg
        m2 = np.where(valid, resid / s2 + dof * math.log(s2) + const, np.inf)
        vals[g] = -0.5 * np.min(m2)
    curve = curve_from_points("sdSpatial", sigma_grid, vals, hull=False, lower_bound=0.0)
    if level is not None:
        curve.ci = likelihood_ci(curve, level)
    return curve


# --------------------------------------------------------------------- 2-D

# natural parameters that are a one-to-one function of one internal coordinate
_SINGLE_AXIS = {
    "combinedRange": ("gamma1", lambda v, regime: 2.0 * np.log(v)),
    "shape": ("kappaTilde", lambda v, regime: kappa_to_tilde(v, regime)),
    "nugget": ("nu", lambda v, regime: np.sqrt(v)),
    "gamma1": ("gamma1", lambda v, regime: v),
    "kappaTilde": ("kappaTilde", lambda v, regime: v),
    "nu": ("nu", lambda v, regime: v),
    "aniso1": ("aniso1", lambda v, regime: v),
    "aniso2": ("aniso2", lambda v, regime: v),
    "boxcox": ("boxcox", lambda v, regime: v),
}


def _aniso_to_internal(ratio, angle):
    r = np.sqrt(np.maximum(ratio - 1.0, 0.0))
    return r * np.cos(2.0 * angle), r * np.sin(2.0 * angle)


@dataclass
class ProfileSurface:
    pair: tuple
    x: np.ndarray
    y: np.ndarray
    pll: np.ndarray  # (len(y), len(x)); NaN outside the explored region
    hullSpace: tuple
    contours: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([self.pair[0], self.pair[1], "pll"])
            for j, yv in enumerate(self.y):
                for i, xv in enumerate(self.x):
                    v = self.pll[j, i]
                    w.writerow([repr(float(xv)), repr(float(yv)), repr(float(v)) if np.isfinite(v) else "NA"])

    def contours_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "piece", self.pair[0], self.pair[1]])
            for lev, pieces in self.contours.items():
                for k, seg in enumerate(pieces):
                    for xv, yv in seg:
                        w.writerow([lev, k, repr(float(xv)), repr(float(yv))])


class UpperHullSurface:
    """Concave piecewise-planar interpolant through the upper facets of the
    3-D convex hull of (x, y, z) points."""

    def __init__(self, x, y, z):
        pts = np.column_stack([x, y, z]).astype(float)
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        if pts.shape[0] < 4:
            raise ProfileError("need at least 4 points for a 2-D profile")
        self.shift = pts.min(axis=0)
        self.scale = np.ptp(pts, axis=0)
        if np.any(self.scale == 0):
            raise ProfileError("degenerate point cloud for a 2-D profile")
        u = (pts - self.shift) / self.scale
        try:
            hull = ConvexHull(u)
            self.tri = Delaunay(u[:, :2])
        except QhullError as exc:
            raise ProfileError(f"degenerate point cloud for a 2-D profile: {exc}") from None
        eq = hull.equations
        up = eq[:, 2] > 1e-12
        if not np.any(up):
            raise ProfileError("no upper facets in the 2-D hull")
        eq = eq[up]
        # z = -(a x + b y + d) / c on each upper facet
        self.coef = -eq[:, [0, 1, 3]] / eq[:, 2:3]

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = x.shape
        ux = (x.ravel() - self.shift[0]) / self.scale[0]
        uy = (np.asarray(y, dtype=float).ravel() - self.shift[1]) / self.scale[1]
        out = np.full(ux.size, np.nan)
        inside = self.tri.find_simplex(np.column_stack([ux, uy])) >= 0
        if np.any(inside):
            q = np.column_stack([ux[inside], uy[inside], np.ones(inside.sum())])
            vals = np.empty(q.shape[0])
            for s in range(0, q.shape[0], 4096):
                vals[s : s + 4096] = np.min(q[s : s + 4096] @ self.coef.T, axis=1)
            out[inside] = vals * self.scale[2] + self.shift[2]
        return out.reshape(shape)


def _pair_cloud(grid: LikGrid, pair):
    """Cloud coordinates in hull space, natural-space coordinates and values."""
    a, b = (canonical_name(p) for p in pair)
    for nm in (a, b):
        if nm not in PARAMETERS or nm in ("sdSpatial", "sdNugget"):
            raise ProfileError(f"parameter {nm!r} not available for 2-D profiles")
    use_lambda = "boxcox" in (a, b)
    if use_lambda:
        K, M = grid.logLik.shape
        internal = np.repeat(grid.internal, M, axis=0)
        lam = np.tile(grid.lambdaGrid, K)
        z = grid.logLik.ravel()
        z = np.where(np.repeat(grid.status, M), z, -np.inf)
    else:
        best = grid.max_over_lambda()
        internal, lam, z = grid.internal, None, best

    def natural(nm):
        return lam if nm == "boxcox" else parameter_values(nm, internal, grid.regime)

    nat = (natural(a), natural(b))
    if {a, b} == {"anisoRatio", "anisoAngleRadians"}:
        g2, g3 = internal[:, 3], internal[:, 4]
        hull_xy = (g2, g3) if a == "anisoRatio" else (g3, g2)
        hull_space = ("aniso1", "aniso2") if a == "anisoRatio" else ("aniso2", "aniso1")

        def to_hull(xn, yn):
            r, ang = (xn, yn) if a == "anisoRatio" else (yn, xn)
            g2q, g3q = _aniso_to_internal(r, ang)
            return (g2q, g3q) if a == "anisoRatio" else (g3q, g2q)
    elif a in _SINGLE_AXIS and b in _SINGLE_AXIS:
        (ha, fa), (hb, fb) = _SINGLE_AXIS[a], _SINGLE_AXIS[b]

        def hull_coord(h):
            return lam if h == "boxcox" else parameter_values(h, internal, grid.regime)

        hull_xy = (hull_coord(ha), hull_coord(hb))
        hull_space = (ha, hb)

        def to_hull(xn, yn):
            return fa(xn, grid.regime), fb(yn, grid.regime)
    else:
        hull_xy = nat
        hull_space = (a, b)

        def to_hull(xn, yn):
            return xn, yn
    ok = np.isfinite(z)
    return (a, b), hull_xy, nat, z, ok, hull_space, to_hull


def profile_2d(grid: LikGrid, pair, n_grid: int = 101, levels=(0.5, 0.8, 0.9, 0.95),
               limits=None) -> ProfileSurface:
    """Joint profile of two parameters on an ``n_grid`` x ``n_grid`` lattice.

    The lattice spans the bounding box of the cloud in the requested (natural)
    coordinates, or ``limits = ((xlo, xhi), (ylo, yhi))``.  Lattice points are
    mapped to the internal coordinates where the hull is built, whenever such
    a one-to-one map exists.  Contours are drawn at ``-chi2_2(level)/2``.
    """
    names, hull_xy, nat, z, ok, hull_space, to_hull = _pair_cloud(grid, pair)
    hx, hy, z = hull_xy[0][ok], hull_xy[1][ok], z[ok]
    nx_, ny_ = nat[0][ok], nat[1][ok]
    ref = float(z.max())
    surf = UpperHullSurface(hx, hy, z - ref)
    if limits is None:
        limits = ((nx_.min(), nx_.max()), (ny_.min(), ny_.max()))
    xs = np.linspace(*limits[0], n_grid)
    ys = np.linspace(*limits[1], n_grid)
    X, Y = np.meshgrid(xs, ys)
    with np.errstate(invalid="ignore", divide="ignore"):
        QX, QY = to_hull(X, Y)
    vals = surf(QX, QY)
    out = ProfileSurface(names, xs, ys, vals, hull_space)
    gen = contourpy.contour_generator(xs, ys, np.ma.masked_invalid(vals))
    for lev in levels:
        thr = -stats.chi2.ppf(lev, 2) / 2.0
        out.contours[float(lev)] = [np.asarray(seg) for seg in gen.lines(thr)]
    return out


# ------------------------------------------------------------------ tables


@dataclass
class CiRow:
    name: str
    notation: str
    estimate: float
    likelihood: ConfidenceInterval | None
    wald: ConfidenceInterval | None


def write_ci_table(rows, path, digits: int = 6) -> None:
    """CSV with one row per parameter and lo/hi columns for each method."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "notation", "estimate", "likelihood_ciLo", "likelihood_ciHi",
                    "wald_ciLo", "wald_ciHi"])
        for r in rows:
            lik = r.likelihood.labels(digits) if r.likelihood else ("NA", "NA")
            wal = r.wald.labels(digits) if r.wald else ("NA", "NA")
            w.writerow([r.name, r.notation, f"{r.estimate:.{digits}g}", *lik, *wal])


def read_ci_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


__all__ = [
    "ConfidenceInterval", "ProfileCurve", "ProfileSurface", "ProfileError", "CiRow",
    "INTERNAL_NAMES", "PARAMETERS", "upper_hull", "curve_from_points", "profile_1d",
    "likelihood_ci", "profile_beta", "profile_sigma", "profile_2d", "write_ci_table",
]
