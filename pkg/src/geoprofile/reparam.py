"""Maps between natural covariance parameters and internal coordinates.

Internal coordinates are ``(gamma1, kappaTilde, nu, gamma2, gamma3)``:

* ``gamma1 = log(phiX) + log(phiY)``
* ``kappaTilde = log(kappa)`` or ``kappa**-0.5`` depending on the regime
* ``nu = sqrt(nuggetSq)``
* ``(gamma2, gamma3) = sqrt(phiX/phiY - 1) * (cos 2 phiA, sin 2 phiA)``

The isotropic model is the single point ``gamma2 = gamma3 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import normalize_anisotropy

INTERNAL_NAMES = ("gamma1", "kappaTilde", "nu", "gamma2", "gamma3")
REGIMES = ("log", "invSqrt")
KAPPA_REGIME_SWITCH = 4.0


def kappa_regime(kappa_hat: float) -> str:
    """Regime for the shape transform, chosen once per fit from the MLE."""
    return "invSqrt" if kappa_hat >= KAPPA_REGIME_SWITCH else "log"


def kappa_to_tilde(kappa, regime: str):
    kappa = np.asarray(kappa, dtype=float)
    if regime == "log":
        return np.log(kappa)
    if regime == "invSqrt":
        return 1.0 / np.sqrt(kappa)
    raise ValueError(f"unknown kappa regime {regime!r}")


def tilde_to_kappa(kt, regime: str):
    kt = np.asarray(kt, dtype=float)
    if regime == "log":
        return np.exp(kt)
    if regime == "invSqrt":
        with np.errstate(divide="ignore"):
            return 1.0 / (kt * kt)
    raise ValueError(f"unknown kappa regime {regime!r}")


@dataclass(frozen=True)
class InternalParams:
    gamma1: float
    kappaTilde: float
    nu: float
    gamma2: float
    gamma3: float
    regime: str = "log"

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma1, self.kappaTilde, self.nu, self.gamma2, self.gamma3])

    @classmethod
    def from_array(cls, row, regime: str = "log") -> "InternalParams":
        return cls(*(float(v) for v in row), regime=regime)


def to_internal(natural, regime: str = "log") -> np.ndarray:
    """Convert (K, 5) natural parameters to (K, 5) internal coordinates.

    Ranges with ``phiX < phiY`` are normalised (swap plus quarter turn) first.
    A 1-D input returns a 1-D result.
    """
    nat = np.asarray(natural, dtype=float)
    flat = nat.ndim == 1
    nat = np.atleast_2d(nat)
    phiX, phiY, phiA = normalize_anisotropy(nat[:, 0], nat[:, 1], nat[:, 2])
    radius = np.sqrt(np.maximum(phiX / phiY - 1.0, 0.0))
    out = np.column_stack(
        [
            np.log(phiX) + np.log(phiY),
            kappa_to_tilde(nat[:, 3], regime),
            np.sqrt(nat[:, 4]),
            radius * np.cos(2.0 * phiA),
            radius * np.sin(2.0 * phiA),
        ]
    )
    return out[0] if flat else out


def to_natural(internal, regime: str = "log") -> np.ndarray:
    """Inverse of :func:`to_internal`; ``nu`` is squared, so its sign is lost."""
    it = np.asarray(internal, dtype=float)
    flat = it.ndim == 1
    it = np.atleast_2d(it)
    g1, kt, nu, g2, g3 = it.T
    ratio = 1.0 + g2 * g2 + g3 * g3
    half = np.exp(g1 / 2.0)
    root = np.sqrt(ratio)
    out = np.column_stack(
        [half * root, half / root, np.arctan2(g3, g2) / 2.0, tilde_to_kappa(kt, regime), nu * nu]
    )
    return out[0] if flat else out


def aniso_ratio(internal) -> np.ndarray:
    it = np.atleast_2d(np.asarray(internal, dtype=float))
    return 1.0 + it[:, 3] ** 2 + it[:, 4] ** 2


def combined_range(internal) -> np.ndarray:
    it = np.atleast_2d(np.asarray(internal, dtype=float))
    return np.exp(it[:, 0] / 2.0)
