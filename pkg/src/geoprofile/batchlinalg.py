"""Batched LDL^T factorisation, unit-triangular forward solves and weighted
crossproducts.

Each kernel runs its matrices in parallel (one matrix per thread) and keeps a
fixed summation order inside every dot product, so results are bitwise
identical for any thread count.  Failed factorisations are reported through a
per-matrix status vector instead of exceptions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

MODES = ("D", "Dinverse", "identity")

# the bundled TBB is too old for numba; skip probing it unless asked for
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"


def set_threads(n: int) -> int:
    """Cap the kernel thread count; returns the value actually used."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@njit(cache=True)
def _ldl_inplace(A, eps):
    # Overwrites the lower triangle of A with L (unit diagonal implicit) and
    # the diagonal with D.  Returns (ok, logdet).
    n = A.shape[0]
    amax = 0.0
    for i in range(n):
        for j in range(i + 1):
            v = abs(A[i, j])
            if v > amax:
                amax = v
    tol = n * eps * amax
    w = np.empty(n, dtype=A.dtype)
    logdet = 0.0
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            w[k] = A[j, k] * A[k, k]
            s -= A[j, k] * w[k]
        if not s > tol:
            return False, np.nan
        A[j, j] = s
        logdet += np.log(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= A[i, k] * w[k]
            A[i, j] = t / s
    return True, logdet


@njit(parallel=True, cache=True)
def _ldl_batch(V, eps, logdet, status):
    for k in prange(V.shape[0]):
        ok, ld = _ldl_inplace(V[k], eps)
        status[k] = ok
        logdet[k] = ld


@njit(cache=True)
def _forward_unit(F, C):
    # C <- L^{-1} C with L the unit lower triangle stored in F
    n = F.shape[0]
    m = C.shape[1]
    for i in range(1, n):
        for j in range(i):
            lij = F[i, j]
            for c in range(m):
                C[i, c] -= lij * C[j, c]


@njit(parallel=True, cache=True)
def _backsolve_shared(F, B, out):
    for k in prange(F.shape[0]):
        out[k, :, :] = B
        _forward_unit(F[k], out[k])


@njit(parallel=True, cache=True)
def _backsolve_batch(F, B, out):
    for k in prange(F.shape[0]):
        out[k, :, :] = B[k]
        _forward_unit(F[k], out[k])


@njit(parallel=True, cache=True)
def _crossprod(A, W, out):
    # out[k] = A[k]^T diag(W[k]) A[k], lower triangle summed over rows in order
    K, n, m = A.shape
    for k in prange(K):
        C = out[k]
        for a in range(m):
            for b in range(m):
                C[a, b] = 0.0
        Ak = A[k]
        for i in range(n):
            wi = W[k, i]
            for a in range(m):
                t = Ak[i, a] * wi
                for b in range(a + 1):
                    C[a, b] += t * Ak[i, b]
        for a in range(m):
            for b in range(a):
                C[b, a] = C[a, b]


@dataclass
class LdlFactorBatch:
    """Packed LDL^T factors: strict lower triangle holds L, diagonal holds D."""

    packed: np.ndarray
    logDet: np.ndarray
    status: np.ndarray

    @property
    def K(self) -> int:
        return self.packed.shape[0]

    @property
    def D(self) -> np.ndarray:
        return np.diagonal(self.packed, axis1=1, axis2=2).copy()

    @property
    def L(self) -> np.ndarray:
        n = self.packed.shape[1]
        L = np.tril(self.packed, -1)
        L[:, np.arange(n), np.arange(n)] = 1.0
        return L


def chol_batch(V: np.ndarray, overwrite: bool = True) -> LdlFactorBatch:
    """LDL^T factorisation of every matrix in the (K, n, n) batch ``V``.

    With ``overwrite=True`` (the default) the factors replace ``V`` in place.
    A pivot ``D[i] <= n * eps * max|V_k|`` marks matrix k invalid
    (``status[k] = False``, ``logDet[k] = nan``).
    """
    V = np.asarray(V)
    if V.ndim != 3 or V.shape[1] != V.shape[2]:
        raise ValueError(f"expected a (K, n, n) batch, got shape {V.shape}")
    if not overwrite or not V.flags.c_contiguous:
        V = np.array(V, order="C", copy=True)
    K = V.shape[0]
    logdet = np.empty(K)
    status = np.empty(K, dtype=np.bool_)
    eps = float(np.finfo(V.dtype).eps)
    _ldl_batch(V, eps, logdet, status)
    return LdlFactorBatch(V, logdet, status)


def backsolve_batch(factors: LdlFactorBatch, B: np.ndarray) -> np.ndarray:
    """Solve ``L_k C_k = B`` (or ``B_k``) by forward substitution for every k.

    ``B`` is either a shared (n, m) matrix or a (K, n, m) batch; a 1-D ``B``
    is treated as a single column.  Returns a (K, n, m) array.
    """
    F = factors.packed
    K, n, _ = F.shape
    B = np.asarray(B, dtype=F.dtype)
    if B.ndim == 1:
        B = B[:, None]
    if B.ndim == 2:
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, factors have n={n}")
        out = np.empty((K, n, B.shape[1]), dtype=F.dtype)
        _backsolve_shared(F, np.ascontiguousarray(B), out)
    elif B.ndim == 3:
        if B.shape[:2] != (K, n):
            raise ValueError(f"B batch shape {B.shape} does not match factors {(K, n)}")
        out = np.empty(B.shape, dtype=F.dtype)
        _backsolve_batch(F, np.ascontiguousarray(B), out)
    else:
        raise ValueError("B must be 1-, 2- or 3-dimensional")
    return out


def crossprod_batch(A: np.ndarray, D=None, mode: str = "Dinverse"):
    """Weighted crossproducts ``A_k^T W_k A_k`` for a (K, n, m) batch.

    ``mode`` picks ``W = diag(D)``, ``diag(1/D)`` or the identity.  Returns
    ``(C, status)``; under ``Dinverse`` a non-positive weight flags the set.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    A = np.ascontiguousarray(A)
    if A.ndim == 2:
        A = A[None]
    K, n, m = A.shape
    status = np.ones(K, dtype=np.bool_)
    if mode == "identity":
        W = np.ones((K, n), dtype=A.dtype)
    else:
        if D is None:
            raise ValueError(f"mode {mode!r} needs weights D")
        W = np.asarray(D, dtype=A.dtype)
        if W.ndim == 1:
            W = W[None]
        if W.shape != (K, n):
            raise ValueError(f"weights have shape {W.shape}, expected {(K, n)}")
        if mode == "Dinverse":
            status = np.all(W > 0, axis=1)
            with np.errstate(divide="ignore"):
                W = np.where(W > 0, 1.0 / W, 0.0).astype(A.dtype)
        W = np.ascontiguousarray(W)
    out = np.empty((K, m, m), dtype=A.dtype)
    _crossprod(A, W, out)
    return out, status
