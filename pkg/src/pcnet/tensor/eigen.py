"""Symmetric eigendecomposition.

The production path is Householder reduction to tridiagonal form followed
by the implicit-shift QL iteration (the classic tred2/tql2 pair). A cyclic
Jacobi solver is kept as an independent oracle for small matrices.

Both kernels operate on the *transpose* of the textbook eigenvector matrix
so that every inner loop walks contiguous memory: row ``j`` of the working
array holds eigenvector ``j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from pcnet.exceptions import DimensionError, NumericalError

SYM_TOL = 1e-9
CLAMP_REL = 1e-10


@dataclass(frozen=True)
class SymEigResult:
    """Eigenvalues in descending order; column ``j`` of ``eigenvectors`` pairs with ``eigenvalues[j]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None


@numba.njit(cache=True)
def _tridiagonalize(a, d, e, want_vectors):
    # a holds V^T: every V[r, c] of the textbook algorithm is a[c, r] here.
    n = a.shape[0]
    for j in range(n):
        d[j] = a[j, n - 1]
    for i in range(n - 1, 0, -1):
        scale = 0.0
        h = 0.0
        for k in range(i):
            scale += abs(d[k])
        if scale == 0.0:
            e[i] = d[i - 1]
            for j in range(i):
                d[j] = a[j, i - 1]
                a[j, i] = 0.0
                a[i, j] = 0.0
        else:
            for k in range(i):
                d[k] /= scale
                h += d[k] * d[k]
            f = d[i - 1]
            g = math.sqrt(h)
            if f > 0:
                g = -g
            e[i] = scale * g
            h = h - f * g
            d[i - 1] = f - g
            for j in range(i):
                e[j] = 0.0
            for j in range(i):
                f = d[j]
                a[i, j] = f
                g = e[j] + a[j, j] * f
                for k in range(j + 1, i):
                    g += a[j, k] * d[k]
                    e[k] += a[j, k] * f
                e[j] = g
            f = 0.0
            for j in range(i):
                e[j] /= h
                f += e[j] * d[j]
            hh = f / (h + h)
            for j in range(i):
                e[j] -= hh * d[j]
            for j in range(i):
                f = d[j]
                g = e[j]
                for k in range(j, i):
                    a[j, k] -= f * e[k] + g * d[k]
                d[j] = a[j, i - 1]
                a[j, i] = 0.0
        d[i] = h

    if want_vectors:
        for i in range(n - 1):
            a[i, n - 1] = a[i, i]
            a[i, i] = 1.0
            h = d[i + 1]
            if h != 0.0:
                for k in range(i + 1):
                    d[k] = a[i + 1, k] / h
                for j in range(i + 1):
                    g = 0.0
                    for k in range(i + 1):
                        g += a[i + 1, k] * a[j, k]
                    for k in range(i + 1):
                        a[j, k] -= g * d[k]
            for k in range(i + 1):
                a[i + 1, k] = 0.0
        for j in range(n):
            d[j] = a[j, n - 1]
            a[j, n - 1] = 0.0
        a[n - 1, n - 1] = 1.0
    else:
        for j in range(n):
            d[j] = a[j, j]
    e[0] = 0.0


@numba.njit(cache=True)
def _ql_implicit(d, e, z, want_vectors, max_iter):
    """Diagonalize the tridiagonal (d, e); rotations are applied to rows of z.

    Returns the number of QL sweeps, or -1 when ``max_iter`` is exceeded.
    """
    n = d.shape[0]
    for i in range(1, n):
        e[i - 1] = e[i]
    e[n - 1] = 0.0
    f = 0.0
    tst1 = 0.0
    eps = 2.0 ** -52
    total = 0
    for l in range(n):
        tst1 = max(tst1, abs(d[l]) + abs(e[l]))
        m = l
        while m < n:
            if abs(e[m]) <= eps * tst1:
                break
            m += 1
        if m > l:
            while True:
                total += 1
                if total > max_iter:
                    return -1
                g = d[l]
                p = (d[l + 1] - g) / (2.0 * e[l])
                r = math.hypot(p, 1.0)
                if p < 0:
                    r = -r
                d[l] = e[l] / (p + r)
                d[l + 1] = e[l] * (p + r)
                dl1 = d[l + 1]
                h = g - d[l]
                for i in range(l + 2, n):
                    d[i] -= h
                f += h
                p = d[m]
                c = 1.0
                c2 = c
                c3 = c
                el1 = e[l + 1]
                s = 0.0
                s2 = 0.0
                for i in range(m - 1, l - 1, -1):
                    c3 = c2
                    c2 = c
                    s2 = s
                    g = c * e[i]
                    h = c * p
                    r = math.hypot(p, e[i])
                    e[i + 1] = s * r
                    s = e[i] / r
                    c = p / r
                    p = c * d[i] - s * g
                    d[i + 1] = h + s * (c * g + s * d[i])
                    if want_vectors:
                        for k in range(n):
                            h = z[i + 1, k]
                            z[i + 1, k] = s * z[i, k] + c * h
                            z[i, k] = c * z[i, k] - s * h
                p = -s * s2 * c3 * el1 * e[l] / dl1
                e[l] = s * p
                d[l] = c * p
                if not (abs(e[l]) > eps * tst1):
                    break
        d[l] = d[l] + f
        e[l] = 0.0
    return total


@numba.njit(cache=True)
def _jacobi(a, v, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if off <= tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                # v stores eigenvectors as rows
                for k in range(n):
                    vp = v[p, k]
                    vq = v[q, k]
                    v[p, k] = c * vp - s * vq
                    v[q, k] = s * vp + c * vq
    return -1


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionError(f"expected a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix has non-finite entries")
    scale = np.max(np.abs(m))
    if scale > 0 and np.max(np.abs(m - m.T)) > SYM_TOL * scale:
        raise NumericalError("matrix is not symmetric to within 1e-9 relative")
    return (m + m.T) / 2.0


def _finish(values: np.ndarray, rows: np.ndarray | None) -> SymEigResult:
    order = np.argsort(-values, kind="stable")
    values = values[order]
    peak = np.max(np.abs(values)) if values.size else 0.0
    values = np.where(np.abs(values) < CLAMP_REL * peak, 0.0, values)
    if rows is None:
        return SymEigResult(values, None)
    vecs = rows[order].T.copy()
    fix_signs(vecs)
    return SymEigResult(values, vecs)


def fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip columns in place so each column's largest-magnitude entry is positive.

    Ties go to the lowest row index (``argmax`` returns the first hit).
    """
    if vecs.size:
        lead = np.argmax(np.abs(vecs), axis=0)
        signs = np.sign(vecs[lead, np.arange(vecs.shape[1])])
        signs[signs == 0] = 1.0
        vecs *= signs
    return vecs


def sym_eigh(m: np.ndarray, eigvals_only: bool = False) -> SymEigResult:
    """Eigendecomposition of a real symmetric matrix.

    Householder tridiagonalization followed by implicit-shift QL. Raises
    :class:`NumericalError` if QL needs more than ``30 * n`` sweeps.
    """
    a = np.ascontiguousarray(_check_symmetric(m))
    n = a.shape[0]
    d = np.zeros(n)
    e = np.zeros(n)
    want = not eigvals_only
    _tridiagonalize(a, d, e, want)
    if _ql_implicit(d, e, a, want, 30 * n) < 0:
        raise NumericalError(f"QL iteration did not converge within {30 * n} sweeps")
    return _finish(d, None if eigvals_only else a)


def jacobi_eigh(m: np.ndarray, max_sweeps: int = 100) -> SymEigResult:
    """Cyclic Jacobi eigendecomposition; slow, used as a cross-check."""
    a = np.ascontiguousarray(_check_symmetric(m))
    n = a.shape[0]
    v = np.eye(n)
    tol = (np.finfo(np.float64).eps * max(np.linalg.norm(a), 1e-300)) ** 2
    if _jacobi(a, v, tol, max_sweeps) < 0:
        raise NumericalError(f"Jacobi did not converge within {max_sweeps} sweeps")
    return _finish(np.diag(a).copy(), v)
