"""Weight rewrites for the input- and output-based transformations.

All functions work on plain arrays, in float64, and never modify their
arguments. Products ``U^T W`` are accumulated in a fixed order per output
entry, so keeping a subset of output columns before or after the rewrite
gives bit-identical results.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from pcnet.exceptions import DimensionError


@numba.njit(cache=True)
def _tmatmul(u, w):
    m, k = u.shape
    n = w.shape[1]
    out = np.zeros((k, n))
    for i in range(m):
        for a in range(k):
            ua = u[i, a]
            for b in range(n):
                out[a, b] += ua * w[i, b]
    return out


@numba.njit(cache=True)
def _vecmat(v, w):
    n = w.shape[1]
    out = np.zeros(n)
    for i in range(w.shape[0]):
        for b in range(n):
            out[b] += v[i] * w[i, b]
    return out


def _f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _bias(b, n: int) -> np.ndarray:
    return np.zeros(n) if b is None else _f64(b)


def input_transform_dense(W: np.ndarray, b: np.ndarray | None, mean: np.ndarray,
                          U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite a dense layer to act on PCA coordinates.

    Returns ``(U^T W, b + mean W)`` so that ``((x - mean) U) W' + b'`` equals
    ``x W + b`` whenever ``x - mean`` lies in the span of ``U``.
    """
    W, mean, U = _f64(W), _f64(mean), _f64(U)
    if W.ndim != 2 or U.shape[0] != W.shape[0] or mean.shape != (W.shape[0],):
        raise DimensionError(f"input transform: W {W.shape}, mean {mean.shape}, U {U.shape} do not match")
    return _tmatmul(U, W), _bias(b, W.shape[1]) + _vecmat(mean, W)


def input_transform_conv(W: np.ndarray, b: np.ndarray | None, mean: np.ndarray,
                         U: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rewrite a convolution (kernel ``k1 x k2 x m x n``) to principal filters.

    Returns ``(W', b', pad_values)``: every kernel offset is projected with
    ``U^T``, the bias absorbs ``mean`` against every offset, and padding
    must use ``-mean U`` so border outputs are unchanged.
    """
    W, mean, U = _f64(W), _f64(mean), _f64(U)
    if W.ndim != 4 or U.shape[0] != W.shape[2] or mean.shape != (W.shape[2],):
        raise DimensionError(f"input transform: kernel {W.shape}, mean {mean.shape}, U {U.shape} do not match")
    k1, k2, _, n = W.shape
    out = np.empty((k1, k2, U.shape[1], n))
    bias = _bias(b, n)
    for i in range(k1):
        for j in range(k2):
            w = np.ascontiguousarray(W[i, j])
            out[i, j] = _tmatmul(U, w)
            bias = bias + _vecmat(mean, w)
    return out, bias, -(mean @ U)


@dataclass(frozen=True)
class OutputSelection:
    """Kept output indices (ascending) and the score of every unit."""

    indices: np.ndarray
    scores: np.ndarray


def importance_scores(U: np.ndarray, expand: int = 1) -> np.ndarray:
    """L1 norm of each input's row in a consumer's truncated basis.

    With ``expand > 1`` the consumer reads a flattened image and row
    ``p * channels + c`` belongs to channel ``c``; a channel's score is the
    sum over its ``expand`` rows.
    """
    U = np.abs(np.asarray(U, dtype=np.float64))
    if U.ndim != 2 or U.shape[0] % expand:
        raise DimensionError(f"basis with {U.shape[0]} rows cannot be split into {expand} positions")
    if expand == 1:
        return U.sum(axis=1)
    return U.reshape(expand, U.shape[0] // expand, U.shape[1]).sum(axis=(0, 2))


def choose(scores: np.ndarray, keep: int | None = None, threshold: float | None = None) -> np.ndarray:
    """Indices of the top ``keep`` scores (ties go to the lower index), or of
    every score above ``threshold`` (at least one). Returned ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if (keep is None) == (threshold is None):
        raise ValueError("give exactly one of keep or threshold")
    if threshold is not None:
        idx = np.flatnonzero(scores > threshold)
        if idx.size == 0:
            idx = np.array([int(np.argmax(scores))])
        return idx
    if not 1 <= keep <= scores.size:
        raise DimensionError(f"cannot keep {keep} of {scores.size} outputs")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep])


def select_outputs(U_next: np.ndarray, keep: int | None = None, threshold: float | None = None,
                   expand: int = 1) -> OutputSelection:
    """Pick the outputs of a layer that its consumer's basis relies on most."""
    scores = importance_scores(U_next, expand)
    return OutputSelection(choose(scores, keep, threshold), scores)


def select_shared_outputs(bases: list[np.ndarray], keep: int | None = None, threshold: float | None = None,
                          expands: list[int] | None = None) -> OutputSelection:
    """One selection for outputs summed together (residual groups).

    Scores are averaged over the distinct consumer bases.
    """
    if not bases:
        raise ValueError("need at least one consumer basis")
    expands = expands or [1] * len(bases)
    scores = np.mean([importance_scores(U, e) for U, e in zip(bases, expands)], axis=0)
    return OutputSelection(choose(scores, keep, threshold), scores)


def expanded_rows(indices: np.ndarray, channels: int, expand: int = 1) -> np.ndarray:
    """Input rows of a flattened consumer that belong to the kept channels."""
    indices = np.asarray(indices)
    if expand == 1:
        return indices
    return (np.arange(expand)[:, None] * channels + indices[None, :]).ravel()


def prune_producer(W: np.ndarray, b: np.ndarray | None, keep: np.ndarray):
    """Keep output columns (dense) or filters (conv) of a producing layer."""
    return W[..., keep].copy(), None if b is None else b[keep].copy()


def prune_consumer(W: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Keep input rows (dense) or input channels (conv kernel axis 2)."""
    if W.ndim == 2:
        return W[rows].copy()
    return W[:, :, rows, :].copy()


def output_transform(W: np.ndarray, b: np.ndarray | None, mean_next: np.ndarray, U_next: np.ndarray,
                     W_next: np.ndarray, keep: int | None = None, threshold: float | None = None,
                     expand: int = 1):
    """Prune a layer's outputs together with its consumer's inputs.

    Returns ``(selection, W, b, mean_next, U_next, W_next)`` with the pruned
    arrays; ``W_next`` holds the consumer's weights in original coordinates.
    """
    sel = select_outputs(U_next, keep, threshold, expand)
    channels = W.shape[-1]
    rows = expanded_rows(sel.indices, channels, expand)
    W2, b2 = prune_producer(W, b, sel.indices)
    return sel, W2, b2, mean_next[rows].copy(), U_next[rows].copy(), prune_consumer(W_next, rows)
