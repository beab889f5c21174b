"""PCA of activation spaces.

:func:`fit_pca` computes the mean, variances and principal directions of a
sample matrix via the eigendecomposition of its covariance;
:func:`truncate` keeps the leading directions, either a fixed number or all
directions whose variance exceeds a threshold. :class:`ActivationPCA` wraps
the same functions in the scikit-learn transformer API.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from pcnet.exceptions import DimensionError, NumericalError
from pcnet.tensor.eigen import fix_signs, sym_eigh

DENSE_SAMPLES = 5000
CONV_SAMPLES = 200_000


@dataclass(frozen=True)
class PcaBasis:
    """PCA statistics of one activation space.

    Attributes:
        mean: ``(m,)`` sample mean.
        variances: ``(m,)`` eigenvalues of the sample covariance, descending.
        components: ``(m, k)`` principal directions as columns. ``k == m``
            unless the basis was fitted from fewer samples than dimensions,
            in which case only the directions spanned by the samples are
            stored (the remaining variances are zero).
        U: ``(m, m_e)`` leading columns of ``components`` once truncated.
        sample_count: number of samples used for the fit.
    """

    mean: np.ndarray
    variances: np.ndarray
    components: np.ndarray
    sample_count: int
    U: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.dim if self.U is None else self.U.shape[1]

    @property
    def basis(self) -> np.ndarray:
        """The truncated basis if set, otherwise every stored direction."""
        return self.components if self.U is None else self.U


def _check_samples(samples: np.ndarray) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"fit_pca expects an (N, m) sample matrix, got shape {x.shape}")
    n, m = x.shape
    if n < 2:
        raise DimensionError(f"fit_pca needs at least 2 samples (covariance divides by N-1), got {n}")
    if m < 1:
        raise DimensionError("fit_pca needs at least one feature")
    if not np.all(np.isfinite(x)):
        raise NumericalError("samples contain NaN or Inf")
    return x


def fit_pca(samples: np.ndarray) -> PcaBasis:
    """Mean, variances and principal directions of ``samples`` (N x m).

    The covariance is normalized by ``N - 1``. When ``N < m`` the
    eigenproblem is solved on the ``N x N`` Gram matrix instead, which has
    the same non-zero spectrum and is far cheaper for wide layers.
    """
    x = _check_samples(samples)
    n, m = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    if n >= m:
        eig = sym_eigh(xc.T @ xc / (n - 1))
        return PcaBasis(mean, eig.eigenvalues, eig.eigenvectors, n)

    eig = sym_eigh(xc @ xc.T / (n - 1))
    keep = eig.eigenvalues > 0
    lam = eig.eigenvalues[keep]
    vecs = xc.T @ eig.eigenvectors[:, keep] / np.sqrt((n - 1) * lam)
    # One more orthonormalization pass removes the round-off of the back-projection.
    vecs = _orthonormalize(vecs)
    fix_signs(vecs)
    variances = np.zeros(m)
    variances[: lam.size] = lam
    return PcaBasis(mean, variances, vecs, n)


def _orthonormalize(v: np.ndarray) -> np.ndarray:
    out = v.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        for _ in range(2):
            col -= out[:, :j] @ (out[:, :j].T @ col)
        out[:, j] = col / np.linalg.norm(col)
    return out


def _complete_basis(v: np.ndarray, k: int) -> np.ndarray:
    """Extend orthonormal columns ``v`` to ``k`` orthonormal columns."""
    r = v.shape[1]
    q, _ = np.linalg.qr(v, mode="complete")
    extra = np.ascontiguousarray(q[:, r:k])
    fix_signs(extra)
    return np.hstack([v, extra])


def effective_dim(variances: np.ndarray, threshold: float) -> int:
    """Number of variances strictly greater than ``threshold``."""
    e = np.asarray(variances, dtype=np.float64)
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    if e.size > 1 and np.any(np.diff(e) > 0):
        raise ValueError("variances must be sorted in descending order")
    return int(np.sum(e > threshold))


def truncate(basis: PcaBasis, n_components: int | None = None, threshold: float | None = None) -> PcaBasis:
    """Keep the leading directions: a fixed count, or those with variance above ``threshold``.

    The threshold path keeps at least one direction (with a warning).
    """
    if (n_components is None) == (threshold is None):
        raise ValueError("give exactly one of n_components or threshold")
    m = basis.dim
    if threshold is not None:
        k = effective_dim(basis.variances, threshold)
        if k == 0:
            warnings.warn(f"no direction has variance above {threshold}; keeping 1", RuntimeWarning,
                          stacklevel=2)
            k = 1
    else:
        k = int(n_components)
        if not 1 <= k <= m:
            raise DimensionError(f"n_components must be in [1, {m}], got {k}")
    comps = basis.components
    if comps.shape[1] < k:
        comps = _complete_basis(comps, k)
    return replace(basis, U=comps[:, :k].copy())


def flatten_image_batch(images: np.ndarray) -> np.ndarray:
    """``(N, h, w, m) -> (N*h*w, m)``: image-major, then row-major over pixels."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"expected an (N, h, w, m) batch, got shape {images.shape}")
    return images.reshape(-1, images.shape[-1])


def project(x: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """PCA coordinates ``(x - mean) U`` along the last axis."""
    x = np.asarray(x)
    if x.shape[-1] != basis.dim:
        raise DimensionError(f"last axis has {x.shape[-1]} entries, basis expects {basis.dim}")
    return (x - basis.mean) @ basis.basis


def sample_rows(x: np.ndarray, max_rows: int | None, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Uniformly subsample rows (without replacement, original order kept)."""
    if max_rows is None or len(x) <= max_rows:
        return x
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(x), size=max_rows, replace=False))
    return x[idx]


def activation_samples(act: np.ndarray, max_vectors: int | None = None,
                       seed: int | np.random.Generator = 0) -> np.ndarray:
    """Turn captured activations into a PCA sample matrix.

    Image activations contribute one depth vector per pixel, subsampled
    uniformly to at most ``max_vectors`` (default 200,000) rows.
    """
    act = np.asarray(act)
    if act.ndim == 4:
        return sample_rows(flatten_image_batch(act), max_vectors or CONV_SAMPLES, seed)
    if act.ndim != 2:
        raise DimensionError(f"activations must be (N, m) or (N, h, w, m), got {act.shape}")
    return sample_rows(act, max_vectors, seed)


class ActivationPCA(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer for activation PCA.

    Parameters:
        n_components: keep this many directions.
        threshold: keep the directions with variance above this value
            (used when ``n_components`` is None; ``None`` for both keeps all).
        max_samples: cap on the number of sample rows used for fitting.
        random_state: seed for the row subsampling.

    Four-dimensional input is treated as a batch of images and flattened to
    per-pixel depth vectors.
    """

    def __init__(self, n_components: int | None = None, threshold: float | None = None,
                 max_samples: int | None = None, random_state: int = 0):
        self.n_components = n_components
        self.threshold = threshold
        self.max_samples = max_samples
        self.random_state = random_state

    def _rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4:
            X = flatten_image_batch(X)
        if X.ndim != 2:
            raise DimensionError(f"expected a 2-D sample matrix or 4-D image batch, got {X.shape}")
        return X

    def fit(self, X, y=None):
        rows = sample_rows(self._rows(X), self.max_samples, self.random_state)
        basis = fit_pca(rows)
        if self.n_components is not None:
            basis = truncate(basis, n_components=self.n_components)
        elif self.threshold is not None:
            basis = truncate(basis, threshold=self.threshold)
        else:
            basis = truncate(basis, n_components=basis.dim)
        self.basis_ = basis
        self.mean_ = basis.mean
        self.explained_variance_ = basis.variances
        self.components_ = basis.U.T
        self.n_components_ = basis.U.shape[1]
        self.n_features_in_ = basis.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = np.asarray(X, dtype=np.float64)
        return project(X, self.basis_)

    def inverse_transform(self, Xt):
        check_is_fitted(self, "basis_")
        return np.asarray(Xt) @ self.basis_.U.T + self.basis_.mean

    def effective_dim(self, threshold: float) -> int:
        check_is_fitted(self, "basis_")
        return effective_dim(self.explained_variance_, threshold)
