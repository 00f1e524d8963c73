"""Common spatial patterns and filter-bank CSP features.

CSP filters come from the generalized eigenproblem

    Sigma1 w = lambda (Sigma1 + Sigma2) w

solved by whitening with the Cholesky factor of the composite covariance
and diagonalizing the whitened class-1 covariance. The eigenvalue of a
filter is the fraction of its composite variance explained by class 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import InsufficientDataError, NumericalError
from .signals import Window

BANDS: tuple[tuple[float, float], ...] = ((8.0, 15.0), (15.0, 30.0))
N_FILTERS = 6
SHRINKAGE = 0.05
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassCovariance:
    sigma: np.ndarray
    class_id: object = None
    n_windows: int = 0


@dataclass(frozen=True)
class CspModel:
    """Per-band CSP filters for one binary disjunction of the gesture tree.

    ``filters_per_band[b]`` is channels x n_filters, columns ordered by
    decreasing eigenvalue (top half, then bottom half).
    """

    filters_per_band: tuple[np.ndarray, ...]
    eigenvalues_per_band: tuple[np.ndarray, ...] = field(default=())
    bands: tuple[tuple[float, float], ...] = BANDS
    node_id: str = ""

    @property
    def n_features(self) -> int:
        return sum(f.shape[1] for f in self.filters_per_band)

    def features_from_covariances(self, covs_per_band: Sequence[np.ndarray]) -> np.ndarray:
        """FBCSP features from raw window covariances.

        ``covs_per_band[b]`` has shape (..., C, C); the projected variance of
        filter w is w' C w, so windows never need to be revisited.
        """
        parts = []
        for W, covs in zip(self.filters_per_band, covs_per_band):
            var = np.einsum("ci,...cd,di->...i", W, covs, W)
            parts.append(log_normalized(var))
        return np.concatenate(parts, axis=-1)


def window_covariance(x: np.ndarray) -> np.ndarray:
    """Sample covariance of each window; x has shape (..., C, L)."""
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=-1, keepdims=True)
    return centered @ np.swapaxes(centered, -1, -2) / (x.shape[-1] - 1)


def shrink(sigma: np.ndarray, gamma: float = SHRINKAGE) -> np.ndarray:
    n = sigma.shape[0]
    return (1.0 - gamma) * sigma + gamma * (np.trace(sigma) / n) * np.eye(n)


def covariance_from_window_covs(covs: np.ndarray, class_id=None,
                                shrinkage: float = SHRINKAGE) -> ClassCovariance:
    """Average of trace-normalized window covariances, then shrinkage."""
    covs = np.asarray(covs, dtype=float)
    if covs.ndim != 3 or covs.shape[0] == 0:
        raise InsufficientDataError("need at least one window to estimate a covariance")
    traces = np.trace(covs, axis1=1, axis2=2)
    traces = np.maximum(traces, VARIANCE_FLOOR)
    sigma = np.mean(covs / traces[:, None, None], axis=0)
    sigma = 0.5 * (sigma + sigma.T)
    if shrinkage:
        sigma = shrink(sigma, shrinkage)
    return ClassCovariance(sigma, class_id, covs.shape[0])


def estimate_covariance(windows: Sequence[Window | np.ndarray], class_id=None,
                        shrinkage: float = SHRINKAGE) -> ClassCovariance:
    if len(windows) == 0:
        raise InsufficientDataError("need at least one window to estimate a covariance")
    arrays = [w.samples if isinstance(w, Window) else np.asarray(w) for w in windows]
    n_channels = {a.shape[0] for a in arrays}
    if len(n_channels) != 1:
        raise ValueError(f"windows disagree on channel count: {sorted(n_channels)}")
    covs = np.stack([window_covariance(a) for a in arrays])
    return covariance_from_window_covs(covs, class_id, shrinkage)


def _matrix(s) -> np.ndarray:
    return s.sigma if isinstance(s, ClassCovariance) else np.asarray(s, dtype=float)


def solve_csp(sigma1, sigma2, n_filters: int = N_FILTERS) -> tuple[np.ndarray, np.ndarray]:
    """Return (filters, eigenvalues) for the two class covariances.

    Half of the filters come from the largest eigenvalues and half from the
    smallest. Each column satisfies w' (Sigma1 + Sigma2) w = 1 and has its
    largest-magnitude entry positive.
    """
    a = _matrix(sigma1)
    b = _matrix(sigma2)
    if a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise ValueError(f"covariance shapes differ: {a.shape} vs {b.shape}")
    composite = a + b
    try:
        chol = linalg.cholesky(composite, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("composite covariance is not positive definite") from exc
    if np.linalg.cond(chol) > 1e12:
        raise NumericalError("composite covariance is too badly conditioned")

    # whitened problem: L^-1 A L^-T v = lambda v, w = L^-T v
    half = linalg.solve_triangular(chol, a, lower=True)
    whitened = linalg.solve_triangular(chol, half.T, lower=True)
    whitened = 0.5 * (whitened + whitened.T)
    evals, evecs = linalg.eigh(whitened)
    filters = linalg.solve_triangular(chol.T, evecs, lower=False)

    order = np.argsort(-evals, kind="stable")
    evals, filters = evals[order], filters[:, order]

    n = a.shape[0]
    if n_filters >= n:
        keep = np.arange(n)
    else:
        k = n_filters // 2
        keep = np.r_[np.arange(k), np.arange(n - (n_filters - k), n)]
    filters = filters[:, keep]
    evals = evals[keep]

    pivots = np.argmax(np.abs(filters), axis=0)
    signs = np.sign(filters[pivots, np.arange(filters.shape[1])])
    signs[signs == 0] = 1.0
    return filters * signs, evals


def fit_csp(covs_class1: Sequence[np.ndarray], covs_class2: Sequence[np.ndarray],
            node_id: str = "", n_filters: int = N_FILTERS,
            bands: tuple[tuple[float, float], ...] = BANDS) -> CspModel:
    """Fit one CspModel from per-band stacks of raw window covariances."""
    filters, evals = [], []
    for c1, c2 in zip(covs_class1, covs_class2):
        w, lam = solve_csp(covariance_from_window_covs(c1), covariance_from_window_covs(c2),
                           n_filters)
        filters.append(w)
        evals.append(lam)
    return CspModel(tuple(filters), tuple(evals), bands, node_id)


def log_normalized(variances: np.ndarray) -> np.ndarray:
    v = np.maximum(np.asarray(variances, dtype=float), VARIANCE_FLOOR)
    return np.log(v / v.sum(axis=-1, keepdims=True))


def extract_fbcsp(window_bands: Sequence[Window | np.ndarray], model: CspModel) -> np.ndarray:
    """12-dim feature vector from one window already filtered into each band."""
    arrays = [w.samples if isinstance(w, Window) else np.asarray(w, dtype=float)
              for w in window_bands]
    for x, W in zip(arrays, model.filters_per_band):
        if x.shape[0] != W.shape[0]:
            raise ValueError(f"window has {x.shape[0]} channels, filters expect {W.shape[0]}")
    variances = [np.var(W.T @ x, axis=-1, ddof=1) for x, W in zip(arrays, model.filters_per_band)]
    return np.concatenate([log_normalized(v) for v in variances])
