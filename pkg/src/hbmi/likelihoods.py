"""Gaussian product-kernel density estimates used as state likelihoods."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError

SIGMA_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)
# evaluation is chunked so the (queries x points) matrix stays small
_CHUNK_ELEMENTS = 4_000_000


def silverman_bandwidths(points: np.ndarray) -> np.ndarray:
    n, d = points.shape
    sigma = np.std(points, axis=0, ddof=1)
    sigma = np.where(sigma > 0, sigma, SIGMA_FLOOR)
    return sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


@dataclass(frozen=True)
class KdeModel:
    points: np.ndarray
    bandwidths: np.ndarray
    log_norm: float
    state_id: object = None

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_parts(cls, points, bandwidths, state_id=None) -> "KdeModel":
        points = np.asarray(points, dtype=float)
        bandwidths = np.asarray(bandwidths, dtype=float)
        if np.any(bandwidths <= 0):
            raise ValueError("bandwidths must be positive")
        n, d = points.shape
        log_norm = -np.log(n) - np.sum(np.log(bandwidths)) - 0.5 * d * LOG_2PI
        return cls(points, bandwidths, float(log_norm), state_id)

    def logpdf(self, x) -> np.ndarray | float:
        """Log-density at one point (d,) or many points (m, d)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x.reshape(1, -1) if single else x
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dim input, got {X.shape[1]}")
        Z = X / self.bandwidths
        P = self.points / self.bandwidths
        p_sq = np.einsum("ij,ij->i", P, P)
        out = np.empty(X.shape[0])
        step = max(1, _CHUNK_ELEMENTS // max(1, P.shape[0]))
        for start in range(0, X.shape[0], step):
            z = Z[start:start + step]
            z_sq = np.einsum("ij,ij->i", z, z)
            dist = z_sq[:, None] + p_sq[None, :] - 2.0 * (z @ P.T)
            np.maximum(dist, 0.0, out=dist)
            # log-sum-exp shifted by the nearest kernel
            nearest = dist.min(axis=1)
            dist -= nearest[:, None]
            dist *= -0.5
            np.exp(dist, out=dist)
            out[start:start + step] = np.log(dist.sum(axis=1)) - 0.5 * nearest
        out += self.log_norm
        return float(out[0]) if single else out


def kde_fit(points, state_id=None) -> KdeModel:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise InsufficientDataError("KDE needs at least 2 training points")
    if not np.all(np.isfinite(points)):
        raise ValueError("KDE training points must be finite")
    return KdeModel.from_parts(points, silverman_bandwidths(points), state_id)


def kde_logpdf(model: KdeModel, x):
    return model.logpdf(x)
