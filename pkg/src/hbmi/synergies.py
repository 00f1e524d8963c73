"""Muscle-synergy extraction by non-negative matrix factorization.

``nmf_fit`` factors a channels x windows RMS matrix V into W H with
Lee-Seung multiplicative updates for the Frobenius loss. ``nmf_transform``
projects new RMS vectors onto a fixed base W by non-negative least squares.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InsufficientDataError

N_SYNERGIES = 5
MAX_ITER = 500
TOL = 1e-6
DENOM_FLOOR = 1e-12
INIT_LOW, INIT_HIGH = 0.1, 1.1


@dataclass(frozen=True)
class FitStats:
    objective: float
    iterations: int
    history: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


@dataclass(frozen=True)
class NmfModel:
    base: np.ndarray
    n_synergies: int = N_SYNERGIES
    fit_stats: FitStats | None = None


def _objective(V, W, H) -> float:
    R = V - W @ H
    return float(np.vdot(R, R))


def nmf_factorize(V, n_synergies: int = N_SYNERGIES, seed: int = 0,
                  max_iter: int = MAX_ITER, tol: float = TOL):
    """Return (W, H, FitStats) with unit-norm columns of W."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise ValueError("V must be a channels x samples matrix")
    if np.any(V < 0):
        raise DomainError("NMF input contains negative entries")
    n_rows, n_cols = V.shape
    if n_cols < n_synergies:
        raise InsufficientDataError(
            f"need at least {n_synergies} columns for {n_synergies} synergies, got {n_cols}")

    rng = np.random.default_rng(seed)
    W = rng.uniform(INIT_LOW, INIT_HIGH, size=(n_rows, n_synergies))
    H = rng.uniform(INIT_LOW, INIT_HIGH, size=(n_synergies, n_cols))

    history = [_objective(V, W, H)]
    it = 0
    for it in range(1, max_iter + 1):
        H *= (W.T @ V) / np.maximum(W.T @ W @ H, DENOM_FLOOR)
        W *= (V @ H.T) / np.maximum(W @ (H @ H.T), DENOM_FLOOR)
        history.append(_objective(V, W, H))
        prev, cur = history[-2], history[-1]
        if prev <= 0 or (prev - cur) / prev < tol:
            break

    norms = np.linalg.norm(W, axis=0)
    dead = norms == 0
    if np.any(dead):
        W[:, dead] = 1.0 / np.sqrt(n_rows)
        H[dead, :] = 0.0
        norms[dead] = 1.0
    W = W / norms
    H = H * norms[:, None]
    stats = FitStats(_objective(V, W, H), it, np.asarray(history))
    return W, H, stats


def nmf_fit(V, n_synergies: int = N_SYNERGIES, seed: int = 0,
            max_iter: int = MAX_ITER, tol: float = TOL) -> NmfModel:
    W, _, stats = nmf_factorize(V, n_synergies, seed, max_iter, tol)
    return NmfModel(W, n_synergies, stats)


def nnls_active_set(A, b, tol: float = 1e-12, max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson active-set solver for min ||A x - b|| subject to x >= 0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    max_iter = max_iter or 3 * n + 10
    grad = A.T @ (b - A @ x)
    for _ in range(max_iter):
        if passive.all() or np.max(np.where(passive, -np.inf, grad)) <= tol:
            break
        passive[np.argmax(np.where(passive, -np.inf, grad))] = True
        while True:
            s = np.zeros(n)
            s[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(s[passive] > 0):
                break
            bad = passive & (s <= 0)
            alpha = np.min(x[bad] / (x[bad] - s[bad]))
            x = x + alpha * (s - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = s
        grad = A.T @ (b - A @ x)
    return x


def _support_solvers(W: np.ndarray):
    k = W.shape[1]
    for r in range(1, k + 1):
        for support in itertools.combinations(range(k), r):
            idx = np.array(support)
            yield idx, np.linalg.pinv(W[:, idx])


def nnls_enumerate(W, B) -> np.ndarray:
    """Exact NNLS for every column of B by enumerating supports of x.

    The optimum is the least-squares solution on its own support, so the best
    objective among all primal-feasible support solutions is the optimum.
    Practical for up to ~10 columns of W.
    """
    W = np.asarray(W, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    k, n = W.shape[1], B.shape[1]
    best = np.zeros((k, n))
    best_obj = np.einsum("ij,ij->j", B, B)
    for idx, pinv in _support_solvers(W):
        xs = pinv @ B
        feasible = np.all(xs >= 0, axis=0)
        if not feasible.any():
            continue
        R = B - W[:, idx] @ xs
        obj = np.einsum("ij,ij->j", R, R)
        better = feasible & (obj < best_obj)
        if better.any():
            best[:, better] = 0.0
            best[np.ix_(idx, np.flatnonzero(better))] = xs[:, better]
            best_obj = np.where(better, obj, best_obj)
    return best


def nmf_transform(model: NmfModel, rms) -> np.ndarray:
    """Activations h >= 0 minimizing ||rms - W h||; rms may be (6,) or (n, 6)."""
    rms = np.asarray(rms, dtype=float)
    if np.any(rms < 0):
        raise DomainError("RMS input contains negative entries")
    single = rms.ndim == 1
    B = rms.reshape(1, -1) if single else rms
    if model.base.shape[1] <= 10:
        H = nnls_enumerate(model.base, B.T).T
    else:
        H = np.stack([nnls_active_set(model.base, b) for b in B])
    return H[0] if single else H
