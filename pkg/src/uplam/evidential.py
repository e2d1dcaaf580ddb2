"""Dirichlet evidence arithmetic.

All functions accept either a single evidence vector of shape ``(K,)`` or a
batch with the class axis last, ``(..., K)``.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


class DegenerateEvidenceError(ValueError):
    """Evidence with non-positive total or negative entries."""


def _check(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(~np.isfinite(alpha)):
        raise DegenerateEvidenceError("evidence must be finite and non-negative")
    if np.any(alpha.sum(axis=-1) <= 0):
        raise DegenerateEvidenceError("total evidence S must be positive")
    return alpha


def total_evidence(alpha) -> np.ndarray:
    return np.asarray(alpha, dtype=float).sum(axis=-1)


def probabilities(alpha) -> np.ndarray:
    """Expected class probabilities ``alpha / S``."""
    alpha = _check(alpha)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def epistemic_uncertainty(alpha):
    """Vacuity ``K / S``, clamped to at most 1."""
    alpha = _check(alpha)
    k = alpha.shape[-1]
    u = np.minimum(k / alpha.sum(axis=-1), 1.0)
    return float(u) if u.ndim == 0 else u


def normalized_entropy(p):
    """Shannon entropy of ``p`` divided by ``log K``, in [0, 1].

    Uses 0*log(0) := 0; entries below 1e-12 contribute nothing.
    """
    p = np.asarray(p, dtype=float)
    k = p.shape[-1]
    if k < 2:
        out = np.zeros(p.shape[:-1])
        return float(out) if out.ndim == 0 else out
    safe = np.where(p > PROB_FLOOR, p, 1.0)
    h = -np.sum(np.where(p > PROB_FLOOR, p * np.log(safe), 0.0), axis=-1)
    out = np.clip(h / np.log(k), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def peak_probability_for_entropy(target: np.ndarray, k: int, tol: float = 1e-12) -> np.ndarray:
    """Invert ``normalized_entropy`` on the family ``(q, (1-q)/(k-1), ...)``.

    Returns ``q`` in ``[1/k, 1)`` such that the normalised entropy equals
    ``target``. Bisection, vectorised over ``target``.
    """
    target = np.clip(np.asarray(target, dtype=float), 0.0, 1.0)
    lo = np.full(target.shape, 1.0 / k)
    hi = np.full(target.shape, 1.0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        rest = (1.0 - mid) / (k - 1)
        p = np.stack([mid] + [rest] * (k - 1), axis=-1)
        h = normalized_entropy(p)
        # entropy decreases in q
        too_uncertain = h > target
        lo = np.where(too_uncertain, mid, lo)
        hi = np.where(too_uncertain, hi, mid)
        if np.all(hi - lo < tol):
            break
    return 0.5 * (lo + hi)
