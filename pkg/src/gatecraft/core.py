"""Finite-action distributions, information measures, and the Q-to-policy transform.

All entropies and divergences use natural logarithms so thresholds are
comparable everywhere in the package.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Floor applied to the second argument of KL-type divergences so that
# numerically zero probabilities never produce infinities.
KL_FLOOR = 1e-12

# Tolerance for the sum-to-one check on action distributions.
NORM_TOL = 1e-9


def assert_distribution(p: np.ndarray) -> np.ndarray:
    """Validate a probability vector over a finite action set.

    Returns the input as a float64 array. Raises ValueError on a vector
    that is too short, contains negative entries, or is not normalized
    within NORM_TOL.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError("action distribution needs at least 2 actions, got shape %s" % (p.shape,))
    if not np.all(np.isfinite(p)):
        raise ValueError("action distribution contains non-finite entries")
    if np.any(p < 0.0):
        raise ValueError("action distribution contains negative entries")
    s = float(p.sum())
    if abs(s - 1.0) > NORM_TOL:
        raise ValueError("action distribution sums to %.17g, not 1" % s)
    return p


def entropy(d: np.ndarray) -> float:
    """Shannon entropy in nats, with the convention 0*ln(0) = 0."""
    p = assert_distribution(d)
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def entropy_rows(dists: np.ndarray) -> np.ndarray:
    """Row-wise entropy of an (n, n_a) matrix of distributions (no validation)."""
    p = np.asarray(dists, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL divergence D(p || q) in nats; q is floored at KL_FLOOR before the log."""
    p = assert_distribution(p)
    q = assert_distribution(q)
    if p.shape != q.shape:
        raise ValueError("length mismatch: %d vs %d" % (p.shape[0], q.shape[0]))
    qf = np.maximum(q, KL_FLOOR)
    nz = p > 0.0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(qf[nz]))))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise D(p_i || q_i) for matrices of distributions (no validation)."""
    p = np.asarray(p, dtype=np.float64)
    qf = np.maximum(np.asarray(q, dtype=np.float64), KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(np.where(p > 0.0, p, 1.0)) - np.log(qf)), 0.0)
    # clamp away tiny negative round-off; KL is nonnegative by definition
    return np.maximum(terms.sum(axis=-1), 0.0)


def bernoulli_kl(q0, g0):
    """KL divergence between Bernoulli(q0) and Bernoulli(g0); g0 is clamped.

    Accepts scalars or arrays; broadcasts elementwise.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    if np.any(q0 < 0.0) or np.any(q0 > 1.0):
        raise ValueError("first argument must lie in [0, 1]")
    g0 = np.clip(np.asarray(g0, dtype=np.float64), KL_FLOOR, 1.0 - KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(q0 > 0.0, q0 * (np.log(np.where(q0 > 0.0, q0, 1.0)) - np.log(g0)), 0.0)
        r = 1.0 - q0
        t1 = np.where(r > 0.0, r * (np.log(np.where(r > 0.0, r, 1.0)) - np.log(1.0 - g0)), 0.0)
    out = t0 + t1
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def softplus(x):
    """log(1 + exp(x)) computed without overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction for stability."""
    z = np.asarray(z, dtype=np.float64)
    zs = z - z.max(axis=axis, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=axis, keepdims=True)


def q_to_policy(q_values: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Boltzmann policy over Q-values: softmax of Q / temperature.

    Invariant under adding a constant to all Q-values.
    """
    q = np.asarray(q_values, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q-values must be finite")
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    return softmax(q / temperature, axis=-1)


@dataclass(frozen=True)
class PolicyHandle:
    """A policy as a deterministic map (state index, observation) -> distribution.

    cost_tag identifies which per-path cost the cost model charges for it.
    """

    evaluate: Callable[[int, np.ndarray], np.ndarray]
    cost_tag: str
