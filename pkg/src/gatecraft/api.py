"""Alternating-minimization imitation under an average routing budget.

Per training round the per-sample posterior q_i (probability of routing
sample i to the good policy) has a closed-form optimum

    q_i = sigmoid(g_tilde_i + kl_i - beta)

where kl_i is the weak policy's imitation divergence at sample i and beta
is a scalar multiplier chosen so that mean(q) stays within the budget.
The M-step then takes Adam steps on the weighted imitation + gate loss
with q frozen.

Gate label convention (fixed repo-wide): sigmoid(g_tilde) is the
probability of routing to the GOOD policy, which is what makes the closed
form above algebraically consistent. Under it, mean q is strictly
decreasing in beta, so enforcing mean(q) <= p_full needs beta >= 0.
"""

import warnings
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .approx import (GateWeakSpec, OptConfig, adam_init, adam_step,
                     gw_forward, gw_grad, gw_init_params)
from .core import bernoulli_kl, kl_rows, sigmoid
from .envs import TabularEnv, collect_demonstrations
from .oracle import GoodPolicy

Q_CLAMP = 1e-6
P_FULL_MIN = 1e-4
BETA_TOL = 1e-9
MEAN_Q_TOL = 1e-6


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass
class ApiConfig:
    p_full: float = 0.3
    l2_lambda: float = 0.0
    epochs: int = 150
    batch_size: int = 1000
    m_steps: int = 20          # Adam iterations per epoch on the frozen batch
    beta_tol: float = BETA_TOL

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if not 0.0 <= self.p_full <= 1.0:
            raise ValueError("p_full must lie in [0, 1]")
        if self.l2_lambda < 0.0:
            raise ValueError("l2_lambda must be nonnegative")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mean_q: float
    beta: float


@dataclass
class ApiBundle:
    """Jointly trained weak policy and logistic gate plus training history."""

    gw_spec: GateWeakSpec
    gw_params: np.ndarray
    p_full_target: float
    history: List[EpochRecord] = field(default_factory=list)

    def evaluate_batch(self, X: np.ndarray):
        return gw_forward(self.gw_spec, self.gw_params, X)


def per_sample_objective(q_i, kl_i, g_tilde_i, beta):
    """(1 - q) * kl + D_bern(q || sigmoid(g_tilde)) + beta * q (elementwise)."""
    q_i = np.asarray(q_i, dtype=np.float64)
    kl_i = np.asarray(kl_i, dtype=np.float64)
    if np.any(kl_i < 0.0):
        raise ValueError("kl values must be nonnegative")
    out = (1.0 - q_i) * kl_i + bernoulli_kl(q_i, sigmoid(g_tilde_i)) + beta * q_i
    return float(out) if out.ndim == 0 else out


def update_q_closed_form(kl: np.ndarray, g_tilde: np.ndarray, beta: float) -> np.ndarray:
    """Closed-form minimizer of the per-sample objective, clamped into (0, 1)."""
    kl = np.asarray(kl, dtype=np.float64)
    if np.any(kl < 0.0):
        raise ValueError("kl values must be nonnegative")
    q = sigmoid(np.asarray(g_tilde, dtype=np.float64) + kl - beta)
    return np.clip(q, Q_CLAMP, 1.0 - Q_CLAMP)


def _mean_q(kl, g_tilde, beta):
    return float(np.mean(sigmoid(np.asarray(g_tilde) + np.asarray(kl) - beta)))


def solve_beta(kl: np.ndarray, g_tilde: np.ndarray, p_full: float,
               tol: float = BETA_TOL) -> float:
    """Smallest beta >= 0 bringing mean(q) within the budget.

    Returns 0 when the unconstrained posterior already satisfies it;
    otherwise bisects (mean q is strictly decreasing in beta) until
    |mean q - p_full| <= 1e-6 or the bracket width drops below tol.
    """
    kl = np.asarray(kl, dtype=np.float64)
    g_tilde = np.asarray(g_tilde, dtype=np.float64)
    if kl.size == 0 or kl.shape != g_tilde.shape:
        raise ValueError("kl and g_tilde must be equal-length nonempty arrays")
    if p_full <= 0.0:
        warnings.warn("p_full = 0 is unreachable (q > 0); clamping to %g" % P_FULL_MIN)
        p_full = P_FULL_MIN
    if _mean_q(kl, g_tilde, 0.0) <= p_full:
        return 0.0
    lo, hi = 0.0, 1.0
    while _mean_q(kl, g_tilde, hi) > p_full:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("beta search failed to bracket the constraint")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        m = _mean_q(kl, g_tilde, mid)
        if abs(m - p_full) <= MEAN_Q_TOL:
            return mid
        if m > p_full:
            lo = mid
        else:
            hi = mid
    return hi


def m_step(X: np.ndarray, pi0_dists: np.ndarray, q: np.ndarray,
           gw_spec: GateWeakSpec, gw_params: np.ndarray, l2_lambda: float,
           adam_state, n_steps: int = 1):
    """Adam steps on the q-weighted imitation + gate loss with q frozen.

    Returns (updated params, last loss value).
    """
    params = gw_params
    loss = np.nan
    for _ in range(n_steps):
        g, loss = gw_grad(gw_spec, params, X, pi0_dists, "api_m_step",
                          gate_targets=q, kl_weights=1.0 - q, l2_lambda=l2_lambda)
        if not np.isfinite(loss):
            raise TrainingDiverged("m-step loss is non-finite")
        params = adam_step(adam_state, params, g)
    return params, float(loss)


def batch_objective(q, kl, g_tilde):
    """Mean constrained-problem objective over a batch (no multiplier term)."""
    return float(np.mean((1.0 - q) * kl + bernoulli_kl(q, sigmoid(g_tilde))))


def run_api(env: TabularEnv, good: GoodPolicy, config: ApiConfig, seed: int,
            gw_spec: GateWeakSpec, opt: OptConfig = None) -> ApiBundle:
    """Full training loop: demonstrations, closed-form q, M-step, repeat.

    Each epoch draws a fresh batch of good-policy demonstration steps
    (episodes restart as needed), so the posterior and models co-adapt on
    the demonstration distribution.
    """
    opt = opt or OptConfig()
    params = gw_init_params(gw_spec)
    state = adam_init(len(params), opt.lr, opt.beta1, opt.beta2, opt.eps)
    bundle = ApiBundle(gw_spec, params, config.p_full)
    handle = good.handle()
    demo_seed = seed
    for epoch in range(config.epochs):
        _, X, pi0 = collect_demonstrations(handle, env, config.batch_size, demo_seed)
        demo_seed += config.batch_size  # disjoint episode seeds per epoch
        probs, g_tilde = gw_forward(gw_spec, params, X)
        kl = kl_rows(probs, pi0)
        beta = solve_beta(kl, g_tilde, config.p_full, config.beta_tol)
        q = update_q_closed_form(kl, g_tilde, beta)
        params, loss = m_step(X, pi0, q, gw_spec, params, config.l2_lambda,
                              state, config.m_steps)
        bundle.history.append(EpochRecord(epoch, loss, float(np.mean(q)), beta))
    bundle.gw_params = params
    return bundle


def api_route_good(g_tilde_values: np.ndarray) -> np.ndarray:
    """Hard inference-time gate: route to good iff sigmoid(g_tilde) >= 0.5."""
    return np.asarray(g_tilde_values) >= 0.0
