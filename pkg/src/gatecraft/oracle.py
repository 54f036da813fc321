"""Exact tabular Q-values via value iteration and the Boltzmann good policy."""

from dataclasses import dataclass

import numpy as np

from .core import PolicyHandle, q_to_policy


class ConvergenceError(RuntimeError):
    """Value iteration hit the sweep budget before reaching tolerance."""

    def __init__(self, residual: float, max_iters: int):
        super().__init__("value iteration did not converge in %d sweeps (residual %.3e)"
                         % (max_iters, residual))
        self.residual = residual


@dataclass
class QTable:
    q: np.ndarray          # (n_states, n_actions)
    residual: float        # final sup-norm Bellman residual
    iterations: int


def value_iteration(prob: np.ndarray, reward: np.ndarray, gamma: float,
                    tol: float = 1e-10, max_iters: int = 100_000) -> QTable:
    """Iterate Q <- r + gamma * P max_u Q from Q = 0 (synchronous sweeps).

    Stops when the sup-norm change drops to tol; raises ConvergenceError
    if max_iters sweeps do not suffice.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly inside (0, 1)")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    n_states, n_actions = reward.shape
    q = np.zeros((n_states, n_actions))
    residual = np.inf
    for it in range(1, max_iters + 1):
        v = q.max(axis=1)
        q_new = reward + gamma * prob.dot(v)
        prev = residual
        residual = float(np.max(np.abs(q_new - q)))
        if residual > prev * (1.0 + 1e-12):
            raise RuntimeError("Bellman residual increased between sweeps "
                               "(%.3e -> %.3e); transition table is not a contraction"
                               % (prev, residual))
        q = q_new
        if residual <= tol:
            return QTable(q, residual, it)
    raise ConvergenceError(residual, max_iters)


@dataclass
class GoodPolicy:
    """Boltzmann policy over exact Q-values, with per-state rows cached."""

    q_table: QTable
    temperature: float
    dists: np.ndarray      # (n_states, n_actions)

    def handle(self) -> PolicyHandle:
        return PolicyHandle(evaluate=lambda s, obs: self.dists[s], cost_tag="full")


def build_good_policy(q_table: QTable, temperature: float = 0.25) -> GoodPolicy:
    dists = np.vstack([q_to_policy(row, temperature) for row in q_table.q])
    return GoodPolicy(q_table, temperature, dists)


def greedy_policy(q_table: QTable) -> PolicyHandle:
    """Deterministic argmax policy (ties break toward the lowest index)."""
    n_states, n_actions = q_table.q.shape
    dists = np.zeros((n_states, n_actions))
    dists[np.arange(n_states), q_table.q.argmax(axis=1)] = 1.0
    return PolicyHandle(evaluate=lambda s, obs: dists[s], cost_tag="full")
