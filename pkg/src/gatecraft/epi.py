"""Entropy-based policy imitation: regressor + imitator training and
threshold calibration for the single- and double-threshold routing rules.

Rule conventions (one fixed repo-wide):

* rule-1 routes to the good policy exactly when the predicted good-policy
  entropy is at or below T1 (boundary inclusive).
* rule-2 routes to the good policy when the predicted entropy is at or
  below T1 AND the imitator's own entropy exceeds T2 (the imitator is
  uncertain precisely where decisiveness matters); everything else goes to
  the weak policy. A ``literal_rule2`` flag restores the alternative case
  split in which low imitator entropy below T1 also routes to the good
  policy.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .approx import (GateWeakSpec, ModelSpec, OptConfig, adam_init, adam_step,
                     fit_model, gw_forward, gw_grad, gw_init_params)
from .core import entropy_rows

CALIBRATION_SLACK = 0.02


@dataclass
class EpiRule:
    kind: str                 # "epi1" or "epi2"
    t1: float
    t2: Optional[float] = None
    literal_rule2: bool = False

    def __post_init__(self):
        if self.kind not in ("epi1", "epi2"):
            raise ValueError("rule kind must be epi1 or epi2")
        if self.kind == "epi2" and self.t2 is None:
            raise ValueError("epi2 needs both thresholds")
        if not math.isfinite(self.t1) or (self.t2 is not None and not math.isfinite(self.t2)):
            raise ValueError("thresholds must be finite")


@dataclass
class EpiBundle:
    """Trained gate + weak policy plus the calibrated routing rule."""

    gw_spec: GateWeakSpec
    gw_params: np.ndarray
    rule: EpiRule
    p_full_target: float

    def evaluate_batch(self, X: np.ndarray):
        """(pi1 distributions, gate scores) on a batch of observations."""
        return gw_forward(self.gw_spec, self.gw_params, X)


def epi_gate(rule: EpiRule, g_tilde_value: float, pi1_distribution: np.ndarray) -> bool:
    """True when the decision routes to the good policy."""
    if rule.kind == "epi1":
        return g_tilde_value <= rule.t1
    if g_tilde_value > rule.t1:
        return False
    s1 = float(entropy_rows(np.asarray(pi1_distribution)[None, :])[0])
    if rule.literal_rule2:
        return s1 <= rule.t2
    return s1 > rule.t2


def epi_gate_batch(rule: EpiRule, g_values: np.ndarray, pi1_dists: np.ndarray) -> np.ndarray:
    """Vectorized epi_gate; boolean array, True = route to good."""
    g_values = np.asarray(g_values, dtype=np.float64)
    if rule.kind == "epi1":
        return g_values <= rule.t1
    s1 = entropy_rows(pi1_dists)
    if rule.literal_rule2:
        return (g_values <= rule.t1) & (s1 <= rule.t2)
    return (g_values <= rule.t1) & (s1 > rule.t2)


def fit_entropy_regressor(X: np.ndarray, target_entropies: np.ndarray,
                          spec: ModelSpec, opt: OptConfig):
    """Regress the good policy's per-state entropy with a scalar-head model."""
    if spec.head not in ("scalar", "logit"):
        raise ValueError("entropy regressor needs a scalar head")
    return fit_model(spec, X, target_entropies, "mse_scalar", opt)


def fit_imitation_policy(X: np.ndarray, pi0_dists: np.ndarray,
                         spec: ModelSpec, opt: OptConfig):
    """Fit the weak policy by minimizing mean KL to the good policy's rows."""
    if spec.head != "softmax":
        raise ValueError("imitation policy needs a softmax head")
    return fit_model(spec, X, pi0_dists, "kl_to_target", opt)


def fit_epi_bundle_params(gw_spec: GateWeakSpec, X: np.ndarray, pi0_dists: np.ndarray,
                          opt: OptConfig):
    """Train the weak policy and entropy regressor in one parameter vector.

    With a shared trunk the two objectives (mean imitation KL, mean squared
    entropy error) are summed and minimized jointly; with disjoint slices
    the heads train independently through the same loop. Returns (params,
    loss history).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pi0 = np.asarray(pi0_dists, dtype=np.float64)
    ent = entropy_rows(pi0)
    params = gw_init_params(gw_spec)
    state = adam_init(len(params), opt.lr, opt.beta1, opt.beta2, opt.eps)
    history = []
    n = X.shape[0]
    if opt.batch_size >= n:
        batches = (np.arange(n) for _ in range(opt.iterations))
    else:
        rng = np.random.Generator(np.random.Philox(key=[int(opt.sample_seed), 3]))
        batches = (rng.integers(0, n, size=opt.batch_size) for _ in range(opt.iterations))
    for idx in batches:
        g, loss = gw_grad(gw_spec, params, X[idx], pi0[idx], "epi_joint",
                          ent[idx], l2_lambda=opt.l2_lambda)
        if not np.isfinite(loss):
            raise FloatingPointError("EPI training loss diverged (non-finite)")
        params = adam_step(state, params, g)
        history.append(loss)
    return params, history


def routed_fraction_epi1(g_values: np.ndarray, t1: float) -> float:
    g_values = np.asarray(g_values)
    return float(np.mean(g_values <= t1))


def calibrate_epi1(g_values: np.ndarray, p_full: float) -> float:
    """Largest threshold whose routed-to-good fraction does not exceed p_full.

    Scans the distinct sample values exhaustively; a sub-minimum sentinel
    covers the route-nothing case.
    """
    g_values = np.asarray(g_values, dtype=np.float64)
    if g_values.size == 0:
        raise ValueError("no calibration samples")
    if not 0.0 <= p_full <= 1.0:
        raise ValueError("p_full must lie in [0, 1]")
    candidates = np.concatenate([[g_values.min() - 1.0], np.unique(g_values)])
    best = candidates[0]
    for t in candidates:
        if routed_fraction_epi1(g_values, t) <= p_full:
            best = t
    return float(best)


@dataclass
class CalibrationRow:
    t1: float
    t2: float
    routed_fraction: float
    mean_return: float
    feasible: bool


@dataclass
class Epi2Calibration:
    t1: float
    t2: float
    feasible: bool
    rows: List[CalibrationRow] = field(default_factory=list)


def _quantile_grid(values: np.ndarray, k: int) -> np.ndarray:
    return np.quantile(np.asarray(values, dtype=np.float64), np.linspace(0.0, 1.0, k))


def calibrate_epi2(g_values: np.ndarray, pi1_entropies: np.ndarray, p_full: float,
                   score_probe: Callable[[float, float], Tuple[float, float]],
                   grid: int = 10, slack: float = CALIBRATION_SLACK,
                   literal_rule2: bool = False) -> Epi2Calibration:
    """Grid-search both thresholds by simulation.

    score_probe(t1, t2) must run composite rollouts for the candidate rule
    and return (mean return, realized routed-to-good fraction). Feasible
    pairs keep that fraction at or below p_full + slack; among them the
    highest mean return wins, ties broken toward the lower fraction. An
    empty feasible set returns the minimum-fraction pair flagged infeasible.
    """
    t1_cands = _quantile_grid(g_values, grid)
    t2_cands = _quantile_grid(pi1_entropies, grid)
    # sub-minimum sentinel so a candidate pair can route every sample
    t2_cands[0] = float(np.min(pi1_entropies)) - 1.0
    rows: List[CalibrationRow] = []
    for t1 in t1_cands:
        for t2 in t2_cands:
            mean_ret, frac = score_probe(float(t1), float(t2))
            rows.append(CalibrationRow(float(t1), float(t2), frac, mean_ret,
                                       frac <= p_full + slack))
    feasible = [r for r in rows if r.feasible]
    if feasible:
        best = max(feasible, key=lambda r: (r.mean_return, -r.routed_fraction))
        return Epi2Calibration(best.t1, best.t2, True, rows)
    fallback = min(rows, key=lambda r: r.routed_fraction)
    return Epi2Calibration(fallback.t1, fallback.t2, False, rows)
