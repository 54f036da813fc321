"""Deployable composite policy, baselines, evaluation harness and reports.

Cost accounting: every composite decision is charged the gate cost plus
the cost of the one policy path actually evaluated, so the episode-average
cost satisfies

    avg_cost = c_gate + f_good * c_full + (1 - f_good) * c_weak_head

exactly, where f_good is the logged routed-to-good fraction. When the
gate routes to the good policy the gate's own compute is still charged
(c_gate + c_full). Plain (ungated) policies are charged c_full for the
good policy and c_gate + c_weak_head (trunk + head) for the weak one.
"""

import statistics
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .api import ApiBundle, api_route_good
from .core import PolicyHandle, entropy_rows
from .envs import (STREAM_ACTION, STREAM_ENV, STREAM_GATE, TabularEnv,
                   rollout, sample_index, stream_rng)
from .epi import EpiBundle, epi_gate_batch

GOOD = "good"
WEAK = "weak"


@dataclass
class CostModel:
    """Per-path compute costs in abstract MAC units (millions).

    Defaults follow the reference network sizes: 132 for the full policy,
    under 20 for the gated weak path split as trunk+gate 18 and weak head 2.
    """

    c_gate: float = 18.0
    c_weak_head: float = 2.0
    c_full: float = 132.0

    def __post_init__(self):
        if min(self.c_gate, self.c_weak_head, self.c_full) <= 0.0:
            raise ValueError("all costs must be positive")
        if self.c_full <= self.c_gate + self.c_weak_head:
            warnings.warn("c_full <= c_gate + c_weak_head: gating cannot pay off")

    def decision_cost(self, route: str) -> float:
        return self.c_gate + (self.c_full if route == GOOD else self.c_weak_head)


@dataclass
class RouteRecord:
    state: int
    route: str
    cost: float


GateFn = Callable[[int, np.ndarray, np.random.Generator], bool]


@dataclass
class CompositePolicy:
    """Gate + weak + good, with per-decision routing log.

    gate_fn returns True to route the decision to the good policy; it may
    consume randomness only from the generator passed to it (a dedicated
    stream, so gating never perturbs action sampling).
    """

    good: PolicyHandle
    weak: PolicyHandle
    gate_fn: GateFn
    cost_model: CostModel
    policy_id: str = "composite"
    routing_log: List[RouteRecord] = field(default_factory=list)

    def act(self, state: int, observation: np.ndarray,
            gate_rng: np.random.Generator, action_rng: np.random.Generator) -> int:
        route = GOOD if self.gate_fn(state, observation, gate_rng) else WEAK
        dist = (self.good if route == GOOD else self.weak).evaluate(state, observation)
        self.routing_log.append(RouteRecord(state, route, self.cost_model.decision_cost(route)))
        return sample_index(dist, action_rng)

    def reset_log(self):
        self.routing_log = []


def random_switch_rule(p_full: float) -> GateFn:
    """Independent Bernoulli(p_full) per decision; success routes to good."""
    if not 0.0 <= p_full <= 1.0:
        raise ValueError("p_full must lie in [0, 1]")
    if p_full == 0.0:
        return lambda s, obs, rng: False
    if p_full == 1.0:
        return lambda s, obs, rng: True
    return lambda s, obs, rng: rng.random() < p_full


def naive_switch_rule(weak: PolicyHandle, threshold: float) -> GateFn:
    """Route to good exactly when the weak policy's own entropy exceeds the threshold."""
    def gate(state, obs, rng):
        dist = weak.evaluate(state, obs)
        return float(entropy_rows(np.asarray(dist)[None, :])[0]) > threshold
    return gate


def calibrate_naive_threshold(entropies: np.ndarray, p_full: float) -> float:
    """(1 - p_full)-quantile style cut: largest threshold routing <= p_full to good."""
    vals = np.asarray(entropies, dtype=np.float64)
    candidates = np.concatenate([[vals.min() - 1.0], np.unique(vals), [vals.max() + 1.0]])
    best = candidates[-1]
    for t in candidates[::-1]:
        if float(np.mean(vals > t)) <= p_full:
            best = t
        else:
            break
    return float(best)


def epi_gate_fn(bundle: EpiBundle) -> GateFn:
    def gate(state, obs, rng):
        dists, g = bundle.evaluate_batch(np.asarray(obs)[None, :])
        return bool(epi_gate_batch(bundle.rule, g, dists)[0])
    return gate


def api_gate_fn(bundle: ApiBundle) -> GateFn:
    def gate(state, obs, rng):
        _, g = bundle.evaluate_batch(np.asarray(obs)[None, :])
        return bool(api_route_good(g)[0])
    return gate


def weak_handle_from_bundle(bundle) -> PolicyHandle:
    """Weak-policy handle backed by an EPI or alt-min bundle."""
    def ev(state, obs):
        dists, _ = bundle.evaluate_batch(np.asarray(obs)[None, :])
        return dists[0]
    return PolicyHandle(evaluate=ev, cost_tag="weak")


def run_composite_episode(composite: CompositePolicy, env: TabularEnv, seed: int):
    """One gated episode; returns (score, steps, n_good_routed).

    Uses the same env/action rng streams as a plain rollout plus a
    dedicated gate stream, so an always-good gate replays the good
    policy's trajectory for the same seed bit for bit.
    """
    env_rng = stream_rng(seed, STREAM_ENV)
    act_rng = stream_rng(seed, STREAM_ACTION)
    gate_rng = stream_rng(seed, STREAM_GATE)
    state = env.initial_state(env_rng)
    total, steps = 0.0, 0
    start = len(composite.routing_log)
    for t in range(env.spec.max_steps):
        obs = env.observe(state)
        action = composite.act(state, obs, gate_rng, act_rng)
        state, r, done = env.step(state, action, env_rng)
        total += r
        steps += 1
        if done:
            break
    n_good = sum(1 for rec in composite.routing_log[start:] if rec.route == GOOD)
    return total, steps, n_good


@dataclass
class EvaluationReport:
    policy_id: str
    p_full_target: float
    realized_fraction_good: float
    mean_score: float
    score_stddev: float
    n_episodes: int
    avg_cost: float
    speedup: float


def _score_stats(scores: Sequence[float]):
    mean = float(np.mean(scores))
    std = float(statistics.stdev(scores)) if len(scores) > 1 else 0.0
    return mean, std


def evaluate_composite(composite: CompositePolicy, env: TabularEnv, n_episodes: int,
                       base_seed: int, p_full_target: float = float("nan")) -> EvaluationReport:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    composite.reset_log()
    scores = []
    for k in range(n_episodes):
        score, _, _ = run_composite_episode(composite, env, base_seed + k)
        scores.append(score)
    log = composite.routing_log
    n_good = sum(1 for rec in log if rec.route == GOOD)
    frac = n_good / len(log)
    avg_cost = sum(rec.cost for rec in log) / len(log)
    mean, std = _score_stats(scores)
    return EvaluationReport(composite.policy_id, p_full_target, frac, mean, std,
                            n_episodes, avg_cost, composite.cost_model.c_full / avg_cost)


def evaluate_plain(policy: PolicyHandle, env: TabularEnv, n_episodes: int,
                   base_seed: int, cost_model: CostModel,
                   policy_id: str = "plain") -> EvaluationReport:
    """Evaluate an ungated policy; costs charged per its cost_tag."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    scores = [rollout(policy, env, base_seed + k, record_dists=False)[1].undiscounted_return
              for k in range(n_episodes)]
    mean, std = _score_stats(scores)
    if policy.cost_tag == "full":
        cost, frac = cost_model.c_full, 1.0
    else:
        cost, frac = cost_model.c_gate + cost_model.c_weak_head, 0.0
    return EvaluationReport(policy_id, float("nan"), frac, mean, std, n_episodes,
                            cost, cost_model.c_full / cost)
