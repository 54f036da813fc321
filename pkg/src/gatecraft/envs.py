"""Seedable tabular toy environments with feature-vector observations.

Two environments are provided:

* ``grid_nav`` -- a W x H gridworld with a goal, optional pits, a per-step
  cost and optional slip noise.
* ``corridor_catch`` -- a falling-object corridor where a paddle must be
  moved under the object before it lands; an episode spans several drops.

Both are materialized as explicit transition/reward tables so exact value
iteration is possible, and both expose redundant feature observations for
function approximators.

Randomness uses numpy's Philox counter-based generator. Every episode is
driven by streams keyed as ``Philox(key=[seed, stream_id])`` with stream 0
for environment dynamics, stream 1 for action sampling and stream 2 for
gate decisions; identical (env, policy, seed) therefore reproduce the same
trajectory bitwise, and a gate that consumes randomness never perturbs the
action/dynamics streams.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import PolicyHandle, assert_distribution

STEP_COST = 0.01  # per-step penalty in grid_nav

# rng stream ids
STREAM_ENV = 0
STREAM_ACTION = 1
STREAM_GATE = 2


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one (seed, stream) pair."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


@dataclass(frozen=True)
class EnvSpec:
    name: str
    n_states: int
    n_actions: int
    gamma: float
    max_steps: int
    obs_dim: int
    stochasticity: float

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if not 0.0 <= self.stochasticity < 1.0:
            raise ValueError("stochasticity must lie in [0, 1)")
        for f in ("n_states", "n_actions", "max_steps", "obs_dim"):
            if getattr(self, f) <= 0:
                raise ValueError("%s must be positive" % f)


@dataclass
class TabularEnv:
    """A fully materialized finite MDP.

    prob has shape (n_states, n_actions, n_states); reward (n_states,
    n_actions). The reward is the expected immediate reward r(x, a); under
    slip noise the realized-outcome bonus is averaged into it, which keeps
    the table consistent with the Bellman oracle. obs_table rows are the
    fixed observation encodings; the terminal row is all zeros.
    """

    spec: EnvSpec
    prob: np.ndarray
    reward: np.ndarray
    obs_table: np.ndarray
    init_probs: np.ndarray
    terminal_state: int
    # realized-outcome event tables: per (state, action) a list of K outcomes
    # with probabilities, successor states and realized rewards. The reward
    # table above is their expectation, which is what the Bellman oracle
    # needs; step() samples events so realized returns respect the stated
    # per-episode bounds even under slip noise.
    ev_prob: np.ndarray = None      # (S, A, K)
    ev_next: np.ndarray = None      # (S, A, K) int
    ev_reward: np.ndarray = None    # (S, A, K)
    ev_cumsum: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        rowsums = self.prob.sum(axis=2)
        if np.max(np.abs(rowsums - 1.0)) > 1e-12:
            raise ValueError("transition rows must each sum to 1")
        if np.any(self.prob < 0.0):
            raise ValueError("transition probabilities must be nonnegative")
        if self.ev_prob is None:
            raise ValueError("event tables are required")
        if np.max(np.abs(self.ev_prob.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("event rows must each sum to 1")
        exp_reward = (self.ev_prob * self.ev_reward).sum(axis=2)
        if np.max(np.abs(exp_reward - self.reward)) > 1e-9:
            raise ValueError("reward table must be the event-table expectation")
        self.ev_cumsum = np.cumsum(self.ev_prob, axis=2)

    def observe(self, state: int) -> np.ndarray:
        if not 0 <= state < self.spec.n_states:
            raise IndexError("state index out of range")
        return self.obs_table[state]

    def initial_state(self, rng: np.random.Generator) -> int:
        nz = np.flatnonzero(self.init_probs)
        if nz.size == 1:
            return int(nz[0])
        u = rng.random()
        return int(np.searchsorted(np.cumsum(self.init_probs), u, side="right"))

    def step(self, state: int, action: int, rng: np.random.Generator):
        """Sample (next_state, realized reward, done) from the event table."""
        if not 0 <= state < self.spec.n_states:
            raise IndexError("state index out of range")
        if not 0 <= action < self.spec.n_actions:
            raise IndexError("action index out of range")
        row = self.ev_cumsum[state, action]
        u = rng.random()
        k = int(min(np.searchsorted(row, u, side="right"), row.shape[0] - 1))
        nxt = int(self.ev_next[state, action, k])
        r = float(self.ev_reward[state, action, k])
        return nxt, r, nxt == self.terminal_state


@dataclass
class TrajectoryStep:
    state: int
    observation: np.ndarray
    policy_dist: np.ndarray
    action: int
    reward: float
    done: bool


@dataclass
class Trajectory:
    steps: List[TrajectoryStep]
    seed: int


@dataclass
class EpisodeScore:
    undiscounted_return: float
    length: int
    seed: int


def _grid_cell(r: int, c: int, width: int) -> int:
    return r * width + c

# action deltas: up, down, left, right
_GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
_PERP = {0: (2, 3), 1: (2, 3), 2: (0, 1), 3: (0, 1)}


def _make_grid_nav(params: dict) -> TabularEnv:
    width = int(params.get("width", 5))
    height = int(params.get("height", 5))
    start = tuple(params.get("start", (0, 0)))
    goal = tuple(params.get("goal", (height - 1, width - 1)))
    pits = [tuple(p) for p in params.get("pits", [])]
    slip = float(params.get("slip", 0.0))
    gamma = float(params.get("gamma", 0.99))
    max_steps = int(params.get("max_steps", 100))

    if width < 2 or height < 2:
        raise ValueError("grid_nav needs at least a 2x2 grid")
    if goal == start:
        raise ValueError("degenerate grid_nav: goal equals start")
    if start in pits or goal in pits:
        raise ValueError("pits may not overlap start or goal")
    for (r, c) in [start, goal] + pits:
        if not (0 <= r < height and 0 <= c < width):
            raise ValueError("cell (%d, %d) outside the grid" % (r, c))

    n_cells = width * height
    n_states = n_cells + 1
    n_actions = 4
    terminal = n_cells
    pit_set = set(pits)

    prob = np.zeros((n_states, n_actions, n_states))
    reward = np.zeros((n_states, n_actions))
    n_events = 3  # intended move plus the two perpendicular slips
    ev_prob = np.zeros((n_states, n_actions, n_events))
    ev_next = np.full((n_states, n_actions, n_events), terminal, dtype=np.int64)
    ev_reward = np.zeros((n_states, n_actions, n_events))

    def outcome(r, c, a):
        rr, cc = r + _GRID_MOVES[a][0], c + _GRID_MOVES[a][1]
        if not (0 <= rr < height and 0 <= cc < width):
            rr, cc = r, c  # wall: stay in place
        return rr, cc

    for r in range(height):
        for c in range(width):
            s = _grid_cell(r, c, width)
            if (r, c) == goal or (r, c) in pit_set:
                # never occupied at decision time, but keep rows valid
                prob[s, :, terminal] = 1.0
                ev_prob[s, :, 0] = 1.0
                continue
            for a in range(n_actions):
                moves = [(a, 1.0 - slip)]
                if slip > 0.0:
                    p1, p2 = _PERP[a]
                    moves += [(p1, slip / 2.0), (p2, slip / 2.0)]
                for k, (mv, p) in enumerate(moves):
                    rr, cc = outcome(r, c, mv)
                    ev_prob[s, a, k] = p
                    if (rr, cc) == goal:
                        bonus, nxt = 1.0, terminal
                    elif (rr, cc) in pit_set:
                        bonus, nxt = -1.0, terminal
                    else:
                        bonus, nxt = 0.0, _grid_cell(rr, cc, width)
                    prob[s, a, nxt] += p
                    # goal/pit bonus and step cost both apply on the transition
                    ev_next[s, a, k] = nxt
                    ev_reward[s, a, k] = bonus - STEP_COST
                reward[s, a] = float(np.sum(ev_prob[s, a] * ev_reward[s, a]))
    prob[terminal, :, terminal] = 1.0  # absorbing, reward 0
    ev_prob[terminal, :, 0] = 1.0

    # reachability: goal must be reachable from start under the dynamics
    frontier = [start]
    seen = {start}
    while frontier:
        cell = frontier.pop()
        if cell == goal:
            break
        for a in range(n_actions):
            nxt = outcome(cell[0], cell[1], a)
            if nxt not in seen and nxt not in pit_set:
                seen.add(nxt)
                frontier.append(nxt)
    if goal not in seen:
        raise ValueError("goal is unreachable from start")

    obs_dim = height + width + 2
    obs = np.zeros((n_states, obs_dim))
    gr, gc = goal
    for r in range(height):
        for c in range(width):
            s = _grid_cell(r, c, width)
            obs[s, r] = 1.0
            obs[s, height + c] = 1.0
            obs[s, height + width] = (gc - c) / max(width - 1, 1)
            obs[s, height + width + 1] = (gr - r) / max(height - 1, 1)

    init = np.zeros(n_states)
    init[_grid_cell(start[0], start[1], width)] = 1.0

    spec = EnvSpec("grid_nav", n_states, n_actions, gamma, max_steps, obs_dim, slip)
    return TabularEnv(spec, prob, reward, obs, init, terminal,
                      ev_prob, ev_next, ev_reward)


def _make_corridor_catch(params: dict) -> TabularEnv:
    width = int(params.get("width", 7))
    height = int(params.get("height", 7))
    n_drops = int(params.get("n_drops", 3))
    gamma = float(params.get("gamma", 0.99))

    if width < 2 or height < 3 or n_drops < 1:
        raise ValueError("corridor_catch needs width >= 2, height >= 3, n_drops >= 1")

    n_rows = height - 1  # object rows 0..height-2; landing resolves in-transition
    n_actions = 3  # move paddle left / stay / right

    def sid(c_obj, r_obj, c_pad, d):
        return ((c_obj * n_rows + r_obj) * width + c_pad) * n_drops + (d - 1)

    n_states = width * n_rows * width * n_drops + 1
    terminal = n_states - 1

    prob = np.zeros((n_states, n_actions, n_states))
    reward = np.zeros((n_states, n_actions))
    n_events = width  # respawn column choices; one event when deterministic
    ev_prob = np.zeros((n_states, n_actions, n_events))
    ev_next = np.full((n_states, n_actions, n_events), terminal, dtype=np.int64)
    ev_reward = np.zeros((n_states, n_actions, n_events))

    for c_obj in range(width):
        for r_obj in range(n_rows):
            for c_pad in range(width):
                for d in range(1, n_drops + 1):
                    s = sid(c_obj, r_obj, c_pad, d)
                    for a in range(n_actions):
                        pad2 = min(max(c_pad + a - 1, 0), width - 1)
                        if r_obj < n_rows - 1:
                            nxt = sid(c_obj, r_obj + 1, pad2, d)
                            prob[s, a, nxt] = 1.0
                            ev_prob[s, a, 0] = 1.0
                            ev_next[s, a, 0] = nxt
                        else:
                            r = 1.0 if pad2 == c_obj else -1.0
                            reward[s, a] = r
                            ev_reward[s, a, :] = r
                            if d == 1:
                                prob[s, a, terminal] = 1.0
                                ev_prob[s, a, 0] = 1.0
                            else:
                                for c_new in range(width):
                                    nxt = sid(c_new, 0, pad2, d - 1)
                                    prob[s, a, nxt] = 1.0 / width
                                    ev_prob[s, a, c_new] = 1.0 / width
                                    ev_next[s, a, c_new] = nxt
    prob[terminal, :, terminal] = 1.0
    ev_prob[terminal, :, 0] = 1.0
    ev_reward[terminal] = 0.0

    obs_dim = width + n_rows + width + 1
    obs = np.zeros((n_states, obs_dim))
    for c_obj in range(width):
        for r_obj in range(n_rows):
            for c_pad in range(width):
                for d in range(1, n_drops + 1):
                    s = sid(c_obj, r_obj, c_pad, d)
                    obs[s, c_obj] = 1.0
                    obs[s, width + r_obj] = 1.0
                    obs[s, width + n_rows + c_pad] = 1.0
                    obs[s, width + n_rows + width] = d / n_drops

    init = np.zeros(n_states)
    for c_obj in range(width):
        init[sid(c_obj, 0, width // 2, n_drops)] = 1.0 / width

    max_steps = n_rows * n_drops + 1
    spec = EnvSpec("corridor_catch", n_states, n_actions, gamma, max_steps, obs_dim, 1.0 - 1.0 / width)
    return TabularEnv(spec, prob, reward, obs, init, terminal,
                      ev_prob, ev_next, ev_reward)


_BUILDERS = {"grid_nav": _make_grid_nav, "corridor_catch": _make_corridor_catch}


def make_env(spec_name: str, params: Optional[dict] = None) -> TabularEnv:
    """Construct one of the named tabular environments."""
    if spec_name not in _BUILDERS:
        raise ValueError("unknown environment %r (choose from %s)" % (spec_name, sorted(_BUILDERS)))
    return _BUILDERS[spec_name](params or {})


def sample_index(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF sample of an index from a probability vector."""
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(dist), u, side="right"), len(dist) - 1))


def rollout(policy: PolicyHandle, env: TabularEnv, seed: int,
            record_dists: bool = True) -> Tuple[Trajectory, EpisodeScore]:
    """Run one episode sampling actions from the policy's distributions.

    Uses the (seed, STREAM_ENV) generator for dynamics and initial state
    and (seed, STREAM_ACTION) for action sampling; the split keeps action
    sequences comparable between plain and gated policies.
    """
    env_rng = stream_rng(seed, STREAM_ENV)
    act_rng = stream_rng(seed, STREAM_ACTION)
    state = env.initial_state(env_rng)
    steps: List[TrajectoryStep] = []
    total = 0.0
    for t in range(env.spec.max_steps):
        obs = env.observe(state)
        dist = policy.evaluate(state, obs)
        if len(dist) != env.spec.n_actions:
            raise ValueError("policy output dimension %d does not match n_actions %d"
                             % (len(dist), env.spec.n_actions))
        action = sample_index(dist, act_rng)
        nxt, r, done = env.step(state, action, env_rng)
        total += r
        done = done or (t == env.spec.max_steps - 1)
        steps.append(TrajectoryStep(state, obs,
                                    np.array(dist) if record_dists else None,
                                    action, r, done))
        state = nxt
        if done:
            break
    traj = Trajectory(steps, seed)
    return traj, EpisodeScore(total, len(steps), seed)


def uniform_policy(n_actions: int) -> PolicyHandle:
    dist = np.full(n_actions, 1.0 / n_actions)
    return PolicyHandle(evaluate=lambda s, obs: dist, cost_tag="full")


def collect_demonstrations(policy: PolicyHandle, env: TabularEnv, n_steps: int,
                           base_seed: int):
    """Roll out the policy until n_steps decision records are collected.

    Episodes restart (with consecutive seeds) as needed. Returns
    (state_indices, observations, policy_dists) arrays trimmed to n_steps.
    """
    states, obs_rows, dists = [], [], []
    seed = base_seed
    while len(states) < n_steps:
        traj, _ = rollout(policy, env, seed, record_dists=True)
        for st in traj.steps:
            states.append(st.state)
            obs_rows.append(st.observation)
            dists.append(st.policy_dist)
        seed += 1
    states = np.array(states[:n_steps], dtype=np.int64)
    X = np.array(obs_rows[:n_steps])
    P = np.array(dists[:n_steps])
    for row in P[:5]:
        assert_distribution(row)
    return states, X, P
