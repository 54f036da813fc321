"""End-to-end pipelines: oracle training, method training, sweeps, reports.

This is the layer the CLI drives. Everything is seeded and single-threaded
so repeated runs with one config produce byte-identical CSV output.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .api import ApiBundle, ApiConfig, run_api
from .approx import GateWeakSpec, ModelSpec, OptConfig, gw_forward, gw_mac_count
from .config import Config, env_params
from .core import PolicyHandle, entropy_rows
from .envs import TabularEnv, collect_demonstrations, make_env
from .epi import (EpiBundle, EpiRule, calibrate_epi1, calibrate_epi2,
                  epi_gate_batch, fit_epi_bundle_params, fit_imitation_policy)
from .oracle import GoodPolicy, build_good_policy, value_iteration
from .runtime import (CompositePolicy, CostModel, EvaluationReport,
                      api_gate_fn, calibrate_naive_threshold, epi_gate_fn,
                      evaluate_composite, evaluate_plain, naive_switch_rule,
                      random_switch_rule, weak_handle_from_bundle)

CSV_COLUMNS = ("method", "env", "p_full_target", "l2_lambda",
               "realized_fraction_good", "mean_score", "score_stddev",
               "n_episodes", "avg_cost", "speedup", "seed_base")


def build_env(cfg: Config) -> TabularEnv:
    return make_env(cfg["env.name"], env_params(cfg))


def train_oracle(cfg: Config, env: TabularEnv) -> GoodPolicy:
    qt = value_iteration(env.prob, env.reward, env.spec.gamma,
                         cfg["oracle.tol"], cfg["oracle.max_iters"])
    return build_good_policy(qt, cfg["oracle.temperature"])


def gw_spec_from(cfg: Config, env: TabularEnv) -> GateWeakSpec:
    return GateWeakSpec(env.spec.obs_dim, cfg["model.hidden_dim"], env.spec.n_actions,
                        cfg["model.share_trunk"], cfg["model.init_seed"])


def opt_from(cfg: Config, l2_lambda: float = None) -> OptConfig:
    return OptConfig(cfg["train.lr"], cfg["train.beta1"], cfg["train.beta2"],
                     cfg["train.eps"], cfg["train.iterations"], cfg["train.batch_size"],
                     cfg["train.l2_lambda"] if l2_lambda is None else l2_lambda,
                     cfg["train.demo_seed"])


def cost_model_from(cfg: Config, gw_spec: Optional[GateWeakSpec] = None) -> CostModel:
    if cfg["cost.from_model"] and gw_spec is not None:
        gate_macs, weak_macs = gw_mac_count(gw_spec)
        return CostModel(gate_macs / 1e6, weak_macs / 1e6, cfg["cost.c_full"])
    return CostModel(cfg["cost.c_gate"], cfg["cost.c_weak_head"], cfg["cost.c_full"])


def demo_data(cfg: Config, env: TabularEnv, good: GoodPolicy):
    return collect_demonstrations(good.handle(), env, cfg["train.demo_steps"],
                                  cfg["train.demo_seed"])


def make_epi_composite(env: TabularEnv, good: GoodPolicy, bundle: EpiBundle,
                       cost_model: CostModel, policy_id: str) -> CompositePolicy:
    return CompositePolicy(good.handle(), weak_handle_from_bundle(bundle),
                           epi_gate_fn(bundle), cost_model, policy_id)


def make_api_composite(env: TabularEnv, good: GoodPolicy, bundle: ApiBundle,
                       cost_model: CostModel, policy_id: str = "api") -> CompositePolicy:
    return CompositePolicy(good.handle(), weak_handle_from_bundle(bundle),
                           api_gate_fn(bundle), cost_model, policy_id)


def train_epi(cfg: Config, env: TabularEnv, good: GoodPolicy, p_full: float,
              l2_lambda: float, rule_kind: str,
              demo=None, gw_params=None):
    """Fit the gate/weak bundle and calibrate the requested rule.

    Returns (EpiBundle, calibration rows or None). demo and pretrained
    gw_params may be passed in so sweeps can share work across budgets.
    """
    gw_spec = gw_spec_from(cfg, env)
    if demo is None:
        demo = demo_data(cfg, env, good)
    _, X, pi0 = demo
    if gw_params is None:
        gw_params, _ = fit_epi_bundle_params(gw_spec, X, pi0, opt_from(cfg, l2_lambda))
    pi1_dists, g_values = gw_forward(gw_spec, gw_params, X)
    if rule_kind == "epi1":
        t1 = calibrate_epi1(g_values, p_full)
        rule = EpiRule("epi1", t1, literal_rule2=cfg["epi.literal_rule2"])
        return EpiBundle(gw_spec, gw_params, rule, p_full), None
    if rule_kind != "epi2":
        raise ValueError("rule_kind must be epi1 or epi2")
    cost_model = cost_model_from(cfg, gw_spec)
    probe_seeds = [cfg["epi.probe_seed"] + k for k in range(cfg["epi.probe_episodes"])]
    literal = cfg["epi.literal_rule2"]

    def probe(t1: float, t2: float):
        rule = EpiRule("epi2", t1, t2, literal)
        trial = EpiBundle(gw_spec, gw_params, rule, p_full)
        comp = make_epi_composite(env, good, trial, cost_model, "epi2-probe")
        rep = evaluate_composite(comp, env, len(probe_seeds), probe_seeds[0], p_full)
        return rep.mean_score, rep.realized_fraction_good

    s1 = entropy_rows(pi1_dists)
    cal = calibrate_epi2(g_values, s1, p_full, probe, cfg["epi.grid"], cfg["epi.slack"],
                         literal)
    if not cal.feasible:
        warnings.warn("epi2 calibration found no feasible threshold pair; "
                      "using the minimum-fraction pair")
    rule = EpiRule("epi2", cal.t1, cal.t2, literal)
    return EpiBundle(gw_spec, gw_params, rule, p_full), cal.rows


def train_api(cfg: Config, env: TabularEnv, good: GoodPolicy, p_full: float,
              l2_lambda: float) -> ApiBundle:
    gw_spec = gw_spec_from(cfg, env)
    api_cfg = ApiConfig(p_full, l2_lambda, cfg["api.epochs"], cfg["api.batch_size"],
                        cfg["api.m_steps"])
    return run_api(env, good, api_cfg, cfg["api.train_seed"], gw_spec, opt_from(cfg, l2_lambda))


def train_baseline_weak(cfg: Config, env: TabularEnv, good: GoodPolicy,
                        l2_lambda: float, demo=None):
    """Plain imitation-trained weak policy used by the switching baselines."""
    if demo is None:
        demo = demo_data(cfg, env, good)
    _, X, pi0 = demo
    spec = ModelSpec(env.spec.obs_dim, cfg["model.hidden_dim"], env.spec.n_actions,
                     "softmax", cfg["model.init_seed"])
    params, _ = fit_imitation_policy(X, pi0, spec, opt_from(cfg, l2_lambda))

    def ev(state, obs):
        from .approx import forward
        return forward(spec, params, obs)

    handle = PolicyHandle(evaluate=ev, cost_tag="weak")
    return spec, params, handle


@dataclass
class SweepRow:
    method: str
    env: str
    p_full_target: float
    l2_lambda: float
    realized_fraction_good: float
    mean_score: float
    score_stddev: float
    n_episodes: int
    avg_cost: float
    speedup: float
    seed_base: int


def row_from_report(report: EvaluationReport, method: str, env_name: str,
                    p_full: float, l2_lambda: float, seed_base: int) -> SweepRow:
    return SweepRow(method, env_name, p_full, l2_lambda,
                    report.realized_fraction_good, report.mean_score,
                    report.score_stddev, report.n_episodes, report.avg_cost,
                    report.speedup, seed_base)


def _failed_row(method, env_name, p_full, l2, n_episodes, seed_base) -> SweepRow:
    nan = float("nan")
    return SweepRow(method, env_name, p_full, l2, nan, nan, nan, n_episodes, nan,
                    nan, seed_base)


def sweep(cfg: Config, env: TabularEnv, good: GoodPolicy,
          methods: Sequence[str] = None, p_full_grid: Sequence[float] = None,
          l2_grid: Sequence[float] = None) -> List[SweepRow]:
    """Train and evaluate every (method, p_full, l2) configuration.

    Bundles that do not depend on the budget are trained once per l2 and
    shared across budgets. Failures are recorded as NaN rows, not raised.
    """
    methods = list(methods if methods is not None else cfg["sweep.methods"])
    p_fulls = list(p_full_grid if p_full_grid is not None else cfg["sweep.p_full_grid"])
    l2s = list(l2_grid if l2_grid is not None else cfg["sweep.l2_grid"])
    n_episodes = cfg["eval.n_episodes"]
    seed_base = cfg["eval.seed_base"]
    env_name = env.spec.name
    gw_spec = gw_spec_from(cfg, env)
    cost_model = cost_model_from(cfg, gw_spec)
    demo = demo_data(cfg, env, good)
    _, X, pi0 = demo

    epi_cache: Dict[float, np.ndarray] = {}
    weak_cache: Dict[float, tuple] = {}

    def epi_params(l2):
        if l2 not in epi_cache:
            epi_cache[l2], _ = fit_epi_bundle_params(gw_spec, X, pi0, opt_from(cfg, l2))
        return epi_cache[l2]

    def weak_baseline(l2):
        if l2 not in weak_cache:
            weak_cache[l2] = train_baseline_weak(cfg, env, good, l2, demo)
        return weak_cache[l2]

    rows: List[SweepRow] = []
    for method in methods:
        for p_full in p_fulls:
            method_l2s = [0.0] if method == "random" else l2s
            for l2 in method_l2s:
                try:
                    if method in ("epi1", "epi2"):
                        bundle, _ = train_epi(cfg, env, good, p_full, l2, method,
                                              demo=demo, gw_params=epi_params(l2))
                        comp = make_epi_composite(env, good, bundle, cost_model, method)
                    elif method == "api":
                        bundle = train_api(cfg, env, good, p_full, l2)
                        comp = make_api_composite(env, good, bundle, cost_model)
                    elif method == "random":
                        _, _, weak = weak_baseline(l2)
                        comp = CompositePolicy(good.handle(), weak,
                                               random_switch_rule(p_full), cost_model,
                                               "random")
                    elif method == "naive":
                        spec_w, params_w, weak = weak_baseline(l2)
                        from .approx import forward_batch
                        ent = entropy_rows(forward_batch(spec_w, params_w, X))
                        thr = calibrate_naive_threshold(ent, p_full)
                        comp = CompositePolicy(good.handle(), weak,
                                               naive_switch_rule(weak, thr), cost_model,
                                               "naive")
                    else:
                        raise ValueError("unknown sweep method %r" % method)
                    rep = evaluate_composite(comp, env, n_episodes, seed_base, p_full)
                    rows.append(row_from_report(rep, method, env_name, p_full, l2, seed_base))
                except Exception as exc:  # record, keep sweeping
                    warnings.warn("sweep cell (%s, %g, %g) failed: %s"
                                  % (method, p_full, l2, exc))
                    rows.append(_failed_row(method, env_name, p_full, l2,
                                            n_episodes, seed_base))
    return rows


# ---------------------------------------------------------------------------
# CSV + summary report
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return "%d" % value
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def write_csv(rows: Sequence[SweepRow], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rows_to_csv(rows))


def read_csv(path: str) -> List[SweepRow]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError("unrecognized report CSV header")
    rows = []
    for ln in lines[1:]:
        f = ln.split(",")
        rows.append(SweepRow(f[0], f[1], float(f[2]), float(f[3]), float(f[4]),
                             float(f[5]), float(f[6]), int(f[7]), float(f[8]),
                             float(f[9]), int(f[10])))
    return rows


def summary_table(rows: Sequence[SweepRow]) -> str:
    """Aligned text table; '*' marks the best score per (env, p_full) group,
    ties broken toward the lower average cost."""
    best = {}
    for i, r in enumerate(rows):
        key = (r.env, r.p_full_target)
        score = (r.mean_score if not math.isnan(r.mean_score) else -math.inf, -r.avg_cost)
        if key not in best or score > best[key][0]:
            best[key] = (score, i)
    marks = {i for _, i in best.values()}

    headers = ("env", "p_full", "method", "l2", "frac_good", "mean_score",
               "stddev", "avg_cost", "speedup", "best")
    table = [headers]
    ordered = sorted(rows, key=lambda r: (r.env, r.p_full_target, r.method, r.l2_lambda))
    index_of = {id(r): i for i, r in enumerate(rows)}
    for r in ordered:
        table.append((r.env, "%.3g" % r.p_full_target, r.method, "%.3g" % r.l2_lambda,
                      "%.3f" % r.realized_fraction_good, "%.4f" % r.mean_score,
                      "%.4f" % r.score_stddev, "%.2f" % r.avg_cost,
                      "%.2f" % r.speedup, "*" if index_of[id(r)] in marks else ""))
    widths = [max(len(row[c]) for row in table) for c in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    return "\n".join(lines) + "\n"


def write_summary(rows: Sequence[SweepRow], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(summary_table(rows))


# ---------------------------------------------------------------------------
# Checkpoint serializers
# ---------------------------------------------------------------------------

def _env_section(cfg: Config) -> dict:
    return {"name": cfg["env.name"], "width": cfg["env.width"],
            "height": cfg["env.height"],
            "start": "%d,%d" % tuple(cfg["env.start"]),
            "goal": "%d,%d" % tuple(cfg["env.goal"]),
            "pits": ";".join("%d,%d" % p for p in cfg["env.pits"]),
            "slip": cfg["env.slip"], "gamma": cfg["env.gamma"],
            "max_steps": cfg["env.max_steps"], "n_drops": cfg["env.n_drops"]}


def env_from_section(sec: dict) -> TabularEnv:
    from .config import _parse_cells
    name = sec["name"]
    if name == "grid_nav":
        params = {"width": sec["width"], "height": sec["height"],
                  "start": _parse_cells(sec["start"])[0],
                  "goal": _parse_cells(sec["goal"])[0],
                  "pits": _parse_cells(sec["pits"]), "slip": sec["slip"],
                  "gamma": sec["gamma"], "max_steps": sec["max_steps"]}
    else:
        params = {"width": sec["width"], "height": sec["height"],
                  "n_drops": sec["n_drops"], "gamma": sec["gamma"]}
    return make_env(name, params)


def _gw_section(spec: GateWeakSpec) -> dict:
    return {"input_dim": spec.input_dim, "hidden_dim": spec.hidden_dim,
            "n_actions": spec.n_actions, "share_trunk": spec.share_trunk,
            "init_seed": spec.init_seed}


def _gw_from_section(sec: dict) -> GateWeakSpec:
    return GateWeakSpec(sec["input_dim"], sec["hidden_dim"], sec["n_actions"],
                        sec["share_trunk"], sec["init_seed"])


def _cost_section(cm: CostModel) -> dict:
    return {"c_gate": cm.c_gate, "c_weak_head": cm.c_weak_head, "c_full": cm.c_full}


def save_oracle_ckpt(path: str, cfg: Config, good: GoodPolicy):
    ckpt.save_checkpoint(path, {
        "env": _env_section(cfg),
        "oracle": {"q": good.q_table.q, "n_states": good.q_table.q.shape[0],
                   "n_actions": good.q_table.q.shape[1],
                   "residual": good.q_table.residual,
                   "iterations": good.q_table.iterations,
                   "temperature": good.temperature},
    })


def load_oracle_ckpt(path: str):
    sec = ckpt.load_checkpoint(path)
    o = sec["oracle"]
    from .oracle import QTable
    q = o["q"].reshape(o["n_states"], o["n_actions"])
    good = build_good_policy(QTable(q, o["residual"], o["iterations"]), o["temperature"])
    return good, env_from_section(sec["env"])


def save_epi_ckpt(path: str, cfg: Config, bundle: EpiBundle, cost_model: CostModel):
    rule = {"kind": bundle.rule.kind, "t1": bundle.rule.t1,
            "t2": bundle.rule.t2 if bundle.rule.t2 is not None else float("nan"),
            "literal_rule2": bundle.rule.literal_rule2}
    ckpt.save_checkpoint(path, {
        "env": _env_section(cfg), "model": _gw_section(bundle.gw_spec),
        "params": {"flat": bundle.gw_params},
        "rule": rule, "meta": {"method": bundle.rule.kind,
                               "p_full": bundle.p_full_target},
        "cost": _cost_section(cost_model),
    })


def save_api_ckpt(path: str, cfg: Config, bundle: ApiBundle, cost_model: CostModel):
    hist = bundle.history
    ckpt.save_checkpoint(path, {
        "env": _env_section(cfg), "model": _gw_section(bundle.gw_spec),
        "params": {"flat": bundle.gw_params},
        "meta": {"method": "api", "p_full": bundle.p_full_target},
        "history": {"loss": np.array([h.loss for h in hist]),
                    "mean_q": np.array([h.mean_q for h in hist]),
                    "beta": np.array([h.beta for h in hist])},
        "cost": _cost_section(cost_model),
    })


def load_bundle_ckpt(path: str):
    """Load an epi or api bundle checkpoint; returns (bundle, env, cost model)."""
    sec = ckpt.load_checkpoint(path)
    env = env_from_section(sec["env"])
    gw_spec = _gw_from_section(sec["model"])
    params = sec["params"]["flat"]
    cost = CostModel(**sec["cost"])
    method = sec["meta"]["method"]
    if method == "api":
        bundle = ApiBundle(gw_spec, params, sec["meta"]["p_full"])
    else:
        r = sec["rule"]
        t2 = None if math.isnan(r["t2"]) else r["t2"]
        bundle = EpiBundle(gw_spec, params, EpiRule(r["kind"], r["t1"], t2,
                                                    r["literal_rule2"]),
                           sec["meta"]["p_full"])
    return bundle, env, cost
