"""Flat ``section.key = value`` configuration files with a strict schema.

Unknown keys are errors; values are typed per the schema below. Lists use
comma separation, grid cells use ``row,col`` pairs separated by ``;``.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError("not a boolean: %r" % s)


def _parse_cells(s: str) -> List[Tuple[int, int]]:
    s = s.strip()
    if not s:
        return []
    out = []
    for part in s.split(";"):
        r, c = part.split(",")
        out.append((int(r), int(c)))
    return out


def _parse_floats(s: str) -> List[float]:
    return [float(p) for p in s.split(",") if p.strip()]


def _parse_strs(s: str) -> List[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


# key -> (parser, default)
SCHEMA = {
    "env.name": (str, "grid_nav"),
    "env.width": (int, 5),
    "env.height": (int, 5),
    "env.start": (lambda s: _parse_cells(s)[0], (0, 0)),
    "env.goal": (lambda s: _parse_cells(s)[0], (4, 4)),
    "env.pits": (_parse_cells, []),
    "env.slip": (float, 0.0),
    "env.gamma": (float, 0.99),
    "env.max_steps": (int, 100),
    "env.n_drops": (int, 3),
    "oracle.tol": (float, 1e-10),
    "oracle.max_iters": (int, 100_000),
    "oracle.temperature": (float, 0.25),
    "model.hidden_dim": (int, 32),
    "model.share_trunk": (_parse_bool, True),
    "model.init_seed": (int, 0),
    "train.lr": (float, 0.0005),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.iterations": (int, 10_000),
    "train.batch_size": (int, 1000),
    "train.l2_lambda": (float, 0.0),
    "train.demo_steps": (int, 4000),
    "train.demo_seed": (int, 20_000),
    "epi.p_full": (float, 0.3),
    "epi.rule": (str, "epi2"),
    "epi.grid": (int, 10),
    "epi.probe_episodes": (int, 5),
    "epi.probe_seed": (int, 50_000),
    "epi.slack": (float, 0.02),
    "epi.literal_rule2": (_parse_bool, False),
    "api.p_full": (float, 0.3),
    "api.epochs": (int, 150),
    "api.batch_size": (int, 1000),
    "api.m_steps": (int, 20),
    "api.train_seed": (int, 70_000),
    "eval.n_episodes": (int, 20),
    "eval.seed_base": (int, 1000),
    "cost.c_gate": (float, 18.0),
    "cost.c_weak_head": (float, 2.0),
    "cost.c_full": (float, 132.0),
    "cost.from_model": (_parse_bool, False),
    "sweep.methods": (_parse_strs, ["epi1", "epi2", "api", "random", "naive"]),
    "sweep.p_full_grid": (_parse_floats, [0.1, 0.3, 0.5]),
    "sweep.l2_grid": (_parse_floats, [0.0, 1e-5, 1e-3]),
}


@dataclass
class Config:
    values: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError("unknown config key %r" % key)
        return self.values.get(key, SCHEMA[key][1])

    def set(self, key: str, raw: str):
        if key not in SCHEMA:
            raise ConfigError("unknown config key %r" % key)
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(raw)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError("bad value for %s: %r (%s)" % (key, raw, exc))


def default_config() -> Config:
    return Config()


def parse_config(text: str) -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError("line %d: expected 'section.key = value'" % lineno)
        key, _, raw = stripped.partition("=")
        cfg.set(key.strip(), raw.strip())
    return cfg


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def env_params(cfg: Config) -> dict:
    name = cfg["env.name"]
    if name == "grid_nav":
        return {"width": cfg["env.width"], "height": cfg["env.height"],
                "start": cfg["env.start"], "goal": cfg["env.goal"],
                "pits": cfg["env.pits"], "slip": cfg["env.slip"],
                "gamma": cfg["env.gamma"], "max_steps": cfg["env.max_steps"]}
    if name == "corridor_catch":
        return {"width": cfg["env.width"], "height": cfg["env.height"],
                "n_drops": cfg["env.n_drops"], "gamma": cfg["env.gamma"]}
    raise ConfigError("unknown env.name %r" % name)
