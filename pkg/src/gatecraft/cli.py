"""Command-line harness.

Subcommands: train-oracle, train-epi, train-api, eval, sweep, report.
Global flags: --config <path>, --seed <u64>, --out <dir>.

Exit codes: 0 success, 1 usage/config error, 2 training divergence,
3 I/O error.
"""

import argparse
import os
import sys

from . import harness
from .api import TrainingDiverged
from .config import Config, ConfigError, default_config, load_config
from .runtime import CompositePolicy, evaluate_composite, evaluate_plain, random_switch_rule

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(message)


class SystemExit2(Exception):
    pass


def _apply_seed(cfg: Config, seed: int):
    cfg.values["eval.seed_base"] = seed
    cfg.values["train.demo_seed"] = seed + 20_000
    cfg.values["epi.probe_seed"] = seed + 50_000
    cfg.values["api.train_seed"] = seed + 70_000


def _setup(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        _apply_seed(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    return cfg


def _report_line(rep, label):
    print("%-12s frac_good=%.3f mean_score=%.4f stddev=%.4f avg_cost=%.2f speedup=%.2fx"
          % (label, rep.realized_fraction_good, rep.mean_score, rep.score_stddev,
             rep.avg_cost, rep.speedup))


def cmd_train_oracle(args):
    cfg = _setup(args)
    env = harness.build_env(cfg)
    good = harness.train_oracle(cfg, env)
    path = os.path.join(args.out, "oracle.ckpt")
    harness.save_oracle_ckpt(path, cfg, good)
    print("oracle: %d states, %d sweeps, residual %.3e -> %s"
          % (env.spec.n_states, good.q_table.iterations, good.q_table.residual, path))


def cmd_train_epi(args):
    cfg = _setup(args)
    env = harness.build_env(cfg)
    good = harness.train_oracle(cfg, env)
    rule_kind = args.rule or cfg["epi.rule"]
    bundle, cal_rows = harness.train_epi(cfg, env, good, cfg["epi.p_full"],
                                         cfg["train.l2_lambda"], rule_kind)
    cost = harness.cost_model_from(cfg, bundle.gw_spec)
    path = os.path.join(args.out, "epi.ckpt")
    harness.save_epi_ckpt(path, cfg, bundle, cost)
    if cal_rows is not None:
        cal_path = os.path.join(args.out, "epi_calibration.csv")
        with open(cal_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t1,t2,routed_fraction,mean_return\n")
            for r in cal_rows:
                fh.write("%.17g,%.17g,%.17g,%.17g\n"
                         % (r.t1, r.t2, r.routed_fraction, r.mean_return))
        print("calibration grid -> %s" % cal_path)
    print("rule %s: t1=%.6g t2=%s -> %s"
          % (bundle.rule.kind, bundle.rule.t1,
             "%.6g" % bundle.rule.t2 if bundle.rule.t2 is not None else "-", path))


def cmd_train_api(args):
    cfg = _setup(args)
    env = harness.build_env(cfg)
    good = harness.train_oracle(cfg, env)
    bundle = harness.train_api(cfg, env, good, cfg["api.p_full"], cfg["train.l2_lambda"])
    cost = harness.cost_model_from(cfg, bundle.gw_spec)
    path = os.path.join(args.out, "api.ckpt")
    harness.save_api_ckpt(path, cfg, bundle, cost)
    hist_path = os.path.join(args.out, "api_history.csv")
    with open(hist_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss,mean_q,beta\n")
        for h in bundle.history:
            fh.write("%d,%.17g,%.17g,%.17g\n" % (h.epoch, h.loss, h.mean_q, h.beta))
    last = bundle.history[-1] if bundle.history else None
    print("api: %d epochs%s -> %s"
          % (len(bundle.history),
             ", final mean_q %.3f beta %.4f" % (last.mean_q, last.beta) if last else "",
             path))


def cmd_eval(args):
    cfg = _setup(args)
    n = cfg["eval.n_episodes"]
    base = cfg["eval.seed_base"]
    if args.ckpt:
        bundle, env, cost = harness.load_bundle_ckpt(args.ckpt)
        good = harness.train_oracle(cfg, env)
        from .api import ApiBundle
        if isinstance(bundle, ApiBundle):
            comp = harness.make_api_composite(env, good, bundle, cost)
        else:
            comp = harness.make_epi_composite(env, good, bundle, cost,
                                              bundle.rule.kind)
        rep = evaluate_composite(comp, env, n, base, bundle.p_full_target)
        _report_line(rep, comp.policy_id)
    elif args.method == "good":
        env = harness.build_env(cfg)
        good = harness.train_oracle(cfg, env)
        cost = harness.cost_model_from(cfg)
        rep = evaluate_plain(good.handle(), env, n, base, cost, "good")
        _report_line(rep, "good")
    elif args.method == "weak":
        env = harness.build_env(cfg)
        good = harness.train_oracle(cfg, env)
        _, _, weak = harness.train_baseline_weak(cfg, env, good, cfg["train.l2_lambda"])
        rep = evaluate_plain(weak, env, n, base, harness.cost_model_from(cfg), "weak")
        _report_line(rep, "weak")
    elif args.method == "random":
        env = harness.build_env(cfg)
        good = harness.train_oracle(cfg, env)
        _, _, weak = harness.train_baseline_weak(cfg, env, good, cfg["train.l2_lambda"])
        comp = CompositePolicy(good.handle(), weak, random_switch_rule(args.p_full),
                               harness.cost_model_from(cfg), "random")
        rep = evaluate_composite(comp, env, n, base, args.p_full)
        _report_line(rep, "random")
    else:
        raise SystemExit2("eval needs --ckpt or --method {good,weak,random}")


def cmd_sweep(args):
    cfg = _setup(args)
    env = harness.build_env(cfg)
    good = harness.train_oracle(cfg, env)
    rows = harness.sweep(cfg, env, good)
    csv_path = os.path.join(args.out, "sweep.csv")
    summary_path = os.path.join(args.out, "summary.txt")
    harness.write_csv(rows, csv_path)
    harness.write_summary(rows, summary_path)
    print(harness.summary_table(rows), end="")
    print("rows -> %s" % csv_path)


def cmd_report(args):
    cfg = _setup(args)
    rows = harness.read_csv(args.csv)
    summary_path = os.path.join(args.out, "summary.txt")
    harness.write_summary(rows, summary_path)
    print(harness.summary_table(rows), end="")


def build_parser() -> _Parser:
    p = _Parser(prog="gatecraft",
                description="Budgeted gating of an expensive policy behind a cheap imitator")
    p.add_argument("--config", help="path to a flat section.key = value config file")
    p.add_argument("--seed", type=int, help="base seed overriding the config's seeds")
    p.add_argument("--out", default=".", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-oracle", help="value-iterate the env and save the good policy")
    sp = sub.add_parser("train-epi", help="train the entropy-gated imitation bundle")
    sp.add_argument("--rule", choices=["epi1", "epi2"], help="override epi.rule")
    sub.add_parser("train-api", help="train the alternating-minimization bundle")
    sp = sub.add_parser("eval", help="evaluate a bundle checkpoint or a baseline")
    sp.add_argument("--ckpt", help="bundle checkpoint to evaluate")
    sp.add_argument("--method", choices=["good", "weak", "random"])
    sp.add_argument("--p-full", type=float, default=0.3, dest="p_full")
    sub.add_parser("sweep", help="train + evaluate the full method/budget grid")
    sp = sub.add_parser("report", help="re-render the summary table from a sweep CSV")
    sp.add_argument("csv", help="sweep CSV path")
    return p


_COMMANDS = {
    "train-oracle": cmd_train_oracle,
    "train-epi": cmd_train_epi,
    "train-api": cmd_train_api,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _COMMANDS[args.command](args)
        return EXIT_OK
    except (SystemExit2, ConfigError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print("training diverged: %s" % exc, file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
