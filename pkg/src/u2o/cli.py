"""Command line entry point: ``u2o <subcommand> --config PATH [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import diag, env as envmod, harness, hilp
from .finetune import evaluate_policy, identify, probe_pairs, stream
from .harness import ConfigError, ExperimentConfig, PretrainCache
from .nn import NumericalFailure

log = logging.getLogger("u2o")


def load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    cfg = harness.parse_config(text)
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    ds = harness.build_dataset(cfg)
    root = cfg.out_root()
    root.mkdir(parents=True, exist_ok=True)
    path = Path(args.path) if args.path else root / f"{cfg.env}_{cfg.dataset.behavior}_{len(ds)}.jsonl"
    envmod.save_dataset(path, ds)
    _emit({"path": str(path), "n": len(ds), "digest": harness.dataset_digest(ds)})


def cmd_pretrain(cfg: ExperimentConfig, args) -> None:
    ds = harness.build_dataset(cfg)
    cache = PretrainCache(cfg.out_root() / "cache")
    out = []
    for seed in cfg.seeds:
        bundle = cache.skill_bundle(cfg, ds, seed)
        out.append({"seed": seed, "stats": bundle.stats.to_json(), "log": bundle.log[-1:] if bundle.log else []})
    _emit({"bundles": out, "executed": len(cache.executions)})


def cmd_bridge(cfg: ExperimentConfig, args) -> None:
    ds = harness.build_dataset(cfg)
    cache = PretrainCache(cfg.out_root() / "cache")
    spec = harness.env_spec_for(cfg.env)
    out = []
    for seed in cfg.seeds:
        bundle = cache.skill_bundle(cfg, ds, seed)
        for task_id in cfg.tasks:
            task = envmod.make_task(spec, task_id, gamma=cfg.train.gamma)
            rc = dataclasses.replace(cfg.run, task=task_id, seed=seed)
            ident = identify(rc, spec, task, bundle, ds, None)
            path = cfg.out_root() / f"skill_{task_id}_seed{seed}.json"
            path.write_text(ident.to_json())
            out.append({"seed": seed, "task": task_id, "path": str(path), **json.loads(ident.to_json())})
    _emit(out)


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    ds = harness.build_dataset(cfg)
    cache = PretrainCache(cfg.out_root() / "cache")
    spec = harness.env_spec_for(cfg.env)
    out = []
    for seed in cfg.seeds:
        bundle = cache.skill_bundle(cfg, ds, seed)
        for task_id in cfg.tasks:
            task = envmod.make_task(spec, task_id, gamma=cfg.train.gamma)
            rc = dataclasses.replace(cfg.run, task=task_id, seed=seed)
            ident = identify(rc, spec, task, bundle, ds, None)
            ret, succ, _ = evaluate_policy(spec, task, bundle.nets, ident.z_star, cfg.run.eval_episodes,
                                           stream(seed, "eval"))
            out.append({"seed": seed, "task": task_id, "eval_return": ret, "success_rate": succ})
    _emit(out)


def cmd_diag(cfg: ExperimentConfig, args) -> None:
    ds = harness.build_dataset(cfg)
    cache = PretrainCache(cfg.out_root() / "cache")
    out = []
    for seed in cfg.seeds:
        bundle = cache.skill_bundle(cfg, ds, seed)
        pairs = probe_pairs(ds, seed)
        z = hilp.sample_skill(stream(seed, "probe_z"), bundle.d)
        out.append({"seed": seed, "pairs": len(pairs), "mean_dot": diag.feature_dot_product(bundle.nets, pairs, z)})
    _emit(out if len(out) > 1 else out[0])


def cmd_run(cfg: ExperimentConfig, args) -> None:
    report = harness.run_experiment(cfg)
    _emit({"run_dir": report["run_dir"], "failed": report["failed"],
           "pretrain_executions": report["pretrain_executions"]})
    if report["failed"]:
        if any("NumericalFailure" in f["error"] for f in report["failed"]):
            raise NumericalFailure("some runs failed numerically")


def cmd_report(args) -> None:
    if not args.dir:
        raise ConfigError("report needs --dir")
    from .charts import emit_charts

    groups = harness.load_run_dir(Path(args.dir))
    if not groups:
        raise ConfigError(f"no run CSVs in {args.dir}")
    (Path(args.dir) / "aggregate.json").write_text(json.dumps({"groups": groups}, sort_keys=True, indent=1))
    paths = emit_charts(groups, args.dir)
    _emit({"groups": sorted(groups), "charts": [str(p) for p in paths]})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "bridge": cmd_bridge,
    "run": cmd_run,
    "eval": cmd_eval,
    "diag": cmd_diag,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="u2o", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value experiment config")
        p.add_argument("--out", help="output root (default $U2O_OUT or ./runs)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-data":
            p.add_argument("--path", help="dataset file to write")
        if name == "report":
            p.add_argument("--dir", help="run directory holding per-run CSVs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
        else:
            COMMANDS[args.command](load_config(args), args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
