"""Experiment configuration, cached pretraining and multi-run orchestration."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import logging
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as envmod
from . import hilp, nn, offline_rl
from .finetune import (
    METHODS,
    RunConfig,
    RunResult,
    metrics_csv,
    pretrain_o2o,
    pretrain_u2o,
    read_metrics_csv,
    run_o2o,
    run_scratch_with_data,
    run_u2o,
    run_zero_shot,
)
from .offline_rl import Nets, TrainConfig

log = logging.getLogger(__name__)

DEFAULT_OUT = "runs"


class ConfigError(ValueError):
    pass


class UnknownKey(ConfigError):
    pass


class RangeViolation(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


@dataclass
class DatasetRecipe:
    path: str | None = None
    behavior: str = "epsilon_random_walk"
    n: int = 100_000
    seed: int = 0
    start: str = "uniform"  # gridworld only: "uniform" or "fixed"


@dataclass
class ExperimentConfig:
    methods: list[str]
    env: str
    tasks: list[str]
    seeds: list[int]
    d: int = 8
    backbone: str = "auto"
    out: str | None = None
    name: str = "exp"
    run: RunConfig = field(default_factory=RunConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hilbert: hilp.HilbertConfig = field(default_factory=hilp.HilbertConfig)
    dataset: DatasetRecipe = field(default_factory=DatasetRecipe)

    def out_root(self) -> Path:
        return Path(self.out or os.environ.get("U2O_OUT") or DEFAULT_OUT)

    def digest(self) -> str:
        return _hash(_jsonable(dataclasses.asdict(self) | {"out": None}))


# -- parsing -----------------------------------------------------------------

_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"method", "env", "task", "seed"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"backbone"}
_HILBERT_KEYS = {f.name for f in dataclasses.fields(hilp.HilbertConfig)}
_DATASET_KEYS = {f.name for f in dataclasses.fields(DatasetRecipe)}
_TOP_KEYS = {"method", "env", "task", "seed", "d", "backbone", "out", "name"}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [] if not inner else [_parse_value(p) for p in inner.split(",")]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _listify(v) -> list:
    return v if isinstance(v, list) else [v]


def env_spec_for(env_id: str) -> envmod.EnvSpec:
    if env_id == "pointmass":
        return envmod.pointmass()
    if env_id.startswith("gridworld"):
        try:
            size = int(env_id[len("gridworld"):])
        except ValueError:
            raise RangeViolation(f"bad gridworld id {env_id!r}") from None
        if size < 2:
            raise RangeViolation("gridworld size must be >= 2")
        return envmod.gridworld(size)
    raise RangeViolation(f"unknown env {env_id!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse a flat ``key=value`` document (``#`` comments, dotted sections)."""
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        raw[key] = _parse_value(value)

    top, run, train, hil, data = {}, {}, {}, {}, {}
    for key, value in raw.items():
        section, _, name = key.rpartition(".")
        if section == "":
            if key in _TOP_KEYS:
                top[key] = value
            elif key in _RUN_KEYS:
                run[key] = value
            elif key in _TRAIN_KEYS:
                train[key] = value
            else:
                raise UnknownKey(key)
        elif section == "train" and name in _TRAIN_KEYS:
            train[name] = value
        elif section == "run" and name in _RUN_KEYS:
            run[name] = value
        elif section == "hilbert" and name in _HILBERT_KEYS:
            hil[name] = value
        elif section == "dataset" and name in _DATASET_KEYS:
            data[name] = value
        else:
            raise UnknownKey(key)

    for req in ("method", "env", "task", "seed"):
        if req not in top:
            raise MissingRequired(req)
    methods = [str(m) for m in _listify(top["method"])]
    tasks = [str(t) for t in _listify(top["task"])]
    seeds = _listify(top["seed"])
    if not seeds or any(not isinstance(s, int) for s in seeds) or len(set(seeds)) != len(seeds):
        raise RangeViolation("seed must be a nonempty list of distinct integers")
    for m in methods:
        if m not in METHODS:
            raise RangeViolation(f"unknown method {m!r}")
    env_id = str(top["env"])
    spec = env_spec_for(env_id)
    for t in tasks:
        try:
            envmod.make_task(spec, t)
        except KeyError as e:
            raise RangeViolation(str(e)) from None

    backbone = top.get("backbone", "auto")
    if backbone == "auto":
        backbone = "iql" if spec.action_spec.discrete else "td3"
    if env_id == "pointmass":
        train.setdefault("batch_size", 128)
    try:
        train_cfg = TrainConfig(backbone=backbone, **train)
        run_cfg = RunConfig(method=methods[0], env=env_id, task=tasks[0], seed=seeds[0], **run)
        hil.setdefault("gamma", train_cfg.gamma)
        hil.setdefault("lr", train_cfg.lr_feature)
        hil.setdefault("batch_size", train_cfg.batch_size)
        hil_cfg = hilp.HilbertConfig(**hil)
        recipe = DatasetRecipe(**data)
    except (ValueError, TypeError) as e:
        raise RangeViolation(str(e)) from None
    if not 0.0 < hil_cfg.gamma < 1.0 or not 0.0 < hil_cfg.expectile_tau < 1.0:
        raise RangeViolation("hilbert gamma and expectile_tau must be in (0, 1)")
    if recipe.behavior not in envmod.BEHAVIORS or recipe.n < 1 or recipe.start not in ("uniform", "fixed"):
        raise RangeViolation("bad dataset recipe")
    if recipe.path is not None and not Path(recipe.path).exists():
        raise RangeViolation(f"dataset file {recipe.path} does not exist")
    d = top.get("d", 8)
    if not isinstance(d, int) or d < 1:
        raise RangeViolation("d must be a positive integer")
    return ExperimentConfig(
        methods=methods, env=env_id, tasks=tasks, seeds=seeds, d=d, backbone=backbone,
        out=top.get("out"), name=str(top.get("name", "exp")),
        run=run_cfg, train=train_cfg, hilbert=hil_cfg, dataset=recipe,
    )


# -- datasets and caches -----------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(cfg: ExperimentConfig) -> envmod.TransitionDataset:
    if cfg.dataset.path:
        return envmod.load_dataset(cfg.dataset.path)
    spec = env_spec_for(cfg.env)
    if spec.env_id == "gridworld" and cfg.dataset.start == "uniform":
        spec = dataclasses.replace(spec, start=None)
    ds = envmod.collect_offline_dataset(spec, cfg.dataset.behavior, cfg.dataset.n,
                                        np.random.default_rng(cfg.dataset.seed))
    # evaluation and online interaction always use the env's own start state
    ds.spec = env_spec_for(cfg.env)
    return ds


def dataset_digest(ds: envmod.TransitionDataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.obs, ds.actions, ds.next_obs, ds.dones):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _nets_meta(nets: Nets) -> dict:
    return {
        "action_spec": nets.action_spec.to_json(), "obs_dim": nets.obs_dim, "cond_dim": nets.cond_dim,
        "backbone": nets.backbone, "critic": list(nets.critic_spec.widths), "actor": list(nets.actor_spec.widths),
        "actor_out": nets.actor_spec.output_activation,
        "value": list(nets.value_spec.widths) if nets.value_spec else None,
    }


def save_nets(directory: Path, nets: Nets) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, params in nets.named_params().items():
        nn.save_checkpoint(directory / f"{name}.u2o", params)
    (directory / "nets.json").write_text(json.dumps(_nets_meta(nets), sort_keys=True))


def load_nets(directory: Path, config: TrainConfig) -> Nets:
    meta = json.loads((directory / "nets.json").read_text())
    load = lambda name: nn.load_checkpoint(directory / f"{name}.u2o")
    nets = Nets(
        action_spec=envmod.ActionSpec.from_json(meta["action_spec"]),
        obs_dim=meta["obs_dim"], cond_dim=meta["cond_dim"], backbone=meta["backbone"],
        critic_spec=nn.MlpSpec(tuple(meta["critic"])),
        actor_spec=nn.MlpSpec(tuple(meta["actor"]), output_activation=meta["actor_out"]),
        value_spec=nn.MlpSpec(tuple(meta["value"])) if meta["value"] else None,
        critics=[load("critic0"), load("critic1")],
        critic_targets=[load("critic_target0"), load("critic_target1")],
        actor=load("actor"),
        actor_target=load("actor_target") if meta["backbone"] == "td3" else None,
        value=load("value") if meta["value"] else None,
    )
    return nets.with_params(opt=offline_rl.fresh_optimizers(nets, config))


def save_bundle(directory: Path, bundle: hilp.SkillBundle) -> None:
    """One checkpoint per net plus a JSON sidecar holding reward statistics."""
    save_nets(directory, bundle.nets)
    nn.save_checkpoint(directory / "feature.u2o", bundle.feature.params)
    nn.save_checkpoint(directory / "feature_target.u2o", bundle.feature.target)
    sidecar = {"stats": bundle.stats.to_json(), "d": bundle.d, "feature": list(bundle.feature.spec.widths),
               "log": _jsonable(bundle.log)}
    (directory / "stats.json").write_text(json.dumps(sidecar, sort_keys=True))


def load_bundle(directory: Path, config: TrainConfig) -> hilp.SkillBundle:
    sidecar = json.loads((directory / "stats.json").read_text())
    fspec = nn.MlpSpec(tuple(sidecar["feature"]))
    feature = hilp.FeatureNet(fspec, nn.load_checkpoint(directory / "feature.u2o"),
                              nn.load_checkpoint(directory / "feature_target.u2o"))
    return hilp.SkillBundle(load_nets(directory, config), feature, hilp.RunningStats.from_json(sidecar["stats"]),
                            int(sidecar["d"]), sidecar.get("log", []))


def _pretrain_key(cfg: ExperimentConfig, ds_digest: str, seed: int, kind: str, task: str | None = None) -> str:
    payload = {
        "kind": kind, "dataset": ds_digest, "d": cfg.d, "backbone": cfg.backbone, "seed": seed,
        "train": dataclasses.asdict(cfg.train), "pretrain_steps": cfg.run.pretrain_steps,
        "eval_interval": cfg.run.eval_interval,
    }
    if kind == "u2o":
        payload |= {"hilbert": dataclasses.asdict(cfg.hilbert), "feature_steps": cfg.run.feature_steps}
    else:
        payload |= {"task": task}
    return _hash(_jsonable(payload))


@dataclass
class PretrainCache:
    """Disk cache of pretrained bundles. ``executions`` counts real pretraining runs."""

    root: Path
    executions: list[tuple] = field(default_factory=list)

    def skill_bundle(self, cfg: ExperimentConfig, ds: envmod.TransitionDataset, seed: int) -> hilp.SkillBundle:
        key = _pretrain_key(cfg, dataset_digest(ds), seed, "u2o")
        directory = self.root / f"u2o-{key}"
        if not (directory / "stats.json").exists():
            self.executions.append(("u2o", seed))
            log.info("pretraining skills (seed %d) -> %s", seed, directory)
            bundle = pretrain_u2o(ds, cfg.d, cfg.train, cfg.run.pretrain_steps, cfg.run.feature_steps, seed,
                                  log_interval=cfg.run.eval_interval, hilbert=cfg.hilbert)
            tmp = directory.with_name(directory.name + ".tmp")
            save_bundle(tmp, bundle)
            tmp.rename(directory)
        # always reload so fresh and cached runs see identical float32-rounded weights
        return load_bundle(directory, cfg.train)

    def task_nets(self, cfg: ExperimentConfig, ds: envmod.TransitionDataset, task: envmod.Task, seed: int) -> Nets:
        key = _pretrain_key(cfg, dataset_digest(ds), seed, "o2o", task.task_id)
        directory = self.root / f"o2o-{key}"
        if not (directory / "nets.json").exists():
            self.executions.append(("o2o", seed, task.task_id))
            nets, rows = pretrain_o2o(ds, task, cfg.train, cfg.run.pretrain_steps, seed,
                                      log_interval=cfg.run.eval_interval)
            tmp = directory.with_name(directory.name + ".tmp")
            save_nets(tmp, nets)
            (tmp / "log.json").write_text(json.dumps(_jsonable(rows)))
            tmp.rename(directory)
        return load_nets(directory, cfg.train)


# -- orchestration -----------------------------------------------------------


def run_filename(method: str, env: str, task: str, seed: int) -> str:
    return f"{method}_{env}_{task}_seed{seed}.csv"


def execute_run(
    cfg: ExperimentConfig, method: str, task_id: str, seed: int, ds: envmod.TransitionDataset, cache: PretrainCache
) -> RunResult:
    spec = env_spec_for(cfg.env)
    task = envmod.make_task(spec, task_id, gamma=cfg.train.gamma)
    rc = dataclasses.replace(cfg.run, method=method, task=task_id, seed=seed)
    if method == "u2o":
        return run_u2o(rc, cfg.train, spec, task, cache.skill_bundle(cfg, ds, seed), ds)
    if method == "zero_shot":
        return run_zero_shot(rc, cfg.train, spec, task, cache.skill_bundle(cfg, ds, seed), ds)
    if method == "o2o":
        return run_o2o(rc, cfg.train, spec, task, ds, cache.task_nets(cfg, ds, task, seed))
    return run_scratch_with_data(rc, cfg.train, spec, task, ds)


def fresh_run_dir(root: Path, name: str) -> Path:
    """``root/name``, or ``root/name_1``, ``root/name_2``... if taken."""
    candidate, k = root / name, 0
    while candidate.exists():
        k += 1
        candidate = root / f"{name}_{k}"
    candidate.mkdir(parents=True)
    return candidate


def aggregate(runs: dict[tuple[str, str, str, int], list[dict]]) -> dict:
    """Mean and population std of eval metrics across seeds at each env_steps
    checkpoint, per (method, env, task). Checkpoints missing from any seed are
    dropped."""
    groups: dict[tuple[str, str, str], dict[int, list[dict]]] = {}
    for (method, env_id, task, seed), rows in sorted(runs.items()):
        groups.setdefault((method, env_id, task), {})[seed] = rows
    report = {}
    for (method, env_id, task), by_seed in sorted(groups.items()):
        common = set.intersection(*(set(r["env_steps"] for r in rows) for rows in by_seed.values()))
        points = []
        for step in sorted(common):
            vals = {k: [next(r[k] for r in rows if r["env_steps"] == step) for rows in by_seed.values()]
                    for k in ("eval_return", "success_rate")}
            points.append({
                "env_steps": step,
                "eval_return_mean": float(np.mean(vals["eval_return"])),
                "eval_return_std": float(np.std(vals["eval_return"])),
                "success_rate_mean": float(np.mean(vals["success_rate"])),
                "success_rate_std": float(np.std(vals["success_rate"])),
                "n_seeds": len(by_seed),
            })
        report[f"{method}/{env_id}/{task}"] = {
            "method": method, "env": env_id, "task": task, "seeds": sorted(by_seed), "points": points,
        }
    return report


def run_experiment(cfg: ExperimentConfig, charts: bool = True) -> dict:
    """Run every (seed, task, method); pretraining is shared across tasks and
    methods of a seed through the cache. Writes per-run CSVs, ``aggregate.json``
    and charts into a fresh run directory."""
    root = cfg.out_root()
    root.mkdir(parents=True, exist_ok=True)
    run_dir = fresh_run_dir(root, cfg.name)
    cache = PretrainCache(root / "cache")
    ds = build_dataset(cfg)
    runs, failed = {}, []
    for seed in cfg.seeds:
        for task_id in cfg.tasks:
            for method in cfg.methods:
                try:
                    result = execute_run(cfg, method, task_id, seed, ds, cache)
                except Exception as e:  # one bad seed must not sink its siblings
                    log.error("run %s/%s/seed%d failed: %s", method, task_id, seed, e)
                    failed.append({"method": method, "task": task_id, "seed": seed, "error": repr(e),
                                   "traceback": traceback.format_exc()})
                    continue
                (run_dir / run_filename(method, cfg.env, task_id, seed)).write_text(result.to_csv())
                runs[(method, cfg.env, task_id, seed)] = result.rows
    report = {
        "config_digest": cfg.digest(),
        "groups": aggregate(runs),
        "failed": [{k: v for k, v in f.items() if k != "traceback"} for f in failed],
    }
    (run_dir / "aggregate.json").write_text(json.dumps(_jsonable(report), sort_keys=True, indent=1))
    if charts and runs:
        from .charts import emit_charts

        emit_charts(report["groups"], run_dir)
    # cache hits depend on what ran before, so this stays out of aggregate.json
    report["pretrain_executions"] = [list(e) for e in cache.executions]
    report["failed"] = failed
    report["run_dir"] = str(run_dir)
    return report


def load_run_dir(directory: Path) -> dict:
    """Re-aggregate CSVs found in a run directory."""
    runs = {}
    for path in sorted(Path(directory).glob("*_seed*.csv")):
        stem = path.stem
        head, _, seed = stem.rpartition("_seed")
        method = next((m for m in sorted(METHODS, key=len, reverse=True) if head.startswith(m + "_")), None)
        if method is None:
            continue
        env_id, _, task = head[len(method) + 1:].partition("_")
        runs[(method, env_id, task, int(seed))] = read_metrics_csv(path.read_text())
    return aggregate(runs)
