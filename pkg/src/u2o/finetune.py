"""Online fine-tuning and the comparison methods.

* ``u2o``: unsupervised skill pretraining, skill identification, reward scale
  matching, then online fine-tuning with ``z*`` held fixed.
* ``o2o``: offline RL on task-labeled data, then the same online loop.
* ``scratch_with_data``: ``o2o`` without the offline phase.
* ``zero_shot``: evaluate the identified skill with no further training.

Every random draw comes from a named stream derived from the run seed, so a
run is a pure function of its config.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import bridge, diag, hilp, nn, offline_rl
from .env import (
    EnvSpec,
    RewardDataset,
    Task,
    TransitionDataset,
    dynamics,
    goal_reached,
    initial_states,
    label_subset,
    task_reward,
)
from .offline_rl import Nets, TrainConfig

log = logging.getLogger(__name__)

METHODS = ("u2o", "o2o", "scratch_with_data", "zero_shot")
METRIC_COLUMNS = (
    "step", "env_steps", "eval_return", "success_rate", "critic_loss", "value_loss", "actor_loss",
    "feature_dot", "reward_raw_mean", "reward_norm_mean", "reward_norm_std",
)
PROBE_PAIRS = 1024
TRACE_LEN = 10_000

_STREAMS = {
    "features": 1, "skills": 2, "offline": 3, "bridge": 4, "reinit": 5, "env": 6,
    "explore": 7, "sample": 8, "update": 9, "eval": 10, "probe": 11, "probe_z": 12,
}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name]]))


class MissingBundle(ValueError):
    pass


@dataclass
class RunConfig:
    method: str = "u2o"
    env: str = "pointmass"
    task: str = "reach_tr"
    pretrain_steps: int = 100_000
    feature_steps: int = 20_000
    finetune_steps: int = 50_000
    utd_ratio: int = 1
    offline_sample_fraction: float = 0.5
    eval_interval: int = 2_500
    eval_episodes: int = 50
    transfer_value: bool = True
    transfer_policy: bool = True
    reward_matching: bool | None = None  # None: on for dense tasks, off for sparse
    skill_method: str = "auto"  # auto | lsq | goal | random
    reward_fraction: float = 0.002
    buffer_capacity: int | None = None  # None: finetune_steps
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.pretrain_steps >= 0 and self.finetune_steps >= 0 and self.feature_steps >= 0,
             "step counts must be nonnegative"),
            (self.utd_ratio >= 1, "utd_ratio must be a positive integer"),
            (0.0 <= self.offline_sample_fraction <= 1.0, "offline_sample_fraction must be in [0, 1]"),
            (self.eval_interval >= 1 and self.eval_episodes >= 1, "eval_interval/eval_episodes must be positive"),
            (self.skill_method in ("auto", "lsq", "goal", "random"), "unknown skill_method"),
            (0.0 < self.reward_fraction <= 1.0, "reward_fraction must be in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def matching_enabled(self, task: Task) -> bool:
        return (not task.sparse) if self.reward_matching is None else self.reward_matching


@dataclass
class RunResult:
    config: RunConfig
    rows: list[dict] = field(default_factory=list)
    nets: Nets | None = None
    z_star: bridge.SkillIdentity | None = None
    reward_trace_raw: np.ndarray | None = None
    reward_trace_norm: np.ndarray | None = None
    env_step_calls: int = 0
    eval_step_calls: int = 0

    def to_csv(self) -> str:
        return metrics_csv(self.rows)

    @property
    def final(self) -> dict:
        return self.rows[-1]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({k: (int(v) if k in ("step", "env_steps") else float(v)) for k, v in rec.items()})
    return rows


# -- replay ------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring of transitions; oldest entries are overwritten."""

    def __init__(self, capacity: int, obs_dim: int, action_shape: tuple[int, ...], discrete: bool):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, *action_shape), dtype=np.int64 if discrete else np.float64)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, s, a, s_next, r, terminal: bool = False) -> None:
        i = self.inserted % self.capacity
        self.obs[i], self.actions[i], self.next_obs[i] = s, a, s_next
        self.rewards[i], self.terminals[i] = r, float(terminal)
        self.inserted += 1

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("empty replay buffer")
        return rng.integers(len(self), size=n)


def mixed_sample(
    offline: TransitionDataset | None,
    buffer: ReplayBuffer,
    batch_size: int,
    offline_fraction: float,
    rng: np.random.Generator,
    task: Task,
):
    """Draw ``round(fraction * B)`` offline transitions (task reward computed on
    the fly) and the rest from the online buffer.

    Returns ``(obs, actions, next_obs, raw_rewards, terminals, n_offline)``.
    """
    n_off = int(round(offline_fraction * batch_size)) if offline is not None else 0
    if len(buffer) == 0:
        n_off = batch_size
    n_on = batch_size - n_off
    parts = []
    if n_off:
        i = rng.integers(len(offline), size=n_off)
        r = np.atleast_1d(task_reward(task, offline.obs[i], offline.actions[i], offline.next_obs[i]))
        parts.append((offline.obs[i], offline.actions[i], offline.next_obs[i], r, np.zeros(n_off)))
    if n_on:
        j = buffer.sample_indices(n_on, rng)
        parts.append((buffer.obs[j], buffer.actions[j], buffer.next_obs[j], buffer.rewards[j], buffer.terminals[j]))
    cols = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    return (*cols, n_off)


# -- evaluation --------------------------------------------------------------


def evaluate_policy(
    spec: EnvSpec, task: Task, policy, z, n_episodes: int, rng: np.random.Generator
) -> tuple[float, float, int]:
    """Deterministic rollouts of ``n_episodes`` episodes run side by side.

    ``policy`` is either ``Nets`` or a callable mapping an observation batch to
    actions. Success means the goal region was entered at some step. Returns
    ``(mean return, success rate, env steps used)``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if isinstance(policy, Nets):
        nets = policy
        cond = np.empty((n_episodes, 0)) if z is None else np.tile(np.asarray(z, dtype=np.float64), (n_episodes, 1))
        act = lambda obs: offline_rl.act_deterministic(nets, obs, cond)
    else:
        act = policy
    s = initial_states(spec, rng, n_episodes)
    returns = np.zeros(n_episodes)
    success = np.zeros(n_episodes, dtype=bool)
    for _ in range(spec.max_episode_len):
        a = act(s)
        s_next = dynamics(spec, s, a)
        returns += task_reward(task, s, a, s_next)
        success |= goal_reached(task, s_next)
        s = s_next
    return float(returns.mean()), float(success.mean()), n_episodes * spec.max_episode_len


# -- pretraining drivers -----------------------------------------------------


def probe_pairs(dataset: TransitionDataset, seed: int) -> diag.FeaturePairBatch:
    return diag.sample_consecutive_pairs(dataset, PROBE_PAIRS, stream(seed, "probe"))


def pretrain_u2o(
    dataset: TransitionDataset,
    d: int,
    config: TrainConfig,
    pretrain_steps: int,
    feature_steps: int,
    seed: int,
    log_interval: int = 2_500,
    hilbert: hilp.HilbertConfig | None = None,
) -> hilp.SkillBundle:
    """Hilbert features, then skill policy/critic training on normalized
    intrinsic rewards. Logs the feature dot product of the skill critic with a
    fixed seed-derived skill."""
    hilbert = hilbert or hilp.HilbertConfig(gamma=config.gamma, lr=config.lr_feature,
                                            batch_size=config.batch_size)
    feature = hilp.train_hilbert_features(dataset, d, feature_steps, stream(seed, "features"), hilbert,
                                          hidden=config.hidden)
    pairs = probe_pairs(dataset, seed)
    z_probe = hilp.sample_skill(stream(seed, "probe_z"), d)
    rows = []

    def record(step, nets, report):
        if (step + 1) % log_interval == 0 or step + 1 == pretrain_steps:
            rows.append({"step": step + 1, "feature_dot": diag.feature_dot_product(nets, pairs, z_probe), **report})

    bundle = hilp.pretrain_skills(dataset, feature, config, pretrain_steps, stream(seed, "skills"), record)
    bundle.log = rows
    return bundle


def pretrain_o2o(
    dataset: TransitionDataset,
    task: Task,
    config: TrainConfig,
    pretrain_steps: int,
    seed: int,
    log_interval: int = 2_500,
) -> tuple[Nets, list[dict]]:
    """Supervised offline RL on the task-labeled dataset (no skills)."""
    rng = stream(seed, "offline")
    init_rng, loop_rng = rng.spawn(2)
    nets = offline_rl.make_nets(dataset.spec.obs_dim, 0, dataset.spec.action_spec, config, init_rng)
    rewards = np.asarray(task_reward(task, dataset.obs, dataset.actions, dataset.next_obs))
    pairs = probe_pairs(dataset, seed)
    rows = []
    for step in range(pretrain_steps):
        idx = loop_rng.integers(len(dataset), size=config.batch_size)
        batch = offline_rl.make_batch(dataset.obs[idx], dataset.actions[idx], dataset.next_obs[idx], rewards[idx])
        nets, report = offline_rl.update_step(nets, batch, config, loop_rng)
        if (step + 1) % log_interval == 0 or step + 1 == pretrain_steps:
            rows.append({"step": step + 1, "feature_dot": diag.feature_dot_product(nets, pairs), **report})
    return nets, rows


# -- skill identification ----------------------------------------------------


def identify(
    cfg: RunConfig, spec: EnvSpec, task: Task, bundle: hilp.SkillBundle,
    dataset: TransitionDataset, reward_dataset: RewardDataset | None,
) -> bridge.SkillIdentity:
    rng = stream(cfg.seed, "bridge")
    method = cfg.skill_method
    if method == "auto":
        method = "goal" if task.sparse else "lsq"
    if method == "random":
        return bridge.identify_skill_random(rng, bundle.d)
    if method == "goal":
        s_ref = initial_states(spec, rng, 1)[0]
        return bridge.identify_skill_goal(bundle.feature, s_ref, np.asarray(task.goal))
    if reward_dataset is None:
        reward_dataset = label_subset(dataset, task, cfg.reward_fraction, rng)
    return bridge.identify_skill_lsq(reward_dataset, bundle.feature)


def transferred_nets(bundle: hilp.SkillBundle, cfg: RunConfig, config: TrainConfig) -> Nets:
    """Pretrained nets with untransferred parts reinitialized and fresh optimizers."""
    nets = bundle.nets
    fresh = offline_rl.make_nets(nets.obs_dim, nets.cond_dim, nets.action_spec, config, stream(cfg.seed, "reinit"))
    updates = {}
    if not cfg.transfer_value:
        updates.update(critics=fresh.critics, critic_targets=fresh.critic_targets, value=fresh.value)
    if not cfg.transfer_policy:
        updates.update(actor=fresh.actor, actor_target=fresh.actor_target)
    nets = nets.with_params(**updates)
    return nets.with_params(opt=offline_rl.fresh_optimizers(nets, config))


# -- online loop -------------------------------------------------------------


def _nanmean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def online_loop(
    cfg: RunConfig,
    config: TrainConfig,
    spec: EnvSpec,
    task: Task,
    nets: Nets,
    z: np.ndarray | None,
    dataset: TransitionDataset | None,
    normalizer: bridge.NormalizerState | None,
    pairs: diag.FeaturePairBatch | None,
) -> RunResult:
    seed = cfg.seed
    env_rng, explore_rng = stream(seed, "env"), stream(seed, "explore")
    sample_rng, update_rng, eval_rng = stream(seed, "sample"), stream(seed, "update"), stream(seed, "eval")
    result = RunResult(cfg)
    a_shape = () if spec.action_spec.discrete else (spec.action_spec.dim,)
    buffer = ReplayBuffer(cfg.buffer_capacity or max(cfg.finetune_steps, 1), spec.obs_dim, a_shape,
                          spec.action_spec.discrete)
    zvec = np.empty(0) if z is None else np.asarray(z, dtype=np.float64)
    trace_raw: deque = deque(maxlen=TRACE_LEN)
    trace_norm: deque = deque(maxlen=TRACE_LEN)
    window = {"critic_loss": [], "value_loss": [], "actor_loss": [], "raw": [], "norm": []}
    updates = 0

    def record(env_steps: int):
        ret, succ, used = evaluate_policy(spec, task, nets, z, cfg.eval_episodes, eval_rng)
        result.eval_step_calls += used
        raw = np.concatenate(window["raw"]) if window["raw"] else np.empty(0)
        norm = np.concatenate(window["norm"]) if window["norm"] else np.empty(0)
        result.rows.append({
            "step": updates,
            "env_steps": env_steps,
            "eval_return": ret,
            "success_rate": succ,
            "critic_loss": _nanmean(window["critic_loss"]),
            "value_loss": _nanmean(window["value_loss"]),
            "actor_loss": _nanmean(window["actor_loss"]),
            "feature_dot": diag.feature_dot_product(nets, pairs, z) if pairs is not None else math.nan,
            "reward_raw_mean": _nanmean(raw),
            "reward_norm_mean": _nanmean(norm),
            "reward_norm_std": float(norm.std()) if len(norm) else math.nan,
        })
        for v in window.values():
            v.clear()

    record(0)
    s = initial_states(spec, env_rng, 1)[0]
    t_episode = 0
    for t in range(cfg.finetune_steps):
        a = offline_rl.act_explore(nets, s, zvec, config, explore_rng)[0]
        s_next = dynamics(spec, s, a)[0]
        result.env_step_calls += 1
        t_episode += 1
        buffer.add(s, a, s_next, task_reward(task, s, a, s_next))
        if t_episode >= spec.max_episode_len:
            s, t_episode = initial_states(spec, env_rng, 1)[0], 0
        else:
            s = s_next
        for _ in range(cfg.utd_ratio):
            obs, acts, nxt, raw, term, _ = mixed_sample(
                dataset, buffer, config.batch_size, cfg.offline_sample_fraction, sample_rng, task)
            if normalizer is not None:
                normalizer, rew = bridge.match_task_reward(normalizer, raw)
            else:
                rew = raw
            cond = None if z is None else np.broadcast_to(zvec, (len(obs), len(zvec)))
            batch = offline_rl.make_batch(obs, acts, nxt, rew, term, cond)
            nets, report = offline_rl.update_step(nets, batch, config, update_rng)
            updates += 1
            for k in ("critic_loss", "value_loss", "actor_loss"):
                window[k].append(report[k])
            window["raw"].append(raw)
            window["norm"].append(np.asarray(rew))
            trace_raw.extend(raw)
            trace_norm.extend(np.asarray(rew))
        if (t + 1) % cfg.eval_interval == 0:
            record(t + 1)
    result.nets = nets
    result.reward_trace_raw = np.asarray(trace_raw)
    result.reward_trace_norm = np.asarray(trace_norm)
    return result


# -- methods -----------------------------------------------------------------


def run_u2o(
    cfg: RunConfig,
    config: TrainConfig,
    spec: EnvSpec,
    task: Task,
    bundle: hilp.SkillBundle | None,
    dataset: TransitionDataset,
    reward_dataset: RewardDataset | None = None,
) -> RunResult:
    if bundle is None:
        raise MissingBundle("u2o needs a pretrained skill bundle")
    identity = identify(cfg, spec, task, bundle, dataset, reward_dataset)
    nets = transferred_nets(bundle, cfg, config)
    normalizer = None
    if cfg.matching_enabled(task):
        normalizer = bridge.NormalizerState(bundle.stats, hilp.RunningStats(), True)
    result = online_loop(cfg, config, spec, task, nets, identity.z_star, dataset, normalizer,
                         probe_pairs(dataset, cfg.seed))
    result.z_star = identity
    return result


def run_zero_shot(
    cfg: RunConfig,
    config: TrainConfig,
    spec: EnvSpec,
    task: Task,
    bundle: hilp.SkillBundle | None,
    dataset: TransitionDataset,
    reward_dataset: RewardDataset | None = None,
) -> RunResult:
    """Identify ``z*`` and evaluate the frozen skill policy: one metrics row."""
    if bundle is None:
        raise MissingBundle("zero-shot needs a pretrained skill bundle")
    frozen = RunConfig(**{**cfg.__dict__, "finetune_steps": 0, "transfer_value": True, "transfer_policy": True})
    return run_u2o(frozen, config, spec, task, bundle, dataset, reward_dataset)


def run_o2o(
    cfg: RunConfig, config: TrainConfig, spec: EnvSpec, task: Task, dataset: TransitionDataset,
    pretrained: Nets | None = None,
) -> RunResult:
    """Offline RL on task rewards for ``pretrain_steps`` then online fine-tuning.

    ``pretrained`` skips the offline phase (the harness caches it).
    """
    nets = pretrained
    if nets is None:
        nets, _ = pretrain_o2o(dataset, task, config, cfg.pretrain_steps, cfg.seed)
    nets = nets.with_params(opt=offline_rl.fresh_optimizers(nets, config))
    return online_loop(cfg, config, spec, task, nets, None, dataset, None, probe_pairs(dataset, cfg.seed))


def run_scratch_with_data(cfg: RunConfig, config: TrainConfig, spec: EnvSpec, task: Task,
                          dataset: TransitionDataset) -> RunResult:
    """Online RL from random init, with the offline data mixed into replay."""
    scratch = RunConfig(**{**cfg.__dict__, "pretrain_steps": 0})
    result = run_o2o(scratch, config, spec, task, dataset)
    result.config = cfg
    return result
