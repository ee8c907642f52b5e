"""Turning a skill-conditioned agent into a task agent.

Skill identification finds the unit skill ``z*`` that best explains the task
reward (least squares on successor features, or the direction to a goal);
reward scale matching normalizes task rewards with their own running
statistics so they line up with the normalized intrinsic rewards seen during
pretraining.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import offline_rl
from .env import Env, EnvSpec, RewardDataset, Task, task_reward
from .hilp import FeatureNet, RunningStats, SkillBundle, sample_skill, successor_feature


class DegenerateReward(ValueError):
    pass


class GoalIndistinct(ValueError):
    pass


DEFAULT_RIDGE = 1e-6


@dataclass
class SkillIdentity:
    z_star: np.ndarray
    residual: float
    method: str  # "lsq" | "goal" | "random"

    def to_json(self) -> str:
        return json.dumps({"z_star": [float(v) for v in self.z_star], "residual": float(self.residual),
                           "method": self.method})

    @classmethod
    def from_json(cls, text: str) -> "SkillIdentity":
        d = json.loads(text)
        return cls(np.asarray(d["z_star"], dtype=np.float64), float(d["residual"]), d["method"])


def solve_skill_regression(features: np.ndarray, rewards: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Unnormalized minimizer of ``sum (r - f.z)^2 + ridge ||z||^2``."""
    F = np.asarray(features, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    A = F.T @ F + ridge * np.eye(F.shape[1])
    return np.linalg.solve(A, F.T @ r)


def identify_skill_lsq(reward_dataset: RewardDataset, feature: FeatureNet, ridge: float = DEFAULT_RIDGE) -> SkillIdentity:
    F = successor_feature(feature, reward_dataset.obs, reward_dataset.next_obs)
    return identify_skill_from_features(F, reward_dataset.rewards, ridge)


def identify_skill_from_features(F: np.ndarray, rewards: np.ndarray, ridge: float = DEFAULT_RIDGE) -> SkillIdentity:
    if len(rewards) == 0:
        raise ValueError("empty reward dataset")
    z = solve_skill_regression(F, rewards, ridge)
    norm = np.linalg.norm(z)
    if norm < 1e-8:
        raise DegenerateReward("regression solution is (numerically) zero")
    residual = float(np.mean((rewards - F @ z) ** 2))
    return SkillIdentity(z / norm, residual, "lsq")


def identify_skill_goal(feature: FeatureNet, s_ref, g) -> SkillIdentity:
    direction = feature(np.asarray(g, dtype=np.float64)) - feature(np.asarray(s_ref, dtype=np.float64))
    norm = np.linalg.norm(direction)
    if norm < 1e-8:
        raise GoalIndistinct("goal and reference state have the same features")
    return SkillIdentity(direction / norm, 0.0, "goal")


def identify_skill_random(rng: np.random.Generator, d: int) -> SkillIdentity:
    return SkillIdentity(sample_skill(rng, d), 0.0, "random")


def collect_reward_dataset_online(
    spec: EnvSpec,
    task: Task,
    bundle: SkillBundle,
    n_transitions: int,
    rng: np.random.Generator,
    config: offline_rl.TrainConfig | None = None,
) -> RewardDataset:
    """Roll out the skill policy with a fresh random skill per episode and
    label every transition with the task reward."""
    config = config or offline_rl.TrainConfig(backbone=bundle.nets.backbone)
    env = Env(spec)
    obs_l, act_l, nxt_l = [], [], []
    s, z = env.reset(rng), sample_skill(rng, bundle.d)
    while len(obs_l) < n_transitions:
        a = offline_rl.act_explore(bundle.nets, s, z, config, rng)[0]
        s_next, done = env.step(a)
        obs_l.append(s)
        act_l.append(a)
        nxt_l.append(s_next)
        s = s_next
        if done:
            s, z = env.reset(rng), sample_skill(rng, bundle.d)
    obs, nxt = np.array(obs_l), np.array(nxt_l)
    acts = np.array(act_l)
    return RewardDataset(obs, acts, nxt, np.asarray(task_reward(task, obs, acts, nxt)), provenance="online_collected")


# -- reward scale matching ---------------------------------------------------


@dataclass
class NormalizerState:
    intrinsic_stats: RunningStats
    task_stats: RunningStats = field(default_factory=RunningStats)
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and self.intrinsic_stats.count < 2:
            raise ValueError("reward matching needs pretraining statistics (count >= 2)")


def match_task_reward(normalizer: NormalizerState, r) -> tuple[NormalizerState, np.ndarray | float]:
    """Update task statistics with ``r`` (scalar or batch), then normalize it.

    Disabled normalizers pass rewards through. Returns 0 while fewer than two
    task rewards have been seen.
    """
    if not normalizer.enabled:
        return normalizer, r
    arr = np.asarray(r, dtype=np.float64)
    stats = normalizer.task_stats.update_batch(arr)
    state = NormalizerState(normalizer.intrinsic_stats, stats, True)
    if stats.count < 2:
        out = np.zeros_like(arr)
    else:
        out = stats.normalize(arr)
    return state, float(out) if out.ndim == 0 else out
