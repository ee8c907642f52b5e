"""Representation diagnostics for critics.

The co-adaptation metric is the mean inner product of the first critic's
penultimate activations at consecutive state-action pairs of the same
episode. High values indicate collapsed, over-aligned features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .bridge import NormalizerState, match_task_reward
from .env import TransitionDataset
from .offline_rl import Nets, encode_actions


class NoEligiblePairs(ValueError):
    pass


@dataclass
class FeaturePairBatch:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


def eligible_pair_starts(dataset: TransitionDataset) -> np.ndarray:
    """Indices ``i`` such that ``i`` and ``i + 1`` lie in the same episode."""
    same = dataset.episode_ends()[:-1] > np.arange(1, len(dataset))
    return np.flatnonzero(same)


def sample_consecutive_pairs(dataset: TransitionDataset, n: int, rng: np.random.Generator) -> FeaturePairBatch:
    starts = eligible_pair_starts(dataset)
    if len(starts) == 0:
        raise NoEligiblePairs("dataset has no episode with two or more steps")
    i = starts[rng.integers(len(starts), size=n)]
    return FeaturePairBatch(dataset.obs[i], dataset.actions[i], dataset.obs[i + 1], dataset.actions[i + 1])


def critic_features(nets: Nets, obs, actions, z=None) -> np.ndarray:
    n = len(obs)
    cond = np.empty((n, 0)) if z is None else np.tile(np.asarray(z, dtype=np.float64), (n, 1))
    x = np.concatenate([obs, cond, encode_actions(nets.action_spec, actions)], axis=1)
    _, zeta = nn.mlp_forward_with_features(nets.critic_spec, nets.critics[0], x)
    return zeta


def feature_dot_product(nets: Nets, batch: FeaturePairBatch, z=None) -> float:
    """Mean of ``zeta(s, a) . zeta(s', a')`` over the batch (first critic)."""
    if nets.cond_dim > 0 and z is None:
        raise ValueError("skill critic needs a conditioning skill")
    zeta = critic_features(nets, batch.obs, batch.actions, z)
    zeta_next = critic_features(nets, batch.next_obs, batch.next_actions, z)
    return float(np.mean(np.sum(zeta * zeta_next, axis=1)))


def reward_stats_probe(rewards, normalizer: NormalizerState) -> dict:
    """Two-pass mean/std of a reward stream before and after streaming normalization."""
    raw = np.asarray(rewards, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty reward stream")
    normed = np.empty_like(raw)
    state = normalizer
    for i, r in enumerate(raw):
        state, normed[i] = match_task_reward(state, r)
    return {
        "raw_mean": float(raw.mean()),
        "raw_std": float(raw.std()),
        "norm_mean": float(normed.mean()),
        "norm_std": float(normed.std()),
    }
