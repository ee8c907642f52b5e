"""Unsupervised skill pretraining with Hilbert features.

A feature net ``xi`` is trained so that ``-||xi(s) - xi(g)||`` behaves like a
goal-conditioned value (reward -1 per step until the goal). Skills are unit
vectors ``z``; the intrinsic reward of a transition is ``(xi(s') - xi(s)) . z``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, offline_rl
from .env import TransitionDataset
from .nn import Params
from .offline_rl import Nets, TrainConfig

log = logging.getLogger(__name__)


class InsufficientStats(ValueError):
    pass


class NoCompleteEpisodes(ValueError):
    pass


# -- running statistics ------------------------------------------------------


@dataclass
class RunningStats:
    """Streaming count / mean / sum of squared deviations (population variance)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> "RunningStats":
        count = self.count + 1
        delta = x - self.mean
        mean = self.mean + delta / count
        return RunningStats(count, mean, self.m2 + delta * (x - mean))

    def update_batch(self, xs) -> "RunningStats":
        """Merge a batch (Chan et al. parallel form of the Welford update)."""
        xs = np.asarray(xs, dtype=np.float64).reshape(-1)
        n = len(xs)
        if n == 0:
            return self
        b_mean = float(xs.mean())
        b_m2 = float(np.sum((xs - b_mean) ** 2))
        count = self.count + n
        delta = b_mean - self.mean
        mean = self.mean + delta * n / count
        m2 = self.m2 + b_m2 + delta * delta * self.count * n / count
        return RunningStats(count, mean, m2)

    @property
    def var(self) -> float:
        if self.count < 1:
            raise InsufficientStats("no samples")
        return self.m2 / self.count

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    def normalize(self, x):
        if self.count < 2:
            raise InsufficientStats(f"need at least 2 samples, have {self.count}")
        return (np.asarray(x, dtype=np.float64) - self.mean) / (self.std + 1e-8)

    def to_json(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_json(cls, d: dict) -> "RunningStats":
        return cls(int(d["count"]), float(d["mean"]), float(d["m2"]))


def running_stats_update(stats: RunningStats, x: float) -> RunningStats:
    return stats.update(x)


def normalize(stats: RunningStats, x):
    return stats.normalize(x)


# -- skills ------------------------------------------------------------------


def sample_skill(rng: np.random.Generator, d: int, n: int | None = None) -> np.ndarray:
    """Uniform sample(s) on the unit sphere in R^d."""
    if d < 1:
        raise ValueError("d must be >= 1")
    shape = (1 if n is None else n, d)
    z = rng.standard_normal(shape)
    norms = np.linalg.norm(z, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        z[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(z, axis=1)
    z = z / norms[:, None]
    return z[0] if n is None else z


@dataclass
class FeatureNet:
    spec: nn.MlpSpec
    params: Params
    target: Params

    @property
    def dim(self) -> int:
        return self.spec.out_dim

    def __call__(self, obs) -> np.ndarray:
        return nn.mlp_forward(self.spec, self.params, obs)


def make_feature_net(obs_dim: int, d: int, hidden, rng: np.random.Generator) -> FeatureNet:
    spec = nn.MlpSpec((obs_dim, *hidden, d))
    params = nn.init_params(spec, rng)
    return FeatureNet(spec, params, nn.copy_params(params))


def successor_feature(feature: FeatureNet, s, s_next) -> np.ndarray:
    return feature(s_next) - feature(s)


def intrinsic_reward(feature: FeatureNet, s, s_next, z) -> np.ndarray | float:
    f = successor_feature(feature, s, s_next)
    r = np.sum(f * np.asarray(z), axis=-1)
    return float(r) if np.ndim(r) == 0 else r


# -- Hilbert feature learning --------------------------------------------------


@dataclass
class HilbertConfig:
    gamma: float = 0.98
    expectile_tau: float = 0.9
    lr: float = 5e-4
    polyak_coeff: float = 0.005
    batch_size: int = 256
    goal_tolerance: float | None = None  # None: exact cell (grid) / 0.05 (pointmass)
    p_next: float = 0.2
    p_future: float = 0.5
    p_random: float = 0.3


def goal_tolerance_for(dataset: TransitionDataset, cfg: HilbertConfig) -> float:
    if cfg.goal_tolerance is not None:
        return cfg.goal_tolerance
    if dataset.spec.env_id == "gridworld":
        return 0.25 / dataset.spec.size
    return 0.05


def sample_goals(dataset: TransitionDataset, idx: np.ndarray, cfg: HilbertConfig, rng: np.random.Generator):
    """Goal per element: s' (p_next), geometric future state of the same
    episode (p_future), or a uniformly random dataset state (p_random)."""
    n = len(idx)
    ends = dataset.episode_ends()[idx]
    offset = rng.geometric(1.0 - cfg.gamma, size=n) - 1
    future = np.minimum(idx + offset, ends - 1)
    rand = rng.integers(len(dataset), size=n)
    u = rng.random(n)
    goals = np.where(
        (u < cfg.p_next)[:, None], dataset.next_obs[idx],
        np.where((u < cfg.p_next + cfg.p_future)[:, None], dataset.next_obs[future], dataset.next_obs[rand]),
    )
    return goals


def hilbert_value(feature_spec, params, s, g) -> np.ndarray:
    phi_s = nn.mlp_forward(feature_spec, params, s)
    phi_g = nn.mlp_forward(feature_spec, params, g)
    return -np.linalg.norm(phi_s - phi_g, axis=-1)


def hilbert_feature_loss(
    feature: FeatureNet, s, s_next, g, tau: float, gamma: float, tolerance: float
) -> tuple[float, dict[str, Params]]:
    """Expectile TD loss of ``V(s, g) = -||xi(s) - xi(g)||``.

    Target ``r + gamma * (1 - m) * V_target(s', g)`` with ``r = -1`` and
    ``m = 0`` unless ``s'`` is within ``tolerance`` of ``g``, where ``r = 0``
    and the bootstrap is masked.
    """
    n = len(s)
    reached = np.linalg.norm(s_next - g, axis=1) <= tolerance
    r = reached.astype(np.float64) - 1.0
    v_next = hilbert_value(feature.spec, feature.target, s_next, g)
    target = r + gamma * (1.0 - reached) * v_next
    x = np.concatenate([s, g], axis=0)
    phi, cache = nn.forward_cached(feature.spec, feature.params, x)
    diff = phi[:n] - phi[n:]
    dist = np.linalg.norm(diff, axis=1)
    u = target + dist  # target - V(s, g)
    w = np.abs(tau - (u < 0))
    loss = float(np.mean(w * u * u))
    # dL/ddist = 2 w u / n; ddist/ddiff = diff / dist (zero gradient at dist = 0)
    safe = np.where(dist > 0, dist, 1.0)
    ddiff = ((2.0 * w * u / n) / safe * (dist > 0))[:, None] * diff
    g_out = np.concatenate([ddiff, -ddiff], axis=0)
    grads, _ = nn.backward(feature.spec, feature.params, cache, g_out, input_grad=False)
    return loss, {"feature": grads}


def train_hilbert_features(
    dataset: TransitionDataset,
    d: int,
    n_steps: int,
    rng: np.random.Generator,
    cfg: HilbertConfig | None = None,
    hidden=(64, 64),
    callback=None,
) -> FeatureNet:
    cfg = cfg or HilbertConfig()
    if dataset.n_episodes < 1 or len(dataset) < 2:
        raise NoCompleteEpisodes("dataset has no complete episodes")
    init_rng, loop_rng = rng.spawn(2)
    feature = make_feature_net(dataset.spec.obs_dim, d, hidden, init_rng)
    opt = nn.adam_init(feature.params, cfg.lr)
    tol = goal_tolerance_for(dataset, cfg)
    for step in range(n_steps):
        idx = loop_rng.integers(len(dataset), size=cfg.batch_size)
        goals = sample_goals(dataset, idx, cfg, loop_rng)
        loss, g = hilbert_feature_loss(
            feature, dataset.obs[idx], dataset.next_obs[idx], goals, cfg.expectile_tau, cfg.gamma, tol
        )
        nn.check_finite(loss, g["feature"])
        params, opt = nn.adam_step(feature.params, g["feature"], opt)
        feature = FeatureNet(feature.spec, params, nn.polyak_update(feature.target, params, cfg.polyak_coeff))
        if callback is not None:
            callback(step, loss)
    return feature


# -- skill pretraining -------------------------------------------------------


@dataclass
class SkillBundle:
    """Everything pretraining produces: skill nets, features and reward stats."""

    nets: Nets
    feature: FeatureNet
    stats: RunningStats
    d: int
    log: list[dict] = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        out = self.nets.tensors()
        out.update({f"feature.{k}": v for k, v in self.feature.params.items()})
        out.update({f"feature_target.{k}": v for k, v in self.feature.target.items()})
        return out


def skill_batch(dataset: TransitionDataset, feature: FeatureNet, idx, z: np.ndarray) -> tuple[offline_rl.Batch, np.ndarray]:
    """Minibatch conditioned on per-element skills plus its raw intrinsic rewards."""
    obs, nxt = dataset.obs[idx], dataset.next_obs[idx]
    r_int = intrinsic_reward(feature, obs, nxt, z)
    batch = offline_rl.make_batch(obs, dataset.actions[idx], nxt, r_int, None, z)
    return batch, np.atleast_1d(r_int)


def pretrain_skills(
    dataset: TransitionDataset,
    feature: FeatureNet,
    config: TrainConfig,
    n_steps: int,
    rng: np.random.Generator,
    callback=None,
) -> SkillBundle:
    """Offline skill learning on intrinsic rewards normalized by running stats.

    One fresh skill per batch element. Statistics are fed raw rewards; the
    critic trains on rewards normalized with the stats after the update.
    """
    d = feature.dim
    init_rng, loop_rng = rng.spawn(2)
    nets = offline_rl.make_nets(dataset.spec.obs_dim, d, dataset.spec.action_spec, config, init_rng)
    stats = RunningStats()
    for step in range(n_steps):
        idx = loop_rng.integers(len(dataset), size=config.batch_size)
        z = sample_skill(loop_rng, d, config.batch_size)
        batch, r_int = skill_batch(dataset, feature, idx, z)
        stats = stats.update_batch(r_int)
        batch.rewards = stats.normalize(r_int) if stats.count >= 2 else np.zeros_like(r_int)
        nets, report = offline_rl.update_step(nets, batch, config, loop_rng)
        if callback is not None:
            callback(step, nets, report)
    return SkillBundle(nets, feature, stats, d)
