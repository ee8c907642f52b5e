"""IQL and TD3 backbones shared by pretraining, offline RL and fine-tuning.

All networks take a conditioning block ``cond`` appended to the observation.
Skill-conditioned nets use ``cond = z``; plain task nets use an empty block.
Critics see the action as a one-hot (discrete) or as the action rescaled to
``[-1, 1]`` (continuous). Continuous policies output that rescaled action
through a tanh head.

Every loss returns ``(loss, grads)`` where ``grads`` maps a net name to its
parameter gradient, so one code path serves training and gradient checks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import ActionSpec
from .nn import Params

AWR_WEIGHT_CLAMP = 100.0
IQL_LOG_STD = -1.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class TrainConfig:
    gamma: float = 0.98
    expectile_tau: float = 0.7
    awr_temperature: float = 10.0
    polyak_coeff: float = 0.005
    lr_feature: float = 5e-4
    lr_critic: float = 3e-4
    lr_value: float = 3e-4
    lr_actor: float = 3e-4
    batch_size: int = 256
    backbone: str = "iql"
    td3_policy_noise: float = 0.2
    td3_noise_clip: float = 0.5
    td3_exploration_std: float = 0.2
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (0.0 < self.gamma < 1.0, "gamma must be in (0, 1)"),
            (0.0 < self.expectile_tau < 1.0, "expectile_tau must be in (0, 1)"),
            (self.awr_temperature >= 0.0, "awr_temperature must be nonnegative"),
            (0.0 < self.polyak_coeff <= 1.0, "polyak_coeff must be in (0, 1]"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.backbone in ("iql", "td3"), "backbone must be iql or td3"),
            (min(self.td3_policy_noise, self.td3_noise_clip, self.td3_exploration_std) >= 0.0,
             "td3 noise parameters must be nonnegative"),
            (min(self.lr_feature, self.lr_critic, self.lr_value, self.lr_actor) >= 0.0,
             "learning rates must be nonnegative"),
            (len(self.hidden) >= 1 and min(self.hidden) >= 1, "need at least one hidden layer"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray | None
    terminals: np.ndarray
    cond: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


def make_batch(obs, actions, next_obs, rewards=None, terminals=None, cond=None) -> Batch:
    obs = np.asarray(obs, dtype=np.float64)
    n = len(obs)
    return Batch(
        obs=obs,
        actions=np.asarray(actions),
        next_obs=np.asarray(next_obs, dtype=np.float64),
        rewards=None if rewards is None else np.asarray(rewards, dtype=np.float64),
        terminals=np.zeros(n) if terminals is None else np.asarray(terminals, dtype=np.float64),
        cond=np.empty((n, 0)) if cond is None else np.asarray(cond, dtype=np.float64),
    )


@dataclass
class Nets:
    """Critic ensemble (twin critics and targets), optional value net, actor.

    ``opt`` holds one Adam state per trained net, keyed like the nets:
    ``critic0``, ``critic1``, ``value``, ``actor``.
    """

    action_spec: ActionSpec
    obs_dim: int
    cond_dim: int
    backbone: str
    critic_spec: nn.MlpSpec
    actor_spec: nn.MlpSpec
    value_spec: nn.MlpSpec | None
    critics: list[Params]
    critic_targets: list[Params]
    actor: Params
    actor_target: Params | None = None
    value: Params | None = None
    opt: dict[str, nn.AdamState] = field(default_factory=dict)

    def named_params(self) -> dict[str, Params]:
        out = {"critic0": self.critics[0], "critic1": self.critics[1],
               "critic_target0": self.critic_targets[0], "critic_target1": self.critic_targets[1],
               "actor": self.actor}
        if self.actor_target is not None:
            out["actor_target"] = self.actor_target
        if self.value is not None:
            out["value"] = self.value
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"{net}.{k}": v for net, p in self.named_params().items() for k, v in p.items()}

    def with_params(self, **updates) -> "Nets":
        return dataclasses.replace(self, **updates)


def make_nets(
    obs_dim: int, cond_dim: int, action_spec: ActionSpec, config: TrainConfig, rng: np.random.Generator
) -> Nets:
    if config.backbone == "td3" and action_spec.discrete:
        raise ValueError("td3 backbone needs continuous actions")
    h = config.hidden
    state_in = obs_dim + cond_dim
    critic_spec = nn.MlpSpec((state_in + action_spec.encoded_dim, *h, 1))
    if action_spec.discrete:
        actor_spec = nn.MlpSpec((state_in, *h, action_spec.n))
    else:
        actor_spec = nn.MlpSpec((state_in, *h, action_spec.dim), output_activation="tanh")
    value_spec = nn.MlpSpec((state_in, *h, 1)) if config.backbone == "iql" else None
    r_c0, r_c1, r_a, r_v = rng.spawn(4)
    critics = [nn.init_params(critic_spec, r_c0), nn.init_params(critic_spec, r_c1)]
    actor = nn.init_params(actor_spec, r_a)
    nets = Nets(
        action_spec=action_spec, obs_dim=obs_dim, cond_dim=cond_dim, backbone=config.backbone,
        critic_spec=critic_spec, actor_spec=actor_spec, value_spec=value_spec,
        critics=critics, critic_targets=[nn.copy_params(c) for c in critics], actor=actor,
        actor_target=nn.copy_params(actor) if config.backbone == "td3" else None,
        value=nn.init_params(value_spec, r_v) if value_spec is not None else None,
    )
    nets.opt = fresh_optimizers(nets, config)
    return nets


def fresh_optimizers(nets: Nets, config: TrainConfig) -> dict[str, nn.AdamState]:
    opt = {
        "critic0": nn.adam_init(nets.critics[0], config.lr_critic),
        "critic1": nn.adam_init(nets.critics[1], config.lr_critic),
        "actor": nn.adam_init(nets.actor, config.lr_actor),
    }
    if nets.value is not None:
        opt["value"] = nn.adam_init(nets.value, config.lr_value)
    return opt


# -- input plumbing ----------------------------------------------------------


def encode_actions(spec: ActionSpec, actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions)
    if spec.discrete:
        return np.eye(spec.n)[actions.astype(int).reshape(-1)]
    low, high = np.asarray(spec.low), np.asarray(spec.high)
    return (actions.reshape(len(actions), -1) - (high + low) / 2) / ((high - low) / 2)


def decode_actions(spec: ActionSpec, normalized: np.ndarray) -> np.ndarray:
    low, high = np.asarray(spec.low), np.asarray(spec.high)
    return (high + low) / 2 + normalized * (high - low) / 2


def state_input(obs: np.ndarray, cond: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, cond], axis=1)


def critic_values(nets: Nets, params: list[Params], obs, cond, act_enc) -> np.ndarray:
    """Q values of each critic in ``params``; shape ``(len(params), n)``."""
    x = np.concatenate([obs, cond, act_enc], axis=1)
    return np.stack([nn.forward_cached(nets.critic_spec, p, x)[0][:, 0] for p in params])


def value_of(nets: Nets, obs, cond) -> np.ndarray:
    return nn.forward_cached(nets.value_spec, nets.value, state_input(obs, cond))[0][:, 0]


def expectile_loss(x, tau: float):
    """Asymmetric squared loss ``|tau - 1(x < 0)| * x**2`` (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    return np.abs(tau - (x < 0)) * x * x


def _expectile_weight(x: np.ndarray, tau: float) -> np.ndarray:
    return np.abs(tau - (x < 0))


class MissingRewards(ValueError):
    pass


def _twin_regression(nets: Nets, batch: Batch, target: np.ndarray) -> tuple[float, dict[str, Params]]:
    x = np.concatenate([batch.obs, batch.cond, encode_actions(nets.action_spec, batch.actions)], axis=1)
    n = len(batch)
    total = 0.0
    grads = {}
    for i, p in enumerate(nets.critics):
        q, cache = nn.forward_cached(nets.critic_spec, p, x)
        diff = q[:, 0] - target
        total += 0.5 * np.mean(diff * diff)
        g, _ = nn.backward(nets.critic_spec, p, cache, (diff / n)[:, None], input_grad=False)
        grads[f"critic{i}"] = g
    return total, grads


def iql_q_loss(nets: Nets, batch: Batch, gamma: float) -> tuple[float, dict[str, Params]]:
    """Mean over batch and both critics of ``(r + gamma V(s') - Q(s, a))**2``."""
    if batch.rewards is None:
        raise MissingRewards("iql_q_loss needs rewards")
    v_next = value_of(nets, batch.next_obs, batch.cond)
    target = batch.rewards + gamma * (1.0 - batch.terminals) * v_next
    return _twin_regression(nets, batch, target)


def target_q(nets: Nets, batch: Batch) -> np.ndarray:
    """min over the twin target critics of Q(s, a)."""
    act = encode_actions(nets.action_spec, batch.actions)
    return critic_values(nets, nets.critic_targets, batch.obs, batch.cond, act).min(axis=0)


def iql_v_loss(nets: Nets, batch: Batch, tau: float, q: np.ndarray | None = None) -> tuple[float, dict[str, Params]]:
    """Expectile regression of V(s) onto the min of the twin target critics."""
    if q is None:
        q = target_q(nets, batch)
    v, cache = nn.forward_cached(nets.value_spec, nets.value, state_input(batch.obs, batch.cond))
    u = q - v[:, 0]
    w = _expectile_weight(u, tau)
    loss = float(np.mean(w * u * u))
    g, _ = nn.backward(nets.value_spec, nets.value, cache, (-2.0 * w * u / len(batch))[:, None], input_grad=False)
    return loss, {"value": g}


def td3_target_actions(nets: Nets, next_obs, cond, policy_noise, noise_clip, rng: np.random.Generator):
    a = nn.forward_cached(nets.actor_spec, nets.actor_target, state_input(next_obs, cond))[0]
    noise = np.clip(policy_noise * rng.standard_normal(a.shape), -noise_clip, noise_clip)
    return np.clip(a + noise, -1.0, 1.0)


def td3_critic_loss(
    nets: Nets, batch: Batch, gamma: float, policy_noise: float, noise_clip: float, rng: np.random.Generator
) -> tuple[float, dict[str, Params]]:
    if batch.rewards is None:
        raise MissingRewards("td3_critic_loss needs rewards")
    a_next = td3_target_actions(nets, batch.next_obs, batch.cond, policy_noise, noise_clip, rng)
    q_next = critic_values(nets, nets.critic_targets, batch.next_obs, batch.cond, a_next).min(axis=0)
    target = batch.rewards + gamma * (1.0 - batch.terminals) * q_next
    return _twin_regression(nets, batch, target)


def policy_log_prob(nets: Nets, batch_obs, cond, actions) -> tuple[np.ndarray, nn.ForwardCache, np.ndarray]:
    """Return ``(log pi(a|s), cache, dlogp/doutput)`` for the actor head."""
    out, cache = nn.forward_cached(nets.actor_spec, nets.actor, state_input(batch_obs, cond))
    if nets.action_spec.discrete:
        a = np.asarray(actions, dtype=int).reshape(-1)
        shifted = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp_all = shifted - log_z
        logp = logp_all[np.arange(len(a)), a]
        dlogp = -np.exp(logp_all)
        dlogp[np.arange(len(a)), a] += 1.0
        return logp, cache, dlogp
    target = encode_actions(nets.action_spec, actions)
    var = np.exp(2 * IQL_LOG_STD)
    diff = target - out
    logp = np.sum(-0.5 * diff * diff / var - IQL_LOG_STD - 0.5 * LOG_2PI, axis=1)
    return logp, cache, diff / var


def awr_weights(q: np.ndarray, v: np.ndarray, temperature: float) -> np.ndarray:
    return np.minimum(np.exp(np.minimum(temperature * (q - v), np.log(AWR_WEIGHT_CLAMP))), AWR_WEIGHT_CLAMP)


def awr_actor_loss(
    nets: Nets, batch: Batch, temperature: float, q: np.ndarray | None = None
) -> tuple[float, dict[str, Params]]:
    """``-mean(w * log pi(a|s))`` with ``w = min(exp(beta (Q - V)), 100)``."""
    if q is None:
        q = target_q(nets, batch)
    v = value_of(nets, batch.obs, batch.cond)
    w = awr_weights(q, v, temperature)
    logp, cache, dlogp = policy_log_prob(nets, batch.obs, batch.cond, batch.actions)
    n = len(batch)
    loss = float(-np.mean(w * logp))
    g, _ = nn.backward(nets.actor_spec, nets.actor, cache, -(w / n)[:, None] * dlogp, input_grad=False)
    return loss, {"actor": g}


def ddpg_actor_loss(nets: Nets, batch: Batch) -> tuple[float, dict[str, Params]]:
    """``-mean Q0(s, pi(s))`` differentiated through the first critic."""
    a, a_cache = nn.forward_cached(nets.actor_spec, nets.actor, state_input(batch.obs, batch.cond))
    x = np.concatenate([batch.obs, batch.cond, a], axis=1)
    q, q_cache = nn.forward_cached(nets.critic_spec, nets.critics[0], x)
    n = len(batch)
    _, dx = nn.backward(nets.critic_spec, nets.critics[0], q_cache, np.full((n, 1), -1.0 / n))
    da = dx[:, -a.shape[1]:]
    g, _ = nn.backward(nets.actor_spec, nets.actor, a_cache, da, input_grad=False)
    return float(-np.mean(q)), {"actor": g}


REGISTERED_LOSSES = ("iql_q", "iql_v", "td3_critic", "awr_actor", "ddpg_actor", "hilbert_feature")


# -- update ------------------------------------------------------------------


def _apply(params: Params, grads: Params, state: nn.AdamState, loss: float):
    nn.check_finite(loss, grads)
    return nn.adam_step(params, grads, state)


def update_step(nets: Nets, batch: Batch, config: TrainConfig, rng: np.random.Generator) -> tuple[Nets, dict]:
    """One gradient step on critic (and value) and actor, then Polyak targets.

    Returns a new ``Nets``; the input is left untouched.
    """
    opt = dict(nets.opt)
    report = {}
    if nets.backbone == "iql":
        q = target_q(nets, batch)
        v_loss, g = iql_v_loss(nets, batch, config.expectile_tau, q)
        value, opt["value"] = _apply(nets.value, g["value"], opt["value"], v_loss)
        nets = nets.with_params(value=value)
        a_loss, g = awr_actor_loss(nets, batch, config.awr_temperature, q)
        actor, opt["actor"] = _apply(nets.actor, g["actor"], opt["actor"], a_loss)
        c_loss, g = iql_q_loss(nets, batch, config.gamma)
        critics = []
        for i in range(2):
            p, opt[f"critic{i}"] = _apply(nets.critics[i], g[f"critic{i}"], opt[f"critic{i}"], c_loss)
            critics.append(p)
        report.update(critic_loss=c_loss, value_loss=v_loss, actor_loss=a_loss)
        nets = nets.with_params(actor=actor, critics=critics)
    else:
        c_loss, g = td3_critic_loss(nets, batch, config.gamma, config.td3_policy_noise, config.td3_noise_clip, rng)
        critics = []
        for i in range(2):
            p, opt[f"critic{i}"] = _apply(nets.critics[i], g[f"critic{i}"], opt[f"critic{i}"], c_loss)
            critics.append(p)
        nets = nets.with_params(critics=critics)
        a_loss, g = ddpg_actor_loss(nets, batch)
        actor, opt["actor"] = _apply(nets.actor, g["actor"], opt["actor"], a_loss)
        report.update(critic_loss=c_loss, value_loss=float("nan"), actor_loss=a_loss)
        nets = nets.with_params(
            actor=actor,
            actor_target=nn.polyak_update(nets.actor_target, actor, config.polyak_coeff),
        )
    targets = [nn.polyak_update(t, c, config.polyak_coeff) for t, c in zip(nets.critic_targets, nets.critics)]
    return nets.with_params(critic_targets=targets, opt=opt), report


# -- acting ------------------------------------------------------------------


def policy_output(nets: Nets, obs, cond) -> np.ndarray:
    return nn.forward_cached(nets.actor_spec, nets.actor, state_input(np.atleast_2d(obs), np.atleast_2d(cond)))[0]


def act_deterministic(nets: Nets, obs, cond) -> np.ndarray:
    out = policy_output(nets, obs, cond)
    if nets.action_spec.discrete:
        return out.argmax(axis=1)
    return decode_actions(nets.action_spec, out)


def act_explore(nets: Nets, obs, cond, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    out = policy_output(nets, obs, cond)
    if nets.action_spec.discrete:
        p = np.exp(out - out.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random((len(p), 1))
        return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), nets.action_spec.n - 1)
    std = np.exp(IQL_LOG_STD) if nets.backbone == "iql" else config.td3_exploration_std
    a = np.clip(out + std * rng.standard_normal(out.shape), -1.0, 1.0)
    return decode_actions(nets.action_spec, a)


def critic_greedy(nets: Nets, obs, cond) -> np.ndarray:
    """argmax_a Q0(s, a) for discrete action spaces."""
    obs = np.atleast_2d(obs)
    cond = np.atleast_2d(cond)
    k = nets.action_spec.n
    qs = np.stack([
        critic_values(nets, nets.critics[:1], obs, cond, np.tile(np.eye(k)[a], (len(obs), 1)))[0]
        for a in range(k)
    ], axis=1)
    return qs.argmax(axis=1)
