"""Toy environments, task rewards, offline datasets and exact oracles.

Two deterministic environments:

* ``gridworld``: an N x N grid with optional wall cells and 4 discrete moves.
  Observations are ``(row / N, col / N)``.
* ``pointmass``: a point in the unit square; the action is a 2-D displacement
  in ``[-0.1, 0.1]^2`` and positions are clipped to ``[0, 1]^2``.

Episodes end only on the time limit, which never counts as a terminal state
for bootstrapping.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

# row/col deltas for up, down, left, right
GRID_MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])
ACTION_NAMES = ("up", "down", "left", "right")


class Unreachable(ValueError):
    pass


@dataclass(frozen=True)
class ActionSpec:
    kind: str  # "discrete" | "continuous"
    n: int = 0
    dim: int = 0
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "discrete":
            if self.n < 1:
                raise ValueError("discrete action spec needs n >= 1")
        elif self.kind == "continuous":
            if self.dim < 1 or len(self.low) != self.dim or len(self.high) != self.dim:
                raise ValueError("continuous action spec needs dim, low, high")
            if any(lo >= hi for lo, hi in zip(self.low, self.high)):
                raise ValueError("need low < high componentwise")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def encoded_dim(self) -> int:
        """Width of the action encoding fed to critics (one-hot or normalized)."""
        return self.n if self.discrete else self.dim

    def to_json(self) -> dict:
        if self.discrete:
            return {"kind": "discrete", "n": self.n}
        return {"kind": "continuous", "dim": self.dim, "low": list(self.low), "high": list(self.high)}

    @classmethod
    def from_json(cls, d: dict) -> "ActionSpec":
        if d["kind"] == "discrete":
            return cls("discrete", n=int(d["n"]))
        return cls("continuous", dim=int(d["dim"]), low=tuple(d["low"]), high=tuple(d["high"]))


@dataclass(frozen=True)
class EnvSpec:
    env_id: str  # "gridworld" | "pointmass"
    obs_dim: int
    action_spec: ActionSpec
    max_episode_len: int
    size: int = 0  # grid side length
    walls: frozenset[tuple[int, int]] = frozenset()
    start: tuple[int, int] | None = None  # None: uniform over free cells

    def __post_init__(self):
        if self.obs_dim < 1 or self.max_episode_len < 1:
            raise ValueError("obs_dim and max_episode_len must be positive")
        if self.env_id not in ("gridworld", "pointmass"):
            raise ValueError(f"unknown env {self.env_id!r}")

    @property
    def name(self) -> str:
        return f"gridworld{self.size}" if self.env_id == "gridworld" else "pointmass"

    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) not in self.walls]

    def encode(self, cell) -> np.ndarray:
        return np.asarray(cell, dtype=np.float64) / self.size

    def decode(self, obs: np.ndarray) -> np.ndarray:
        return np.rint(np.asarray(obs) * self.size).astype(int)

    def to_json(self) -> dict:
        return {
            "env_id": self.env_id,
            "obs_dim": self.obs_dim,
            "action_spec": self.action_spec.to_json(),
            "max_episode_len": self.max_episode_len,
            "size": self.size,
            "walls": sorted(list(w) for w in self.walls),
            "start": list(self.start) if self.start is not None else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EnvSpec":
        return cls(
            env_id=d["env_id"],
            obs_dim=int(d["obs_dim"]),
            action_spec=ActionSpec.from_json(d["action_spec"]),
            max_episode_len=int(d["max_episode_len"]),
            size=int(d.get("size", 0)),
            walls=frozenset(tuple(w) for w in d.get("walls", [])),
            start=tuple(d["start"]) if d.get("start") is not None else None,
        )


def gridworld(size: int, walls=(), start=(0, 0), max_episode_len: int | None = None) -> EnvSpec:
    """``start=None`` draws the initial cell uniformly over free cells."""
    return EnvSpec(
        env_id="gridworld",
        obs_dim=2,
        action_spec=ActionSpec("discrete", n=4),
        max_episode_len=max_episode_len or 4 * size,
        size=size,
        walls=frozenset(tuple(w) for w in walls),
        start=tuple(start) if start is not None else None,
    )


def pointmass(max_episode_len: int = 50) -> EnvSpec:
    return EnvSpec(
        env_id="pointmass",
        obs_dim=2,
        action_spec=ActionSpec("continuous", dim=2, low=(-0.1, -0.1), high=(0.1, 0.1)),
        max_episode_len=max_episode_len,
    )


# -- dynamics ----------------------------------------------------------------


def _wall_mask(spec: EnvSpec) -> np.ndarray:
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    for r, c in spec.walls:
        mask[r, c] = True
    return mask


def dynamics(spec: EnvSpec, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Batched deterministic next-observation function."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if spec.env_id == "pointmass":
        act = np.asarray(actions, dtype=np.float64).reshape(len(obs), -1)
        act = np.clip(act, spec.action_spec.low, spec.action_spec.high)
        return np.clip(obs + act, 0.0, 1.0)
    cells = spec.decode(obs)
    moved = cells + GRID_MOVES[np.asarray(actions, dtype=int).reshape(-1)]
    inside = np.all((moved >= 0) & (moved < spec.size), axis=1)
    clipped = np.clip(moved, 0, spec.size - 1)
    blocked = ~inside | _wall_mask(spec)[clipped[:, 0], clipped[:, 1]]
    nxt = np.where(blocked[:, None], cells, moved)
    return spec.encode(nxt)


def initial_states(spec: EnvSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.env_id == "pointmass":
        return np.full((n, 2), 0.5)
    if spec.start is not None:
        return np.tile(spec.encode(spec.start), (n, 1))
    free = np.array(spec.free_cells())
    return spec.encode(free[rng.integers(len(free), size=n)])


class Env:
    """Single-episode simulator owning the step counter."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.state: np.ndarray | None = None
        self.t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = initial_states(self.spec, rng, 1)[0]
        self.t = 0
        return self.state.copy()

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self.state is None:
            raise RuntimeError("reset() before step()")
        self.state = dynamics(self.spec, self.state, np.asarray(action))[0]
        self.t += 1
        return self.state.copy(), self.t >= self.spec.max_episode_len


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    return initial_states(spec, rng, 1)[0]


def env_step(spec: EnvSpec, state: np.ndarray, action) -> np.ndarray:
    return dynamics(spec, state, np.asarray(action))[0]


def random_actions(spec: EnvSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    a = spec.action_spec
    if a.discrete:
        return rng.integers(a.n, size=n)
    return rng.uniform(a.low, a.high, size=(n, a.dim))


# -- tasks -------------------------------------------------------------------


class MissingGoal(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    task_id: str
    goal: tuple[float, ...] | None
    reward_kind: str  # "sparse_goal" | "dense_negative_distance"
    radius: float = 0.1
    gamma: float = 0.98
    success_radius: float = 0.1

    def __post_init__(self):
        if self.reward_kind not in ("sparse_goal", "dense_negative_distance"):
            raise ValueError(f"unknown reward kind {self.reward_kind!r}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")

    @property
    def sparse(self) -> bool:
        return self.reward_kind == "sparse_goal"


def task_reward(task: Task, s, a, s_next) -> np.ndarray | float:
    """Reward of one transition, or a batch when ``s_next`` is 2-D."""
    if task.goal is None:
        raise MissingGoal(f"task {task.task_id} has no goal")
    dist = np.linalg.norm(np.asarray(s_next, dtype=np.float64) - np.asarray(task.goal), axis=-1)
    if task.sparse:
        r = (dist <= task.radius).astype(np.float64)
    else:
        r = -dist
    return float(r) if np.ndim(r) == 0 else r


def goal_reached(task: Task, obs) -> np.ndarray:
    return np.linalg.norm(np.asarray(obs) - np.asarray(task.goal), axis=-1) <= task.success_radius


POINTMASS_CORNERS = {
    "reach_tl": (0.0, 1.0),
    "reach_tr": (1.0, 1.0),
    "reach_bl": (0.0, 0.0),
    "reach_br": (1.0, 0.0),
}


def make_task(spec: EnvSpec, task_id: str, gamma: float | None = None) -> Task:
    """Named tasks. Pointmass: four dense corner-reach tasks. Gridworld:
    ``goal_far`` (sparse, opposite corner) and ``goal_far_dense``."""
    if spec.env_id == "pointmass":
        if task_id not in POINTMASS_CORNERS:
            raise KeyError(f"unknown pointmass task {task_id!r}")
        return Task(task_id, POINTMASS_CORNERS[task_id], "dense_negative_distance",
                    radius=0.1, gamma=gamma or 0.98, success_radius=0.1)
    half_cell = 0.5 / spec.size
    goal = tuple(spec.encode((spec.size - 1, spec.size - 1)))
    if task_id == "goal_far":
        return Task(task_id, goal, "sparse_goal", radius=half_cell, gamma=gamma or 0.9, success_radius=half_cell)
    if task_id == "goal_far_dense":
        return Task(task_id, goal, "dense_negative_distance", radius=half_cell, gamma=gamma or 0.9,
                    success_radius=half_cell)
    raise KeyError(f"unknown gridworld task {task_id!r}")


# -- datasets ----------------------------------------------------------------


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray | int
    s_next: np.ndarray
    reward: float | None
    done: bool


@dataclass
class TransitionDataset:
    """Column-stored transitions; ``episode_boundaries`` are episode start
    indices followed by ``len(self)``."""

    spec: EnvSpec
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    rewards: np.ndarray | None = None
    episode_boundaries: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.episode_boundaries is None:
            ends = np.flatnonzero(self.dones) + 1
            starts = np.concatenate([[0], ends])
            if starts[-1] != len(self.obs):
                starts = np.concatenate([starts, [len(self.obs)]])
            self.episode_boundaries = starts.astype(np.int64)

    def __len__(self) -> int:
        return len(self.obs)

    def __getitem__(self, i: int) -> Transition:
        a = self.actions[i]
        return Transition(
            self.obs[i], int(a) if self.spec.action_spec.discrete else a, self.next_obs[i],
            None if self.rewards is None else float(self.rewards[i]), bool(self.dones[i]),
        )

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    @property
    def n_episodes(self) -> int:
        return len(self.episode_boundaries) - 1

    def episode_ends(self) -> np.ndarray:
        """For each transition, the index one past the end of its episode."""
        b = self.episode_boundaries
        return np.repeat(b[1:], np.diff(b))


@dataclass
class RewardDataset:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray
    provenance: str = "offline_subset"  # or "online_collected"

    def __post_init__(self):
        if len(self.rewards) == 0:
            raise ValueError("reward dataset is empty")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.rewards)


BEHAVIORS = ("uniform_random", "epsilon_random_walk")


def collect_offline_dataset(
    spec: EnvSpec, behavior: str, n_transitions: int, rng: np.random.Generator, epsilon: float = 0.2
) -> TransitionDataset:
    """Unlabeled exploratory data.

    ``epsilon_random_walk`` repeats the previous action with probability
    ``1 - epsilon``, which gives long straight runs and better edge coverage.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    if behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior {behavior!r}")
    T = spec.max_episode_len
    n_eps = math.ceil(n_transitions / T)
    obs = np.empty((n_eps, T, spec.obs_dim))
    acts = []
    s = initial_states(spec, rng, n_eps)
    prev = random_actions(spec, rng, n_eps)
    nxt = np.empty_like(obs)
    for t in range(T):
        a = random_actions(spec, rng, n_eps)
        if behavior == "epsilon_random_walk" and t > 0:
            keep = rng.random(n_eps) >= epsilon
            a = np.where(keep.reshape((-1,) + (1,) * (a.ndim - 1)), prev, a)
        obs[:, t] = s
        s = dynamics(spec, s, a)
        nxt[:, t] = s
        acts.append(a)
        prev = a
    actions = np.stack(acts, axis=1)
    dones = np.zeros((n_eps, T), dtype=bool)
    dones[:, -1] = True
    flat = lambda x: x.reshape((n_eps * T,) + x.shape[2:])[:n_transitions]
    return TransitionDataset(spec, flat(obs), flat(actions), flat(nxt), flat(dones))


def label_subset(
    dataset: TransitionDataset, task: Task, fraction: float, rng: np.random.Generator
) -> RewardDataset:
    """Uniformly pick ceil(fraction * n) transitions and label them with the task reward."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    k = min(n, math.ceil(round(fraction * n, 9)))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    r = task_reward(task, dataset.obs[idx], dataset.actions[idx], dataset.next_obs[idx])
    return RewardDataset(dataset.obs[idx], dataset.actions[idx], dataset.next_obs[idx],
                         np.atleast_1d(np.asarray(r, dtype=np.float64)))


def with_rewards(dataset: TransitionDataset, task: Task) -> TransitionDataset:
    r = task_reward(task, dataset.obs, dataset.actions, dataset.next_obs)
    return TransitionDataset(dataset.spec, dataset.obs, dataset.actions, dataset.next_obs, dataset.dones,
                             np.asarray(r), dataset.episode_boundaries)


# -- JSON-lines I/O ----------------------------------------------------------


def _num(x):
    if isinstance(x, (np.integer, int)):
        return int(x)
    return float(x)


def dumps_dataset(dataset: TransitionDataset) -> str:
    """Header line, then one JSON object per transition. Floats use Python's
    shortest round-trip repr, so values reload bit-exactly."""
    header = dataset.spec.to_json() | {"n": len(dataset)}
    lines = [json.dumps(header, sort_keys=True)]
    discrete = dataset.spec.action_spec.discrete
    for i in range(len(dataset)):
        a = int(dataset.actions[i]) if discrete else [float(v) for v in dataset.actions[i]]
        rec = {
            "s": [float(v) for v in dataset.obs[i]],
            "a": a,
            "s_next": [float(v) for v in dataset.next_obs[i]],
            "reward": None if dataset.rewards is None else float(dataset.rewards[i]),
            "done": bool(dataset.dones[i]),
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> TransitionDataset:
    lines = text.splitlines()
    header = json.loads(lines[0])
    spec = EnvSpec.from_json(header)
    recs = [json.loads(line) for line in lines[1:] if line.strip()]
    if len(recs) != header["n"]:
        raise ValueError(f"header says {header['n']} transitions, found {len(recs)}")
    obs = np.array([r["s"] for r in recs], dtype=np.float64).reshape(-1, spec.obs_dim)
    nxt = np.array([r["s_next"] for r in recs], dtype=np.float64).reshape(-1, spec.obs_dim)
    dtype = np.int64 if spec.action_spec.discrete else np.float64
    acts = np.array([r["a"] for r in recs], dtype=dtype)
    dones = np.array([r["done"] for r in recs], dtype=bool)
    rewards = None
    if recs and recs[0]["reward"] is not None:
        rewards = np.array([r["reward"] for r in recs], dtype=np.float64)
    return TransitionDataset(spec, obs, acts, nxt, dones, rewards)


def save_dataset(path: str | Path, dataset: TransitionDataset) -> None:
    Path(path).write_text(dumps_dataset(dataset))


def load_dataset(path: str | Path) -> TransitionDataset:
    return loads_dataset(Path(path).read_text())


# -- exact oracles (tests and diagnostics) -----------------------------------


def shortest_path_distance(spec: EnvSpec, s, g) -> int:
    """BFS step count from cell ``s`` to cell ``g`` under the grid dynamics."""
    return bfs_distances(spec, tuple(s))[tuple(g)]


def bfs_distances(spec: EnvSpec, source: tuple[int, int]) -> dict[tuple[int, int], int]:
    free = set(spec.free_cells())
    if source not in free:
        raise ValueError(f"{source} is not a free cell")
    dist = {source: 0}
    queue = deque([source])
    while queue:
        cell = queue.popleft()
        for dr, dc in GRID_MOVES:
            nb = (cell[0] + dr, cell[1] + dc)
            if nb in free and nb not in dist:
                dist[nb] = dist[cell] + 1
                queue.append(nb)
    return _DistanceMap(dist, free)


class _DistanceMap(dict):
    def __init__(self, dist, free):
        super().__init__(dist)
        self.free = free

    def __missing__(self, key):
        if key not in self.free:
            raise ValueError(f"{key} is not a free cell")
        raise Unreachable(f"{key} is unreachable")


def value_iteration(spec: EnvSpec, reward_fn, gamma: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Tabular optimal Q for a gridworld.

    ``reward_fn(s_obs, a, s_next_obs)`` is evaluated on batches. Returns
    ``(cells, Q)`` with ``Q`` of shape ``(len(cells), 4)``.
    """
    cells = spec.free_cells()
    index = {c: i for i, c in enumerate(cells)}
    obs = spec.encode(cells)
    n, k = len(cells), spec.action_spec.n
    nxt_idx = np.empty((n, k), dtype=int)
    rew = np.empty((n, k))
    for a in range(k):
        nxt = dynamics(spec, obs, np.full(n, a))
        nxt_idx[:, a] = [index[tuple(c)] for c in spec.decode(nxt)]
        rew[:, a] = reward_fn(obs, np.full(n, a), nxt)
    V = np.zeros(n)
    for _ in range(max_iter):
        Q = rew + gamma * V[nxt_idx]
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return cells, rew + gamma * V[nxt_idx]


def optimal_action_sets(Q: np.ndarray, tol: float = 1e-9) -> list[set[int]]:
    return [set(np.flatnonzero(row >= row.max() - tol)) for row in Q]
