"""Small numpy MLPs with hand-written backprop, Adam and Polyak targets.

Parameters are plain dicts of float64 arrays (``W0, b0, W1, b1, ...``) so
optimizer and target updates are simple dict comprehensions. Inputs are
batched row-major: ``x`` has shape ``(n, in_dim)`` and ``W{i}`` has shape
``(in_i, out_i)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"U2O1"


class NumericalFailure(RuntimeError):
    """A loss or gradient became non-finite."""


class NoPenultimateLayer(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad layer widths {self.widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Params:
    """He-style fan-in scaled uniform init; one child stream per layer."""
    params: Params = {}
    layer_rngs = rng.spawn(spec.n_layers)
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        last = i == spec.n_layers - 1
        # smaller output layer keeps initial values/logits near zero
        limit = np.sqrt(6.0 / fan_in) * (0.1 if last else 1.0)
        params[f"W{i}"] = layer_rngs[i].uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _act(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    return h


def _act_grad(name: str, h: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.where(h > 0, g, 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != spec.in_dim:
        raise ShapeMismatch(f"expected input width {spec.in_dim}, got {x.shape[-1]}")
    return x


def forward_cached(spec: MlpSpec, params: Params, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    a = _check_input(spec, x)
    cache = ForwardCache()
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        cache.inputs.append(a)
        h = a @ params[f"W{i}"]
        h += params[f"b{i}"]
        a = _act(spec.output_activation if i == last else spec.activation, h)
        cache.pre.append(h)
        cache.post.append(a)
    return a, cache


def mlp_forward(spec: MlpSpec, params: Params, x: np.ndarray) -> np.ndarray:
    """Evaluate the network. A 1-D input gives a 1-D output."""
    single = np.ndim(x) == 1
    y, _ = forward_cached(spec, params, x)
    return y[0] if single else y


def mlp_forward_with_features(spec: MlpSpec, params: Params, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(output, zeta)`` where zeta is the last hidden activation.

    For an identity output layer ``output == zeta @ W_last + b_last``.
    """
    if spec.n_layers < 2:
        raise NoPenultimateLayer("network has no hidden layer")
    single = np.ndim(x) == 1
    y, cache = forward_cached(spec, params, x)
    zeta = cache.post[-2]
    if single:
        return y[0], zeta[0]
    return y, zeta


def backward(
    spec: MlpSpec, params: Params, cache: ForwardCache, grad_out: np.ndarray, input_grad: bool = True
) -> tuple[Params, np.ndarray | None]:
    """Backpropagate ``dL/doutput`` and return (param grads, dL/dinput)."""
    grads: Params = {}
    g = grad_out
    last = spec.n_layers - 1
    for i in range(last, -1, -1):
        name = spec.output_activation if i == last else spec.activation
        g = _act_grad(name, cache.pre[i], cache.post[i], g)
        grads[f"W{i}"] = cache.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i == 0 and not input_grad:
            return grads, None
        g = g @ params[f"W{i}"].T
    return grads, g


LossOfOutput = Callable[[np.ndarray], tuple[float, np.ndarray]]


def grad(spec: MlpSpec, params: Params, x: np.ndarray, loss_of_output: LossOfOutput) -> tuple[float, Params]:
    """Loss value and exact gradient for a scalar loss of the network output.

    ``loss_of_output(y)`` returns ``(loss, dloss/dy)``; batch averaging is the
    loss's job.
    """
    y, cache = forward_cached(spec, params, x)
    loss, dy = loss_of_output(y)
    check_finite(loss)
    grads, _ = backward(spec, params, cache, dy, input_grad=False)
    check_finite(loss, grads)
    return float(loss), grads


def check_finite(loss: float, grads: Params | None = None) -> None:
    if not np.isfinite(loss):
        raise NumericalFailure(f"non-finite loss {loss}")
    if grads is not None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalFailure(f"non-finite gradient in {k}")


def add_grads(a: Params, b: Params) -> Params:
    return {k: a[k] + b[k] for k in a}


def scale(p: Params, c: float) -> Params:
    return {k: c * v for k, v in p.items()}


def copy_params(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}


def params_equal(a: Params, b: Params) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass
class AdamState:
    lr: float
    m: Params
    v: Params
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(lr=lr, m=zeros, v={k: np.zeros_like(v) for k, v in params.items()},
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = {k: b1 * state.m[k] + (1 - b1) * grads[k] for k in params}
    v = {k: b2 * state.v[k] + (1 - b2) * grads[k] ** 2 for k in params}
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = {
        k: params[k] - state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
        for k in params
    }
    return new, AdamState(state.lr, m, v, t, b1, b2, state.eps)


def polyak_update(target: Params, online: Params, coeff: float) -> Params:
    if not 0.0 < coeff <= 1.0:
        raise ValueError(f"polyak coefficient must be in (0, 1], got {coeff}")
    # same as (1 - c) * target + c * online, but exact when target == online
    return {k: target[k] + coeff * (online[k] - target[k]) for k in target}


# -- checkpoints -------------------------------------------------------------


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named tensors as float32 little-endian records after ``U2O1``."""
    out = [CHECKPOINT_MAGIC]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a U2O1 checkpoint")
    pos = 4
    tensors = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        tensors[name] = arr.astype(np.float64)
    return tensors


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
