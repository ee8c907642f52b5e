import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcheck import max_relative_error
from oracles import naive_forward
from u2o import nn
from u2o.nn import MlpSpec


def test_identity_network():
    spec = MlpSpec((3, 3))
    params = {"W0": np.eye(3), "b0": np.zeros(3)}
    x = np.array([0.3, -1.2, 5.0])
    assert np.array_equal(nn.mlp_forward(spec, params, x), x)


def test_relu_hidden():
    spec = MlpSpec((2, 2, 2))
    params = {"W0": np.eye(2), "b0": np.zeros(2), "W1": np.eye(2), "b1": np.zeros(2)}
    _, zeta = nn.mlp_forward_with_features(spec, params, np.array([-1.0, 2.0]))
    assert np.array_equal(zeta, [0.0, 2.0])


@pytest.mark.parametrize("act,out", [("relu", "identity"), ("tanh", "tanh"), ("relu", "tanh")])
def test_forward_matches_naive(act, out):
    spec = MlpSpec((4, 7, 5, 3), activation=act, output_activation=out)
    params = nn.init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=4)
    assert np.allclose(nn.mlp_forward(spec, params, x), naive_forward(spec, params, x), atol=1e-12)


def test_shape_mismatch():
    spec = MlpSpec((3, 4, 1))
    with pytest.raises(nn.ShapeMismatch):
        nn.mlp_forward(spec, nn.init_params(spec, np.random.default_rng(0)), np.zeros(2))


@pytest.mark.parametrize("widths", [(1,), (0, 2), (3, 0)])
def test_spec_validation(widths):
    with pytest.raises(ValueError):
        MlpSpec(widths)


def test_no_penultimate_layer():
    spec = MlpSpec((3, 2))
    with pytest.raises(nn.NoPenultimateLayer):
        nn.mlp_forward_with_features(spec, nn.init_params(spec, np.random.default_rng(0)), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 16), min_size=2, max_size=4))
def test_feature_reconstruction(seed, hidden):
    spec = MlpSpec((3, *hidden, 2))
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(8, 3))
    y, zeta = nn.mlp_forward_with_features(spec, params, x)
    last = spec.n_layers - 1
    assert np.max(np.abs(zeta @ params[f"W{last}"] + params[f"b{last}"] - y)) < 1e-12


def test_identity_hidden_layer_features():
    spec = MlpSpec((2, 2, 1), activation="tanh")
    params = {"W0": np.eye(2), "b0": np.zeros(2), "W1": np.ones((2, 1)), "b1": np.zeros(1)}
    x = np.array([0.2, -0.7])
    _, zeta = nn.mlp_forward_with_features(spec, params, x)
    assert np.array_equal(zeta, np.tanh(x))


def _mse(target):
    def loss(y):
        d = y - target
        return float(np.mean(d * d)), 2 * d / d.size
    return loss


def test_zero_network_zero_gradient():
    spec = MlpSpec((3, 4, 1))
    params = {k: np.zeros_like(v) for k, v in nn.init_params(spec, np.random.default_rng(0)).items()}
    _, g = nn.grad(spec, params, np.zeros((5, 3)), _mse(np.zeros((5, 1))))
    assert all(np.all(v == 0) for v in g.values())


@pytest.mark.parametrize("seed", range(5))
def test_grad_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec((4, 8, 6, 3), activation="tanh", output_activation="tanh")
    params = nn.init_params(spec, rng)
    params = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in params.items()}
    x = rng.normal(size=(16, 4))
    loss_fn = _mse(rng.normal(size=(16, 3)))
    _, g = nn.grad(spec, params, x, loss_fn)
    err = max_relative_error(lambda: nn.grad(spec, params, x, loss_fn)[0], params, g)
    assert err < 1e-4


def test_grad_linear_in_loss_scale():
    rng = np.random.default_rng(0)
    spec = MlpSpec((3, 5, 2))
    params = nn.init_params(spec, rng)
    x, t = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
    base = _mse(t)

    def scaled(y):
        loss, dy = base(y)
        return 3.5 * loss, 3.5 * dy

    _, g1 = nn.grad(spec, params, x, base)
    _, g2 = nn.grad(spec, params, x, scaled)
    for k in g1:
        assert np.allclose(g2[k], 3.5 * g1[k], rtol=1e-13, atol=0)


def test_grad_nonfinite_raises():
    spec = MlpSpec((1, 1))
    params = {"W0": np.ones((1, 1)), "b0": np.zeros(1)}
    with pytest.raises(nn.NumericalFailure):
        nn.grad(spec, params, np.ones((1, 1)), lambda y: (float("nan"), np.zeros_like(y)))


# -- Adam ------------------------------------------------------------------


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st_ = nn.adam_init(p, 0.1)
    new, st2 = nn.adam_step(p, {"w": np.zeros(2)}, st_)
    assert np.array_equal(new["w"], p["w"])
    assert st2.step == 1


def test_adam_first_step():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([2.0, -0.5, 1e-3])
    lr, eps = 0.01, 1e-8
    new, _ = nn.adam_step(p, {"w": g}, nn.adam_init(p, lr, eps=eps))
    assert np.allclose(new["w"], -lr * g / (np.abs(g) + eps), rtol=1e-12, atol=0)


def scalar_adam(w, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return w


def test_adam_quadratic():
    p = {"w": np.array([0.0])}
    state = nn.adam_init(p, 0.1)
    for _ in range(100):
        p, state = nn.adam_step(p, {"w": 2 * (p["w"] - 3)}, state)
    assert abs(p["w"][0] - 3) < 0.5
    ref = scalar_adam(0.0, lambda w: 2 * (w - 3), 0.1, 100)
    assert p["w"][0] == pytest.approx(ref, rel=1e-12)


# -- Polyak ------------------------------------------------------------------


def test_polyak_fixed_point():
    p = {"w": np.array([1.0, 2.0])}
    assert np.array_equal(nn.polyak_update(p, p, 0.3)["w"], p["w"])


def test_polyak_single_step():
    out = nn.polyak_update({"w": np.zeros(1)}, {"w": np.ones(1)}, 0.01)
    assert out["w"][0] == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("rho", [0.005, 0.1, 1.0])
def test_polyak_geometric(rho):
    target = {"w": np.array([-2.0, 5.0])}
    online = {"w": np.array([1.0, 1.0])}
    gap0 = target["w"] - online["w"]
    for k in range(1, 201):
        target = nn.polyak_update(target, online, rho)
        if k % 50 == 0:
            assert np.allclose(target["w"] - online["w"], (1 - rho) ** k * gap0, atol=1e-10, rtol=0)


@pytest.mark.parametrize("rho", [0.0, 1.5])
def test_polyak_range(rho):
    with pytest.raises(ValueError):
        nn.polyak_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, rho)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    spec = MlpSpec((3, 4, 2))
    params = nn.init_params(spec, np.random.default_rng(0))
    nn.save_checkpoint(tmp_path / "c.u2o", params)
    raw = (tmp_path / "c.u2o").read_bytes()
    assert raw[:4] == b"U2O1"
    back = nn.load_checkpoint(tmp_path / "c.u2o")
    assert back.keys() == params.keys()
    for k in params:
        assert back[k].shape == params[k].shape
        assert np.array_equal(back[k], params[k].astype(np.float32).astype(np.float64))


def test_checkpoint_layout():
    data = nn.encode_checkpoint({"ab": np.array([[1.0, 2.0, 3.0]])})
    expected = (b"U2O1" + (2).to_bytes(4, "little") + b"ab" + (2).to_bytes(4, "little")
                + (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
                + np.array([1, 2, 3], dtype="<f4").tobytes())
    assert data == expected


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        nn.decode_checkpoint(b"XXXX")


def test_init_deterministic():
    spec = MlpSpec((5, 8, 3))
    a = nn.init_params(spec, np.random.default_rng(4))
    b = nn.init_params(spec, np.random.default_rng(4))
    assert nn.params_equal(a, b)
