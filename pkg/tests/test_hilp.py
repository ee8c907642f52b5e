import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_batch
from u2o import bridge, env as envmod
from u2o import hilp, nn, offline_rl
from u2o.hilp import FeatureNet, InsufficientStats, RunningStats, intrinsic_reward, sample_skill, successor_feature
from u2o.offline_rl import TrainConfig


def identity_features(dim=2):
    spec = nn.MlpSpec((dim, dim))
    p = {"W0": np.eye(dim), "b0": np.zeros(dim)}
    return FeatureNet(spec, p, nn.copy_params(p))


def random_features(seed, d=4, hidden=(8, 8)):
    return hilp.make_feature_net(2, d, hidden, np.random.default_rng(seed))


# -- skills -----------------------------------------------------------------------


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.integers(1, 64))
def test_skill_unit_norm(seed, d):
    z = sample_skill(np.random.default_rng(seed), d, 16)
    assert np.all(np.abs(np.linalg.norm(z, axis=1) - 1) < 1e-9)


def test_skill_d1_is_sign():
    z = sample_skill(np.random.default_rng(0), 1, 20_000)[:, 0]
    assert set(np.unique(z)) == {-1.0, 1.0}
    # binomial(20000, 1/2): 5 sigma is about 354
    assert abs(np.sum(z > 0) - 10_000) < 354


def test_skill_mean_near_zero():
    z = sample_skill(np.random.default_rng(0), 4, 100_000)
    assert np.all(np.abs(z.mean(axis=0)) < 0.02)


def test_skill_rejects_d0():
    with pytest.raises(ValueError):
        sample_skill(np.random.default_rng(0), 0)


# -- successor features and intrinsic reward ----------------------------------------


def test_successor_feature_zero_displacement():
    f = random_features(0)
    s = np.array([[0.2, 0.4], [0.9, 0.1]])
    assert np.array_equal(successor_feature(f, s, s), np.zeros((2, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_successor_feature_antisymmetric_and_recomputed(seed):
    f = random_features(seed)
    rng = np.random.default_rng(seed)
    s, s2 = rng.uniform(size=(5, 2)), rng.uniform(size=(5, 2))
    fwd = successor_feature(f, s, s2)
    assert np.array_equal(fwd, -successor_feature(f, s2, s))
    oracle = naive_batch(f.spec, f.params, s2) - naive_batch(f.spec, f.params, s)
    assert np.allclose(fwd, oracle, atol=1e-12)


def test_intrinsic_reward_examples():
    f = identity_features()
    s = np.array([0.1, 0.1])
    assert intrinsic_reward(f, s, s, np.array([1.0, 0.0])) == 0.0
    assert intrinsic_reward(f, s, s + [1.0, 0.0], np.array([0.0, 1.0])) == 0.0
    assert intrinsic_reward(f, s, s + [0.6, 0.8], np.array([0.6, 0.8])) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(-5, 5), st.floats(-5, 5))
def test_intrinsic_reward_linear_in_z(seed, alpha, beta):
    f = random_features(seed % 7)
    rng = np.random.default_rng(seed)
    s, s2 = rng.uniform(size=(6, 2)), rng.uniform(size=(6, 2))
    z1, z2 = rng.normal(size=4), rng.normal(size=4)
    lhs = intrinsic_reward(f, s, s2, alpha * z1 + beta * z2)
    rhs = alpha * intrinsic_reward(f, s, s2, z1) + beta * intrinsic_reward(f, s, s2, z2)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


# -- running statistics ------------------------------------------------------------


def stream_stats(xs):
    st_ = RunningStats()
    for x in xs:
        st_ = hilp.running_stats_update(st_, x)
    return st_


def test_running_stats_small_stream():
    st_ = stream_stats([1.0, 2.0, 3.0])
    assert st_.mean == 2.0
    assert st_.std == pytest.approx(np.sqrt(2 / 3), rel=1e-15)
    assert st_.std == pytest.approx(0.8165, abs=1e-4)
    assert hilp.normalize(st_, 2.0) == 0.0


def test_normalize_needs_two_samples():
    with pytest.raises(InsufficientStats):
        hilp.normalize(stream_stats([1.0]), 1.0)


def test_normalize_formula():
    st_ = stream_stats([0.0, 4.0])
    assert hilp.normalize(st_, 6.0) == pytest.approx((6 - 2) / (2 + 1e-8), rel=1e-15)


def test_constant_stream_normalizes_to_zero():
    st_ = stream_stats([3.0] * 10)
    assert st_.m2 == 0.0
    assert hilp.normalize(st_, 3.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=300), st.floats(-1e3, 1e3))
def test_running_stats_match_two_pass(xs, shift):
    xs = np.asarray(xs) + shift
    st_ = stream_stats(xs)
    assert st_.count == len(xs)
    assert st_.m2 >= 0
    mean = xs.sum() / len(xs)
    var = np.sum((xs - mean) ** 2) / len(xs)
    assert st_.mean == pytest.approx(mean, rel=1e-9, abs=1e-9)
    assert st_.var == pytest.approx(var, rel=1e-9, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100), max_size=40), max_size=10))
def test_batch_merge_equals_scalar_updates(chunks):
    merged = RunningStats()
    for c in chunks:
        merged = merged.update_batch(c)
    scalar = stream_stats([x for c in chunks for x in c])
    assert merged.count == scalar.count
    assert merged.mean == pytest.approx(scalar.mean, rel=1e-9, abs=1e-9)
    assert merged.m2 == pytest.approx(scalar.m2, rel=1e-9, abs=1e-7)


def test_running_stats_million_values():
    xs = np.random.default_rng(0).normal(7.0, 3.0, size=1_000_000)
    st_ = RunningStats()
    for chunk in np.array_split(xs, 997):
        st_ = st_.update_batch(chunk)
    assert st_.mean == pytest.approx(xs.mean(), rel=1e-9)
    assert st_.var == pytest.approx(xs.var(), rel=1e-9)
    head = stream_stats(xs[:20_000])
    assert head.var == pytest.approx(xs[:20_000].var(), rel=1e-9)


def test_stats_json_roundtrip():
    st_ = stream_stats([0.5, -1.5, 2.25])
    assert RunningStats.from_json(st_.to_json()) == st_


# -- Hilbert features -------------------------------------------------------------


def test_hilbert_value_parameterization():
    f = random_features(3)
    rng = np.random.default_rng(0)
    s, g = rng.uniform(size=(50, 2)), rng.uniform(size=(50, 2))
    assert np.all(hilp.hilbert_value(f.spec, f.params, s, s) == 0.0)
    assert np.all(hilp.hilbert_value(f.spec, f.params, s, g) <= 0.0)


def test_hilbert_loss_reached_goal_masks_bootstrap():
    """When s' is the goal the target is 0, so the loss only sees -V(s, g)."""
    f = identity_features()
    s = np.array([[0.0, 0.0]])
    g = np.array([[0.3, 0.4]])
    loss, _ = hilp.hilbert_feature_loss(f, s, g.copy(), g, tau=0.9, gamma=0.98, tolerance=1e-6)
    # u = 0 - (-0.5) = 0.5 > 0, weight tau
    assert loss == pytest.approx(0.9 * 0.25, rel=1e-12)


def test_hilbert_loss_unreached_goal():
    f = identity_features()
    s, s2, g = np.array([[0.0, 0.0]]), np.array([[0.1, 0.0]]), np.array([[0.5, 0.0]])
    loss, _ = hilp.hilbert_feature_loss(f, s, s2, g, tau=0.9, gamma=0.5, tolerance=1e-6)
    u = (-1 + 0.5 * -0.4) - (-0.5)  # target - V
    assert loss == pytest.approx(0.1 * u * u, rel=1e-12)


def test_goal_sampling_mixture_and_episode_bounds():
    spec = envmod.gridworld(5, start=None)
    ds = envmod.collect_offline_dataset(spec, "uniform_random", 2000, np.random.default_rng(0))
    cfg = hilp.HilbertConfig(p_next=0.0, p_future=1.0, p_random=0.0)
    rng = np.random.default_rng(1)
    idx = rng.integers(len(ds), size=5000)
    goals = hilp.sample_goals(ds, idx, cfg, rng)
    ends = ds.episode_ends()[idx]
    # every future goal is the next_obs of some transition in [idx, end)
    for i, e, g in zip(idx[:300], ends[:300], goals[:300]):
        assert np.any(np.all(ds.next_obs[i:e] == g, axis=1))
    cfg = hilp.HilbertConfig(p_next=1.0, p_future=0.0, p_random=0.0)
    assert np.array_equal(hilp.sample_goals(ds, idx, cfg, rng), ds.next_obs[idx])


def test_goal_tolerance_defaults():
    grid = envmod.collect_offline_dataset(envmod.gridworld(7), "uniform_random", 10, np.random.default_rng(0))
    pm = envmod.collect_offline_dataset(envmod.pointmass(), "uniform_random", 10, np.random.default_rng(0))
    cfg = hilp.HilbertConfig()
    # below half a cell: only the exact cell matches
    assert hilp.goal_tolerance_for(grid, cfg) < 0.5 / 7
    assert hilp.goal_tolerance_for(pm, cfg) == 0.05


def test_train_hilbert_deterministic(grid5_full):
    a = hilp.train_hilbert_features(grid5_full, 3, 30, np.random.default_rng(0), hidden=(16, 16))
    b = hilp.train_hilbert_features(grid5_full, 3, 30, np.random.default_rng(0), hidden=(16, 16))
    assert nn.params_equal(a.params, b.params) and nn.params_equal(a.target, b.target)


def test_train_hilbert_needs_episodes():
    spec = envmod.gridworld(3)
    ds = envmod.collect_offline_dataset(spec, "uniform_random", 1, np.random.default_rng(0))
    with pytest.raises(hilp.NoCompleteEpisodes):
        hilp.train_hilbert_features(ds, 2, 1, np.random.default_rng(0))


# -- skill pretraining --------------------------------------------------------------


def test_pretrain_zero_steps(grid5_full):
    feat = random_features(0, d=3)
    cfg = TrainConfig(hidden=(16, 16))
    bundle = hilp.pretrain_skills(grid5_full, feat, cfg, 0, np.random.default_rng(9))
    assert bundle.stats == RunningStats()
    init_rng = np.random.default_rng(9).spawn(2)[0]
    fresh = offline_rl.make_nets(2, 3, grid5_full.spec.action_spec, cfg, init_rng)
    for name, p in fresh.named_params().items():
        assert nn.params_equal(p, bundle.nets.named_params()[name])


def test_pretrain_reproducible_bytes(grid5_full):
    feat = random_features(0, d=3)
    cfg = TrainConfig(hidden=(16, 16), batch_size=32)
    run = lambda: nn.encode_checkpoint(hilp.pretrain_skills(grid5_full, feat, cfg, 20, np.random.default_rng(1)).tensors())
    assert run() == run()


def test_pretrain_stats_count_raw_rewards(grid5_full):
    feat = random_features(0, d=3)
    cfg = TrainConfig(hidden=(16, 16), batch_size=32)
    bundle = hilp.pretrain_skills(grid5_full, feat, cfg, 10, np.random.default_rng(1))
    assert bundle.stats.count == 320
    # replay the sampling to recover the raw rewards fed to the statistics
    loop = np.random.default_rng(1).spawn(2)[1]
    raw = []
    nets = offline_rl.make_nets(2, 3, grid5_full.spec.action_spec, cfg, np.random.default_rng(1).spawn(2)[0])
    for _ in range(10):
        idx = loop.integers(len(grid5_full), size=32)
        z = sample_skill(loop, 3, 32)
        batch, r = hilp.skill_batch(grid5_full, feat, idx, z)
        raw.append(r)
        # keep the loop stream aligned with the training loop
        batch.rewards = np.zeros_like(r)
        nets, _ = offline_rl.update_step(nets, batch, cfg, loop)
    raw = np.concatenate(raw)
    assert bundle.stats.mean == pytest.approx(raw.mean(), rel=1e-9)
    assert bundle.stats.var == pytest.approx(raw.var(), rel=1e-9)


def test_normalized_probe_statistics(grid5_full):
    feat = hilp.train_hilbert_features(grid5_full, 4, 300, np.random.default_rng(0), hidden=(32, 32))
    cfg = TrainConfig(hidden=(16, 16), batch_size=64)
    bundle = hilp.pretrain_skills(grid5_full, feat, cfg, 300, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    idx = rng.integers(len(grid5_full), size=10_000)
    r = intrinsic_reward(feat, grid5_full.obs[idx], grid5_full.next_obs[idx], sample_skill(rng, 4, 10_000))
    normed = bundle.stats.normalize(r)
    assert abs(normed.mean()) < 0.05
    assert 0.9 <= normed.std() <= 1.1


@pytest.mark.slow
def test_pointmass_skill_moves_along_x(pointmass_standard):
    """Skill identified from a +x progress reward moves the agent right.

    Uses the default-scale bundle: with a few thousand steps the skill actor
    still swings between directions from one checkpoint to the next.
    """
    ps = pointmass_standard
    bundle = ps.cache.skill_bundle(ps.cfg, ps.ds, 0)
    ds = ps.ds
    progress = envmod.RewardDataset(ds.obs, ds.actions, ds.next_obs, ds.next_obs[:, 0] - ds.obs[:, 0])
    z = bridge.identify_skill_lsq(progress, bundle.feature).z_star
    spec = ds.spec
    s = envmod.initial_states(spec, np.random.default_rng(0), 20)
    start = s.copy()
    for _ in range(spec.max_episode_len):
        s = envmod.dynamics(spec, s, offline_rl.act_deterministic(bundle.nets, s, np.tile(z, (20, 1))))
    assert np.mean(s[:, 0] - start[:, 0]) > 0
