from __future__ import annotations

import time

import numpy as np
import pytest

from coolgen import hypernet as hn
from coolgen import nn
from coolgen.family import Envelope, EnvelopeError, encode_spec, spec_from_fields
from coolgen.trainer import PoolError, Trajectory, TrajectoryPool

ENV = Envelope(("mu", "t_high"), (100.0, 22.0), (150.0, 27.0))
SMALL = dict(d_mu=3, d_psi=3, hidden=(6,))


def synthetic_pool(grid=3, steps=24, reward_ids=("r",), seed=0):
    """Demonstrations whose actions vary smoothly with the embedding."""
    rng = np.random.default_rng(seed)
    records = []
    for mu in np.linspace(100, 150, grid):
        for th in np.linspace(22, 27, grid):
            spec = spec_from_fields({"mu": mu, "t_high": th})
            emb = encode_spec(spec, ENV)
            e = emb.array()
            obs = rng.uniform(0, 1, (steps, 3))
            act = np.tanh(np.column_stack([obs[:, 1] - e[1], 0.5 * obs[:, 0] + e[0] - 0.5]))
            records.append(Trajectory(spec, emb, obs, act, 0.0))
    ids = reward_ids if len(reward_ids) == 1 else tuple(reward_ids[i % len(reward_ids)] for i in range(len(records)))
    return TrajectoryPool(records, ids, "scene", {"policy_hidden": [4]}, ENV)


@pytest.fixture(scope="module")
def pool():
    return synthetic_pool()


@pytest.fixture(scope="module")
def distilled(pool):
    cfg = hn.DistillConfig(epochs=30, batch_size=64, lr=5e-3, seed=2, **SMALL)
    return hn.distill(pool, cfg)


def small_hyper(seed=0, hidden=(6,)):
    arch = hn.arch_for(ENV, (3, 4, 2), d_mu=3, d_psi=3, hidden=hidden)
    return hn.init_hyper(arch, ENV, seed)


# --- architecture -----------------------------------------------------------------------------

def test_layout_length_matches_slots():
    hp = small_hyper()
    arch = hp.arch
    assert arch.n_theta == nn.policy_size(nn.MlpSpec((3, 4, 2))) == 28
    slots = arch.slots()
    assert slots["w_mu"] == (0, 3) and slots["bias"][1] == arch.n_params == hp.values.size
    spans = sorted(slots.values())
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert len(arch.blocks()) == 3  # two policy layers plus log_std


def test_init_generates_near_bias():
    hp = small_hyper(1)
    mid = hn.generate_weights(hp, np.array([0.5, 0.5]))
    for e in ([0, 0], [1, 1], [0, 1], [0.3, 0.8]):
        th = hn.generate_weights(hp, np.array(e, dtype=float))
        assert np.linalg.norm(th - mid) <= 0.1 * np.linalg.norm(mid)


def test_embedding_checks():
    hp = small_hyper()
    with pytest.raises(ValueError):
        hn.generate_weights(hp, np.zeros(3))
    other = Envelope(("t_high", "mu"), (22.0, 100.0), (27.0, 150.0))
    with pytest.raises(ValueError, match="layout"):
        hn.generate_weights(hp, encode_spec(spec_from_fields({"mu": 120, "t_high": 24}), other))


def test_backward_matches_finite_differences(pool):
    hp = small_hyper(3)
    hp.values += 0.05 * np.random.default_rng(3).standard_normal(hp.values.size)
    model = hn._HyperModel(hp)
    data = hn._group(pool)
    batch = [(data[0], np.arange(5)), (data[4], np.arange(3, 9)), (data[8], np.array([0, 0, 1]))]
    _, g = model.loss_grad(hp.values, batch, 14)
    h = 1e-6
    fd = np.empty_like(g)
    for i in range(g.size):
        vp, vm = hp.values.copy(), hp.values.copy()
        vp[i] += h
        vm[i] -= h
        fd[i] = (model.loss_grad(vp, batch, 14)[0] - model.loss_grad(vm, batch, 14)[0]) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(1e-7, np.abs(g) + np.abs(fd))
    assert rel.max() < 1e-3


def test_generator_is_smooth():
    hp = small_hyper(4)
    hp.values += 0.1 * np.random.default_rng(4).standard_normal(hp.values.size)
    e = np.array([0.4, 0.6])
    d = np.array([1.0, -1.0]) / np.sqrt(2)
    slopes = [np.linalg.norm(hn.generate_weights(hp, e + s * d) - hn.generate_weights(hp, e)) / s
              for s in (1e-4, 1e-5)]
    assert slopes[0] == pytest.approx(slopes[1], rel=1e-2)


# --- zero-shot ---------------------------------------------------------------------------------------

def test_zero_shot_is_pure_and_fast():
    arch = hn.arch_for(ENV, (3, 32, 32, 2))  # default-size generator
    hp = hn.init_hyper(arch, ENV, 0)
    before = hp.values.copy()
    spec = spec_from_fields({"mu": 118, "t_high": 26.5})
    hn.zero_shot_policy(hp, spec)  # warm-up
    t0 = time.perf_counter()
    a = hn.zero_shot_policy(hp, spec)
    elapsed = time.perf_counter() - t0
    b = hn.zero_shot_policy(hp, spec)
    assert elapsed < 0.05
    assert a.theta.tobytes() == b.theta.tobytes()
    assert hp.values.tobytes() == before.tobytes()
    assert a.policy_sizes == (3, 32, 32, 2) and not a.extrapolated


def test_zero_shot_extrapolation():
    hp = small_hyper()
    outside = spec_from_fields({"mu": 185, "t_high": 25})
    with pytest.raises(EnvelopeError):
        hn.zero_shot_policy(hp, outside)
    with pytest.warns(UserWarning):
        zs = hn.zero_shot_policy(hp, outside, allow_extrapolation=True)
    assert zs.extrapolated
    edge = hn.zero_shot_policy(hp, spec_from_fields({"mu": 150, "t_high": 25}))
    assert zs.theta.tobytes() == edge.theta.tobytes()


# --- distillation ------------------------------------------------------------------------------------

def test_split_holds_out_interior_specs():
    train, val = hn.split_specs(synthetic_pool(grid=4), 0.2, seed=0)
    assert len(val) == 3 and len(train) == 13
    assert not any(hn._on_boundary(d) for d in val)
    assert {d.spec for d in train}.isdisjoint({d.spec for d in val})


def test_split_falls_back_when_interior_is_small(pool):
    train, val = hn.split_specs(pool, 0.2, seed=0)  # 3x3 grid has one interior point
    assert len(val) == 2 and len(train) == 7


def test_split_needs_four_specs():
    small = synthetic_pool(grid=3)
    small.records = small.records[:3]
    with pytest.raises(PoolError, match="at least 4"):
        hn.split_specs(small, 0.2, 0)


def test_distill_learns(distilled, pool):
    hp, curves = distilled
    assert len(curves.train_nll) == 31
    assert curves.train_nll[-1] < curves.train_nll[0]
    assert curves.val_mse[-1] < curves.val_mse[0]
    assert [s for s in curves.val_specs] and hp.arch.policy_sizes == (3, 4, 2)
    _, val = hn.split_specs(pool, 0.2, 2)
    assert hn.hyper_mae(hp, val) < 0.5


def test_distill_is_deterministic(pool, distilled):
    hp, _ = hn.distill(pool, hn.DistillConfig(epochs=30, batch_size=64, lr=5e-3, seed=2, **SMALL))
    assert hp.values.tobytes() == distilled[0].values.tobytes()


def test_zero_holdout_has_no_val_curve(pool):
    _, curves = hn.distill(pool, hn.DistillConfig(epochs=2, batch_size=32, holdout=0.0, **SMALL))
    assert curves.val_nll == [] and curves.val_mse == []
    assert len(curves.train_specs) == 9


def test_mixed_rewards_rejected_unless_allowed():
    mixed = synthetic_pool(reward_ids=("a", "b"))
    cfg = hn.DistillConfig(epochs=1, batch_size=32, **SMALL)
    with pytest.raises(PoolError, match="mixes"):
        hn.distill(mixed, cfg)
    with pytest.raises(PoolError):
        hn.train_cpn(mixed, cfg)
    hn.distill(mixed, cfg, allow_mixed_rewards=True)


def test_config_validation():
    with pytest.raises(ValueError):
        hn.DistillConfig(holdout=1.0)
    with pytest.raises(ValueError):
        hn.DistillConfig(epochs=0)


# --- CPN -------------------------------------------------------------------------------------------------

def test_cpn_policy_for_matches_act(pool):
    cpn, curves = hn.train_cpn(pool, hn.DistillConfig(epochs=3, batch_size=32, cpn_hidden=(5,)))
    e = np.array([0.25, 0.75])
    theta, sizes = cpn.policy_for(e)
    obs = np.random.default_rng(0).uniform(0, 1, (10, 3))
    np.testing.assert_allclose(nn.policy_mean(nn.MlpSpec(sizes), theta, obs), cpn.act(obs, e), rtol=1e-12)
    assert sizes == (3, 5, 2)
    assert curves.train_nll[-1] < curves.train_nll[0]


# --- checkpoints ----------------------------------------------------------------------------------------

def test_hyper_checkpoint_round_trip(distilled, tmp_path):
    hp, _ = distilled
    hn.save_hyper(hp, tmp_path / "h.ckpt")
    back = hn.load_hyper(tmp_path / "h.ckpt")
    assert back.arch == hp.arch and back.envelope == hp.envelope
    spec = spec_from_fields({"mu": 131, "t_high": 23.3})
    assert hn.zero_shot_policy(back, spec).theta.tobytes() == hn.zero_shot_policy(hp, spec).theta.tobytes()


def test_checkpoint_kind_checked(pool, tmp_path):
    cpn, _ = hn.train_cpn(pool, hn.DistillConfig(epochs=1, batch_size=32, cpn_hidden=(5,)))
    hn.save_cpn(cpn, tmp_path / "c.ckpt")
    assert hn.load_cpn(tmp_path / "c.ckpt").values.tobytes() == cpn.values.tobytes()
    with pytest.raises(nn.CheckpointError):
        hn.load_hyper(tmp_path / "c.ckpt")
