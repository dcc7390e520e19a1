from __future__ import annotations

import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coolgen import nn
from coolgen.family import Envelope, EnvelopeError, Specification, make_env, sla_from_t_high, spec_from_fields
from coolgen.trainer import (
    PoolError,
    TrainConfig,
    TrainingDivergence,
    build_pool,
    discounted_return,
    eval_starts,
    load_pool,
    rollout,
    save_pool,
    train_policy,
)

ENV = Envelope(("mu", "t_high"), (100.0, 22.0), (150.0, 27.0))
TINY = TrainConfig(episodes=2, hidden=(8,), eval_episodes=2, seed=3)


class Bandit:
    """Constant observation; reward peaks when the action equals ``target``."""

    obs_dim = 1
    act_dim = 1
    episode_steps = 16
    spec = None

    def __init__(self, target=0.3, poison=False):
        self.target = target
        self.poison = poison

    def max_start(self):
        return 0

    def run_episode(self, sizes, theta, start=0, noise=None, t_zone0=None):
        spec = nn.MlpSpec(tuple(int(s) for s in sizes))
        obs = np.full((self.episode_steps + 1, 1), 0.5)
        mean = nn.policy_mean(spec, theta, obs[:-1])
        sigma = np.exp(np.clip(theta[-1], -5.0, 1.0))
        a = mean if noise is None else mean + sigma * noise
        r = -(np.clip(a[:, 0], -1, 1) - self.target) ** 2
        if self.poison:
            r[3] = math.nan
        return SimpleNamespace(obs=obs, actions=a, reward=r)


def test_discounted_return_by_hand():
    assert discounted_return([1.0, 2.0, 3.0], 0.5) == 1.0 + 0.5 * 2.0 + 0.25 * 3.0
    assert discounted_return([], 0.9) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), max_size=30))
def test_discounted_return_gamma_one_is_sum(rs):
    assert discounted_return(rs, 1.0) == pytest.approx(sum(rs), abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(algorithm="ppo")
    with pytest.raises(ValueError):
        TrainConfig(cem_population=4, cem_elite=8)
    cfg = TrainConfig(hidden=[16, 8])
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("algorithm,episodes", [("a2c", 400), ("cem", 15)])
def test_learns_bandit_optimum(algorithm, episodes):
    cfg = TrainConfig(algorithm=algorithm, episodes=episodes, gamma=0.5, hidden=(4,), lr=0.02, seed=0)
    theta, log = train_policy(Bandit(0.3), cfg)
    mean = nn.policy_mean(cfg.policy_spec(1, 1), theta, np.array([0.5]))[0]
    assert abs(mean - 0.3) < 0.05
    assert len(log.returns) == episodes


def test_training_is_deterministic(env):
    cfg = TrainConfig(episodes=3, hidden=(8,), seed=9)
    a, la = train_policy(env, cfg)
    b, lb = train_policy(env, cfg)
    assert a.tobytes() == b.tobytes()
    assert la.returns == lb.returns


def test_nan_reward_diverges():
    with pytest.raises(TrainingDivergence) as exc:
        train_policy(Bandit(poison=True), TrainConfig(episodes=3, hidden=(4,)))
    assert exc.value.episode == 0


def test_rollout_return_matches_replay(env):
    theta = nn.init_policy(nn.MlpSpec((env.obs_dim, 8, env.act_dim)), 2)
    traj = rollout(env, theta, start=5, gamma=0.9, envelope=ENV, hidden=(8,))
    tr = env.run_episode((env.obs_dim, 8, env.act_dim), theta, start=5)
    assert traj.ret == discounted_return(tr.reward, 0.9)
    assert traj.obs.shape == (env.episode_steps, env.obs_dim)
    assert traj.actions.shape == (env.episode_steps, env.act_dim)
    assert traj.embedding.values == pytest.approx((0.5, 0.6))
    np.testing.assert_array_equal(traj.obs, tr.obs[:-1])


def test_stochastic_rollout_seeded(env):
    theta = nn.init_policy(nn.MlpSpec((env.obs_dim, 8, env.act_dim)), 2)
    a = rollout(env, theta, deterministic=False, seed=4, hidden=(8,))
    b = rollout(env, theta, deterministic=False, seed=4, hidden=(8,))
    c = rollout(env, theta, deterministic=False, seed=5, hidden=(8,))
    assert a.actions.tobytes() == b.actions.tobytes()
    assert a.actions.tobytes() != c.actions.tobytes()


def test_eval_starts_are_consecutive_days(env):
    assert eval_starts(env, 3) == [0, 96, 192]


def _factory(scene, workload, reward):
    return lambda spec: make_env(scene, spec, workload, reward)


def test_single_spec_pool_has_eval_episodes_records(scene, workload, reference_reward, tmp_path):
    spec = spec_from_fields({"mu": 125, "t_high": 25})
    experts = {}
    pool = build_pool(_factory(scene, workload, reference_reward), [spec], TINY, ENV, reference_reward.id,
                      scene.content_hash(), {"mu": [125], "t_high": [25]}, path=tmp_path / "p.jsonl",
                      experts=experts)
    assert len(pool.records) == TINY.eval_episodes
    assert pool.specs() == [spec] and pool.complete
    assert set(experts) == {spec}
    back = load_pool(tmp_path / "p.jsonl")
    assert back.header() == pool.header()
    for a, b in zip(pool.records, back.records):
        assert a.obs.tobytes() == b.obs.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()
        assert a.ret == b.ret and a.spec == b.spec and a.metrics == b.metrics


def test_save_pool_is_byte_stable(scene, workload, reference_reward, tmp_path):
    specs = [spec_from_fields({"mu": m, "t_high": 24}) for m in (100, 150)]
    pool = build_pool(_factory(scene, workload, reference_reward), specs, TINY, ENV, reference_reward.id,
                      scene.content_hash(), {})
    save_pool(pool, tmp_path / "a.jsonl")
    save_pool(load_pool(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_corrupt_record_detected(scene, workload, reference_reward, tmp_path):
    spec = spec_from_fields({"mu": 125, "t_high": 25})
    path = tmp_path / "p.jsonl"
    build_pool(_factory(scene, workload, reference_reward), [spec], TINY, ENV, "rid", scene.content_hash(), {},
               path=path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["return"] += 1.0
    lines[1] = json.dumps(rec, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PoolError, match="checksum"):
        load_pool(path)


def test_pool_rejects_missing_header(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"footer": {}}\n')
    with pytest.raises(PoolError):
        load_pool(tmp_path / "p.jsonl")


def test_divergent_spec_is_skipped(scene, workload, reference_reward):
    good = spec_from_fields({"mu": 125, "t_high": 25})
    bad = spec_from_fields({"mu": 110, "t_high": 23})
    real = _factory(scene, workload, reference_reward)

    def factory(spec):
        if spec == bad:
            b = Bandit(poison=True)
            b.spec = spec
            return b
        return real(spec)

    pool = build_pool(factory, [bad, good], TINY, ENV, "rid", scene.content_hash(), {})
    assert not pool.complete
    assert pool.specs() == [good]
    assert pool.skipped[0]["spec"] == bad.to_dict()


def test_pool_outside_envelope_rejected(scene, workload, reference_reward):
    with pytest.raises(EnvelopeError):
        build_pool(_factory(scene, workload, reference_reward), [Specification(180, sla_from_t_high(25.0))],
                   TINY, ENV, "rid", scene.content_hash(), {})


def test_mixed_reward_ids_flagged(scene, workload, reference_reward):
    specs = [spec_from_fields({"mu": m, "t_high": 24}) for m in (100, 150)]
    pool = build_pool(_factory(scene, workload, reference_reward), specs, TINY, ENV,
                      lambda s: f"r{s.mu}", scene.content_hash(), {})
    assert pool.reward_ids == ("r100", "r150")
    with pytest.raises(PoolError):
        pool.reward_id
