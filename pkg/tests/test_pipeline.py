from __future__ import annotations

import numpy as np
import pytest

from coolgen import pipeline
from coolgen.config import ConfigError, ScenarioConfig, ScenarioEvent
from coolgen.family import make_env, spec_from_fields
from coolgen.trainer import eval_starts


def test_spike_ratio_by_hand():
    series = [0.1] * 7 + [0.9, 0.2, 0.1]
    assert pipeline.spike_ratio(series, 7) == pytest.approx(9.0)
    assert pipeline.spike_ratio(series, 7, window=2) == pytest.approx(9.0)


def test_spike_ratio_floors_quiet_history():
    assert pipeline.spike_ratio([0.0] * 7 + [0.05], 7) == pytest.approx(50.0)
    assert pipeline.spike_ratio([0.0] * 7 + [0.05], 7, floor=0.01) == pytest.approx(5.0)


def test_scenario_segments():
    sc = ScenarioConfig()
    segs = sc.segments("a")
    assert [d for d, _ in segs] == [0, 14, 28]
    assert segs[0][1] == spec_from_fields({"mu": 118, "t_high": 26.5})
    assert segs[1][1] == spec_from_fields({"mu": 118, "t_high": 23.0})
    assert segs[2][1] == spec_from_fields({"mu": 145, "t_high": 23.0})


def test_scenario_config_checks():
    with pytest.raises(ConfigError):
        ScenarioConfig(events=(ScenarioEvent(20, mu=120), ScenarioEvent(10, mu=130)))
    with pytest.raises(ConfigError):
        ScenarioConfig(events=(ScenarioEvent(40, mu=120),))
    with pytest.raises(ConfigError):
        ScenarioConfig(controllers=("dcopilot", "oracle"))


def test_expert_set_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    sizes = (3, 4, 2)
    specs = [spec_from_fields({"mu": m, "t_high": 25}) for m in (100, 150)]
    ex = pipeline.ExpertSet(sizes, {s: rng.standard_normal(28) for s in specs}, rng.standard_normal(28))
    ex.save(tmp_path / "e.ckpt")
    back = pipeline.ExpertSet.load(tmp_path / "e.ckpt")
    assert back.policy_sizes == sizes and list(back.thetas) == specs
    assert all(np.array_equal(back.thetas[s], ex.thetas[s]) for s in specs)
    assert np.array_equal(back.base, ex.base)


@pytest.mark.slow
def test_pool_experts_beat_random_actions(ref, unified):
    """Each pool policy keeps violation cost at most 0.25x a random-action policy on its own spec."""
    cfg, scene, workload, reward = ref
    pool, _ = unified
    by_spec: dict = {}
    for r in pool.records:
        by_spec.setdefault(r.spec, []).append(r.metrics.violation_cost_s1)
    assert len(by_spec) == 25 and pool.complete
    rng = np.random.default_rng(0)
    for spec, costs in by_spec.items():
        env = make_env(scene, spec, workload, reward, episode_steps=cfg.episode_steps)
        rand = [env.metrics(env.run_controller(lambda t, po: rng.uniform(-1, 1, env.act_dim), start=s))
                .violation_cost_s1 for s in eval_starts(env, len(costs))]
        assert np.mean(costs) <= 0.25 * np.mean(rand), (spec, np.mean(costs), np.mean(rand))
