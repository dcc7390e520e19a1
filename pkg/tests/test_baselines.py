from __future__ import annotations

import numpy as np
import pytest

from coolgen import nn
from coolgen.baselines import (
    LaggedAgent,
    OutputMap,
    PidConfig,
    PidState,
    lagged_swap,
    pid_step,
    run_pid,
)


def test_zero_error_gives_bias_points():
    cfg = PidConfig()
    out = pid_step(cfg, PidState(), 0.0)
    assert out == {"t_supply": cfg.t_supply.bias, "flow_frac": cfg.flow_frac.bias}


def test_warm_zone_cools_harder():
    cfg = PidConfig()
    out = pid_step(cfg, PidState(), 2.0)
    assert out["t_supply"] < cfg.t_supply.bias and out["flow_frac"] > cfg.flow_frac.bias


def test_integral_accumulates_and_clamps():
    cfg = PidConfig()
    st = PidState()
    pid_step(cfg, st, 1.0)
    pid_step(cfg, st, 1.0)
    assert st.integral == 2.0
    for _ in range(100):
        out = pid_step(cfg, st, 50.0)
    assert abs(st.integral) <= cfg.integral_clamp
    assert out == {"t_supply": 12.0, "flow_frac": 1.0}


def test_saturated_integrator_unwinds_immediately():
    cfg = PidConfig()
    st = PidState()
    for _ in range(50):
        pid_step(cfg, st, 20.0)
    held = st.integral
    pid_step(cfg, st, -1.0)
    assert st.integral < held


def test_output_map_saturates():
    m = OutputMap(18.0, -1.0, 12.0, 24.0)
    assert m(100.0) == 12.0 and m(-100.0) == 24.0 and m(1.0) == 17.0


def test_config_checks():
    with pytest.raises(ValueError):
        PidConfig(kp=float("nan"))
    with pytest.raises(ValueError):
        PidConfig(integral_clamp=0.0)
    cfg = PidConfig.from_dict({"kp": 2.0, "t_supply": {"bias": 17, "gain": -2, "lo": 10, "hi": 20}})
    assert cfg.kp == 2.0 and cfg.t_supply.gain == -2


def test_step_disturbance_recovers(env):
    target = env.spec.psi.t_target_c
    tr = run_pid(env, PidConfig(), start=0, t_zone0=target + 3.0)
    assert abs(tr.t_zone[0] - target - 3.0) < 1e-12
    assert np.all(np.abs(tr.t_zone[40:] - target) <= 0.5)


def test_pid_uses_only_supply_and_flow(env):
    tr = run_pid(env, PidConfig(), start=10)
    assert np.all(tr.phys_actions[:, 2] == 0.0)
    assert np.all(tr.phys_actions[:, 3] == env.scene.plant.t_chw_default)


# --- lagged agent ------------------------------------------------------------------------------

def _agent():
    spec = nn.MlpSpec((3, 4, 2))
    return LaggedAgent(spec, nn.init_policy(spec, 0))


def test_zero_lag_swaps_immediately():
    agent = _agent()
    new = nn.init_policy(agent.policy_spec, 1)
    lagged_swap(agent, new, 0, now=100)
    assert agent.swaps == [100]
    assert agent.policy_at(100).tobytes() == new.tobytes()


def test_lag_delays_activation():
    agent = _agent()
    old = agent.current.copy()
    new = nn.init_policy(agent.policy_spec, 1)
    lagged_swap(agent, new, 960, now=96)
    assert agent.policy_at(96 + 959).tobytes() == old.tobytes()
    assert agent.policy_at(96 + 960).tobytes() == new.tobytes()
    agent.policy_at(5000)
    assert agent.swaps == [1056]


def test_new_request_replaces_pending():
    agent = _agent()
    a, b = nn.init_policy(agent.policy_spec, 1), nn.init_policy(agent.policy_spec, 2)
    lagged_swap(agent, a, 100, now=0)
    lagged_swap(agent, b, 100, now=50)
    assert agent.policy_at(120).tobytes() == agent.policy_at(0).tobytes()
    assert agent.policy_at(150).tobytes() == b.tobytes()
    assert agent.swaps == [150]


def test_swap_copies_policy():
    agent = _agent()
    new = nn.init_policy(agent.policy_spec, 1)
    lagged_swap(agent, new, 0, now=0)
    new[:] = 0.0
    assert agent.current.any()


def test_negative_lag_rejected():
    with pytest.raises(ValueError):
        lagged_swap(_agent(), np.zeros(28), -1, now=0)


def test_act_uses_active_policy():
    agent = _agent()
    obs = np.array([0.2, 0.5, 0.3])
    assert np.array_equal(agent.act(0, obs), nn.policy_mean(agent.policy_spec, agent.current, obs))
