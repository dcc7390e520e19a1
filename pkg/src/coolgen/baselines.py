"""Non-generative comparison controllers: a tuned PID loop and a lagged DRL agent."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .family import Environment, EpisodeTrace


@dataclass(frozen=True)
class OutputMap:
    """Affine map from the PID signal to one actuator, saturated to [lo, hi]."""

    bias: float
    gain: float
    lo: float
    hi: float

    def __call__(self, u: float) -> float:
        return min(self.hi, max(self.lo, self.bias + self.gain * u))


@dataclass(frozen=True)
class PidConfig:
    kp: float = 1.2
    ki: float = 0.15
    kd: float = 0.0
    integral_clamp: float = 12.0
    # positive signal means the zone is too warm: colder supply air, more flow
    t_supply: OutputMap = OutputMap(18.0, -1.0, 12.0, 24.0)
    flow_frac: OutputMap = OutputMap(0.5, 0.05, 0.2, 1.0)

    def __post_init__(self):
        if not all(math.isfinite(g) for g in (self.kp, self.ki, self.kd)):
            raise ValueError("PID gains must be finite")
        if not self.integral_clamp > 0:
            raise ValueError("integral_clamp must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PidConfig":
        d = dict(d)
        for k in ("t_supply", "flow_frac"):
            if k in d:
                d[k] = OutputMap(**d[k])
        return cls(**d)


@dataclass
class PidState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_step(cfg: PidConfig, state: PidState, error: float) -> dict[str, float]:
    """One discrete PID update on ``error = T_zone - T_target`` (per control step).

    Conditional integration plus a hard clamp keep the integrator from winding
    up while an actuator sits on its limit. Mutates ``state``.
    """
    deriv = 0.0 if state.prev_error is None else error - state.prev_error
    trial = max(-cfg.integral_clamp, min(cfg.integral_clamp, state.integral + error))
    u = cfg.kp * error + cfg.ki * trial + cfg.kd * deriv
    saturated = cfg.t_supply(u) in (cfg.t_supply.lo, cfg.t_supply.hi) and \
        cfg.flow_frac(u) in (cfg.flow_frac.lo, cfg.flow_frac.hi)
    if not saturated or abs(trial) < abs(state.integral):
        state.integral = trial
    u = cfg.kp * error + cfg.ki * state.integral + cfg.kd * deriv
    state.prev_error = error
    return {"t_supply": cfg.t_supply(u), "flow_frac": cfg.flow_frac(u)}


class PidController:
    """Drives the supply temperature and flow of any family layout; other actuators stay mid-range."""

    def __init__(self, cfg: PidConfig, env: Environment):
        self.cfg = cfg
        self.env = env
        self.state = PidState()

    def reset(self) -> None:
        self.state = PidState()

    def __call__(self, t: int, phys_obs: dict, target: float | None = None) -> np.ndarray:
        target = self.env.spec.psi.t_target_c if target is None else target
        out = pid_step(self.cfg, self.state, phys_obs["zone_air_temperature"] - target)
        phys = {"t_supply": out["t_supply"], "flow_frac": out["flow_frac"], "dehum": 0.0,
                "t_chw": self.env.scene.plant.t_chw_default, "tower_fan": 1.0}
        return self.env.to_policy_action(phys)


def run_pid(env: Environment, cfg: PidConfig, start: int = 0, t_zone0: float | None = None) -> EpisodeTrace:
    ctrl = PidController(cfg, env)
    return env.run_controller(ctrl, start=start, t_zone0=t_zone0)


# --- lagged DRL agent ----------------------------------------------------------

@dataclass
class LaggedAgent:
    """Fixed DRL policy whose replacement only activates after a retraining window."""

    policy_spec: nn.MlpSpec
    current: np.ndarray
    pending: np.ndarray | None = None
    issue_step: int = 0
    activation_step: int | None = None
    swaps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.activation_step is not None and self.activation_step < self.issue_step:
            raise ValueError("activation step precedes issue step")

    def _advance(self, step: int) -> None:
        if self.pending is not None and step >= self.activation_step:
            self.current, self.pending = self.pending, None
            self.swaps.append(step)
            self.activation_step = None

    def policy_at(self, step: int) -> np.ndarray:
        self._advance(step)
        return self.current

    def act(self, step: int, obs: np.ndarray) -> np.ndarray:
        return nn.policy_mean(self.policy_spec, self.policy_at(step), obs)


def lagged_swap(agent: LaggedAgent, new_policy: np.ndarray, lag_steps: int, now: int) -> LaggedAgent:
    """Schedule ``new_policy`` to replace the current one ``lag_steps`` after ``now``."""
    if lag_steps < 0:
        raise ValueError("lag must be non-negative")
    agent.pending = np.asarray(new_policy, dtype=float).copy()
    agent.issue_step = now
    agent.activation_step = now + lag_steps
    agent._advance(now)
    return agent
