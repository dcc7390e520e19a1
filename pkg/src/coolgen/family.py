"""Specification-driven MDP family on top of the scene surrogate.

A ``Specification`` is the pair (mu, psi): total server units and SLA
parameters. ``make_env`` turns a scene, a specification, a workload trace and
a reward form into an ``Environment``; observation and action layouts are
fixed per task family (a)-(e) so every member of a family shares them.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import dsl, physics
from . import _core
from .scene import Meters, SceneConfig, WorkloadTrace, ambient, synthesize_variants

OBS_FULL = (
    "workload",
    "zone_air_temperature",
    "supply_air_temperature",
    "zone_relative_humidity",
    "chilled_water_temperature",
    "outdoor_wetbulb",
)
# normalization ranges, also used as probe ranges for reward validation
OBS_RANGES = {
    "workload": (0.0, 1.0),
    "zone_air_temperature": (10.0, 40.0),
    "supply_air_temperature": (12.0, 24.0),
    "zone_relative_humidity": (0.0, 100.0),
    "chilled_water_temperature": (6.0, 14.0),
    "outdoor_wetbulb": (10.0, 35.0),
}
ACT_FULL = ("t_supply", "flow_frac", "dehum", "t_chw", "tower_fan")
DEFAULT_ACT_BOUNDS = {
    "t_supply": (12.0, 24.0),
    "flow_frac": (0.2, 1.0),
    "dehum": (0.0, 1.0),
    "t_chw": (6.0, 14.0),
    "tower_fan": (0.2, 1.0),
}
# reward-visible meter channels (kW, liters); ranges are probe ranges only
METER_NAMES = ("IT_power", "CRAC_power", "Chiller_power", "CHWP_power", "Tower_power", "water_usage")
METER_RANGES = {
    "IT_power": (10.0, 250.0),
    "CRAC_power": (0.0, 60.0),
    "Chiller_power": (0.0, 100.0),
    "CHWP_power": (0.0, 20.0),
    "Tower_power": (0.0, 20.0),
    "water_usage": (0.0, 300.0),
}
SLA_RANGES = {
    "t_low": (10.0, 30.0),
    "t_high": (15.0, 35.0),
    "t_target": (15.0, 35.0),
    "rh_high": (30.0, 90.0),
}


class LayoutMismatchError(ValueError):
    """Reward or scene is incompatible with the task family layout."""


class EnvelopeError(ValueError):
    def __init__(self, field_name: str, value: float, lo: float, hi: float):
        super().__init__(f"{field_name}={value} is outside the trained envelope [{lo}, {hi}]")
        self.field = field_name


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FamilyLayout:
    family: str
    obs_names: tuple[str, ...]
    act_names: tuple[str, ...]
    act_bounds: tuple[tuple[float, float], ...]
    sla_names: tuple[str, ...]
    needs_dehumidifier: bool = False
    objectives: tuple[str, ...] = ("pue",)

    @property
    def obs_idx(self) -> np.ndarray:
        return np.array([OBS_FULL.index(n) for n in self.obs_names], dtype=np.int64)

    @property
    def act_idx(self) -> np.ndarray:
        return np.array([ACT_FULL.index(n) for n in self.act_names], dtype=np.int64)

    @property
    def obs_dim(self) -> int:
        return len(self.obs_names)

    @property
    def act_dim(self) -> int:
        return len(self.act_names)


_FAMILY_DEFS = {
    "a": (OBS_FULL[:3], ACT_FULL[:2], ("t_low", "t_high", "t_target"), False, ("pue",)),
    "b": (OBS_FULL[:4], ACT_FULL[:3], ("t_low", "t_high", "t_target", "rh_high"), True, ("pue",)),
    "c": (OBS_FULL[:4], ACT_FULL[:3], ("t_low", "t_high", "t_target", "rh_high"), True, ("pue",)),
    "d": (OBS_FULL[:3] + OBS_FULL[4:], ("t_supply", "flow_frac", "t_chw", "tower_fan"),
          ("t_low", "t_high", "t_target"), False, ("wue",)),
    "e": (OBS_FULL[:3] + OBS_FULL[4:], ("t_supply", "flow_frac", "t_chw", "tower_fan"),
          ("t_low", "t_high", "t_target"), False, ("pue", "wue")),
}
FAMILIES = tuple(_FAMILY_DEFS)


def family_layout(family: str, act_bounds: Mapping[str, Sequence[float]] | None = None) -> FamilyLayout:
    if family not in _FAMILY_DEFS:
        raise ValueError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    obs, act, sla, dehum, objectives = _FAMILY_DEFS[family]
    bounds = dict(DEFAULT_ACT_BOUNDS)
    if act_bounds:
        for k, v in act_bounds.items():
            if k not in bounds:
                raise ValueError(f"unknown action {k!r}")
            bounds[k] = (float(v[0]), float(v[1]))
    return FamilyLayout(family, obs, act, tuple(bounds[a] for a in act), sla, dehum, objectives)


def reward_obs_schema(layout: FamilyLayout, plant_metering: bool = True) -> dict[str, tuple[float, float]]:
    names = {n: OBS_RANGES[n] for n in layout.obs_names}
    meters = METER_NAMES if plant_metering else ("IT_power", "CRAC_power")
    names.update({m: METER_RANGES[m] for m in meters})
    return names


def reward_sla_schema(layout: FamilyLayout) -> dict[str, tuple[float, float]]:
    return {n: SLA_RANGES[n] for n in layout.sla_names}


# --- specifications ----------------------------------------------------------

@dataclass(frozen=True)
class SlaParams:
    t_low_c: float
    t_high_c: float
    t_target_c: float
    rh_high_pct: float | None = None
    eps_temp_c: float = 1.0
    eps_rh_pct: float = 5.0

    def __post_init__(self):
        if not self.t_low_c < self.t_high_c:
            raise ValueError("t_low must be below t_high")
        if not self.t_low_c <= self.t_target_c <= self.t_high_c:
            raise ValueError("t_target must lie inside [t_low, t_high]")
        if self.eps_temp_c < 0 or self.eps_rh_pct < 0:
            raise ValueError("eps must be non-negative")

    def bindings(self) -> dict[str, float]:
        out = {"t_low": self.t_low_c, "t_high": self.t_high_c, "t_target": self.t_target_c}
        if self.rh_high_pct is not None:
            out["rh_high"] = self.rh_high_pct
        return out


def sla_from_t_high(t_high: float, t_low: float = 18.0, target_margin: float = 2.0,
                    rh_high: float | None = None) -> SlaParams:
    """Band ``[t_low, t_high]`` with the setpoint ``target_margin`` below the ceiling."""
    return SlaParams(t_low, float(t_high), float(t_high) - target_margin, rh_high)


@dataclass(frozen=True)
class Specification:
    mu: int
    psi: SlaParams
    family: str = "a"

    def field(self, name: str) -> float:
        if name == "mu":
            return float(self.mu)
        b = self.psi.bindings()
        if name not in b:
            raise KeyError(name)
        return b[name]

    def to_dict(self) -> dict:
        return {"mu": self.mu, "psi": dataclasses.asdict(self.psi), "family": self.family}

    @classmethod
    def from_dict(cls, d: dict) -> "Specification":
        return cls(int(d["mu"]), SlaParams(**d["psi"]), d.get("family", "a"))


def spec_from_fields(fields: Mapping[str, float], family: str = "a", t_low: float = 18.0,
                     target_margin: float = 2.0, rh_high: float = 60.0) -> Specification:
    """Specification from envelope field values; unspecified SLA fields follow the reference rule."""
    t_high = float(fields["t_high"])
    needs_rh = _FAMILY_DEFS[family][3]
    psi = SlaParams(
        t_low_c=float(fields.get("t_low", t_low)),
        t_high_c=t_high,
        t_target_c=float(fields.get("t_target", t_high - target_margin)),
        rh_high_pct=float(fields.get("rh_high", rh_high)) if needs_rh else None,
    )
    return Specification(int(round(fields["mu"])), psi, family)


@dataclass(frozen=True)
class Envelope:
    """Axis-aligned box of trained specification values, in embedding order."""

    fields: tuple[str, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        for f, a, b in zip(self.fields, self.lo, self.hi):
            if a > b:
                raise ValueError(f"envelope field {f!r} has min {a} > max {b}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[float]]) -> "Envelope":
        return cls(tuple(d), tuple(float(v[0]) for v in d.values()), tuple(float(v[1]) for v in d.values()))

    def to_dict(self) -> dict:
        return {f: [a, b] for f, a, b in zip(self.fields, self.lo, self.hi)}

    def center(self) -> dict[str, float]:
        return {f: 0.5 * (a + b) for f, a, b in zip(self.fields, self.lo, self.hi)}

    def range(self, name: str) -> tuple[float, float]:
        i = self.fields.index(name)
        return self.lo[i], self.hi[i]

    @property
    def mu_fields(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.fields) if f == "mu")

    @property
    def psi_fields(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.fields) if f != "mu")


@dataclass(frozen=True)
class TaskEmbedding:
    values: tuple[float, ...]
    layout: tuple[str, ...]
    extrapolated: bool = False

    def array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


def encode_spec(spec: Specification, envelope: Envelope, allow_extrapolation: bool = False) -> TaskEmbedding:
    """Min-max normalize the envelope fields of ``spec`` onto [0, 1]."""
    vals = []
    extrapolated = False
    for name, lo, hi in zip(envelope.fields, envelope.lo, envelope.hi):
        x = spec.field(name)
        if x < lo or x > hi:
            if not allow_extrapolation:
                raise EnvelopeError(name, x, lo, hi)
            warnings.warn(f"{name}={x} clamped to envelope [{lo}, {hi}]", stacklevel=2)
            extrapolated = True
            x = min(max(x, lo), hi)
        vals.append(0.0 if hi == lo else (x - lo) / (hi - lo))
    return TaskEmbedding(tuple(vals), envelope.fields, extrapolated)


def decode_embedding(emb: TaskEmbedding, envelope: Envelope) -> dict[str, float]:
    return {n: lo + v * (hi - lo) for n, v, lo, hi in zip(envelope.fields, emb.values, envelope.lo, envelope.hi)}


# --- traces and metrics ------------------------------------------------------

@dataclass
class EpisodeTrace:
    obs: np.ndarray  # (T+1, obs_dim), normalized
    actions: np.ndarray  # (T, act_dim), policy-space actions before clipping
    phys_actions: np.ndarray  # (T, 5) applied actuator values
    meters: np.ndarray  # (T, 6): p_it, p_crac, p_chiller, p_pump, p_tower, water_l
    t_zone: np.ndarray  # (T+1,)
    rh_zone: np.ndarray  # (T+1,)
    reward: np.ndarray  # (T,)
    dt_s: float = 900.0
    start: int = 0
    final_state: tuple[float, float, float, float] | None = None  # feeds init_state of a follow-on episode

    def __len__(self) -> int:
        return len(self.reward)


METRICS_COLUMNS = (
    "violation_cost_s1", "violation_cost_s2", "violation_rate_s1", "violation_rate_s2", "pue", "wue",
)


@dataclass(frozen=True)
class MetricsReport:
    violation_cost_s1: float
    violation_cost_s2: float
    violation_rate_s1: float
    violation_rate_s2: float
    pue: float
    wue: float

    def to_dict(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in METRICS_COLUMNS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**{c: float(d[c]) for c in METRICS_COLUMNS})


def exceedance(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.maximum(0.0, np.maximum(v - hi, lo - v))


def violation_cost(trace: EpisodeTrace, psi: SlaParams) -> dict[str, float]:
    """Time-averaged band exceedance; eps only gates the violation rate."""
    t = np.asarray(trace.t_zone)[1:]
    if len(t) == 0:
        raise MetricError("empty trace")
    ex = exceedance(t, psi.t_low_c, psi.t_high_c)
    out = {"violation_cost_s1": float(np.mean(ex)), "violation_rate_s1": float(np.mean(ex > psi.eps_temp_c))}
    if psi.rh_high_pct is not None:
        rh_ex = np.maximum(0.0, np.asarray(trace.rh_zone)[1:] - psi.rh_high_pct)
        out["violation_cost_s2"] = float(np.mean(rh_ex))
        out["violation_rate_s2"] = float(np.mean(rh_ex > psi.eps_rh_pct))
    else:
        out["violation_cost_s2"] = 0.0
        out["violation_rate_s2"] = 0.0
    return out


def efficiency_metrics(trace: EpisodeTrace) -> tuple[float, float]:
    m = np.asarray(trace.meters)
    it = float(np.sum(m[:, 0]))
    if it <= 0.0:
        raise MetricError("IT energy is zero; PUE/WUE undefined")
    pue = float(np.sum(m[:, :5])) / it
    wue = float(np.sum(m[:, 5])) / (it * trace.dt_s / 3600.0)
    return pue, wue


def metrics_report(trace: EpisodeTrace, psi: SlaParams) -> MetricsReport:
    pue, wue = efficiency_metrics(trace)
    return MetricsReport(pue=pue, wue=wue, **violation_cost(trace, psi))


def metrics_csv(rows: Sequence[Mapping], extra_columns: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(extra_columns) + list(METRICS_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in writer.fieldnames})
    return buf.getvalue()


def metrics_json(rows: Sequence[Mapping]) -> str:
    return json.dumps(list(rows), indent=2, sort_keys=True)


# --- environment -------------------------------------------------------------

def _norm_arrays() -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([OBS_RANGES[n][0] for n in OBS_FULL])
    hi = np.array([OBS_RANGES[n][1] for n in OBS_FULL])
    return lo, 1.0 / (hi - lo)


_OBS_LO, _OBS_INV = _norm_arrays()


@dataclass
class _StepState:
    t: int
    t_z: float
    w: float
    t_sup: float
    t_chw: float


class Environment:
    """One MDP of the family. Not thread-safe; share the scene, not the handle.

    Actions are given in policy space ``[-1, 1]^act_dim`` (values outside are
    clipped) and mapped affinely onto the family's actuator bounds.
    Observations are min-max normalized onto [0, 1].
    """

    def __init__(self, scene: SceneConfig, spec: Specification, workload: WorkloadTrace,
                 reward: dsl.RewardForm | None, episode_steps: int = 96, room_id: str | None = None,
                 plant_metering: bool = True, act_bounds=None):
        self.layout = family_layout(spec.family, act_bounds)
        self.spec = spec
        self.reward = reward
        self.episode_steps = int(episode_steps)
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be >= 1")
        if len(workload) < self.episode_steps:
            raise ValueError("workload trace is shorter than the episode")
        self.workload = workload
        self.plant_metering = plant_metering
        if room_id is None:
            candidates = [r for r in scene.rooms if r.has_dehumidifier or not self.layout.needs_dehumidifier]
            if not candidates:
                raise LayoutMismatchError(f"family {spec.family!r} needs a room with a dehumidifier")
            room_id = candidates[0].room_id
        elif self.layout.needs_dehumidifier and not scene.room(room_id).has_dehumidifier:
            raise LayoutMismatchError(f"room {room_id!r} has no dehumidifier")
        self.room_id = room_id
        if scene.room(room_id).server_units != spec.mu:
            scene = synthesize_variants(scene, [spec.mu], room_id=room_id)[0]
        self.scene = scene
        room = scene.room(room_id)
        self._room_params = room.params()
        self._plant_params = scene.plant.params()
        self._room_arr = np.array(self._room_params, dtype=float)
        self._chillers = np.array(self._plant_params.chillers, dtype=float)
        self._towers = np.array(self._plant_params.towers, dtype=float)
        self._act_lo = np.array([DEFAULT_ACT_BOUNDS[a][0] for a in ACT_FULL])
        self._act_hi = np.array([DEFAULT_ACT_BOUNDS[a][1] for a in ACT_FULL])
        for i, a in enumerate(self.layout.act_names):
            k = ACT_FULL.index(a)
            self._act_lo[k], self._act_hi[k] = self.layout.act_bounds[i]
        self._act_default = np.array([18.0, 0.6, 0.0, scene.plant.t_chw_default, 1.0])
        if reward is not None:
            issues = dsl.validate(reward, reward_obs_schema(self.layout, plant_metering),
                                  reward_sla_schema(self.layout))
            bad = [i for i in issues if i.code in ("unknown-obs", "unknown-sla")]
            if bad:
                raise LayoutMismatchError("; ".join(i.message for i in bad))
        self._psi = spec.psi.bindings()
        self._state: _StepState | None = None
        self._start = 0

    @property
    def obs_dim(self) -> int:
        return self.layout.obs_dim

    @property
    def act_dim(self) -> int:
        return self.layout.act_dim

    @property
    def dt(self) -> float:
        return self.scene.timestep_s

    def max_start(self) -> int:
        return len(self.workload) - self.episode_steps

    def _util(self, start: int, n: int) -> np.ndarray:
        u = self.workload.utilization
        idx = np.minimum(np.arange(start, start + n), len(u) - 1)
        return u[idx]

    def initial_values(self, t_zone0: float | None = None,
                       init_state: Sequence[float] | None = None) -> tuple[float, float, float, float]:
        """Initial (t_zone, humidity ratio, t_supply, t_chw); ``init_state`` carries a previous episode's end."""
        if init_state is not None:
            t_z, w, t_sup, t_chw = (float(v) for v in init_state)
            return t_z, w, t_sup, t_chw
        t_z = self.spec.psi.t_target_c if t_zone0 is None else float(t_zone0)
        w = 0.5 * physics.w_sat(t_z)
        return t_z, w, 18.0, float(self._act_default[3])

    def to_policy_action(self, phys: Mapping[str, float]) -> np.ndarray:
        """Map physical actuator values onto policy space (inverse of the env mapping)."""
        out = np.empty(self.act_dim)
        for i, a in enumerate(self.layout.act_names):
            lo, hi = self.layout.act_bounds[i]
            out[i] = 2.0 * (phys[a] - lo) / (hi - lo) - 1.0
        return out

    def _full_obs(self, t: int, st: _StepState) -> np.ndarray:
        rh = physics.rh_from_w(st.w, st.t_z)
        _, t_wb = ambient(self._start + t)
        full = np.array([self._util(self._start + t, 1)[0], st.t_z, st.t_sup, rh, st.t_chw, t_wb])
        return full

    def _observe(self, t: int, st: _StepState) -> np.ndarray:
        idx = self.layout.obs_idx
        return (self._full_obs(t, st)[idx] - _OBS_LO[idx]) * _OBS_INV[idx]

    def reset(self, start: int = 0, t_zone0: float | None = None,
              init_state: Sequence[float] | None = None) -> np.ndarray:
        if not 0 <= start <= self.max_start():
            raise ValueError(f"start {start} outside [0, {self.max_start()}]")
        self._start = int(start)
        t_z, w, t_sup, t_chw = self.initial_values(t_zone0, init_state)
        self._state = _StepState(0, t_z, w, t_sup, t_chw)
        return self._observe(0, self._state)

    def step(self, action) -> tuple[np.ndarray, float, bool, Meters]:
        st = self._state
        if st is None:
            raise RuntimeError("call reset() first")
        if st.t >= self.episode_steps:
            raise RuntimeError("episode is done; call reset()")
        u = np.clip(np.asarray(action, dtype=float).reshape(self.act_dim), -1.0, 1.0)
        phys = self._act_default.copy()
        for j, k in enumerate(self.layout.act_idx):
            phys[k] = self._act_lo[k] + 0.5 * (u[j] + 1.0) * (self._act_hi[k] - self._act_lo[k])
        abs_t = self._start + st.t
        t_out, t_wb = ambient(abs_t)
        util = float(self._util(abs_t, 1)[0])
        t_chw = float(phys[3])
        t_z, w, t_sup, q_coil, p_it, p_hvac = physics.room_step(
            self._room_params, st.t_z, st.w, float(phys[0]), float(phys[1]), float(phys[2]),
            t_chw, util, t_out, self.dt,
        )
        p_ch, p_pump, p_tower, water = physics.plant_step(self._plant_params, q_coil, t_chw, t_wb,
                                                          float(phys[4]), self.dt)
        meters = Meters(p_it, p_hvac, p_ch, p_pump, p_tower, water)
        self._state = _StepState(st.t + 1, t_z, w, t_sup, t_chw)
        rh = physics.rh_from_w(w, t_z)
        reward = 0.0
        if self.reward is not None:
            named = self._named_values(
                np.array([util]), np.array([t_z]), np.array([t_sup]), np.array([rh]),
                np.array([t_chw]), np.array([t_wb]),
                np.array([[p_it, p_hvac, p_ch, p_pump, p_tower, water]]),
            )
            reward = float(dsl.evaluate(self.reward, {k: float(v[0]) for k, v in named.items()}, self._psi))
        done = self._state.t >= self.episode_steps
        return self._observe(self._state.t, self._state), reward, done, meters

    def _named_values(self, util, t_z, t_sup, rh, t_chw, t_wb, meters) -> dict[str, np.ndarray]:
        named = {
            "workload": util,
            "zone_air_temperature": t_z,
            "supply_air_temperature": t_sup,
            "zone_relative_humidity": rh,
            "chilled_water_temperature": t_chw,
            "outdoor_wetbulb": t_wb,
        }
        out = {k: named[k] for k in self.layout.obs_names}
        for j, m in enumerate(METER_NAMES):
            out[m] = meters[:, j]
        return out

    def run_episode(self, policy_sizes, theta: np.ndarray, start: int = 0, noise: np.ndarray | None = None,
                    t_zone0: float | None = None, reward: dsl.RewardForm | None = None,
                    init_state: Sequence[float] | None = None) -> EpisodeTrace:
        """Fast path: roll a whole episode with the policy inside the kernel."""
        T = self.episode_steps
        if not 0 <= start <= self.max_start():
            raise ValueError(f"start {start} outside [0, {self.max_start()}]")
        sizes = np.asarray(policy_sizes, dtype=np.int64)
        if sizes[0] != self.obs_dim or sizes[-1] != self.act_dim:
            raise LayoutMismatchError(f"policy sizes {tuple(sizes)} do not match obs/act dims "
                                      f"{self.obs_dim}/{self.act_dim}")
        idx = np.arange(start, start + T + 1)
        t_out, t_wb = ambient(idx)
        util = self._util(start, T + 1)
        init = np.array(self.initial_values(t_zone0, init_state))
        obs, u, phys, state, meters = _core.run_episode(
            sizes, theta, self.layout.obs_idx, _OBS_LO, _OBS_INV, self.layout.act_idx,
            self._act_lo, self._act_hi, self._act_default, self._room_arr, self._chillers,
            self._towers, self._plant_params.pump_kw, self.dt, util, t_out, t_wb, noise, init,
        )
        trace = EpisodeTrace(obs=obs, actions=u, phys_actions=phys, meters=meters, t_zone=state[:, 0],
                             rh_zone=state[:, 2], reward=np.zeros(T), dt_s=self.dt, start=start,
                             final_state=tuple(float(v) for v in state[-1, [0, 1, 3, 4]]))
        trace.reward = self.rewards_for(trace, reward, _t_wb=t_wb[:T], _util=util[:T], _state=state)
        return trace

    def rewards_for(self, trace: EpisodeTrace, reward: dsl.RewardForm | None = None, _t_wb=None,
                    _util=None, _state=None) -> np.ndarray:
        """Vectorized reward of every transition in ``trace``."""
        form = reward if reward is not None else self.reward
        T = len(trace.actions)
        if form is None:
            return np.zeros(T)
        if _t_wb is None:
            _, t_wb = ambient(np.arange(trace.start, trace.start + T))
            _util = self._util(trace.start, T)
            t_sup = np.maximum(trace.phys_actions[:, 0], trace.phys_actions[:, 3] + physics.COIL_APPROACH_C)
            t_chw = trace.phys_actions[:, 3]
        else:
            t_wb = _t_wb
            t_sup = _state[1:, 3]
            t_chw = _state[1:, 4]
        named = self._named_values(_util, trace.t_zone[1:], t_sup, trace.rh_zone[1:], t_chw, t_wb, trace.meters)
        return np.asarray(dsl.evaluate(form, named, self._psi), dtype=float) * np.ones(T)

    def physical_observation(self) -> dict[str, float]:
        """Un-normalized full observation at the current step (for rule-based controllers)."""
        if self._state is None:
            raise RuntimeError("call reset() first")
        return dict(zip(OBS_FULL, (float(v) for v in self._full_obs(self._state.t, self._state))))

    def run_controller(self, act: Callable[[int, dict], np.ndarray], start: int = 0,
                       t_zone0: float | None = None, init_state: Sequence[float] | None = None) -> EpisodeTrace:
        """Roll one episode through ``step`` with ``act(t, physical_obs) -> policy action``."""
        T = self.episode_steps
        obs = np.empty((T + 1, self.obs_dim))
        acts = np.empty((T, self.act_dim))
        phys = np.empty((T, len(ACT_FULL)))
        meters = np.empty((T, len(METER_NAMES)))
        t_zone = np.empty(T + 1)
        rh = np.empty(T + 1)
        rewards = np.empty(T)
        obs[0] = self.reset(start, t_zone0, init_state)
        for t in range(T):
            po = self.physical_observation()
            t_zone[t], rh[t] = po["zone_air_temperature"], po["zone_relative_humidity"]
            u = np.asarray(act(t, po), dtype=float)
            acts[t] = u
            uc = np.clip(u, -1.0, 1.0)
            phys[t] = self._act_default
            for j, k in enumerate(self.layout.act_idx):
                phys[t, k] = self._act_lo[k] + 0.5 * (uc[j] + 1.0) * (self._act_hi[k] - self._act_lo[k])
            obs[t + 1], rewards[t], _, m = self.step(u)
            meters[t] = (m.p_it_kw, m.p_crac_kw, m.p_chiller_kw, m.p_pump_kw, m.p_tower_kw, m.water_l)
        po = self.physical_observation()
        t_zone[T], rh[T] = po["zone_air_temperature"], po["zone_relative_humidity"]
        st = self._state
        return EpisodeTrace(obs, acts, phys, meters, t_zone, rh, rewards, self.dt, start,
                            (st.t_z, st.w, st.t_sup, st.t_chw))

    def metrics(self, trace: EpisodeTrace) -> MetricsReport:
        return metrics_report(trace, self.spec.psi)


def make_env(scene: SceneConfig, spec: Specification, workload: WorkloadTrace, reward: dsl.RewardForm | None,
             episode_steps: int = 96, **kwargs) -> Environment:
    return Environment(scene, spec, workload, reward, episode_steps, **kwargs)
