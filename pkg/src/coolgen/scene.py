"""Hierarchical data-center scene: Building -> Rooms (racks, ACUs) / Plant.

Scene files are JSON documents validated against ``SCENE_SCHEMA``; unknown
fields are rejected. ``step_scene`` advances every room and the shared plant
by one control interval using the equations in :mod:`coolgen.physics`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import physics

SCHEMA_VERSION = 1


class SceneError(ValueError):
    """Scene file could not be parsed or violates the schema."""


class SimulationFault(ArithmeticError):
    """A non-finite value appeared while stepping the surrogate."""

    def __init__(self, variable: str, value: float):
        super().__init__(f"non-finite {variable}: {value!r}")
        self.variable = variable


_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "building_id", "rooms", "plant"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "building_id": {"type": "string", "minLength": 1},
        "timestep_s": _pos,
        "rooms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": [
                    "room_id", "racks", "acus", "has_dehumidifier",
                    "c_zone_kj_per_c", "k_env_kw_per_c", "air_volume_m3",
                ],
                "properties": {
                    "room_id": {"type": "string", "minLength": 1},
                    "racks": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["rack_id", "server_units", "p_server_peak_kw", "p_server_idle_kw"],
                            "properties": {
                                "rack_id": {"type": "string", "minLength": 1},
                                "server_units": {"type": "integer", "minimum": 0},
                                "p_server_peak_kw": _pos,
                                "p_server_idle_kw": _pos,
                                "fixed": {"type": "boolean"},
                            },
                        },
                    },
                    "acus": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["acu_id", "mdot_rated_kg_s", "p_fan_rated_kw"],
                            "properties": {
                                "acu_id": {"type": "string", "minLength": 1},
                                "mdot_rated_kg_s": _pos,
                                "p_fan_rated_kw": _pos,
                            },
                        },
                    },
                    "has_dehumidifier": {"type": "boolean"},
                    "c_zone_kj_per_c": _pos,
                    "k_env_kw_per_c": _pos,
                    "air_volume_m3": _pos,
                    "latent_gain_kg_s": _nonneg,
                    "dehum_capacity_kg_s": _nonneg,
                    "dehum_rated_kw": _nonneg,
                },
            },
        },
        "plant": {
            "type": "object",
            "additionalProperties": False,
            "required": ["chillers", "towers", "pump_p_kw"],
            "properties": {
                "chillers": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["chiller_id", "cop_ref", "t_chw_ref_c", "cop_slope_chw", "cop_slope_wb", "cop_min"],
                        "properties": {
                            "chiller_id": {"type": "string", "minLength": 1},
                            "cop_ref": _pos,
                            "t_chw_ref_c": {"type": "number"},
                            "cop_slope_chw": {"type": "number"},
                            "cop_slope_wb": {"type": "number"},
                            "cop_min": {"type": "number", "minimum": 1},
                        },
                    },
                },
                "towers": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["tower_id", "k_evap_l_per_kwh", "p_fan_rated_kw"],
                        "properties": {
                            "tower_id": {"type": "string", "minLength": 1},
                            "k_evap_l_per_kwh": _nonneg,
                            "p_fan_rated_kw": _pos,
                        },
                    },
                },
                "pump_p_kw": _nonneg,
            },
        },
    },
}


@dataclass(frozen=True)
class RackConfig:
    rack_id: str
    server_units: int
    p_server_peak_kw: float
    p_server_idle_kw: float
    fixed: bool = False  # fixed racks keep their units when variants are synthesized


@dataclass(frozen=True)
class AcuConfig:
    acu_id: str
    mdot_rated_kg_s: float
    p_fan_rated_kw: float


@dataclass(frozen=True)
class RoomConfig:
    room_id: str
    racks: tuple[RackConfig, ...]
    acus: tuple[AcuConfig, ...]
    has_dehumidifier: bool
    c_zone_kj_per_c: float
    k_env_kw_per_c: float
    air_volume_m3: float
    latent_gain_kg_s: float = 0.0005
    dehum_capacity_kg_s: float = 0.004
    dehum_rated_kw: float = 3.0

    @property
    def server_units(self) -> int:
        return sum(r.server_units for r in self.racks)

    @property
    def peak_it_kw(self) -> float:
        return sum(r.server_units * r.p_server_peak_kw for r in self.racks)

    def params(self) -> physics.RoomParams:
        return physics.RoomParams(
            c_zone=self.c_zone_kj_per_c,
            k_env=self.k_env_kw_per_c,
            mdot_rated=sum(a.mdot_rated_kg_s for a in self.acus),
            p_fan_rated=sum(a.p_fan_rated_kw for a in self.acus),
            q_idle=sum(r.server_units * r.p_server_idle_kw for r in self.racks),
            q_span=sum(r.server_units * (r.p_server_peak_kw - r.p_server_idle_kw) for r in self.racks),
            air_mass=physics.AIR_DENSITY * self.air_volume_m3,
            latent_gain=self.latent_gain_kg_s,
            dehum_capacity=self.dehum_capacity_kg_s,
            dehum_kw=self.dehum_rated_kw,
            has_dehum=1.0 if self.has_dehumidifier else 0.0,
        )


@dataclass(frozen=True)
class ChillerConfig:
    chiller_id: str
    cop_ref: float
    t_chw_ref_c: float
    cop_slope_chw: float
    cop_slope_wb: float
    cop_min: float


@dataclass(frozen=True)
class TowerConfig:
    tower_id: str
    k_evap_l_per_kwh: float
    p_fan_rated_kw: float


@dataclass(frozen=True)
class PlantConfig:
    chillers: tuple[ChillerConfig, ...]
    towers: tuple[TowerConfig, ...]
    pump_p_kw: float

    def params(self) -> physics.PlantParams:
        return physics.PlantParams(
            chillers=tuple(
                (c.cop_ref, c.t_chw_ref_c, c.cop_slope_chw, c.cop_slope_wb, c.cop_min) for c in self.chillers
            ),
            towers=tuple((t.k_evap_l_per_kwh, t.p_fan_rated_kw) for t in self.towers),
            pump_kw=self.pump_p_kw,
        )

    @property
    def t_chw_default(self) -> float:
        return self.chillers[0].t_chw_ref_c


@dataclass(frozen=True)
class SceneConfig:
    building_id: str
    rooms: tuple[RoomConfig, ...]
    plant: PlantConfig
    timestep_s: float = 900.0

    def __post_init__(self):
        if not self.rooms:
            raise SceneError("rooms: at least one room is required")
        if not self.timestep_s > 0:
            raise SceneError("timestep_s: must be positive")
        ids = [self.building_id]
        for room in self.rooms:
            ids.append(room.room_id)
            ids.extend(r.rack_id for r in room.racks)
            ids.extend(a.acu_id for a in room.acus)
        ids.extend(c.chiller_id for c in self.plant.chillers)
        ids.extend(t.tower_id for t in self.plant.towers)
        seen = set()
        for i in ids:
            if i in seen:
                raise SceneError(f"duplicate asset id {i!r}")
            seen.add(i)

    @property
    def server_units(self) -> int:
        return sum(r.server_units for r in self.rooms)

    @property
    def peak_it_kw(self) -> float:
        return sum(r.peak_it_kw for r in self.rooms)

    def room(self, room_id: str) -> RoomConfig:
        for r in self.rooms:
            if r.room_id == room_id:
                return r
        raise KeyError(room_id)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts).lstrip(".") or "<root>"


def scene_from_dict(doc: dict) -> SceneConfig:
    validator = jsonschema.Draft202012Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SceneError(f"schema violation at {_json_path(err)}: {err.message}")
    rooms = []
    for r in doc["rooms"]:
        extra = {k: r[k] for k in ("latent_gain_kg_s", "dehum_capacity_kg_s", "dehum_rated_kw") if k in r}
        rooms.append(
            RoomConfig(
                room_id=r["room_id"],
                racks=tuple(RackConfig(**k) for k in r["racks"]),
                acus=tuple(AcuConfig(**a) for a in r["acus"]),
                has_dehumidifier=r["has_dehumidifier"],
                c_zone_kj_per_c=float(r["c_zone_kj_per_c"]),
                k_env_kw_per_c=float(r["k_env_kw_per_c"]),
                air_volume_m3=float(r["air_volume_m3"]),
                **extra,
            )
        )
    for room in rooms:
        for rack in room.racks:
            if rack.p_server_idle_kw > rack.p_server_peak_kw:
                raise SceneError(f"schema violation at rooms.{room.room_id}.{rack.rack_id}: idle power exceeds peak")
    p = doc["plant"]
    plant = PlantConfig(
        chillers=tuple(ChillerConfig(**c) for c in p["chillers"]),
        towers=tuple(TowerConfig(**t) for t in p["towers"]),
        pump_p_kw=float(p["pump_p_kw"]),
    )
    return SceneConfig(
        building_id=doc["building_id"],
        rooms=tuple(rooms),
        plant=plant,
        timestep_s=float(doc.get("timestep_s", 900.0)),
    )


def load_scene(path: str | Path) -> SceneConfig:
    """Read and validate a scene description file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return scene_from_dict(doc)


def save_scene(cfg: SceneConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")


def _split_units(total: int, n: int) -> list[int]:
    base, rem = divmod(total, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def synthesize_variants(
    base: SceneConfig,
    mu_values,
    mu_range: tuple[float, float] | None = None,
    room_id: str | None = None,
) -> list[SceneConfig]:
    """Homogeneous variants of ``base`` with ``mu`` total server units.

    Units are redistributed evenly over the non-fixed racks of ``room_id``
    (first room by default). Nothing else in the scene changes.
    """
    room = base.rooms[0] if room_id is None else base.room(room_id)
    scalable = [i for i, r in enumerate(room.racks) if not r.fixed]
    if not scalable:
        raise SceneError(f"room {room.room_id!r} has no scalable racks")
    fixed_units = sum(r.server_units for r in room.racks if r.fixed)
    out = []
    for mu in mu_values:
        if mu_range is not None and not (mu_range[0] <= mu <= mu_range[1]):
            raise SceneError(f"mu={mu} outside configured range [{mu_range[0]}, {mu_range[1]}]")
        units = int(round(mu)) - fixed_units
        if units < 0 or mu != int(round(mu)):
            raise SceneError(f"mu={mu} does not map to a non-negative server-unit count")
        split = _split_units(units, len(scalable))
        racks = list(room.racks)
        for idx, n in zip(scalable, split):
            racks[idx] = dataclasses.replace(racks[idx], server_units=n)
        new_room = dataclasses.replace(room, racks=tuple(racks))
        rooms = tuple(new_room if r.room_id == room.room_id else r for r in base.rooms)
        out.append(dataclasses.replace(base, rooms=rooms))
    return out


@dataclass(frozen=True)
class SceneState:
    t_zone_c: tuple[float, ...]
    rh_zone_pct: tuple[float, ...]
    w_zone: tuple[float, ...]  # humidity ratio kg/kg; rh is derived from it
    t_supply_c: tuple[float, ...]
    t_chw_c: float
    t_outdoor_c: float
    t_wetbulb_c: float
    step_index: int = 0


@dataclass(frozen=True)
class Actuation:
    t_supply_c: tuple[float, ...]
    flow_frac: tuple[float, ...]
    dehum: tuple[float, ...]
    t_chw_c: float
    tower_fan: float = 1.0


@dataclass(frozen=True)
class Meters:
    p_it_kw: float = 0.0
    p_crac_kw: float = 0.0
    p_chiller_kw: float = 0.0
    p_pump_kw: float = 0.0
    p_tower_kw: float = 0.0
    water_l: float = 0.0

    @property
    def facility_kw(self) -> float:
        return self.p_crac_kw + self.p_chiller_kw + self.p_pump_kw + self.p_tower_kw

    @property
    def total_kw(self) -> float:
        return self.p_it_kw + self.facility_kw


def initial_state(cfg: SceneConfig, t_zone_c: float = 22.0, rh_pct: float = 50.0,
                  t_outdoor_c: float = 28.0, t_wetbulb_c: float = 24.0) -> SceneState:
    n = len(cfg.rooms)
    w = rh_pct / 100.0 * physics.w_sat(t_zone_c)
    return SceneState(
        t_zone_c=(t_zone_c,) * n,
        rh_zone_pct=(physics.rh_from_w(w, t_zone_c),) * n,
        w_zone=(w,) * n,
        t_supply_c=(18.0,) * n,
        t_chw_c=cfg.plant.t_chw_default,
        t_outdoor_c=t_outdoor_c,
        t_wetbulb_c=t_wetbulb_c,
    )


def _finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise SimulationFault(name, value)
    return value


def step_scene(
    cfg: SceneConfig,
    state: SceneState,
    action: Actuation,
    util: float,
    ambient: tuple[float, float],
) -> tuple[SceneState, Meters]:
    """One control interval of the lumped model. Pure and deterministic."""
    t_out, t_wb = ambient
    dt = cfg.timestep_s
    t_z, w_z, rh_z, t_sup = [], [], [], []
    q_evap = p_it = p_hvac = 0.0
    for i, room in enumerate(cfg.rooms):
        tn, wn, ts, q, pit, ph = physics.room_step(
            room.params(), state.t_zone_c[i], state.w_zone[i], action.t_supply_c[i],
            action.flow_frac[i], action.dehum[i], action.t_chw_c, util, t_out, dt,
        )
        t_z.append(_finite(f"t_zone_c[{room.room_id}]", tn))
        w_z.append(_finite(f"w_zone[{room.room_id}]", wn))
        rh_z.append(physics.rh_from_w(wn, tn))
        t_sup.append(ts)
        q_evap += q
        p_it += pit
        p_hvac += ph
    p_ch, p_pump, p_tower, water = physics.plant_step(
        cfg.plant.params(), _finite("q_evap", q_evap), action.t_chw_c, t_wb, action.tower_fan, dt
    )
    meters = Meters(
        p_it_kw=p_it,
        p_crac_kw=p_hvac,
        p_chiller_kw=_finite("p_chiller_kw", p_ch),
        p_pump_kw=p_pump,
        p_tower_kw=p_tower,
        water_l=_finite("water_l", water),
    )
    new_state = SceneState(
        t_zone_c=tuple(t_z),
        rh_zone_pct=tuple(rh_z),
        w_zone=tuple(w_z),
        t_supply_c=tuple(t_sup),
        t_chw_c=action.t_chw_c,
        t_outdoor_c=t_out,
        t_wetbulb_c=t_wb,
        step_index=state.step_index + 1,
    )
    return new_state, meters


STEPS_PER_DAY = 96


def ambient(step_index: int | np.ndarray, steps_per_day: int = STEPS_PER_DAY,
            jitter: float = 0.0, seed: int | None = None):
    """Diurnal outdoor dry-bulb and wet-bulb temperatures (deg C)."""
    idx = np.asarray(step_index, dtype=float)
    phase = 2.0 * np.pi * (idx / steps_per_day - 15.0 / 24.0)
    t_out = 28.0 + 4.0 * np.cos(phase)
    t_wb = 24.0 + 2.0 * np.cos(phase)
    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        t_out = t_out + jitter * rng.standard_normal(idx.shape)
        t_wb = np.minimum(t_out, t_wb + jitter * rng.standard_normal(idx.shape))
    if np.ndim(step_index) == 0:
        return float(t_out), float(t_wb)
    return t_out, t_wb


@dataclass(frozen=True)
class WorkloadTrace:
    utilization: np.ndarray = field(repr=False)
    seed: int
    profile: str = "diurnal"

    def __post_init__(self):
        u = np.asarray(self.utilization, dtype=float)
        if u.ndim != 1 or len(u) == 0:
            raise ValueError("utilization must be a non-empty 1-D sequence")
        if np.any(u < 0.0) or np.any(u > 1.0):
            raise ValueError("utilization values must lie in [0, 1]")
        u.setflags(write=False)
        object.__setattr__(self, "utilization", u)

    def __len__(self) -> int:
        return len(self.utilization)


def gen_workload(steps: int, seed: int, profile: str = "diurnal",
                 steps_per_day: int = STEPS_PER_DAY) -> WorkloadTrace:
    """Synthetic IT utilization, deterministic under ``(seed, profile)``."""
    if steps <= 0:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(steps)
    hours = 24.0 * (t % steps_per_day) / steps_per_day
    if profile == "diurnal":
        base = 0.55 + 0.3 * np.sin(2.0 * np.pi * (hours - 8.0) / 24.0)
        noise = np.zeros(steps)
        eps = 0.04 * rng.standard_normal(steps)
        for i in range(steps):  # AR(1) keeps the jitter smooth
            noise[i] = (0.7 * noise[i - 1] if i else 0.0) + eps[i]
        util = base + noise
    elif profile == "bursty":
        util = np.empty(steps)
        busy = False
        forced = int(rng.integers(0, max(steps - 1, 1)))
        for i in range(steps):
            if i == forced + 1 and steps > 1:
                busy = not busy
            elif rng.random() < 0.12:
                busy = not busy
            level = 0.85 if busy else 0.2
            util[i] = level + 0.05 * rng.standard_normal()
        if steps > 1:
            # guarantee one idle-to-peak swing around the forced switch
            lo, hi = (0.15, 0.9) if util[forced] < util[forced + 1] else (0.9, 0.15)
            util[forced], util[forced + 1] = lo, hi
    else:
        raise ValueError(f"unknown workload profile {profile!r}")
    return WorkloadTrace(np.clip(util, 0.0, 1.0), seed=seed, profile=profile)
