"""Lumped-parameter surrogate equations for one room and the chiller plant.

Everything here is scalar and side-effect free. ``scene.step_scene`` and the
pure-Python episode kernel both call these functions; the compiled kernel
re-implements them line for line and is cross-checked against them in tests.
"""
from __future__ import annotations

import math
from typing import NamedTuple

CP_AIR = 1.005  # kJ/(kg*C)
AIR_DENSITY = 1.2  # kg/m^3
H_FG = 2450.0  # kJ/kg, latent heat removed at the coil
P_ATM_HPA = 1013.25
COIL_APPROACH_C = 2.0  # supply air cannot be colder than chilled water + approach
TOWER_APPROACH_C = 4.0  # condenser penalty at zero tower fan
COP_MAX = 8.0
WB_REF_C = 24.0


class RoomParams(NamedTuple):
    """Room quantities aggregated over racks and ACUs."""

    c_zone: float  # kJ/C
    k_env: float  # kW/C
    mdot_rated: float  # kg/s, sum over ACUs
    p_fan_rated: float  # kW, sum over ACUs
    q_idle: float  # kW, sum of units * idle power
    q_span: float  # kW, sum of units * (peak - idle)
    air_mass: float  # kg
    latent_gain: float  # kg/s
    dehum_capacity: float  # kg/s at full actuator
    dehum_kw: float  # kW at full actuator
    has_dehum: float  # 0.0 or 1.0


class PlantParams(NamedTuple):
    # one tuple per chiller: (cop_ref, t_chw_ref, slope_chw, slope_wb, cop_min)
    chillers: tuple[tuple[float, float, float, float, float], ...]
    # one tuple per tower: (k_evap_l_per_kwh, p_fan_rated_kw)
    towers: tuple[tuple[float, float], ...]
    pump_kw: float


def w_sat(t_c: float) -> float:
    """Saturation humidity ratio (kg/kg) at sea level, Magnus over liquid water."""
    p_ws = 6.112 * math.exp(17.62 * t_c / (243.12 + t_c))
    return 0.622 * p_ws / (P_ATM_HPA - p_ws)


def rh_from_w(w: float, t_c: float) -> float:
    return min(100.0, max(0.0, 100.0 * w / w_sat(t_c)))


def it_power(room: RoomParams, util: float) -> float:
    return room.q_idle + room.q_span * util


def chiller_cop(chiller: tuple[float, float, float, float, float], t_chw: float, t_wb_eff: float) -> float:
    cop_ref, t_chw_ref, slope_chw, slope_wb, cop_min = chiller
    cop = cop_ref + slope_chw * (t_chw - t_chw_ref) - slope_wb * (t_wb_eff - WB_REF_C)
    return min(COP_MAX, max(cop_min, cop))


def room_step(
    room: RoomParams,
    t_z: float,
    w: float,
    t_sup_set: float,
    flow_frac: float,
    dehum: float,
    t_chw: float,
    util: float,
    t_out: float,
    dt: float,
) -> tuple[float, float, float, float, float, float]:
    """Advance one room by ``dt`` seconds.

    Returns ``(t_z_next, w_next, t_sup, q_coil, p_it, p_room_hvac)`` where
    ``q_coil`` includes the latent load and ``p_room_hvac`` is fan plus
    dehumidifier electrical power.
    """
    t_sup = max(t_sup_set, t_chw + COIL_APPROACH_C)
    mdot = flow_frac * room.mdot_rated
    q_it = it_power(room, util)
    sensible = mdot * CP_AIR * (t_z - t_sup)
    t_next = t_z + dt / room.c_zone * (q_it - sensible + room.k_env * (t_out - t_z))

    dh = dehum * room.has_dehum
    removal = dh * room.dehum_capacity
    w_sup = min(w, w_sat(t_sup))
    condensed = mdot * (w - w_sup)
    if condensed > 0.0 and mdot > 0.0:
        w_inf = w_sup + (room.latent_gain - removal) / mdot
        w_next = w_inf + (w - w_inf) * math.exp(-mdot * dt / room.air_mass)
    else:
        w_next = w + dt * (room.latent_gain - removal) / room.air_mass
    w_next = max(0.0, w_next)

    q_coil = max(0.0, sensible) + H_FG * condensed
    p_hvac = room.p_fan_rated * flow_frac ** 3 + dh * room.dehum_kw
    return t_next, w_next, t_sup, q_coil, q_it, p_hvac


def plant_step(
    plant: PlantParams, q_evap: float, t_chw: float, t_wb: float, tower_fan: float, dt: float
) -> tuple[float, float, float, float]:
    """Chiller, pump and tower response to an evaporator load.

    Returns ``(p_chiller, p_pump, p_tower, water_l)``. The load is shared
    evenly between chillers and between towers.
    """
    if q_evap <= 0.0:
        return 0.0, 0.0, 0.0, 0.0
    t_wb_eff = t_wb + TOWER_APPROACH_C * (1.0 - tower_fan)
    share = q_evap / len(plant.chillers)
    p_chiller = 0.0
    for ch in plant.chillers:
        p_chiller += share / chiller_cop(ch, t_chw, t_wb_eff)
    q_rej = q_evap + p_chiller
    rej_share = q_rej / len(plant.towers)
    water = 0.0
    p_tower = 0.0
    for k_evap, p_rated in plant.towers:
        water += k_evap * rej_share * dt / 3600.0
        p_tower += p_rated * tower_fan ** 3
    return p_chiller, plant.pump_kw, p_tower, water
