from __future__ import annotations

import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coolgen import physics
from coolgen.family import Specification, make_env, sla_from_t_high
from coolgen.scene import (
    Actuation,
    SceneError,
    SimulationFault,
    gen_workload,
    initial_state,
    load_scene,
    scene_from_dict,
    step_scene,
    synthesize_variants,
)


def minimal_doc(units=10, idle=0.3, peak=0.8, fixed_units=None):
    racks = [{"rack_id": "r1", "server_units": units, "p_server_peak_kw": peak, "p_server_idle_kw": idle}]
    if fixed_units is not None:
        racks.append({"rack_id": "rf", "server_units": fixed_units, "p_server_peak_kw": peak,
                      "p_server_idle_kw": idle, "fixed": True})
    return {
        "schema_version": 1,
        "building_id": "b",
        "timestep_s": 900,
        "rooms": [{
            "room_id": "z",
            "racks": racks,
            "acus": [{"acu_id": "a", "mdot_rated_kg_s": 10.0, "p_fan_rated_kw": 5.0}],
            "has_dehumidifier": False,
            "c_zone_kj_per_c": 20000.0,
            "k_env_kw_per_c": 0.5,
            "air_volume_m3": 300.0,
        }],
        "plant": {
            "chillers": [{"chiller_id": "c", "cop_ref": 4.5, "t_chw_ref_c": 10.0, "cop_slope_chw": 0.12,
                          "cop_slope_wb": 0.08, "cop_min": 2.0}],
            "towers": [{"tower_id": "t", "k_evap_l_per_kwh": 1.8, "p_fan_rated_kw": 6.0}],
            "pump_p_kw": 4.0,
        },
    }


def act(cfg, t_sup, flow, t_chw=10.0, fan=1.0):
    n = len(cfg.rooms)
    return Actuation((t_sup,) * n, (flow,) * n, (0.0,) * n, t_chw, fan)


# --- load_scene --------------------------------------------------------------------

def test_minimal_scene(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(minimal_doc()))
    cfg = load_scene(p)
    assert len(cfg.rooms) == 1
    assert len(cfg.plant.chillers) == 1 and cfg.plant.pump_p_kw == 4.0


def test_negative_units_names_field():
    doc = minimal_doc()
    doc["rooms"][0]["racks"][0]["server_units"] = -1
    with pytest.raises(SceneError, match=r"rooms\[0\]\.racks\[0\]\.server_units"):
        scene_from_dict(doc)


def test_parse_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"building_id": "b",\n  "rooms": [}')
    with pytest.raises(SceneError, match="line 2"):
        load_scene(p)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(extra=1),
    lambda d: d["rooms"][0].update(colour="blue"),
    lambda d: d.pop("schema_version"),
    lambda d: d.update(rooms=[]),
    lambda d: d["plant"]["chillers"][0].update(cop_min=0.5),
    lambda d: d["rooms"][0]["acus"][0].update(mdot_rated_kg_s=0.0),
])
def test_schema_violations(mutate):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(SceneError, match="schema violation"):
        scene_from_dict(doc)


def test_duplicate_ids_rejected():
    doc = minimal_doc()
    doc["rooms"][0]["acus"][0]["acu_id"] = "r1"
    with pytest.raises(SceneError, match="duplicate"):
        scene_from_dict(doc)


def test_reference_peak_it(scene):
    assert scene.server_units == 100
    assert scene.peak_it_kw == pytest.approx(80.0, abs=1e-12)


def test_hash_is_stable(scene):
    again = scene_from_dict(json.loads(json.dumps(scene.to_dict())))
    assert again.content_hash() == scene.content_hash()


# --- variants ----------------------------------------------------------------------

def test_five_variants(scene):
    out = synthesize_variants(scene, [100, 112, 125, 137, 150])
    assert [v.server_units for v in out] == [100, 112, 125, 137, 150]
    for v in out:
        assert v.plant == scene.plant
        assert [r.rack_id for r in v.rooms[0].racks] == [r.rack_id for r in scene.rooms[0].racks]
        assert v.rooms[0].acus == scene.rooms[0].acus


def test_identity_variant(scene):
    assert synthesize_variants(scene, [100]) == [scene]


def test_700_to_900_kw():
    # 4 scalable racks of 10 units and a fixed 30-unit rack, 10 kW per unit at peak
    doc = minimal_doc(units=10, idle=2.0, peak=10.0, fixed_units=30)
    rack = doc["rooms"][0]["racks"][0]
    doc["rooms"][0]["racks"] = [dict(rack, rack_id=f"r{i}") for i in range(4)] + doc["rooms"][0]["racks"][1:]
    base = scene_from_dict(doc)
    assert base.peak_it_kw == pytest.approx(700.0)
    (v,) = synthesize_variants(base, [30 + 4 * 15])
    assert v.peak_it_kw == pytest.approx(900.0)
    assert all(r.server_units == 15 for r in v.rooms[0].racks if not r.fixed)


def test_variant_range_check(scene):
    with pytest.raises(SceneError, match="outside"):
        synthesize_variants(scene, [185], mu_range=(100, 150))
    with pytest.raises(SceneError):
        synthesize_variants(scene, [-5])


def test_variants_keep_dimensions(scene, workload):
    dims = set()
    for mu in (100, 125, 150):
        env = make_env(scene, Specification(mu, sla_from_t_high(25.0)), workload, None)
        dims.add((env.obs_dim, env.act_dim))
    assert len(dims) == 1


# --- step_scene --------------------------------------------------------------------

def test_zero_load_decays_via_envelope_only():
    cfg = scene_from_dict(minimal_doc(units=0))
    s0 = initial_state(cfg, t_zone_c=22.0)
    s1, m = step_scene(cfg, s0, act(cfg, 22.0, 1.0, t_chw=8.0), 0.0, (30.0, 24.0))
    room = cfg.rooms[0]
    want = 22.0 + cfg.timestep_s / room.c_zone_kj_per_c * room.k_env_kw_per_c * (30.0 - 22.0)
    assert s1.t_zone_c[0] == pytest.approx(want, abs=1e-12)
    assert m.p_it_kw == 0.0


def test_energy_balance_fixed_point(scene):
    room = scene.rooms[0]
    t_z, t_out, util = 24.0, 30.0, 0.6
    flow = 0.7
    mdot = flow * sum(a.mdot_rated_kg_s for a in room.acus)
    q_it = sum(r.server_units * (r.p_server_idle_kw + (r.p_server_peak_kw - r.p_server_idle_kw) * util)
               for r in room.racks)
    t_sup = t_z - (q_it + room.k_env_kw_per_c * (t_out - t_z)) / (mdot * physics.CP_AIR)
    s0 = initial_state(scene, t_zone_c=t_z)
    s1, _ = step_scene(scene, s0, act(scene, t_sup, flow, t_chw=8.0), util, (t_out, 24.0))
    assert abs(s1.t_zone_c[0] - t_z) < 1e-9


def test_chiller_power_by_hand(scene):
    """80 kW of IT at full utilization, dry air so no latent load."""
    t_z, t_sup, flow, t_chw, t_wb = 24.0, 16.0, 0.6, 9.0, 25.0
    s0 = initial_state(scene, t_zone_c=t_z, rh_pct=20.0)
    _, m = step_scene(scene, s0, act(scene, t_sup, flow, t_chw=t_chw), 1.0, (30.0, t_wb))
    assert m.p_it_kw == pytest.approx(80.0)
    q_evap = flow * 25.0 * 1.005 * (t_z - t_sup)
    cop = min(8.0, max(2.0, 4.5 + 0.12 * (t_chw - 10.0) - 0.08 * (t_wb - 24.0)))
    p_ch = q_evap / cop
    assert m.p_chiller_kw == pytest.approx(p_ch, rel=1e-12)
    assert m.water_l == pytest.approx(1.8 * (q_evap + p_ch) * 900.0 / 3600.0, rel=1e-12)
    assert m.p_crac_kw == pytest.approx(15.0 * flow ** 3)
    assert m.p_pump_kw == 4.0 and m.p_tower_kw == pytest.approx(6.0)


def test_no_rejected_heat_no_water():
    cfg = scene_from_dict(minimal_doc(units=0))
    s0 = initial_state(cfg, t_zone_c=20.0, rh_pct=30.0)
    _, m = step_scene(cfg, s0, act(cfg, 22.0, 0.5, t_chw=8.0), 0.0, (28.0, 24.0))
    assert m.water_l == 0.0 and m.p_chiller_kw == 0.0


def test_non_finite_is_a_fault():
    cfg = scene_from_dict(minimal_doc())
    s0 = initial_state(cfg)
    bad = dataclasses_replace(s0, t_zone_c=(math.inf,))
    with pytest.raises(SimulationFault) as exc:
        step_scene(cfg, bad, act(cfg, 18.0, 0.5), 0.5, (28.0, 24.0))
    assert "t_zone_c" in exc.value.variable


def dataclasses_replace(obj, **kw):
    import dataclasses

    return dataclasses.replace(obj, **kw)


def test_step_is_pure(scene):
    s0 = initial_state(scene)
    a = act(scene, 17.0, 0.5)
    before = copy.deepcopy(s0)
    r1 = step_scene(scene, s0, a, 0.5, (28.0, 24.0))
    r2 = step_scene(scene, s0, a, 0.5, (28.0, 24.0))
    assert r1 == r2 and s0 == before


# --- properties --------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300), st.floats(0, 1))
def test_more_servers_never_less_it_power(scene, a, b, util):
    lo, hi = sorted((a, b))
    vs = synthesize_variants(scene, [lo, hi])
    s0 = initial_state(scene)
    p = [step_scene(v, s0, act(v, 17.0, 0.5), util, (28.0, 24.0))[1].p_it_kw for v in vs]
    assert p[0] <= p[1]


@settings(max_examples=60, deadline=None)
@given(st.floats(18.0, 35.0), st.floats(0.2, 1.0), st.floats(0.2, 1.0), st.floats(0, 1))
def test_more_flow_never_warmer(scene, t_z, f1, f2, util):
    lo, hi = sorted((f1, f2))
    t_sup = 12.0
    s0 = initial_state(scene, t_zone_c=t_z)
    t = [step_scene(scene, s0, act(scene, t_sup, f, t_chw=8.0), util, (28.0, 24.0))[0].t_zone_c[0] for f in (lo, hi)]
    assert t[1] <= t[0] + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(12, 24), st.floats(0.2, 1.0), st.floats(0, 1), st.floats(6, 14),
                          st.floats(0.2, 1.0), st.floats(0, 1)), min_size=1, max_size=30),
       st.floats(5.0, 95.0))
def test_meters_nonnegative_and_rh_bounded(humid_scene, steps, rh0):
    state = initial_state(humid_scene, t_zone_c=24.0, rh_pct=rh0)
    for i, (t_sup, flow, dehum, t_chw, fan, util) in enumerate(steps):
        n = len(humid_scene.rooms)
        a = Actuation((t_sup,) * n, (flow,) * n, (dehum,) * n, t_chw, fan)
        state, m = step_scene(humid_scene, state, a, util, (28.0 + 3 * math.sin(i), 23.0))
        assert min(m.p_it_kw, m.p_crac_kw, m.p_chiller_kw, m.p_pump_kw, m.p_tower_kw, m.water_l) >= 0.0
        assert all(0.0 <= rh <= 100.0 for rh in state.rh_zone_pct)


# --- workload ----------------------------------------------------------------------

def test_workload_deterministic():
    a, b = gen_workload(96, 7), gen_workload(96, 7)
    assert a.utilization.tobytes() == b.utilization.tobytes()
    assert gen_workload(96, 8).utilization.tobytes() != a.utilization.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_bursty_has_big_jump(seed):
    u = gen_workload(96, seed, "bursty").utilization
    assert np.max(np.abs(np.diff(u))) >= 0.4
    assert np.all((u >= 0) & (u <= 1))


def test_empty_workload_rejected():
    with pytest.raises(ValueError):
        gen_workload(0, 1)


def test_workload_is_read_only():
    u = gen_workload(10, 1).utilization
    with pytest.raises(ValueError):
        u[0] = 0.5
