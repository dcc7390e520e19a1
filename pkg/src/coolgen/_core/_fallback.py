"""Pure-Python episode kernel. Reference semantics for ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np

from .. import physics

N_OBS_FULL = 6  # workload, t_zone, t_supply_prev, rh_zone, t_chw, t_wetbulb
N_ACT_FULL = 5  # t_supply, flow_frac, dehum, t_chw, tower_fan
N_METERS = 6  # p_it, p_crac, p_chiller, p_pump, p_tower, water


def _mlp_tanh_mean(layer_sizes, theta, x):
    off = 0
    h = x
    n = len(layer_sizes) - 1
    for i in range(n):
        rows, cols = layer_sizes[i], layer_sizes[i + 1]
        w = theta[off:off + rows * cols].reshape(rows, cols)
        off += rows * cols
        b = theta[off:off + cols]
        off += cols
        h = h @ w + b
        if i < n - 1:
            h = np.tanh(h)
    return np.tanh(h)


def run_episode(layer_sizes, theta, obs_idx, obs_lo, obs_inv_scale, act_idx, act_lo, act_hi,
                act_default, room, chillers, towers, pump_kw, dt, util, t_out, t_wb, noise, init):
    """Roll one episode with the policy inside the loop.

    ``util``, ``t_out`` and ``t_wb`` hold ``T + 1`` entries; the last entry
    only feeds the final observation. With ``noise=None`` the policy acts
    with its mean.
    """
    T = len(t_out) - 1
    layer_sizes = [int(s) for s in layer_sizes]
    n_act = len(act_idx)
    n_obs = len(obs_idx)
    log_std = np.clip(theta[-n_act:], -5.0, 1.0)
    sigma = np.exp(log_std)
    rp = physics.RoomParams(*[float(v) for v in room])
    pp = physics.PlantParams(
        chillers=tuple(tuple(float(v) for v in row) for row in np.asarray(chillers).reshape(-1, 5)),
        towers=tuple(tuple(float(v) for v in row) for row in np.asarray(towers).reshape(-1, 2)),
        pump_kw=float(pump_kw),
    )

    obs_out = np.empty((T + 1, n_obs))
    u_out = np.empty((T, n_act))
    phys_out = np.empty((T, N_ACT_FULL))
    state_out = np.empty((T + 1, 5))
    meters_out = np.empty((T, N_METERS))

    t_z, w, t_sup, t_chw = (float(v) for v in init)
    full = np.empty(N_OBS_FULL)
    for t in range(T + 1):
        rh = physics.rh_from_w(w, t_z)
        state_out[t] = (t_z, w, rh, t_sup, t_chw)
        full[:] = (util[t], t_z, t_sup, rh, t_chw, t_wb[t])
        obs = (full[obs_idx] - obs_lo[obs_idx]) * obs_inv_scale[obs_idx]
        obs_out[t] = obs
        if t == T:
            break
        mean = _mlp_tanh_mean(layer_sizes, theta, obs)
        u = mean if noise is None else mean + sigma * noise[t]
        u_out[t] = u
        phys = np.array(act_default, dtype=float)
        uc = np.clip(u, -1.0, 1.0)
        for j in range(n_act):
            k = act_idx[j]
            phys[k] = act_lo[k] + 0.5 * (uc[j] + 1.0) * (act_hi[k] - act_lo[k])
        phys_out[t] = phys
        t_chw = float(phys[3])
        t_z, w, t_sup, q_coil, p_it, p_hvac = physics.room_step(
            rp, t_z, w, float(phys[0]), float(phys[1]), float(phys[2]), t_chw,
            float(util[t]), float(t_out[t]), dt,
        )
        p_ch, p_pump, p_tower, water = physics.plant_step(pp, q_coil, t_chw, float(t_wb[t]), float(phys[4]), dt)
        meters_out[t] = (p_it, p_hvac, p_ch, p_pump, p_tower, water)
    return obs_out, u_out, phys_out, state_out, meters_out
