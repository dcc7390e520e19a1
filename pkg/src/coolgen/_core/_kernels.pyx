# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled episode kernel. Same contract as ``_fallback.run_episode``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, pow, fmin, fmax

cnp.import_array()

cdef double CP_AIR = 1.005
cdef double H_FG = 2450.0
cdef double P_ATM_HPA = 1013.25
cdef double COIL_APPROACH_C = 2.0
cdef double TOWER_APPROACH_C = 4.0
cdef double COP_MAX = 8.0
cdef double WB_REF_C = 24.0


cdef inline double w_sat(double t_c) nogil:
    cdef double p_ws = 6.112 * exp(17.62 * t_c / (243.12 + t_c))
    return 0.622 * p_ws / (P_ATM_HPA - p_ws)


cdef inline double rh_from_w(double w, double t_c) nogil:
    return fmin(100.0, fmax(0.0, 100.0 * w / w_sat(t_c)))


cdef void mlp_mean(const long[::1] sizes, const double[::1] theta, double[::1] buf_a,
                   double[::1] buf_b, double[::1] out) nogil:
    # buf_a holds the layer input on entry; out receives tanh(final layer)
    cdef Py_ssize_t n_layers = sizes.shape[0] - 1
    cdef Py_ssize_t i, r, c, rows, cols, off = 0
    cdef double acc
    cdef double[::1] src = buf_a
    cdef double[::1] dst = buf_b
    cdef double[::1] tmp
    for i in range(n_layers):
        rows = sizes[i]
        cols = sizes[i + 1]
        for c in range(cols):
            acc = 0.0
            for r in range(rows):
                acc = acc + src[r] * theta[off + r * cols + c]
            dst[c] = acc + theta[off + rows * cols + c]
            if i < n_layers - 1:
                dst[c] = tanh(dst[c])
        off += (rows + 1) * cols
        tmp = src
        src = dst
        dst = tmp
    for c in range(sizes[n_layers]):
        out[c] = tanh(src[c])


def run_episode(layer_sizes, theta, obs_idx, obs_lo, obs_inv_scale, act_idx, act_lo, act_hi,
                act_default, room, chillers, towers, double pump_kw, double dt, util, t_out, t_wb,
                noise, init):
    cdef long[::1] sizes = np.ascontiguousarray(layer_sizes, dtype=np.int64)
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef long[::1] oidx = np.ascontiguousarray(obs_idx, dtype=np.int64)
    cdef long[::1] aidx = np.ascontiguousarray(act_idx, dtype=np.int64)
    cdef const double[::1] olo = np.ascontiguousarray(obs_lo, dtype=np.float64)
    cdef const double[::1] oinv = np.ascontiguousarray(obs_inv_scale, dtype=np.float64)
    cdef const double[::1] alo = np.ascontiguousarray(act_lo, dtype=np.float64)
    cdef const double[::1] ahi = np.ascontiguousarray(act_hi, dtype=np.float64)
    cdef const double[::1] adef = np.ascontiguousarray(act_default, dtype=np.float64)
    cdef const double[::1] rm = np.ascontiguousarray(room, dtype=np.float64)
    cdef const double[:, ::1] ch = np.ascontiguousarray(np.asarray(chillers, dtype=np.float64).reshape(-1, 5))
    cdef const double[:, ::1] tw = np.ascontiguousarray(np.asarray(towers, dtype=np.float64).reshape(-1, 2))
    cdef const double[::1] ut = np.ascontiguousarray(util, dtype=np.float64)
    cdef const double[::1] tout = np.ascontiguousarray(t_out, dtype=np.float64)
    cdef const double[::1] twb = np.ascontiguousarray(t_wb, dtype=np.float64)
    cdef const double[::1] ini = np.ascontiguousarray(init, dtype=np.float64)
    cdef bint stochastic = noise is not None
    cdef const double[:, ::1] nz
    cdef Py_ssize_t T = tout.shape[0] - 1
    cdef Py_ssize_t n_obs = oidx.shape[0]
    cdef Py_ssize_t n_act = aidx.shape[0]
    cdef Py_ssize_t n_ch = ch.shape[0]
    cdef Py_ssize_t n_tw = tw.shape[0]
    if stochastic:
        nz = np.ascontiguousarray(noise, dtype=np.float64).reshape(T, n_act)
    else:
        nz = np.zeros((1, n_act))

    obs_np = np.empty((T + 1, n_obs))
    u_np = np.empty((T, n_act))
    phys_np = np.empty((T, 5))
    state_np = np.empty((T + 1, 5))
    meters_np = np.empty((T, 6))
    cdef double[:, ::1] obs_o = obs_np
    cdef double[:, ::1] u_o = u_np
    cdef double[:, ::1] phys_o = phys_np
    cdef double[:, ::1] st_o = state_np
    cdef double[:, ::1] met_o = meters_np

    cdef Py_ssize_t width = 1
    cdef Py_ssize_t k
    for k in range(sizes.shape[0]):
        if sizes[k] > width:
            width = sizes[k]
    cdef double[::1] buf_a = np.zeros(width)
    cdef double[::1] buf_b = np.zeros(width)
    cdef double[::1] mean = np.zeros(n_act)
    cdef double[::1] sigma = np.zeros(n_act)
    cdef double[::1] full = np.zeros(6)
    cdef double[::1] phys = np.zeros(5)
    cdef Py_ssize_t n_mlp = th.shape[0] - n_act
    for k in range(n_act):
        sigma[k] = exp(fmin(1.0, fmax(-5.0, th[n_mlp + k])))

    cdef double c_zone = rm[0], k_env = rm[1], mdot_rated = rm[2], p_fan_rated = rm[3]
    cdef double q_idle = rm[4], q_span = rm[5], air_mass = rm[6], latent = rm[7]
    cdef double dehum_cap = rm[8], dehum_kw = rm[9], has_dehum = rm[10]

    cdef double t_z = ini[0], w = ini[1], t_sup = ini[2], t_chw = ini[3]
    cdef double rh, u, uc, mdot, q_it, sensible, t_next, dh, removal, w_sup, condensed, w_inf, w_next
    cdef double q_coil, p_hvac, t_wb_eff, share, p_chiller, cop, q_rej, rej_share, water, p_tower, p_pump
    cdef Py_ssize_t t, j
    with nogil:
        for t in range(T + 1):
            rh = rh_from_w(w, t_z)
            st_o[t, 0] = t_z
            st_o[t, 1] = w
            st_o[t, 2] = rh
            st_o[t, 3] = t_sup
            st_o[t, 4] = t_chw
            full[0] = ut[t]
            full[1] = t_z
            full[2] = t_sup
            full[3] = rh
            full[4] = t_chw
            full[5] = twb[t]
            for j in range(n_obs):
                k = oidx[j]
                obs_o[t, j] = (full[k] - olo[k]) * oinv[k]
                buf_a[j] = obs_o[t, j]
            if t == T:
                break
            mlp_mean(sizes, th, buf_a, buf_b, mean)
            for j in range(5):
                phys[j] = adef[j]
            for j in range(n_act):
                u = mean[j]
                if stochastic:
                    u = u + sigma[j] * nz[t, j]
                u_o[t, j] = u
                uc = fmin(1.0, fmax(-1.0, u))
                k = aidx[j]
                phys[k] = alo[k] + 0.5 * (uc + 1.0) * (ahi[k] - alo[k])
            for j in range(5):
                phys_o[t, j] = phys[j]
            t_chw = phys[3]

            # room
            t_sup = fmax(phys[0], t_chw + COIL_APPROACH_C)
            mdot = phys[1] * mdot_rated
            q_it = q_idle + q_span * ut[t]
            sensible = mdot * CP_AIR * (t_z - t_sup)
            t_next = t_z + dt / c_zone * (q_it - sensible + k_env * (tout[t] - t_z))
            dh = phys[2] * has_dehum
            removal = dh * dehum_cap
            w_sup = fmin(w, w_sat(t_sup))
            condensed = mdot * (w - w_sup)
            if condensed > 0.0 and mdot > 0.0:
                w_inf = w_sup + (latent - removal) / mdot
                w_next = w_inf + (w - w_inf) * exp(-mdot * dt / air_mass)
            else:
                w_next = w + dt * (latent - removal) / air_mass
            w_next = fmax(0.0, w_next)
            q_coil = fmax(0.0, sensible) + H_FG * condensed
            p_hvac = p_fan_rated * pow(phys[1], 3.0) + dh * dehum_kw

            # plant
            p_chiller = 0.0
            p_pump = 0.0
            p_tower = 0.0
            water = 0.0
            if q_coil > 0.0:
                t_wb_eff = twb[t] + TOWER_APPROACH_C * (1.0 - phys[4])
                share = q_coil / n_ch
                for j in range(n_ch):
                    cop = ch[j, 0] + ch[j, 2] * (t_chw - ch[j, 1]) - ch[j, 3] * (t_wb_eff - WB_REF_C)
                    cop = fmin(COP_MAX, fmax(ch[j, 4], cop))
                    p_chiller = p_chiller + share / cop
                q_rej = q_coil + p_chiller
                rej_share = q_rej / n_tw
                for j in range(n_tw):
                    water = water + tw[j, 0] * rej_share * dt / 3600.0
                    p_tower = p_tower + tw[j, 1] * pow(phys[4], 3.0)
                p_pump = pump_kw
            met_o[t, 0] = q_it
            met_o[t, 1] = p_hvac
            met_o[t, 2] = p_chiller
            met_o[t, 3] = p_pump
            met_o[t, 4] = p_tower
            met_o[t, 5] = water
            t_z = t_next
            w = w_next
    return obs_np, u_np, phys_np, state_np, meters_np
