"""Small dense MLPs over a flat parameter vector, with exact gradients.

Parameters live in one float64 vector laid out layer by layer as
``W_0 (fan_in x fan_out, row-major), b_0, W_1, b_1, ...``; ``unflatten``
returns numpy views into that vector so edits go both ways.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class LayerSlot(NamedTuple):
    rows: int
    cols: int
    w_offset: int
    b_offset: int


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        if self.hidden_activation != "tanh" or self.output_activation != "linear":
            raise ShapeError("only tanh hidden / linear output layers are supported")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    def layout(self) -> list[LayerSlot]:
        out = []
        off = 0
        s = self.layer_sizes
        for i in range(len(s) - 1):
            rows, cols = s[i], s[i + 1]
            out.append(LayerSlot(rows, cols, off, off + rows * cols))
            off += (rows + 1) * cols
        return out

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d.get("hidden_activation", "tanh"), d.get("output_activation", "linear"))


def unflatten(spec: MlpSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if values.shape[0] < spec.n_params:
        raise ShapeError(f"expected at least {spec.n_params} values, got {values.shape[0]}")
    out = []
    for slot in spec.layout():
        w = values[slot.w_offset:slot.b_offset].reshape(slot.rows, slot.cols)
        b = values[slot.b_offset:slot.b_offset + slot.cols]
        out.append((w, b))
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def init(spec: MlpSpec, seed: int | np.random.Generator) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    for w, _ in unflatten(spec, values):
        bound = 1.0 / math.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return values


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ShapeError(f"input has shape {x.shape}, network expects {spec.n_in} features")
    return x, single


def _forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    layers = unflatten(spec, params)
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    xb, single = _as_batch(spec, x)
    out = _forward(spec, params, xb)[-1]
    return out[0] if single else out


def grad(spec: MlpSpec, params: np.ndarray, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * forward(x))``.

    Returns ``(d_params, d_input)``; batch rows are summed into ``d_params``.
    """
    xb, single = _as_batch(spec, x)
    up = np.asarray(upstream, dtype=float)
    if single:
        up = up[None, :]
    if up.shape != (xb.shape[0], spec.n_out):
        raise ShapeError(f"upstream has shape {up.shape}, expected {(xb.shape[0], spec.n_out)}")
    acts = _forward(spec, params, xb)
    layers = unflatten(spec, params)
    g = np.zeros_like(params[:spec.n_params])
    g_layers = unflatten(spec, g)
    delta = up
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = g_layers[i]
        gw[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ w.T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    return g, (delta[0] if single else delta)


# --- Gaussian policy head ----------------------------------------------------
# theta = [mlp params..., log_std (act_dim)]; mean = tanh(mlp(obs)) in [-1, 1].

def policy_size(spec: MlpSpec) -> int:
    return spec.n_params + spec.n_out


def log_std_of(spec: MlpSpec, theta: np.ndarray) -> np.ndarray:
    return theta[spec.n_params:spec.n_params + spec.n_out]


def init_policy(spec: MlpSpec, seed, log_std: float = -0.5, out_scale: float = 0.01) -> np.ndarray:
    theta = np.empty(policy_size(spec))
    theta[:spec.n_params] = init(spec, seed)
    w, _ = unflatten(spec, theta)[-1]
    w *= out_scale
    theta[spec.n_params:] = log_std
    return theta


def policy_mean(spec: MlpSpec, theta: np.ndarray, obs) -> np.ndarray:
    return np.tanh(forward(spec, theta, obs))


def gaussian_log_prob(spec: MlpSpec, theta: np.ndarray, obs, action, weights=None):
    """Diagonal-Gaussian log density of ``action`` and its gradients.

    Returns ``(logp, d_theta, d_obs)``. ``logp`` has one entry per batch row;
    ``d_theta`` is the gradient of ``sum(weights * logp)`` (weights default to
    ones) and ``d_obs`` the per-row input gradient of the same quantity.
    """
    xb, single = _as_batch(spec, obs)
    a = np.asarray(action, dtype=float).reshape(xb.shape[0], spec.n_out)
    wts = np.ones(xb.shape[0]) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    raw_ls = log_std_of(spec, theta)
    ls = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * ls)
    acts = _forward(spec, theta, xb)
    mu = np.tanh(acts[-1])
    diff = a - mu
    logp = np.sum(-0.5 * diff ** 2 * inv_var - ls - _HALF_LOG_2PI, axis=1)

    d_mu = wts[:, None] * diff * inv_var
    d_z = d_mu * (1.0 - mu ** 2)
    d_mlp, d_obs = grad(spec, theta, xb, d_z)
    d_ls = np.sum(wts[:, None] * (diff ** 2 * inv_var - 1.0), axis=0)
    inside = (raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)
    d_theta = np.concatenate([d_mlp, d_ls * inside])
    if single:
        return logp[0], d_theta, d_obs[0]
    return logp, d_theta, d_obs


def gaussian_entropy(spec: MlpSpec, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Entropy of the action distribution and its gradient w.r.t. theta."""
    raw_ls = log_std_of(spec, theta)
    ls = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    ent = float(np.sum(ls + 0.5 + _HALF_LOG_2PI))
    g = np.zeros_like(theta)
    g[spec.n_params:] = ((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)).astype(float)
    return ent, g


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    n: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam descent step; returns the new parameter vector."""
    if params.shape != grads.shape or params.shape[0] != state.n:
        raise ShapeError(f"params {params.shape}, grads {grads.shape}, state n={state.n}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --- checkpoint file -------------------------------------------------------

MAGIC = b"CGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, values: np.ndarray, header: dict) -> None:
    """Magic, version, JSON header, little-endian float64 payload, sha256."""
    hdr = json.dumps(header, sort_keys=True).encode()
    vals = np.ascontiguousarray(values, dtype="<f8")
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(hdr)) + hdr + struct.pack("<Q", vals.size) + vals.tobytes()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, hlen = struct.unpack_from("<HI", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    header = json.loads(body[off:off + hlen].decode())
    off += hlen
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    values = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(float)
    return values, header
