"""Hypernetwork policy generator, its distillation, and the CPN baseline.

``H(e)`` maps a task embedding to the whole flat main-policy vector
(mean-net weights and the log_std block). The embedding is split into its
mu and psi components, each projected linearly, concatenated and fed to a
tanh MLP whose raw output is turned into policy weights by
``theta = output_bias + output_scale[block] * raw``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .family import Envelope, Specification, TaskEmbedding, encode_spec
from .trainer import PoolError, TrajectoryPool


class DistillDivergence(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite distillation loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class HyperArch:
    policy_sizes: tuple[int, ...]
    mu_idx: tuple[int, ...]
    psi_idx: tuple[int, ...]
    d_mu: int = 8
    d_psi: int = 8
    hidden: tuple[int, ...] = (128, 128)

    @property
    def policy_spec(self) -> nn.MlpSpec:
        return nn.MlpSpec(self.policy_sizes)

    @property
    def n_theta(self) -> int:
        return nn.policy_size(self.policy_spec)

    @property
    def trunk(self) -> nn.MlpSpec:
        return nn.MlpSpec((self.d_mu + self.d_psi, *self.hidden, self.n_theta))

    @property
    def e_dim(self) -> int:
        return len(self.mu_idx) + len(self.psi_idx)

    def blocks(self) -> list[tuple[int, int]]:
        """Index ranges of theta sharing one output scale: one per policy layer plus log_std."""
        out = [(s.w_offset, s.b_offset + s.cols) for s in self.policy_spec.layout()]
        n = self.policy_spec.n_params
        out.append((n, n + self.policy_spec.n_out))
        return out

    def slots(self) -> dict[str, tuple[int, int]]:
        sizes = [
            ("w_mu", len(self.mu_idx) * self.d_mu), ("b_mu", self.d_mu),
            ("w_psi", len(self.psi_idx) * self.d_psi), ("b_psi", self.d_psi),
            ("trunk", self.trunk.n_params), ("scale", len(self.blocks())), ("bias", self.n_theta),
        ]
        out, off = {}, 0
        for name, n in sizes:
            out[name] = (off, off + n)
            off += n
        return out

    @property
    def n_params(self) -> int:
        return self.slots()["bias"][1]

    def to_dict(self) -> dict:
        return {"policy_sizes": list(self.policy_sizes), "mu_idx": list(self.mu_idx),
                "psi_idx": list(self.psi_idx), "d_mu": self.d_mu, "d_psi": self.d_psi,
                "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperArch":
        return cls(tuple(d["policy_sizes"]), tuple(d["mu_idx"]), tuple(d["psi_idx"]), d["d_mu"], d["d_psi"],
                   tuple(d["hidden"]))


@dataclass
class HyperParams:
    arch: HyperArch
    values: np.ndarray
    envelope: Envelope
    family: str = "a"

    def view(self, name: str) -> np.ndarray:
        a, b = self.arch.slots()[name]
        return self.values[a:b]


def arch_for(envelope: Envelope, policy_sizes: Sequence[int], d_mu: int = 8, d_psi: int = 8,
             hidden: Sequence[int] = (128, 128)) -> HyperArch:
    return HyperArch(tuple(policy_sizes), envelope.mu_fields, envelope.psi_fields, d_mu, d_psi, tuple(hidden))


def init_hyper(arch: HyperArch, envelope: Envelope, seed, family: str = "a", output_scale: float = 0.01) -> HyperParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hp = HyperParams(arch, np.zeros(arch.n_params), envelope, family)
    for w, n_in in (("w_mu", len(arch.mu_idx)), ("w_psi", len(arch.psi_idx))):
        v = hp.view(w)
        if n_in:
            v[:] = rng.uniform(-1.0 / math.sqrt(n_in), 1.0 / math.sqrt(n_in), size=v.size)
    hp.view("trunk")[:] = nn.init(arch.trunk, rng)
    hp.view("scale")[:] = output_scale
    hp.view("bias")[:] = nn.init_policy(arch.policy_spec, rng)
    return hp


def _encode(arch: HyperArch, values: np.ndarray, e: np.ndarray) -> np.ndarray:
    s = arch.slots()
    e_mu = e[:, list(arch.mu_idx)]
    e_psi = e[:, list(arch.psi_idx)]
    w_mu = values[slice(*s["w_mu"])].reshape(len(arch.mu_idx), arch.d_mu)
    w_psi = values[slice(*s["w_psi"])].reshape(len(arch.psi_idx), arch.d_psi)
    z_mu = e_mu @ w_mu + values[slice(*s["b_mu"])]
    z_psi = e_psi @ w_psi + values[slice(*s["b_psi"])]
    return np.concatenate([z_mu, z_psi], axis=1)


def _scale_vector(arch: HyperArch, scales: np.ndarray) -> np.ndarray:
    out = np.empty(arch.n_theta)
    for (a, b), s in zip(arch.blocks(), scales):
        out[a:b] = s
    return out


def _generate(arch: HyperArch, values: np.ndarray, e: np.ndarray):
    s = arch.slots()
    z = _encode(arch, values, e)
    trunk_params = values[slice(*s["trunk"])]
    raw = nn.forward(arch.trunk, trunk_params, z)
    scale = _scale_vector(arch, values[slice(*s["scale"])])
    theta = values[slice(*s["bias"])] + scale * raw
    return theta, (z, raw, scale)


def _generate_backward(arch: HyperArch, values: np.ndarray, e: np.ndarray, cache, d_theta: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(d_theta * H(e))`` with respect to the hypernetwork parameters."""
    s = arch.slots()
    z, raw, scale = cache
    g = np.zeros_like(values)
    g[slice(*s["bias"])] = d_theta.sum(axis=0)
    prod = (raw * d_theta).sum(axis=0)
    g[slice(*s["scale"])] = [prod[a:b].sum() for a, b in arch.blocks()]
    g_trunk, d_z = nn.grad(arch.trunk, values[slice(*s["trunk"])], z, d_theta * scale)
    g[slice(*s["trunk"])] = g_trunk
    d_mu, d_psi = d_z[:, :arch.d_mu], d_z[:, arch.d_mu:]
    g[slice(*s["w_mu"])] = (e[:, list(arch.mu_idx)].T @ d_mu).ravel()
    g[slice(*s["b_mu"])] = d_mu.sum(axis=0)
    g[slice(*s["w_psi"])] = (e[:, list(arch.psi_idx)].T @ d_psi).ravel()
    g[slice(*s["b_psi"])] = d_psi.sum(axis=0)
    return g


def generate_weights(hp: HyperParams, e: TaskEmbedding | np.ndarray) -> np.ndarray:
    vec = e.array() if isinstance(e, TaskEmbedding) else np.asarray(e, dtype=float)
    if vec.ndim != 1 or vec.size != hp.arch.e_dim:
        raise ValueError(f"embedding has {vec.size} components, hypernetwork expects {hp.arch.e_dim}")
    if isinstance(e, TaskEmbedding) and tuple(e.layout) != hp.envelope.fields:
        raise ValueError(f"embedding layout {e.layout} does not match {hp.envelope.fields}")
    theta, _ = _generate(hp.arch, hp.values, vec[None, :])
    return theta[0]


@dataclass
class ZeroShotPolicy:
    theta: np.ndarray
    policy_sizes: tuple[int, ...]
    spec: Specification
    extrapolated: bool = False


def zero_shot_policy(hp: HyperParams, spec: Specification, allow_extrapolation: bool = False) -> ZeroShotPolicy:
    """Policy weights for ``spec`` straight from the generator: no rollouts, no gradient steps."""
    emb = encode_spec(spec, hp.envelope, allow_extrapolation=allow_extrapolation)
    return ZeroShotPolicy(generate_weights(hp, emb), hp.arch.policy_sizes, spec, emb.extrapolated)


# --- distillation --------------------------------------------------------------

@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-3
    holdout: float = 0.2
    seed: int = 0
    d_mu: int = 8
    d_psi: int = 8
    hidden: tuple[int, ...] = (128, 128)
    cpn_hidden: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "cpn_hidden", tuple(self.cpn_hidden))


@dataclass
class Curves:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    train_specs: list[Specification] = field(default_factory=list)
    val_specs: list[Specification] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class _SpecData:
    spec: Specification
    e: np.ndarray
    obs: np.ndarray
    act: np.ndarray


def _group(pool: TrajectoryPool) -> list[_SpecData]:
    groups: dict = {}
    for r in pool.records:
        if r.embedding is None:
            raise PoolError("pool record lacks an embedding")
        g = groups.setdefault(r.spec, ([], [], r.embedding.array()))
        g[0].append(r.obs)
        g[1].append(r.actions)
    return [_SpecData(s, e, np.concatenate(o), np.concatenate(a)) for s, (o, a, e) in groups.items()]


def _on_boundary(d: _SpecData, tol: float = 1e-9) -> bool:
    return bool(np.any((d.e <= tol) | (d.e >= 1.0 - tol)))


def split_specs(pool: TrajectoryPool, holdout: float, seed: int) -> tuple[list[_SpecData], list[_SpecData]]:
    """Hold out whole specifications (never individual steps).

    Held-out specifications are drawn from the envelope interior so they
    are interpolation targets; specifications on the envelope boundary
    always stay in training. Falls back to all specifications when the
    interior is too small.
    """
    data = _group(pool)
    if len(data) < 4:
        raise PoolError(f"pool has {len(data)} distinct specifications; need at least 4")
    n_val = min(int(round(holdout * len(data))), len(data) - 1)
    interior = [i for i, d in enumerate(data) if not _on_boundary(d)]
    candidates = interior if len(interior) >= n_val else list(range(len(data)))
    rng = np.random.default_rng(seed)
    chosen = set(int(i) for i in rng.choice(candidates, size=n_val, replace=False)) if n_val else set()
    val = [d for i, d in enumerate(data) if i in chosen]
    train = [d for i, d in enumerate(data) if i not in chosen]
    return train, val


def _check_pool(pool: TrajectoryPool, allow_mixed_rewards: bool = False) -> None:
    if not allow_mixed_rewards and len(set(pool.reward_ids)) != 1:
        raise PoolError("pool mixes reward forms; distillation needs a single family reward")


class _Model:
    """Common interface of the hypernetwork and the CPN for the shared training loop."""

    values: np.ndarray

    def loss_grad(self, values, batch: list[tuple[_SpecData, np.ndarray]], n: int):
        raise NotImplementedError

    def mean_actions(self, values, d: _SpecData) -> np.ndarray:
        raise NotImplementedError


class _HyperModel(_Model):
    def __init__(self, hp: HyperParams):
        self.hp = hp
        self.arch = hp.arch
        self.pspec = hp.arch.policy_spec

    def loss_grad(self, values, batch, n):
        e = np.stack([d.e for d, _ in batch])
        thetas, cache = _generate(self.arch, values, e)
        d_theta = np.zeros_like(thetas)
        loss = 0.0
        for k, (d, idx) in enumerate(batch):
            logp, g, _ = nn.gaussian_log_prob(self.pspec, thetas[k], d.obs[idx], d.act[idx])
            loss -= float(np.sum(logp))
            d_theta[k] = -g / n
        return loss / n, _generate_backward(self.arch, values, e, cache, d_theta)

    def nll(self, values, d: _SpecData) -> float:
        theta, _ = _generate(self.arch, values, d.e[None, :])
        logp, _, _ = nn.gaussian_log_prob(self.pspec, theta[0], d.obs, d.act)
        return float(-np.mean(logp))

    def mean_actions(self, values, d):
        theta, _ = _generate(self.arch, values, d.e[None, :])
        return nn.policy_mean(self.pspec, theta[0], d.obs)


class _CpnModel(_Model):
    def __init__(self, spec: nn.MlpSpec):
        self.pspec = spec

    @staticmethod
    def _x(d: _SpecData, idx=None):
        obs = d.obs if idx is None else d.obs[idx]
        return np.column_stack([obs, np.broadcast_to(d.e, (len(obs), d.e.size))])

    def loss_grad(self, values, batch, n):
        g = np.zeros_like(values)
        loss = 0.0
        for d, idx in batch:
            logp, gk, _ = nn.gaussian_log_prob(self.pspec, values, self._x(d, idx), d.act[idx])
            loss -= float(np.sum(logp))
            g -= gk
        return loss / n, g / n

    def nll(self, values, d):
        logp, _, _ = nn.gaussian_log_prob(self.pspec, values, self._x(d), d.act)
        return float(-np.mean(logp))

    def mean_actions(self, values, d):
        return nn.policy_mean(self.pspec, values, self._x(d))


def _fit(model, values: np.ndarray, train: list[_SpecData], val: list[_SpecData], cfg: DistillConfig,
         rng: np.random.Generator):
    curves = Curves(train_specs=[d.spec for d in train], val_specs=[d.spec for d in val])
    t0 = time.perf_counter()
    opt = nn.AdamState(values.size, lr=cfg.lr)
    total = sum(len(d.obs) for d in train)
    iters = max(1, math.ceil(total / cfg.batch_size))

    def record():
        curves.train_nll.append(float(np.mean([model.nll(values, d) for d in train])))
        curves.train_mse.append(float(np.mean([np.mean((model.mean_actions(values, d) - d.act) ** 2) for d in train])))
        if val:
            curves.val_nll.append(float(np.mean([model.nll(values, d) for d in val])))
            curves.val_mse.append(float(np.mean([np.mean((model.mean_actions(values, d) - d.act) ** 2) for d in val])))

    record()
    for epoch in range(cfg.epochs):
        for _ in range(iters):
            # uniform over specifications first, then over steps within each
            picks = rng.integers(0, len(train), size=cfg.batch_size)
            batch = []
            for k in np.unique(picks):
                cnt = int(np.sum(picks == k))
                batch.append((train[k], rng.integers(0, len(train[k].obs), size=cnt)))
            loss, g = model.loss_grad(values, batch, cfg.batch_size)
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise DistillDivergence(epoch)
            values = nn.adam_step(opt, values, g)
        record()
        if not math.isfinite(curves.train_nll[-1]):
            raise DistillDivergence(epoch)
    curves.seconds = time.perf_counter() - t0
    return values, curves


def distill(pool: TrajectoryPool, cfg: DistillConfig,
            allow_mixed_rewards: bool = False) -> tuple[HyperParams, Curves]:
    """Fit the generator by NLL. Mixed reward ids are refused unless the piecewise ablation opts in."""
    _check_pool(pool, allow_mixed_rewards)
    train, val = split_specs(pool, cfg.holdout, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    obs_dim, act_dim = train[0].obs.shape[1], train[0].act.shape[1]
    policy_sizes = (obs_dim, *_policy_hidden(pool), act_dim)
    arch = arch_for(pool.envelope, policy_sizes, cfg.d_mu, cfg.d_psi, cfg.hidden)
    hp = init_hyper(arch, pool.envelope, rng, pool.family)
    values, curves = _fit(_HyperModel(hp), hp.values, train, val, cfg, rng)
    hp.values = values
    return hp, curves


def _policy_hidden(pool: TrajectoryPool) -> tuple[int, ...]:
    return tuple(pool.grid.get("policy_hidden", (32, 32)))


@dataclass
class CpnParams:
    spec: nn.MlpSpec
    values: np.ndarray
    envelope: Envelope

    def act(self, obs: np.ndarray, e: TaskEmbedding | np.ndarray) -> np.ndarray:
        vec = e.array() if isinstance(e, TaskEmbedding) else np.asarray(e, dtype=float)
        obs = np.atleast_2d(obs)
        x = np.column_stack([obs, np.broadcast_to(vec, (len(obs), vec.size))])
        return nn.policy_mean(self.spec, self.values, x)

    def policy_for(self, e: TaskEmbedding | np.ndarray) -> np.ndarray:
        """Fold a fixed embedding into the first-layer bias, giving a plain main-policy vector."""
        vec = e.array() if isinstance(e, TaskEmbedding) else np.asarray(e, dtype=float)
        layers = nn.unflatten(self.spec, self.values)
        w0, b0 = layers[0]
        n_obs = self.spec.n_in - vec.size
        sizes = (n_obs, *self.spec.layer_sizes[1:])
        out = [(w0[:n_obs].copy(), b0 + vec @ w0[n_obs:])] + [(w.copy(), b.copy()) for w, b in layers[1:]]
        return np.concatenate([nn.flatten(out), nn.log_std_of(self.spec, self.values)]), sizes


def train_cpn(pool: TrajectoryPool, cfg: DistillConfig,
              allow_mixed_rewards: bool = False) -> tuple[CpnParams, Curves]:
    _check_pool(pool, allow_mixed_rewards)
    train, val = split_specs(pool, cfg.holdout, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    obs_dim, act_dim = train[0].obs.shape[1], train[0].act.shape[1]
    spec = nn.MlpSpec((obs_dim + train[0].e.size, *cfg.cpn_hidden, act_dim))
    values = nn.init_policy(spec, rng)
    values, curves = _fit(_CpnModel(spec), values, train, val, cfg, rng)
    return CpnParams(spec, values, pool.envelope), curves


def heldout_mae(act_fn, data: Sequence[_SpecData]) -> float:
    """Mean absolute action error against expert demonstrations; ``act_fn(d) -> actions``."""
    errs = [np.abs(np.clip(act_fn(d), -1.0, 1.0) - np.clip(d.act, -1.0, 1.0)) for d in data]
    return float(np.mean(np.concatenate([e.ravel() for e in errs])))


def hyper_mae(hp: HyperParams, data: Sequence[_SpecData]) -> float:
    m = _HyperModel(hp)
    return heldout_mae(lambda d: m.mean_actions(hp.values, d), data)


def cpn_mae(cpn: CpnParams, data: Sequence[_SpecData]) -> float:
    return heldout_mae(lambda d: cpn.act(d.obs, d.e), data)


# --- checkpoint ------------------------------------------------------------------

def save_hyper(hp: HyperParams, path) -> None:
    header = {"kind": "hypernetwork", "arch": hp.arch.to_dict(), "envelope": hp.envelope.to_dict(),
              "family": hp.family, "policy_spec": hp.arch.policy_spec.to_dict()}
    nn.save_checkpoint(path, hp.values, header)


def load_hyper(path) -> HyperParams:
    values, header = nn.load_checkpoint(path)
    if header.get("kind") != "hypernetwork":
        raise nn.CheckpointError("not a hypernetwork checkpoint")
    arch = HyperArch.from_dict(header["arch"])
    if values.size != arch.n_params:
        raise nn.CheckpointError("parameter count does not match the stored architecture")
    return HyperParams(arch, values, Envelope.from_dict(header["envelope"]), header["family"])


def save_cpn(cpn: CpnParams, path) -> None:
    header = {"kind": "cpn", "spec": cpn.spec.to_dict(), "envelope": cpn.envelope.to_dict()}
    nn.save_checkpoint(path, cpn.values, header)


def load_cpn(path) -> CpnParams:
    values, header = nn.load_checkpoint(path)
    if header.get("kind") != "cpn":
        raise nn.CheckpointError("not a CPN checkpoint")
    spec = nn.MlpSpec.from_dict(header["spec"])
    if values.size != nn.policy_size(spec):
        raise nn.CheckpointError("parameter count does not match the stored architecture")
    return CpnParams(spec, values, Envelope.from_dict(header["envelope"]))
