"""Per-specification policy training, rollouts and the trajectory pool.

``train_policy`` accepts any episode source with ``obs_dim``, ``act_dim``,
``episode_steps``, ``max_start()`` and
``run_episode(sizes, theta, start=, noise=, t_zone0=)`` returning an object
with ``obs``, ``actions`` and ``reward`` arrays; ``family.Environment`` is
the production implementation.
"""
from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .family import (
    Envelope,
    Environment,
    MetricsReport,
    Specification,
    TaskEmbedding,
    encode_spec,
)


class TrainingDivergence(ArithmeticError):
    def __init__(self, episode: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at episode {episode}")
        self.episode = episode


class PoolError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "a2c"
    gamma: float = 0.99
    episodes: int = 300
    lr: float = 3e-3
    value_lr: float = 3e-3
    entropy_bonus: float = 1e-3
    seed: int = 0
    eval_episodes: int = 4
    hidden: tuple[int, ...] = (32, 32)
    gae_lambda: float = 0.95
    value_steps: int = 5
    init_log_std: float = -0.5
    start_temp_jitter_c: float = 2.0  # random initial zone offset from the target while training
    cem_population: int = 32
    cem_elite: int = 8
    cem_init_std: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.algorithm not in ("a2c", "cem"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.cem_elite > self.cem_population:
            raise ValueError("cem_elite must not exceed cem_population")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def policy_spec(self, obs_dim: int, act_dim: int) -> nn.MlpSpec:
        return nn.MlpSpec((obs_dim, *self.hidden, act_dim))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainLog:
    returns: list[float] = field(default_factory=list)  # undiscounted raw reward per episode
    value_loss: list[float] = field(default_factory=list)
    reward_mean: float = 0.0
    reward_std: float = 1.0
    seconds: float = 0.0


class _RunningStats:
    """Welford accumulator for reward normalization."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x: np.ndarray) -> None:
        for v in np.asarray(x, dtype=float).ravel():
            self.n += 1
            d = v - self.mean
            self.mean += d / self.n
            self.m2 += d * (v - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.n) if self.n > 1 else 1.0


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g


def _gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Advantages for a finite-horizon episode; ``values`` has T+1 entries, last one 0."""
    T = len(rewards)
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


def _sample_start(env, rng: np.random.Generator) -> int:
    hi = env.max_start()
    return int(rng.integers(0, hi + 1)) if hi > 0 else 0


def _initial_temp(env, rng: np.random.Generator, jitter: float) -> float | None:
    spec = getattr(env, "spec", None)
    if spec is None or jitter <= 0.0:
        return None
    return spec.psi.t_target_c + rng.uniform(-jitter, jitter)


def train_policy(env, cfg: TrainConfig, init_theta: np.ndarray | None = None,
                 callback: Callable[[int, float], None] | None = None) -> tuple[np.ndarray, TrainLog]:
    if cfg.algorithm == "cem":
        return _train_cem(env, cfg, init_theta, callback)
    return _train_a2c(env, cfg, init_theta, callback)


def _train_a2c(env, cfg: TrainConfig, init_theta, callback):
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    pspec = cfg.policy_spec(env.obs_dim, env.act_dim)
    theta = nn.init_policy(pspec, rng, log_std=cfg.init_log_std) if init_theta is None else init_theta.copy()
    # the critic also sees the fraction of the horizon still ahead
    vspec = nn.MlpSpec((env.obs_dim + 1, *cfg.hidden, 1))
    phi = nn.init(vspec, rng)
    opt_pi = nn.AdamState(theta.size, lr=cfg.lr)
    opt_v = nn.AdamState(phi.size, lr=cfg.value_lr)
    stats = _RunningStats()
    log = TrainLog()
    T = env.episode_steps
    remaining = (T - np.arange(T + 1)) / T
    for ep in range(cfg.episodes):
        noise = rng.standard_normal((T, env.act_dim))
        start = _sample_start(env, rng)
        tr = env.run_episode(pspec.layer_sizes, theta, start=start, noise=noise,
                             t_zone0=_initial_temp(env, rng, cfg.start_temp_jitter_c))
        r = np.asarray(tr.reward, dtype=float)
        if not np.all(np.isfinite(r)):
            raise TrainingDivergence(ep, "reward")
        stats.update(r)
        rn = (r - stats.mean) / (stats.std + 1e-8)
        v_in = np.column_stack([tr.obs, remaining])
        values = nn.forward(vspec, phi, v_in)[:, 0]
        values[-1] = 0.0
        adv = _gae(rn, values, cfg.gamma, cfg.gae_lambda)
        targets = adv + values[:-1]
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        _, g_logp, _ = nn.gaussian_log_prob(pspec, theta, tr.obs[:-1], tr.actions, weights=adv / T)
        _, g_ent = nn.gaussian_entropy(pspec, theta)
        g = -(g_logp + cfg.entropy_bonus * g_ent)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(ep)
        theta = nn.adam_step(opt_pi, theta, g)

        vloss = 0.0
        for _ in range(cfg.value_steps):
            pred = nn.forward(vspec, phi, v_in[:-1])[:, 0]
            err = pred - targets
            vloss = float(np.mean(err ** 2))
            gv, _ = nn.grad(vspec, phi, v_in[:-1], (2.0 * err / T)[:, None])
            phi = nn.adam_step(opt_v, phi, gv)
        if not math.isfinite(vloss):
            raise TrainingDivergence(ep, "value loss")
        log.returns.append(float(r.sum()))
        log.value_loss.append(vloss)
        if callback is not None:
            callback(ep, float(r.sum()))
    log.reward_mean, log.reward_std = stats.mean, stats.std
    log.seconds = time.perf_counter() - t0
    return theta, log


def _train_cem(env, cfg: TrainConfig, init_theta, callback):
    """Cross-entropy method over the flat mean-net parameters; log_std stays fixed."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    pspec = cfg.policy_spec(env.obs_dim, env.act_dim)
    theta = nn.init_policy(pspec, rng, log_std=cfg.init_log_std) if init_theta is None else init_theta.copy()
    n = pspec.n_params
    mean = theta[:n].copy()
    std = np.full(n, cfg.cem_init_std)
    log = TrainLog()
    for gen in range(cfg.episodes):
        start = _sample_start(env, rng)
        pop = mean + std * rng.standard_normal((cfg.cem_population, n))
        scores = np.empty(cfg.cem_population)
        for i in range(cfg.cem_population):
            cand = np.concatenate([pop[i], theta[n:]])
            tr = env.run_episode(pspec.layer_sizes, cand, start=start, noise=None)
            scores[i] = float(np.sum(tr.reward))
        if not np.all(np.isfinite(scores)):
            raise TrainingDivergence(gen, "return")
        elite = pop[np.argsort(-scores, kind="stable")[:cfg.cem_elite]]
        mean = elite.mean(axis=0)
        std = elite.std(axis=0) + 0.01
        log.returns.append(float(np.max(scores)))
        if callback is not None:
            callback(gen, float(np.max(scores)))
    theta = np.concatenate([mean, theta[n:]])
    log.seconds = time.perf_counter() - t0
    return theta, log


# --- rollouts ----------------------------------------------------------------

@dataclass
class Trajectory:
    spec: Specification
    embedding: TaskEmbedding | None
    obs: np.ndarray  # (T, obs_dim) states the actions were taken in
    actions: np.ndarray  # (T, act_dim) policy-space actions
    ret: float
    metrics: MetricsReport | None = None

    def __post_init__(self):
        if len(self.obs) == 0 or len(self.obs) != len(self.actions):
            raise PoolError("trajectory needs equally long, non-empty obs and action sequences")


def rollout(env: Environment, theta: np.ndarray, deterministic: bool = True, seed: int = 0, start: int = 0,
            gamma: float = 0.99, envelope: Envelope | None = None, t_zone0: float | None = None,
            hidden: Sequence[int] = (32, 32)) -> Trajectory:
    sizes = (env.obs_dim, *hidden, env.act_dim)
    noise = None if deterministic else np.random.default_rng(seed).standard_normal((env.episode_steps, env.act_dim))
    tr = env.run_episode(sizes, theta, start=start, noise=noise, t_zone0=t_zone0)
    emb = encode_spec(env.spec, envelope, allow_extrapolation=True) if envelope is not None else None
    return Trajectory(env.spec, emb, tr.obs[:-1].copy(), tr.actions.copy(),
                      discounted_return(tr.reward, gamma), env.metrics(tr))


def eval_starts(env, n: int) -> list[int]:
    """Evaluation episode offsets: consecutive days, wrapped into the trace."""
    hi = env.max_start()
    return [(i * env.episode_steps) % (hi + 1) for i in range(n)]


# --- pool ----------------------------------------------------------------------

POOL_FORMAT_VERSION = 1


def _encode_steps(obs: np.ndarray, actions: np.ndarray) -> str:
    payload = np.concatenate([obs, actions], axis=1).astype("<f8")
    return base64.b64encode(payload.tobytes()).decode("ascii")


def _record_dict(traj: Trajectory) -> dict:
    payload = _encode_steps(traj.obs, traj.actions)
    rec = {
        "spec": traj.spec.to_dict(),
        "embedding": None if traj.embedding is None else {
            "values": list(traj.embedding.values), "layout": list(traj.embedding.layout),
            "extrapolated": traj.embedding.extrapolated},
        "shape": [len(traj.obs), traj.obs.shape[1], traj.actions.shape[1]],
        "return": traj.ret,
        "metrics": None if traj.metrics is None else traj.metrics.to_dict(),
        "steps": payload,
    }
    body = json.dumps(rec, sort_keys=True)
    rec["sha256"] = hashlib.sha256(body.encode()).hexdigest()
    return rec


def _record_from_dict(rec: dict) -> Trajectory:
    rec = dict(rec)
    digest = rec.pop("sha256", None)
    if digest != hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest():
        raise PoolError("record checksum mismatch")
    T, d_obs, d_act = rec["shape"]
    raw = np.frombuffer(base64.b64decode(rec["steps"]), dtype="<f8").reshape(T, d_obs + d_act).astype(float)
    emb = rec["embedding"]
    return Trajectory(
        spec=Specification.from_dict(rec["spec"]),
        embedding=None if emb is None else TaskEmbedding(tuple(emb["values"]), tuple(emb["layout"]),
                                                          emb["extrapolated"]),
        obs=raw[:, :d_obs].copy(),
        actions=raw[:, d_obs:].copy(),
        ret=rec["return"],
        metrics=None if rec["metrics"] is None else MetricsReport.from_dict(rec["metrics"]),
    )


@dataclass
class TrajectoryPool:
    records: list[Trajectory]
    reward_ids: tuple[str, ...]
    scene_hash: str
    grid: dict
    envelope: Envelope
    family: str = "a"
    complete: bool = True
    skipped: list[dict] = field(default_factory=list)

    @property
    def reward_id(self) -> str:
        if len(set(self.reward_ids)) != 1:
            raise PoolError("pool mixes reward forms")
        return self.reward_ids[0]

    def specs(self) -> list[Specification]:
        seen = []
        for r in self.records:
            if r.spec not in seen:
                seen.append(r.spec)
        return seen

    def header(self) -> dict:
        return {
            "format_version": POOL_FORMAT_VERSION,
            "reward_ids": list(self.reward_ids),
            "scene_hash": self.scene_hash,
            "grid": self.grid,
            "envelope": self.envelope.to_dict(),
            "family": self.family,
        }


class PoolWriter:
    """Single writer appending records to a JSONL pool file as they arrive."""

    def __init__(self, path, pool: TrajectoryPool):
        self.path = Path(path)
        with self.path.open("w", encoding="utf-8") as f:
            f.write(json.dumps({"header": pool.header()}, sort_keys=True) + "\n")

    def append(self, traj: Trajectory) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(_record_dict(traj), sort_keys=True) + "\n")

    def finish(self, complete: bool, skipped: list[dict]) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps({"footer": {"complete": complete, "skipped": skipped}}, sort_keys=True) + "\n")


def save_pool(pool: TrajectoryPool, path) -> None:
    w = PoolWriter(path, pool)
    for r in pool.records:
        w.append(r)
    w.finish(pool.complete, pool.skipped)


def load_pool(path) -> TrajectoryPool:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PoolError("empty pool file")
    header = json.loads(lines[0]).get("header")
    if header is None or header.get("format_version") != POOL_FORMAT_VERSION:
        raise PoolError("missing or unsupported pool header")
    records, complete, skipped = [], False, []
    for line in lines[1:]:
        doc = json.loads(line)
        if "footer" in doc:
            complete = doc["footer"]["complete"]
            skipped = doc["footer"]["skipped"]
        else:
            records.append(_record_from_dict(doc))
    return TrajectoryPool(records, tuple(header["reward_ids"]), header["scene_hash"], header["grid"],
                          Envelope.from_dict(header["envelope"]), header["family"], complete, skipped)


@dataclass
class Expert:
    spec: Specification
    theta: np.ndarray
    log: TrainLog


def build_pool(env_factory: Callable[[Specification], Environment], specs: Iterable[Specification],
               cfg: TrainConfig, envelope: Envelope, reward_id: str | Callable[[Specification], str],
               scene_hash: str, grid: dict, path=None, makespan=None,
               experts: dict | None = None, init_theta: np.ndarray | None = None) -> TrajectoryPool:
    """Train one expert per specification and collect deterministic demonstrations.

    ``reward_id`` is either the shared family reward id or, for the piecewise
    ablation, a function giving each specification its own id. Trained
    parameters are stored in ``experts`` when a dict is passed. ``init_theta``
    warm-starts every expert from one shared policy.
    """
    specs = list(specs)
    ids = tuple(reward_id(s) if callable(reward_id) else reward_id for s in specs)
    pool = TrajectoryPool([], ids if callable(reward_id) else (reward_id,), scene_hash, grid, envelope,
                          specs[0].family if specs else "a")
    writer = PoolWriter(path, pool) if path is not None else None
    for spec in specs:
        encode_spec(spec, envelope)
        env = env_factory(spec)
        t0 = time.perf_counter()
        try:
            theta, log = train_policy(env, cfg, init_theta=init_theta)
        except TrainingDivergence as exc:
            pool.skipped.append({"spec": spec.to_dict(), "error": str(exc)})
            pool.complete = False
            continue
        finally:
            if makespan is not None:
                makespan.add("Policy training", time.perf_counter() - t0)
        if experts is not None:
            experts[spec] = Expert(spec, theta, log)
        t0 = time.perf_counter()
        for start in eval_starts(env, cfg.eval_episodes):
            traj = rollout(env, theta, deterministic=True, start=start, gamma=cfg.gamma, envelope=envelope,
                           hidden=cfg.hidden)
            pool.records.append(traj)
            if writer is not None:
                writer.append(traj)
        if makespan is not None:
            makespan.add("Policy rollout", time.perf_counter() - t0)
    if writer is not None:
        writer.finish(pool.complete, pool.skipped)
    return pool
