"""Run configuration: one JSON file drives every CLI stage.

Paths inside the file resolve against the file's directory; ``builtin:NAME``
points at the data shipped with the package. API keys never appear here,
only the name of the environment variable holding one.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import dsl
from .baselines import PidConfig
from .evolution import EvolutionConfig
from .family import Envelope, Specification, spec_from_fields
from .hypernet import DistillConfig
from .llm import BackendConfig
from .scene import SceneConfig, WorkloadTrace, gen_workload, load_scene
from .trainer import TrainConfig

CONFIG_FORMAT_VERSION = 1
STEPS_PER_DAY = 96


class ConfigError(ValueError):
    pass


def resolve_path(ref: str, base: Path | None) -> Path:
    if ref.startswith("builtin:"):
        return Path(str(resources.files("coolgen.data").joinpath(ref[len("builtin:"):])))
    p = Path(ref)
    return p if p.is_absolute() or base is None else base / p


@dataclass(frozen=True)
class WorkloadConfig:
    days: int = 14
    seed: int = 11
    profile: str = "diurnal"

    def trace(self, min_steps: int = 0) -> WorkloadTrace:
        return gen_workload(max(self.days * STEPS_PER_DAY, min_steps), self.seed, self.profile)


@dataclass(frozen=True)
class PoolConfig:
    """Specification grid and the warm-start schedule used to curate expert demonstrations."""

    mu: tuple[float, ...] = (100, 112, 125, 137, 150)
    t_high: tuple[float, ...] = (22.0, 23.25, 24.5, 25.75, 27.0)
    base_episodes: int = 1000  # shared policy trained on the envelope centre first
    finetune_episodes: int = 300
    finetune_lr: float = 1e-3

    def specs(self, family: str) -> list[Specification]:
        return [spec_from_fields({"mu": m, "t_high": t}, family) for m in self.mu for t in self.t_high]

    def grid(self) -> dict:
        return {"mu": list(self.mu), "t_high": list(self.t_high)}


@dataclass(frozen=True)
class ScenarioEvent:
    day: int
    mu: float | None = None
    t_high: float | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    total_days: int = 40
    initial: dict = field(default_factory=lambda: {"mu": 118, "t_high": 26.5})
    events: tuple[ScenarioEvent, ...] = (ScenarioEvent(14, t_high=23.0), ScenarioEvent(28, mu=145))
    controllers: tuple[str, ...] = ("dcopilot", "lagged_drl", "pid", "cpn")
    lag_steps: int = 960

    def __post_init__(self):
        days = [e.day for e in self.events]
        if days != sorted(days):
            raise ConfigError("scenario events must be sorted by day")
        if any(not 0 < d < self.total_days for d in days):
            raise ConfigError("scenario event days must fall inside the run")
        bad = set(self.controllers) - {"dcopilot", "lagged_drl", "pid", "cpn"}
        if bad:
            raise ConfigError(f"unknown controller kinds {sorted(bad)}")

    def segments(self, family: str) -> list[tuple[int, Specification]]:
        """``(start_day, spec)`` for each constant-specification stretch."""
        cur = dict(self.initial)
        out = [(0, spec_from_fields(cur, family))]
        for e in self.events:
            if e.mu is not None:
                cur["mu"] = e.mu
            if e.t_high is not None:
                cur["t_high"] = e.t_high
            out.append((e.day, spec_from_fields(cur, family)))
        return out


@dataclass(frozen=True)
class RunConfig:
    scene: str = "builtin:reference_scene.json"
    family: str = "a"
    envelope: Envelope = Envelope(("mu", "t_high"), (100.0, 22.0), (150.0, 27.0))
    reward: str = "builtin:reference.reward"
    episode_steps: int = STEPS_PER_DAY
    workload: WorkloadConfig = WorkloadConfig()
    train: TrainConfig = TrainConfig(seed=1)
    pool: PoolConfig = PoolConfig()
    distill: DistillConfig = DistillConfig(seed=1)
    evolution: dict = field(default_factory=lambda: {"iterations": 5, "n_candidates": 5, "top_k": 2,
                                                     "train_episodes": 75})
    backend: BackendConfig = BackendConfig()
    pid: PidConfig = PidConfig()
    scenario: ScenarioConfig = ScenarioConfig()
    seed: int = 1
    base_dir: Path | None = None

    def load_scene(self) -> SceneConfig:
        return load_scene(resolve_path(self.scene, self.base_dir))

    def load_reward(self) -> dsl.RewardForm:
        return dsl.load_reward_file(resolve_path(self.reward, self.base_dir))

    def evolution_config(self, use_boundary: bool = True) -> EvolutionConfig:
        ev = dict(self.evolution)
        eps = int(ev.pop("train_episodes", 75))
        return EvolutionConfig(
            envelope=self.envelope, llm=self.backend, use_boundary=use_boundary,
            train=dataclasses.replace(self.train, episodes=eps), episode_steps=self.episode_steps,
            **{k: tuple(v) if k == "objective_weights" else v for k, v in ev.items()},
        )

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed into every stochastic stage."""
        return dataclasses.replace(
            self, seed=seed, train=dataclasses.replace(self.train, seed=seed),
            distill=dataclasses.replace(self.distill, seed=seed),
            backend=dataclasses.replace(self.backend, mock_seed=seed) if self.backend.kind == "mock" else self.backend,
        )

    def to_dict(self) -> dict:
        def plain(x):
            if dataclasses.is_dataclass(x):
                return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, (list, tuple)):
                return [plain(v) for v in x]
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            return x

        d = {f.name: plain(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "base_dir"}
        d["envelope"] = self.envelope.to_dict()
        d["format_version"] = CONFIG_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        d = dict(d)
        d.pop("format_version", None)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw: dict = {"base_dir": base_dir}
        try:
            for k, v in d.items():
                if k == "envelope":
                    kw[k] = Envelope.from_dict(v)
                elif k == "workload":
                    kw[k] = WorkloadConfig(**v)
                elif k == "train":
                    kw[k] = TrainConfig.from_dict(v)
                elif k == "pool":
                    kw[k] = PoolConfig(**{n: tuple(x) if isinstance(x, list) else x for n, x in v.items()})
                elif k == "distill":
                    kw[k] = DistillConfig(**v)
                elif k == "backend":
                    kw[k] = BackendConfig.from_dict(v)
                elif k == "pid":
                    kw[k] = PidConfig.from_dict(v)
                elif k == "scenario":
                    v = dict(v)
                    v["events"] = tuple(ScenarioEvent(**e) for e in v.get("events", ()))
                    if "controllers" in v:
                        v["controllers"] = tuple(v["controllers"])
                    kw[k] = ScenarioConfig(**v)
                elif k == "base_dir":
                    continue
                else:
                    kw[k] = v
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        return cls(**kw)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a config file; ``None`` gives the shipped reference configuration."""
    if path is None:
        return RunConfig(base_dir=None)
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc, base_dir=p.parent)
