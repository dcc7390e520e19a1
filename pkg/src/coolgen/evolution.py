"""Reflection-driven search for one reward form that serves a whole family.

Each iteration asks the LLM backend for candidates, validates them against the
family schema, trains a short-budget policy per boundary specification,
scores the rollouts and feeds the best sources (with their numbers) and any
validator issues back into the next prompt.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import string
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsl, llm
from .family import (
    Envelope,
    MetricsReport,
    Specification,
    family_layout,
    make_env,
    reward_obs_schema,
    reward_sla_schema,
    spec_from_fields,
)
from .makespan import Makespan
from .scene import SceneConfig, WorkloadTrace
from .trainer import TrainConfig, TrainingDivergence, train_policy, rollout

RUN_FORMAT_VERSION = 1


class EvolutionFailed(RuntimeError):
    """No candidate survived validation and evaluation; ``archive`` keeps every attempt."""

    def __init__(self, archive: list["Candidate"]):
        super().__init__(f"no valid reward candidate after {len(archive)} attempts")
        self.archive = archive


@dataclass(frozen=True)
class EvolutionConfig:
    envelope: Envelope
    iterations: int = 5
    n_candidates: int = 5
    top_k: int = 2
    llm: llm.BackendConfig = llm.BackendConfig()
    objective_weights: tuple[float, float] = (1.0, 0.0)  # (PUE, WUE), compared after violation
    use_boundary: bool = True
    train: TrainConfig = TrainConfig(episodes=75)
    temperature: float = 0.7
    episode_steps: int = 96

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if not 1 <= self.top_k <= self.n_candidates:
            raise ValueError("top_k must lie in [1, n_candidates]")
        if len(self.objective_weights) != 2:
            raise ValueError("objective_weights needs a PUE and a WUE weight")
        object.__setattr__(self, "objective_weights", tuple(float(w) for w in self.objective_weights))

    def to_dict(self) -> dict:
        return {
            "envelope": self.envelope.to_dict(),
            "iterations": self.iterations,
            "n_candidates": self.n_candidates,
            "top_k": self.top_k,
            "llm": self.llm.to_dict(),
            "objective_weights": list(self.objective_weights),
            "use_boundary": self.use_boundary,
            "train": self.train.to_dict(),
            "temperature": self.temperature,
            "episode_steps": self.episode_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionConfig":
        d = dict(d)
        d["envelope"] = Envelope.from_dict(d["envelope"])
        if "llm" in d:
            d["llm"] = llm.BackendConfig.from_dict(d["llm"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "objective_weights" in d:
            d["objective_weights"] = tuple(d["objective_weights"])
        return cls(**d)


# --- boundaries ----------------------------------------------------------------

def boundary_embeddings(envelope: Envelope, family: str = "a") -> list[Specification]:
    """Corner specifications of the envelope, one per distinct combination of field extremes."""
    axes = []
    for f, lo, hi in zip(envelope.fields, envelope.lo, envelope.hi):
        if lo == hi:
            warnings.warn(f"envelope field {f!r} is degenerate; using the single value {lo}", stacklevel=2)
            axes.append((lo,))
        else:
            axes.append((lo, hi))
    out: list[Specification] = []
    for combo in itertools.product(*axes):
        spec = spec_from_fields(dict(zip(envelope.fields, combo)), family)
        if spec not in out:
            out.append(spec)
    return out


def mid_specification(envelope: Envelope, family: str = "a") -> Specification:
    return spec_from_fields(envelope.center(), family)


# --- scoring -------------------------------------------------------------------

@dataclass(frozen=True)
class SpecScore:
    spec: Specification
    metrics: MetricsReport

    @property
    def violation(self) -> float:
        return self.metrics.violation_cost_s1 + self.metrics.violation_cost_s2


@dataclass(frozen=True)
class CandidateScore:
    per_spec: tuple[SpecScore, ...]
    failed: bool = False
    diagnostic: str = ""

    @property
    def worst_violation(self) -> float:
        if self.failed or not self.per_spec:
            return math.inf
        return max(s.violation for s in self.per_spec)

    @property
    def mean_pue(self) -> float:
        return float(np.mean([s.metrics.pue for s in self.per_spec])) if self.per_spec else math.inf

    @property
    def mean_wue(self) -> float:
        return float(np.mean([s.metrics.wue for s in self.per_spec])) if self.per_spec else math.inf

    def objective(self, weights: Sequence[float]) -> float:
        if self.failed or not self.per_spec:
            return math.inf
        return weights[0] * self.mean_pue + weights[1] * self.mean_wue


def evaluate_candidate(cand: dsl.RewardForm, boundaries: Sequence[Specification], train_cfg: TrainConfig,
                       scene: SceneConfig, workload: WorkloadTrace, episode_steps: int = 96,
                       makespan: Makespan | None = None) -> CandidateScore:
    """Train one short-budget policy per specification and score a deterministic evaluation episode.

    Divergence or a runtime reward fault marks the candidate failed instead of raising.
    """
    rows = []
    for spec in boundaries:
        env = make_env(scene, spec, workload, cand, episode_steps=episode_steps)
        t0 = time.perf_counter()
        try:
            theta, _ = train_policy(env, train_cfg)
        except (TrainingDivergence, dsl.DslEvalError) as exc:
            return CandidateScore(tuple(rows), failed=True, diagnostic=f"{type(exc).__name__}: {exc}")
        finally:
            if makespan is not None:
                makespan.add("Verify rewards", time.perf_counter() - t0)
        t0 = time.perf_counter()
        traj = rollout(env, theta, deterministic=True, start=0, gamma=train_cfg.gamma, hidden=train_cfg.hidden)
        rows.append(SpecScore(spec, traj.metrics))
        if makespan is not None:
            makespan.add("Evaluation", time.perf_counter() - t0)
    return CandidateScore(tuple(rows))


# --- archive -------------------------------------------------------------------

@dataclass
class Candidate:
    """One sampled completion with its provenance and, when valid, its score."""

    iteration: int
    index: int
    text: str
    prompt_hash: str
    backend: str
    form: dsl.RewardForm | None = None
    issues: tuple[dsl.Issue, ...] = ()
    score: CandidateScore | None = None
    report_score: CandidateScore | None = None  # boundary score when ranking used the mid spec only

    @property
    def id(self) -> str:
        if self.form is not None:
            return self.form.id
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    @property
    def valid(self) -> bool:
        return self.form is not None and not self.issues

    @property
    def rankable(self) -> bool:
        return self.valid and self.score is not None and not self.score.failed

    def rank_key(self, weights: Sequence[float]) -> tuple[float, float, str]:
        s = self.score
        return (s.worst_violation, s.objective(weights), self.id)

    def file_text(self) -> str:
        head = [f"# iteration: {self.iteration}", f"# candidate: {self.index}",
                f"# prompt sha256: {self.prompt_hash}", f"# backend: {self.backend}"]
        head += [f"# issue: {i.code}: {i.message}" for i in self.issues]
        if self.form is not None:
            return self.form.to_file_text() + "\n".join(head) + "\n"
        return "\n".join(head) + "\n" + self.text + "\n"


@dataclass
class EvolutionState:
    iteration: int = 0
    archive: list[Candidate] = field(default_factory=list)
    top: list[Candidate] = field(default_factory=list)
    makespan: Makespan = field(default_factory=Makespan)
    usage: llm.UsageSession = field(default_factory=llm.UsageSession)
    best_history: list[float] = field(default_factory=list)  # ranking-score worst violation of best-so-far
    boundary_history: list[float] = field(default_factory=list)  # boundary worst violation of each iteration's best

    def best(self, weights: Sequence[float]) -> Candidate | None:
        ok = [c for c in self.archive if c.rankable]
        return min(ok, key=lambda c: c.rank_key(weights)) if ok else None


# --- prompts -------------------------------------------------------------------

def _template(name: str) -> string.Template:
    return string.Template(resources.files("coolgen.prompts").joinpath(name).read_text(encoding="utf-8"))


def _summary(c: Candidate, use_boundary: bool) -> str:
    s = c.score
    lines = [f"Reward form {c.id}:", "```", c.form.canonical, "```",
             f"worst_case_violation={s.worst_violation:.4f} mean_pue={s.mean_pue:.4f} mean_wue={s.mean_wue:.4f}"]
    if use_boundary:
        for r in s.per_spec:
            lines.append(f"  mu={r.spec.mu} t_high={r.spec.psi.t_high_c:g}: violation={r.violation:.4f} "
                         f"pue={r.metrics.pue:.4f} wue={r.metrics.wue:.4f}")
    return "\n".join(lines)


def build_prompt(cfg: EvolutionConfig, family: str, top: Sequence[Candidate],
                 issues: Sequence[dict], iteration: int = 1) -> tuple[dict, ...]:
    layout = family_layout(family)
    fields = {
        "family": family,
        "actions": ", ".join(layout.act_names),
        "obs_names": ", ".join(reward_obs_schema(layout)),
        "sla_names": ", ".join(reward_sla_schema(layout)),
        "envelope": "\n".join(f"  {f}: [{lo:g}, {hi:g}]" for f, lo, hi in
                              zip(cfg.envelope.fields, cfg.envelope.lo, cfg.envelope.hi)),
        "objectives": "PUE, WUE" if cfg.objective_weights[1] > 0 else "PUE",
    }
    system = _template("system.txt").substitute(grammar=dsl.GRAMMAR, n=cfg.n_candidates)
    if not top and not issues:
        user = _template("reward_initial.txt").substitute(fields)
    else:
        summaries = "\n\n".join(_summary(c, cfg.use_boundary) for c in top) or "(none yet)"
        issue_text = "\n".join(json.dumps(i, sort_keys=True) for i in issues) or "(none)"
        user = _template("reward_reflect.txt").substitute(fields, summaries=summaries, issues=issue_text,
                                                          round=iteration, rounds=cfg.iterations)
    return tuple(llm.messages(system, user))


# --- main loop -----------------------------------------------------------------

def _check(text: str, obs_schema, sla_schema) -> tuple[dsl.RewardForm | None, tuple[dsl.Issue, ...]]:
    try:
        form = dsl.parse(text)
    except dsl.DslSyntaxError as exc:
        return None, (dsl.Issue("syntax", str(exc)),)
    except dsl.DslLimitError as exc:
        return None, (dsl.Issue("limit", str(exc)),)
    return form, tuple(dsl.validate(form, obs_schema, sla_schema))


def run_evolution(cfg: EvolutionConfig, family: str, scene: SceneConfig, workload: WorkloadTrace,
                  run_dir: str | Path | None = None,
                  complete=llm.complete) -> tuple[dsl.RewardForm, EvolutionState]:
    """Iterate sample, validate, evaluate and reflect; return the archive best.

    ``complete`` is the backend call (``llm.complete`` signature), replaceable in tests.
    """
    layout = family_layout(family)
    obs_schema, sla_schema = reward_obs_schema(layout), reward_sla_schema(layout)
    boundaries = boundary_embeddings(cfg.envelope, family)
    rank_specs = boundaries if cfg.use_boundary else [mid_specification(cfg.envelope, family)]
    state = EvolutionState()
    scored: dict[str, CandidateScore] = {}
    reported: dict[str, CandidateScore] = {}
    issues: list[dict] = []
    w = cfg.objective_weights

    for it in range(1, cfg.iterations + 1):
        state.iteration = it
        msgs = build_prompt(cfg, family, state.top, issues, it)
        req = llm.ChatRequest(cfg.llm.model, msgs, cfg.temperature, cfg.n_candidates)
        prompt_hash = hashlib.sha256(req.prompt_text().encode()).hexdigest()
        stage = "Initialize rewards" if it == 1 else "Sample new rewards"
        with state.makespan.stage(stage):
            texts, _ = complete(cfg.llm, req, state.usage, stage)
        issues = []
        for j, raw in enumerate(texts):
            body = llm.extract_candidate(raw)
            with state.makespan.stage("Verify rewards"):
                form, found = _check(body, obs_schema, sla_schema)
            cand = Candidate(it, j, body, prompt_hash, cfg.llm.kind, form, found)
            if cand.valid:
                if cand.id not in scored:
                    scored[cand.id] = evaluate_candidate(form, rank_specs, cfg.train, scene, workload,
                                                         cfg.episode_steps, state.makespan)
                cand.score = scored[cand.id]
            else:
                issues.extend({"candidate": j, **i.to_dict()} for i in found)
            state.archive.append(cand)

        best = state.best(w)
        ranked = sorted((c for c in state.archive if c.rankable), key=lambda c: c.rank_key(w))
        unique: list[Candidate] = []
        for c in ranked:
            if c.id not in {u.id for u in unique}:
                unique.append(c)
        state.top = unique[:cfg.top_k]
        if best is None:
            state.best_history.append(math.inf)
            state.boundary_history.append(math.inf)
            continue
        state.best_history.append(best.score.worst_violation)
        if cfg.use_boundary:
            best.report_score = best.score
        else:
            if best.id not in reported:
                reported[best.id] = evaluate_candidate(best.form, boundaries, cfg.train, scene, workload,
                                                       cfg.episode_steps, state.makespan)
            best.report_score = reported[best.id]
        state.boundary_history.append(best.report_score.worst_violation)

    best = state.best(w)
    if run_dir is not None:
        write_run_dir(run_dir, cfg, family, state, best)
    if best is None:
        raise EvolutionFailed(state.archive)
    return best.form, state


# --- run directory -------------------------------------------------------------

SCORE_COLUMNS = ("iteration", "candidate", "id", "valid", "failed", "spec_mu", "spec_t_high",
                 "violation_cost_s1", "violation_cost_s2", "pue", "wue", "worst_violation", "objective")


def scores_csv(state: EvolutionState, weights: Sequence[float]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SCORE_COLUMNS)
    for c in state.archive:
        base = [c.iteration, c.index, c.id, int(c.valid)]
        if c.score is None:
            wr.writerow(base + [0, "", "", "", "", "", "", "", ""])
            continue
        agg = [f"{c.score.worst_violation:.6f}", f"{c.score.objective(weights):.6f}"]
        if not c.score.per_spec:
            wr.writerow(base + [int(c.score.failed), "", "", "", "", "", ""] + agg)
        for r in c.score.per_spec:
            m = r.metrics
            wr.writerow(base + [int(c.score.failed), r.spec.mu, f"{r.spec.psi.t_high_c:g}",
                                f"{m.violation_cost_s1:.6f}", f"{m.violation_cost_s2:.6f}",
                                f"{m.pue:.6f}", f"{m.wue:.6f}"] + agg)
    return buf.getvalue()


def write_run_dir(run_dir, cfg: EvolutionConfig, family: str, state: EvolutionState,
                  best: Candidate | None) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    snap = {"format_version": RUN_FORMAT_VERSION, "family": family, "evolution": cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    for c in state.archive:
        d = out / f"iter_{c.iteration:02d}"
        d.mkdir(exist_ok=True)
        suffix = "reward" if c.form is not None else "txt"
        (d / f"cand_{c.index:02d}.{suffix}").write_text(c.file_text())
    (out / "scores.csv").write_text(scores_csv(state, cfg.objective_weights))
    (out / "makespan.csv").write_text(state.makespan.to_csv())
    (out / "token_usage.json").write_text(json.dumps(llm.usage_report(state.usage), indent=2, sort_keys=True) + "\n")
    hist = {"best_violation": state.best_history, "boundary_violation": state.boundary_history,
            "best_id": best.id if best else None}
    (out / "history.json").write_text(json.dumps(hist, indent=2) + "\n")
    if best is not None:
        (out / "best.reward").write_text(best.form.to_file_text())
    return out
