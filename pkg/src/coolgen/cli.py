"""Command-line entry point: ``coolgen SUBCOMMAND [flags]``.

Every subcommand reads the run config, works inside ``--out`` and leaves its
artifacts there, so later stages pick up earlier ones from the same
directory. Usage errors exit with 2, stage failures with 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, dsl, hypernet, nn, pipeline, report
from .baselines import run_pid
from .config import ConfigError, RunConfig, load_config
from .evolution import EvolutionFailed, run_evolution
from .family import LayoutMismatchError, make_env, spec_from_fields, encode_spec
from .llm import LlmError, UsageSession, usage_report
from .makespan import Makespan
from .scene import SceneError
from .trainer import PoolError, TrainingDivergence, load_pool, save_pool

log = logging.getLogger("coolgen")

STAGE_ERRORS = (ConfigError, SceneError, LayoutMismatchError, EvolutionFailed, LlmError, PoolError,
                TrainingDivergence, hypernet.DistillDivergence, nn.CheckpointError, dsl.DslError,
                report.ReportError, FileNotFoundError, ValueError, KeyError)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="run config JSON (default: shipped reference config)")
    p.add_argument("--seed", type=int, help="seed for every stochastic stage")
    p.add_argument("--out", metavar="DIR", default="run", help="run directory (default: ./run)")
    p.add_argument("--backend", choices=("http", "mock"), help="LLM backend override")
    p.add_argument("--family", choices=tuple("abcde"), help="task family override")
    p.add_argument("--ablation", choices=("no-boundary", "piecewise-reward"), help="ablation switch")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coolgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"coolgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        return p

    add("evolve", "search a family reward form with the LLM backend")
    add("curate", "train per-specification experts and write the trajectory pool")
    add("distill", "fit the hypernetwork (and the CPN baseline) to the pool")
    for name, help_ in (("generate", "write zero-shot policy weights for one specification"),
                        ("run", "evaluate one episode for one specification")):
        p = add(name, help_)
        p.add_argument("--mu", type=float, required=True)
        p.add_argument("--t-high", type=float, required=True)
        p.add_argument("--allow-extrapolation", action="store_true",
                       help="accept specifications outside the trained envelope (outputs are tagged)")
        if name == "run":
            p.add_argument("--controller", choices=("dcopilot", "cpn", "pid"), default="dcopilot")
    p = add("sweep", "MAE of generated policies against fresh experts over a specification grid")
    p.add_argument("--points", type=int, default=6, help="grid points per envelope axis")
    add("scenario", "multi-day specification-change scenario")
    p = add("report", "render SVG plots, summary.json and run_report.json")
    p.add_argument("--canonical", action="store_true", help="omit wall-clock fields from run_report.json")
    return parser


# --- helpers --------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.backend is not None:
        try:
            cfg = dataclasses.replace(cfg, backend=dataclasses.replace(cfg.backend, kind=args.backend))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if args.family is not None:
        cfg = dataclasses.replace(cfg, family=args.family)
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _reward(cfg: RunConfig, out: Path) -> dsl.RewardForm:
    evolved = out / "evolution" / "best.reward"
    if evolved.exists():
        log.info("using evolved reward %s", evolved)
        return dsl.load_reward_file(evolved)
    return cfg.load_reward()


def _pool_name(args) -> str:
    return "pool_piecewise.jsonl" if args.ablation == "piecewise-reward" else "pool.jsonl"


def _suffix(args) -> str:
    return "_piecewise" if args.ablation == "piecewise-reward" else ""


# --- subcommands ----------------------------------------------------------------------

def cmd_evolve(args, cfg: RunConfig, out: Path) -> int:
    scene = cfg.load_scene()
    ecfg = cfg.evolution_config(use_boundary=args.ablation != "no-boundary")
    best, state = run_evolution(ecfg, cfg.family, scene, cfg.workload.trace(), run_dir=out / "evolution")
    print(f"best reward {best.id}: worst-case violation {state.best_history[-1]:.4f}")
    return 0


def cmd_curate(args, cfg: RunConfig, out: Path) -> int:
    scene, workload = cfg.load_scene(), cfg.workload.trace()
    ms = Makespan()
    if args.ablation == "piecewise-reward":
        session = UsageSession()
        forms = pipeline.piecewise_rewards(cfg, scene, workload, cfg.pool.specs(cfg.family), session, ms)
        for i, (spec, form) in enumerate(forms.items()):
            _write(out / "piecewise_rewards" / f"spec_{i:02d}_mu{spec.mu}_th{spec.psi.t_high_c:g}.reward",
                   form.to_file_text())
        _write(out / "piecewise_rewards" / "token_usage.json", pipeline.json_dumps(usage_report(session)))
        reward = forms
    else:
        reward = _reward(cfg, out)
    pool, experts = pipeline.curate(cfg, scene, workload, reward, path=out / _pool_name(args), makespan=ms)
    experts.save(out / f"experts{_suffix(args)}.ckpt")
    viol = [r.metrics.violation_cost_s1 for r in pool.records]
    pue = [r.metrics.pue for r in pool.records]
    _write(out / f"pool_summary{_suffix(args)}.json", pipeline.json_dumps(
        {"records": len(pool.records), "specs": len(pool.specs()), "complete": pool.complete,
         "skipped": pool.skipped, "reward_ids": list(pool.reward_ids),
         "mean_violation_s1": float(np.mean(viol)) if viol else None,
         "mean_pue": float(np.mean(pue)) if pue else None}))
    _write(out / f"makespan_curate{_suffix(args)}.csv", ms.to_csv())
    print(f"pool: {len(pool.records)} demonstrations over {len(pool.specs())} specifications")
    return 0


def _curves_csv(hc: hypernet.Curves, cc: hypernet.Curves | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["train_nll", "val_nll", "train_mse", "val_mse"]
    header = ["epoch"] + [f"hyper_{c}" for c in cols if getattr(hc, c)]
    if cc is not None:
        header += [f"cpn_{c}" for c in cols if getattr(cc, c)]
    w.writerow(header)
    for i in range(len(hc.train_nll)):
        row = [i + 1] + [f"{getattr(hc, c)[i]:.6f}" for c in cols if getattr(hc, c)]
        if cc is not None:
            row += [f"{getattr(cc, c)[i]:.6f}" for c in cols if getattr(cc, c)]
        w.writerow(row)
    return buf.getvalue()


def cmd_distill(args, cfg: RunConfig, out: Path) -> int:
    pool = load_pool(out / _pool_name(args))
    ms = Makespan()
    with ms.stage("Hypernetwork training"):
        hp, hc = hypernet.distill(pool, cfg.distill, allow_mixed_rewards=args.ablation == "piecewise-reward")
    hypernet.save_hyper(hp, out / f"hyper{_suffix(args)}.ckpt")
    cc = None
    if not args.ablation:
        with ms.stage("Hypernetwork training"):
            cpn, cc = hypernet.train_cpn(pool, cfg.distill)
        hypernet.save_cpn(cpn, out / "cpn.ckpt")
    _write(out / f"distill_curves{_suffix(args)}.csv", _curves_csv(hc, cc))
    summary = {"train_specs": [s.to_dict() for s in hc.train_specs],
               "val_specs": [s.to_dict() for s in hc.val_specs],
               "final_train_nll": hc.train_nll[-1], "final_val_nll": hc.val_nll[-1] if hc.val_nll else None,
               "final_val_mse": hc.val_mse[-1] if hc.val_mse else None}
    if cc is not None and cc.val_mse:
        summary["cpn_final_val_mse"] = cc.val_mse[-1]
    _write(out / f"distill_summary{_suffix(args)}.json", pipeline.json_dumps(summary))
    _write(out / f"makespan_distill{_suffix(args)}.csv", ms.to_csv())
    print(f"hypernetwork: final train NLL {hc.train_nll[-1]:.4f}")
    return 0


def _spec(args, cfg: RunConfig):
    return spec_from_fields({"mu": args.mu, "t_high": args.t_high}, cfg.family)


def cmd_generate(args, cfg: RunConfig, out: Path) -> int:
    hp = hypernet.load_hyper(out / "hyper.ckpt")
    spec = _spec(args, cfg)
    zs = hypernet.zero_shot_policy(hp, spec, allow_extrapolation=args.allow_extrapolation)
    path = out / f"policy_mu{spec.mu}_th{spec.psi.t_high_c:g}.ckpt"
    nn.save_checkpoint(path, zs.theta, {"kind": "policy", "policy_sizes": list(zs.policy_sizes),
                                        "spec": spec.to_dict(), "extrapolated": zs.extrapolated})
    print(json.dumps({"path": str(path), "extrapolated": zs.extrapolated}))
    return 0


def cmd_run(args, cfg: RunConfig, out: Path) -> int:
    scene, spec = cfg.load_scene(), _spec(args, cfg)
    env = make_env(scene, spec, cfg.workload.trace(), _reward(cfg, out), episode_steps=cfg.episode_steps)
    extrapolated = False
    if args.controller == "pid":
        trace = run_pid(env, cfg.pid)
    elif args.controller == "cpn":
        cpn = hypernet.load_cpn(out / "cpn.ckpt")
        emb = encode_spec(spec, cpn.envelope, allow_extrapolation=args.allow_extrapolation)
        theta, sizes = cpn.policy_for(emb)
        extrapolated = emb.extrapolated
        trace = env.run_episode(sizes, theta)
    else:
        zs = hypernet.zero_shot_policy(hypernet.load_hyper(out / "hyper.ckpt"), spec,
                                       allow_extrapolation=args.allow_extrapolation)
        extrapolated = zs.extrapolated
        trace = env.run_episode(zs.policy_sizes, zs.theta)
    doc = {"spec": spec.to_dict(), "controller": args.controller, "extrapolated": extrapolated,
           "metrics": env.metrics(trace).to_dict(), "return": float(np.sum(trace.reward))}
    _write(out / "episode.json", pipeline.json_dumps(doc))
    print(json.dumps(doc["metrics"], sort_keys=True))
    return 0


def cmd_sweep(args, cfg: RunConfig, out: Path) -> int:
    if args.points < 1:
        raise ValueError("--points must be >= 1")
    scene, workload = cfg.load_scene(), cfg.workload.trace()
    hp = hypernet.load_hyper(out / "hyper.ckpt")
    cpn = hypernet.load_cpn(out / "cpn.ckpt") if (out / "cpn.ckpt").exists() else None
    experts = pipeline.ExpertSet.load(out / "experts.ckpt")
    mu_lo, mu_hi = cfg.envelope.range("mu")
    th_lo, th_hi = cfg.envelope.range("t_high")
    mus = [float(round(v)) for v in np.linspace(mu_lo, mu_hi, args.points)]
    ths = [float(v) for v in np.linspace(th_lo, th_hi, args.points)]
    ms = Makespan()
    rows = pipeline.sweep(cfg, scene, workload, _reward(cfg, out), hp, cpn, experts.base, mus, ths, ms)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=pipeline.SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    _write(out / "sweep.csv", buf.getvalue())
    _write(out / "makespan_sweep.csv", ms.to_csv())
    print(f"sweep: mean temperature MAE {np.mean([r['hyper_temp_mae'] for r in rows]):.4f} deg C")
    return 0


def cmd_scenario(args, cfg: RunConfig, out: Path) -> int:
    scene = cfg.load_scene()
    reward = _reward(cfg, out)
    kinds = set(cfg.scenario.controllers)
    hp = hypernet.load_hyper(out / "hyper.ckpt") if "dcopilot" in kinds else None
    cpn = hypernet.load_cpn(out / "cpn.ckpt") if "cpn" in kinds else None
    ms = Makespan()
    expert_for = None
    if "lagged_drl" in kinds:
        experts = pipeline.ExpertSet.load(out / "experts.ckpt")
        expert_for = pipeline.scenario_experts(cfg, scene, reward, experts.base, experts.thetas, ms)
    res = pipeline.run_scenario(cfg, scene, reward, hp, cpn, expert_for)
    _write(out / "scenario.csv", pipeline.scenario_csv(res))
    _write(out / "scenario.json", pipeline.json_dumps(res.to_dict()))
    _write(out / "makespan_scenario.csv", ms.to_csv())
    for name, series in res.per_day.items():
        print(f"{name}: max per-day violation {max(series):.4f} deg C, PUE {res.pue[name]:.4f}")
    return 0


def cmd_report(args, cfg: RunConfig, out: Path) -> int:
    summary = report.render_report(out)
    doc = report.build_run_report(out, canonical=args.canonical)
    _write(out / "run_report.json", report.canonical_json(doc))
    if summary["missing"]:
        print("missing series: " + ", ".join(summary["missing"]), file=sys.stderr)
    print("rendered: " + ", ".join(summary["plots"]))
    return 0


COMMANDS = {
    "evolve": cmd_evolve, "curate": cmd_curate, "distill": cmd_distill, "generate": cmd_generate,
    "run": cmd_run, "sweep": cmd_sweep, "scenario": cmd_scenario, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = _config(args)
    except STAGE_ERRORS as exc:
        print(f"error: {StageError('config', exc)}", file=sys.stderr)
        return 1
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command != "report":
            _write(out / "config.json", pipeline.json_dumps(cfg.to_dict()))
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", UserWarning)
            return COMMANDS[args.command](args, cfg, out)
    except STAGE_ERRORS as exc:
        print(f"error: {StageError(args.command, exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
