"""Self-contained SVG plots and JSON summaries from a run directory.

Rendering is deterministic: fixed canvas sizes, fixed number formatting, no
timestamps, so rendering the same directory twice gives identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from html import escape
from pathlib import Path
from typing import Mapping, Sequence

from .makespan import Makespan

REPORT_FORMAT_VERSION = 1
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
SERIES_FILES = ("scenario.csv", "distill_curves.csv", "sweep.csv", "evolution/history.json")


class ReportError(RuntimeError):
    def __init__(self, missing: Sequence[str]):
        super().__init__("run directory has none of the expected series: " + ", ".join(missing))
        self.missing = list(missing)


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _finite(vals) -> list[float]:
    return [v for v in vals if math.isfinite(v)]


def line_chart(title: str, x: Sequence[float], series: Mapping[str, Sequence[float]], xlabel: str,
               ylabel: str, width: int = 640, height: int = 360) -> str:
    left, right, top, bottom = 60, 150, 30, 40
    pw, ph = width - left - right, height - top - bottom
    ys = _finite([v for s in series.values() for v in s]) or [0.0]
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    x0, x1 = (min(x), max(x)) if len(x) else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 4}" y="{py(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 14}" text-anchor="middle">{_fmt(xv)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, vals) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, vals) if math.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heat_table(title: str, rows: Sequence[float], cols: Sequence[float], values: Mapping[tuple, float],
               row_label: str, col_label: str, cell: int = 56) -> str:
    left, top = 90, 50
    width, height = left + cell * len(cols) + 20, top + cell * len(rows) + 40
    vals = _finite(values.values()) or [0.0]
    lo, hi = min(vals), max(vals)
    span = hi - lo if hi > lo else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{left + cell * len(cols) / 2:.1f}" y="36" text-anchor="middle">{escape(col_label)}</text>',
           f'<text x="8" y="{top - 6}">{escape(row_label)}</text>']
    for j, c in enumerate(cols):
        out.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top - 6}" text-anchor="middle">{_fmt(c)}</text>')
    for i, r in enumerate(rows):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:.1f}" text-anchor="end">{_fmt(r)}</text>')
        for j, c in enumerate(cols):
            v = values.get((r, c), float("nan"))
            shade = 255 if not math.isfinite(v) else int(round(255 - 180 * (v - lo) / span))
            out.append(f'<rect x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="rgb(255,{shade},{shade})" stroke="#999"/>')
            label = _fmt(v) if math.isfinite(v) else "-"
            out.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" '
                       f'text-anchor="middle">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- per-series renderers ---------------------------------------------------------

def _scenario(rows):
    names = [k for k in rows[0] if k != "day"]
    days = [float(r["day"]) for r in rows]
    series = {n: [float(r[n]) for r in rows] for n in names}
    svg = line_chart("Per-day SLA violation", days, series, "day", "violation cost (deg C)")
    return {"scenario_violation.svg": svg}, {"scenario_violation_total": {n: sum(v) for n, v in series.items()},
                                             "scenario_violation_max": {n: max(v) for n, v in series.items()}}


def _curves(rows):
    ep = [float(r["epoch"]) for r in rows]
    cols = [k for k in rows[0] if k != "epoch"]
    nll = {k: [float(r[k]) for r in rows] for k in cols if k.endswith("nll")}
    mse = {k: [float(r[k]) for r in rows] for k in cols if k.endswith("mse")}
    plots = {"loss_nll.svg": line_chart("Distillation NLL", ep, nll, "epoch", "NLL per sample"),
             "loss_mse.svg": line_chart("Distillation action MSE", ep, mse, "epoch", "MSE")}
    return plots, {"final_losses": {k: float(rows[-1][k]) for k in cols}}


def _sweep(rows):
    mus = sorted({float(r["mu"]) for r in rows})
    ths = sorted({float(r["t_high"]) for r in rows})
    plots, summary = {}, {}
    for metric in ("hyper_temp_mae", "cpn_temp_mae", "hyper_action_mae", "cpn_action_mae"):
        vals = {(float(r["mu"]), float(r["t_high"])): float(r[metric]) for r in rows}
        plots[f"sweep_{metric}.svg"] = heat_table(metric, mus, ths, vals, "mu", "t_high")
        fin = _finite(vals.values())
        summary[metric] = sum(fin) / len(fin) if fin else float("nan")
    return plots, {"sweep_mean": summary}


def _evolution(doc):
    n = len(doc["best_violation"])
    x = list(range(1, n + 1))
    series = {"best (ranking specs)": doc["best_violation"], "best (boundaries)": doc["boundary_violation"]}
    svg = line_chart("Reward search: worst-case violation", x, series, "iteration", "violation cost")
    return {"evolution_violation.svg": svg}, {"evolution_best_id": doc.get("best_id")}


def render_report(run_dir) -> dict:
    """Render every available series; returns the summary (also written as summary.json)."""
    run = Path(run_dir)
    if not run.is_dir():
        raise ReportError(list(SERIES_FILES))
    plots: dict[str, str] = {}
    summary: dict = {"format_version": REPORT_FORMAT_VERSION, "missing": [], "plots": []}
    handlers = {
        "scenario.csv": lambda p: _scenario(read_csv(p)),
        "distill_curves.csv": lambda p: _curves(read_csv(p)),
        "sweep.csv": lambda p: _sweep(read_csv(p)),
        "evolution/history.json": lambda p: _evolution(json.loads(p.read_text())),
    }
    for name in SERIES_FILES:
        p = run / name
        if not p.exists():
            summary["missing"].append(name)
            continue
        try:
            new_plots, part = handlers[name](p)
        except (KeyError, ValueError, IndexError) as exc:
            summary["missing"].append(f"{name} (unreadable: {exc})")
            continue
        plots.update(new_plots)
        summary.update(part)
    if not plots:
        raise ReportError(summary["missing"])
    for fname, svg in sorted(plots.items()):
        (run / fname).write_text(svg, encoding="utf-8")
    summary["plots"] = sorted(plots)
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --- run report ----------------------------------------------------------------------

def merged_makespan(run: Path) -> Makespan:
    total = Makespan()
    for p in sorted(run.glob("makespan_*.csv")) + sorted(run.glob("evolution/makespan.csv")):
        total.merge(Makespan.from_csv(p.read_text()))
    return total


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in ("seconds", "makespan")}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def build_run_report(run_dir, canonical: bool = False) -> dict:
    """Collect the run's series, aggregates and accounting; ``canonical`` drops wall-clock fields."""
    run = Path(run_dir)

    def load(name):
        p = run / name
        return json.loads(p.read_text()) if p.exists() else None

    doc = {"format_version": REPORT_FORMAT_VERSION, "config": load("config.json"),
           "scenario": load("scenario.json"), "episode": load("episode.json"),
           "token_usage": load("evolution/token_usage.json"), "evolution": load("evolution/history.json"),
           "pool": load("pool_summary.json"), "distill": load("distill_summary.json")}
    doc["seed"] = (doc["config"] or {}).get("seed")
    ms = merged_makespan(run)
    doc["makespan"] = dict(ms.rows())
    if (run / "sweep.csv").exists():
        doc["sweep"] = read_csv(run / "sweep.csv")
    return _strip_timing(doc) if canonical else doc


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
