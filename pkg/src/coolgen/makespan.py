"""Wall-clock accounting per pipeline stage."""
from __future__ import annotations

import csv
import io
import time
from contextlib import contextmanager

STAGES = (
    "Initialize rewards",
    "Verify rewards",
    "Evaluation",
    "Sample new rewards",
    "Policy training",
    "Policy rollout",
    "Hypernetwork training",
)
TOTAL = "Total makespan"


class Makespan:
    """Seconds spent per stage; the total is always the sum of the stages."""

    def __init__(self):
        self.seconds = {s: 0.0 for s in STAGES}

    def add(self, stage: str, seconds: float) -> None:
        if stage not in self.seconds:
            raise KeyError(f"unknown stage {stage!r}")
        self.seconds[stage] += seconds

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add(name, time.perf_counter() - t0)

    def merge(self, other: "Makespan") -> None:
        for k, v in other.seconds.items():
            self.seconds[k] += v

    @property
    def total(self) -> float:
        return sum(self.seconds.values())

    def rows(self) -> list[tuple[str, float]]:
        return [(s, self.seconds[s]) for s in STAGES] + [(TOTAL, self.total)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "seconds"])
        for s, v in self.rows():
            w.writerow([s, f"{v:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Makespan":
        m = cls()
        for row in csv.DictReader(io.StringIO(text)):
            if row["stage"] != TOTAL:
                m.seconds[row["stage"]] = float(row["seconds"])
        return m
