"""Metrics sinks: a plot-ready CSV and a JSON-lines log.

The CSV holds only deterministic quantities so that two runs with the same
seed produce identical bytes; wall-clock time goes to the JSON lines only.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

CSV_COLUMNS = (
    "stage", "step", "loss", "l_hc", "l_hf", "l_rot", "l_gri", "l_col", "lr",
    "reward", "r0", "r1", "r2", "z0", "z1", "z2",
    "surrogate", "value_loss", "clip_frac", "ratio_mean", "grad_norm",
)


@dataclass
class MetricsRecord:
    step: int
    stage: str
    values: dict
    wall_clock: float = field(default=0.0)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


class MetricsWriter:
    """Appends records to ``metrics.csv`` and ``metrics.jsonl`` under ``out_dir``."""

    def __init__(self, out_dir, start_time: float | None = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.out_dir / "metrics.csv"
        self.jsonl_path = self.out_dir / "metrics.jsonl"
        self.t0 = time.perf_counter() if start_time is None else start_time
        self._last_step: dict[str, int] = {}

    def log(self, stage: str, step: int, **values) -> MetricsRecord:
        last = self._last_step.get(stage)
        if last is not None and step <= last:
            raise ValueError(f"{stage}: step {step} is not after {last}")
        self._last_step[stage] = step
        rec = MetricsRecord(step, stage, dict(values), time.perf_counter() - self.t0)
        unknown = set(values) - set(CSV_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        new = not self.csv_path.exists()
        with open(self.csv_path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(CSV_COLUMNS)
            row = {"stage": stage, "step": step, **values}
            w.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
        with open(self.jsonl_path, "a", encoding="utf-8") as fh:
            body = {"stage": stage, "step": step, "wall_clock": rec.wall_clock, **values}
            fh.write(json.dumps(body, sort_keys=True) + "\n")
        return rec


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
