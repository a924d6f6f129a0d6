"""Trajectory records shared by the training, attack and analysis code."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

# fixed schema for penalty-sweep trajectory files
TRAJECTORY_COLUMNS = ("config_id", "step", "rel_error_geomean", "omega_rel", "grad_norm",
                      "wallclock_s", "diverged")


@dataclass
class TrajectoryRecord:
    config_id: str
    series: dict = field(default_factory=dict)
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def log(self, step: int, **values):
        steps = self.series.setdefault("step", [])
        if steps and step <= steps[-1]:
            raise ValueError(f"step {step} not after {steps[-1]}")
        steps.append(int(step))
        n = len(steps)
        for k, v in values.items():
            col = self.series.setdefault(k, [])
            col.extend([math.nan] * (n - 1 - len(col)))
            col.append(v)

    def __len__(self):
        return len(self.series.get("step", ()))

    def get(self, name: str) -> np.ndarray:
        col = list(self.series.get(name, ()))
        col.extend([math.nan] * (len(self) - len(col)))
        return np.asarray(col, dtype=np.float64)

    @property
    def endpoint(self) -> dict:
        if not len(self):
            return {}
        return {k: v[-1] for k, v in self.series.items() if len(v) == len(self)}

    def rows(self, columns=None):
        columns = columns or ["config_id", *self.series.keys(), "diverged"]
        cols = {k: self.get(k) if k != "step" else self.series["step"] for k in self.series}
        for i in range(len(self)):
            row = []
            for c in columns:
                if c == "config_id":
                    row.append(self.config_id)
                elif c == "diverged":
                    row.append(int(self.diverged))
                elif c == "step":
                    row.append(self.series["step"][i])
                elif c in cols:
                    row.append(_fmt(cols[c][i]))
                else:
                    row.append("")
            yield row

    def to_csv(self, columns=None, header: bool = True) -> str:
        columns = list(columns or ["config_id", *self.series.keys(), "diverged"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(columns)
        for row in self.rows(columns):
            w.writerow(row)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trajectories_csv(records, columns=TRAJECTORY_COLUMNS) -> str:
    parts = [",".join(columns) + "\n"]
    for r in records:
        parts.append(r.to_csv(columns, header=False))
    return "".join(parts)


def first_reach(values, threshold: float):
    """Index of the first entry at or below ``threshold`` (None if never)."""
    v = np.asarray(values, dtype=np.float64)
    hit = np.nonzero(v <= threshold)[0]
    return int(hit[0]) if hit.size else None
