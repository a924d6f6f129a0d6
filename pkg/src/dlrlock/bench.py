"""Timing harness and artifact emission.

Timing wraps only tape calls and optimizer steps, so data preparation and
file I/O never enter the spans. Artifacts are CSV/JSON files plus a manifest
with content hashes and SVG 1.1 line plots of trajectory files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import subprocess
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .blocks import TransformerParams
from .datasets import token_windows
from .records import TrajectoryRecord
from .tensor import Rng
from .training import lm_loss_node

TIMING_COLUMNS = frozenset({"wallclock_s", "forward_s", "backward_s", "optimizer_s", "total_s",
                            "total_wallclock_s"})
MODES = ("train_full", "train_frozen", "inference")


def _agg(x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0}
    return {"mean": float(x.mean()), "p50": float(np.percentile(x, 50)),
            "p95": float(np.percentile(x, 95))}


@dataclass
class TimingReport:
    forward_s: np.ndarray
    backward_s: np.ndarray
    optimizer_s: np.ndarray
    total_s: np.ndarray
    mode: str = "train_full"
    resolution_warning: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_record(cls, rec: TrajectoryRecord, skip: int = 0, mode: str = "train_full") -> "TimingReport":
        f, b, o = (rec.get(k)[skip:] for k in ("forward_s", "backward_s", "optimizer_s"))
        return cls(f, b, o, f + b + o, mode, _coarse(np.concatenate([f, b, o])),
                   {"config_id": rec.config_id})

    def aggregates(self) -> dict:
        return {k: _agg(getattr(self, k)) for k in ("forward_s", "backward_s", "optimizer_s", "total_s")}

    @property
    def backward_fraction(self) -> float:
        """Share of step time outside the forward pass (backward plus optimizer)."""
        tot = float(np.sum(self.total_s))
        return float(np.sum(self.backward_s) + np.sum(self.optimizer_s)) / tot if tot > 0 else 0.0

    @property
    def backward_forward_ratio(self) -> float:
        fwd = float(np.sum(self.forward_s))
        return float(np.sum(self.backward_s) + np.sum(self.optimizer_s)) / fwd if fwd > 0 else 0.0

    def summary(self) -> dict:
        return {"mode": self.mode, "steps": int(len(self.total_s)), **self.aggregates(),
                "backward_fraction": self.backward_fraction,
                "backward_forward_ratio": self.backward_forward_ratio,
                "resolution_warning": self.resolution_warning, **self.meta}


def _coarse(spans) -> bool:
    res = time.get_clock_info("perf_counter").resolution
    spans = np.asarray(spans)
    spans = spans[spans > 0]
    return bool(spans.size and spans.min() < res)


def time_step_split(model: TransformerParams, batch: np.ndarray, mode: str = "train_full",
                    steps: int = 10, warmup: int = 5, lr: float = 1e-5,
                    checkpoint_interval: int | None = None) -> TimingReport:
    """Time forward, backward and optimizer spans of repeated steps on one batch.

    ``batch`` holds ``seq_len + 1`` token windows. ``train_full`` updates every
    parameter, ``train_frozen`` only those already marked trainable, and
    ``inference`` runs the forward pass alone (backward and optimizer spans 0).
    The first ``warmup`` steps are run but excluded. Works on a copy.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    m = model.copy()
    if mode == "train_full":
        for p in m.params():
            p.requires_grad = True
    params = [p for p in m.params() if p.requires_grad]
    opt = ag.FlatAdamW(params) if mode != "inference" and params else None
    f, b, o = [], [], []
    for i in range(warmup + steps):
        tape = ag.Tape("inference" if mode == "inference" else "train_full")
        t0 = time.perf_counter()
        loss = lm_loss_node(tape, m, batch, checkpoint_interval)
        t1 = time.perf_counter()
        if opt is not None:
            grads = tape.backward(loss)
            t2 = time.perf_counter()
            ag.clip_grad_norm(grads, 1.0)
            opt.step(grads, lr)
            t3 = time.perf_counter()
        else:
            t2 = t3 = t1
        if i >= warmup:
            f.append(t1 - t0)
            b.append(t2 - t1)
            o.append(t3 - t2)
    f, b, o = np.array(f), np.array(b), np.array(o)
    rep = TimingReport(f, b, o, f + b + o, mode, _coarse(np.concatenate([f, b, o]) if mode != "inference" else f))
    if rep.resolution_warning:
        warnings.warn("timer resolution is coarser than a measured span")
    return rep


def bench_models(models: dict, tokens, batch_size: int = 8, seq_len: int = 64, steps: int = 10,
                 warmup: int = 5, repeats: int = 3, modes=("train_full", "inference"), seed: int = 0,
                 checkpoint: dict | None = None) -> list[dict]:
    """Timing rows for each (model, mode, repeat) on a fixed batch."""
    w = token_windows(tokens, batch_size, seq_len, Rng(seed, "bench"))
    rows = []
    for name, model in models.items():
        ck = (checkpoint or {}).get(name)
        for mode in modes:
            for rep in range(repeats):
                r = time_step_split(model, w, mode, steps, warmup, checkpoint_interval=ck)
                rows.append({"model": name, "repeat": rep, "checkpoint_interval": ck or 0, **_flat(r.summary())})
    return rows


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}_"))
        else:
            out[f"{prefix}{k}"] = v
    return out


def p50_stability(rows, model: str, mode: str = "train_full") -> float:
    """Max relative deviation of per-repeat p50 total step time from their median."""
    p = np.array([r["total_s_p50"] for r in rows if r["model"] == model and r["mode"] == mode])
    med = float(np.median(p))
    return float(np.max(np.abs(p - med)) / med) if med > 0 else 0.0


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

def rows_csv(rows: list[dict], columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def version_string() -> str:
    """``git describe``-style version; falls back to the package version."""
    from . import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def stable_hash(text: str) -> str:
    """sha256 of a CSV with timing columns blanked, so reruns compare equal."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return hashlib.sha256(b"").hexdigest()
    skip = {i for i, c in enumerate(rows[0]) if c in TIMING_COLUMNS}
    h = hashlib.sha256()
    for r in rows:
        h.update(",".join("" if i in skip else c for i, c in enumerate(r)).encode())
        h.update(b"\n")
    return h.hexdigest()


def svg_lines(series, xlabel: str, ylabel: str, title: str = "", logx: bool = False,
              logy: bool = False, width: int = 480, height: int = 320) -> str:
    """SVG 1.1 line plot with one ``<path>`` per ``(label, x, y)`` series."""
    tx = (lambda v: np.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: np.log10(v)) if logy else (lambda v: v)
    pts = []
    for label, x, y in series:
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        pts.append((label, tx(x[ok]), ty(y[ok])))
    allx = np.concatenate([p[1] for p in pts]) if pts else np.zeros(0)
    ally = np.concatenate([p[2] for p in pts]) if pts else np.zeros(0)
    x0, x1 = (allx.min(), allx.max()) if allx.size else (0.0, 1.0)
    y0, y1 = (ally.min(), ally.max()) if ally.size else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    ml, mr, mt, mb = 60, 10, 24, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="12">{_esc(title)}</text>',
           f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle" font-size="11">'
           f'{_esc(xlabel)}{" (log10)" if logx else ""}</text>',
           f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" '
           f'text-anchor="middle">{_esc(ylabel)}{" (log10)" if logy else ""}</text>',
           f'<text x="{ml - 4}" y="{mt + ph}" text-anchor="end" font-size="9">{y0:.3g}</text>',
           f'<text x="{ml - 4}" y="{mt + 8}" text-anchor="end" font-size="9">{y1:.3g}</text>',
           f'<text x="{ml}" y="{mt + ph + 12}" font-size="9">{x0:.3g}</text>',
           f'<text x="{ml + pw}" y="{mt + ph + 12}" text-anchor="end" font-size="9">{x1:.3g}</text>']
    n = max(len(pts), 1)
    for i, (label, x, y) in enumerate(pts):
        hue = int(360 * i / n)
        d = " ".join(f"{'M' if j == 0 else 'L'}{px(a):.2f},{py(b):.2f}" for j, (a, b) in enumerate(zip(x, y)))
        out.append(f'<path d="{d or "M0,0"}" fill="none" stroke="hsl({hue},70%,40%)" stroke-width="1">'
                   f'<title>{_esc(str(label))}</title></path>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def trajectory_plots(records, stem: str, y: str = "loss") -> dict:
    """The two-panel layout of a training comparison: ``y`` against tokens and against wall-clock."""
    out = {}
    for xname in ("tokens", "wallclock_s"):
        series = [(r.config_id, r.get(xname), r.get(y)) for r in records
                  if xname in r.series and y in r.series]
        if series:
            out[f"{stem}_{y}_vs_{xname}.svg"] = svg_lines(series, xname, y, f"{y} vs {xname}", logy=True)
    return out


def emit_artifacts(results: dict, out_dir, config_hash: str = "", seed: int = 0,
                   extra: dict | None = None) -> dict:
    """Write ``results`` (file name -> str / bytes / JSON-able value) and a manifest.

    The manifest records the config hash, seed, version string and every file
    with its size, sha256 and, for CSVs, a hash that ignores timing columns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name in sorted(results):
        content = results[name]
        if isinstance(content, (dict, list)):
            data = (json.dumps(_jsonable(content), indent=2, sort_keys=True) + "\n").encode()
        elif isinstance(content, str):
            data = content.encode()
        else:
            data = bytes(content)
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        entry = {"name": name, "size": len(data), "sha256": hashlib.sha256(data).hexdigest()}
        if name.endswith(".csv"):
            text = data.decode()
            entry["stable_sha256"] = stable_hash(text)
            header = text.split("\n", 1)[0].split(",")
            entry["nondeterministic_columns"] = [c for c in header if c in TIMING_COLUMNS]
        files.append(entry)
    manifest = {"config_hash": config_hash, "seed": seed, "version": version_string(),
                "files": files, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v
