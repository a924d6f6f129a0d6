"""Two-phase distillation that swaps every SwiGLU block of a teacher for a deep
low-rank residual net of the same parameter budget.

Phase 1 trains each replacement on its own, matching the teacher's residual
sub-block ``z + FFN(RMSNorm(z))`` on collected hidden states under a relative
MSE. Phase 2 freezes everything except the low-rank nets and matches the
teacher's next-byte distribution with a top-k KL.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .blocks import (SwigluParams, TransformerParams, depth_for_budget, ffn_block,
                     dlrnet_node, init_dlrnet, init_transformer, model_to_bytes, swiglu_budget,
                     transformer_node)
from .datasets import ByteCorpus, sequential_windows, token_windows
from .parallel import run_cells
from .records import TrajectoryRecord
from .tensor import PreconditionError, Rng, read_matrix, write_matrix
from .training import LMTrainConfig, mean_cross_entropy, train_lm


class DistillationError(RuntimeError):
    def __init__(self, layer, msg: str):
        super().__init__(f"layer {layer}: {msg}")
        self.layer = layer


@dataclass
class DistillConfig:
    phase: str = "modulewise"
    steps: int = 5000
    lr: float = 3e-3
    batch_size: int = 32
    seq_len: int = 128
    top_k: int = 64
    layer: int = 0
    seed: int = 0
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    eval_rows: int = 512

    def validate(self, vocab: int | None = None) -> "DistillConfig":
        if self.phase not in ("modulewise", "logits"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.top_k < 1 or (vocab is not None and self.top_k > vocab):
            raise ValueError("top_k must lie in [1, vocab]")
        return self


def phase1_defaults(**kw) -> DistillConfig:
    return DistillConfig(**{"phase": "modulewise", "steps": 5000, "lr": 3e-3, "batch_size": 32, **kw})


def phase2_defaults(**kw) -> DistillConfig:
    return DistillConfig(**{"phase": "logits", "steps": 2000, "lr": 1e-3, "top_k": 64,
                            "batch_size": 8, "seq_len": 64, **kw})


def model_hash(model: TransformerParams) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()[:16]


def tokens_hash(tokens: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype=np.int64).tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# hidden-state caches
# --------------------------------------------------------------------------

@dataclass
class HiddenStateCache:
    layer: int
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as f:
            write_matrix(f, self.states)
        side = path.with_name(path.name + ".json")
        side.write_text(json.dumps({"layer": self.layer, **self.meta}, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "HiddenStateCache":
        path = Path(path)
        with open(path, "rb") as f:
            states = read_matrix(f)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        return cls(int(meta.pop("layer")), states, meta)


def collect_all_states(teacher: TransformerParams, tokens: np.ndarray, seq_len: int = 128,
                       max_tokens: int | None = None, seed: int = 0) -> list[HiddenStateCache]:
    """Post-attention states ``z_l`` for every layer and every position of the token stream.

    Without ``max_tokens`` the stream is the corpus cut into consecutive
    windows; with it, ``max_tokens // seq_len`` windows are drawn at random.
    """
    tokens = np.asarray(tokens)
    if max_tokens is None:
        windows = sequential_windows(tokens, seq_len)
    else:
        n = max(1, max_tokens // seq_len)
        windows = list(token_windows(tokens, n, seq_len - 1, Rng(seed, "collect")))
    per_layer = [[] for _ in teacher.layers]
    for w in windows:
        cap = {}
        t = ag.Tape("inference")
        transformer_node(t, teacher, np.asarray(w)[None, :], capture=cap)
        for l in range(len(teacher.layers)):
            per_layer[l].append(cap[l])
    meta = {"teacher_hash": model_hash(teacher), "corpus_hash": tokens_hash(tokens),
            "seed": seed, "seq_len": seq_len}
    return [HiddenStateCache(l, np.concatenate(s, axis=0), dict(meta)) for l, s in enumerate(per_layer)]


def collect_states(teacher: TransformerParams, tokens, layer: int, seq_len: int = 128,
                   max_tokens: int | None = None, seed: int = 0) -> HiddenStateCache:
    if not 0 <= layer < len(teacher.layers):
        raise IndexError(f"layer {layer} out of range for {len(teacher.layers)} layers")
    if teacher.layers[layer].ffn.kind != "swiglu":
        raise PreconditionError(f"layer {layer} has no SwiGLU block")
    return collect_all_states(teacher, tokens, seq_len, max_tokens, seed)[layer]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def relative_mse(g_out, f_out) -> float:
    """Mean over rows of ``||g - f||^2 / ||f||^2``; zero-norm teacher rows are dropped with a warning."""
    g_out, f_out = np.atleast_2d(g_out), np.atleast_2d(f_out)
    if g_out.shape != f_out.shape:
        raise ValueError(f"shape mismatch {g_out.shape} vs {f_out.shape}")
    t = ag.Tape("inference")
    return float(ag.relative_mse(t.input(g_out), f_out).value)


def topk_kl(teacher_logits, student_logits, k: int) -> float:
    """Sum over the teacher's top-k tokens of ``p_t log(p_t / p_s)``, averaged over rows."""
    t = ag.Tape("inference")
    return float(ag.topk_kl(t.input(np.atleast_2d(student_logits)),
                            np.atleast_2d(teacher_logits), k).value)


# --------------------------------------------------------------------------
# phase 1
# --------------------------------------------------------------------------

def phase1_modulewise(teacher_block: SwigluParams, cache: HiddenStateCache, cfg: DistillConfig,
                      r: int, L: int | None = None, prefix: str | None = None):
    """Fit a fresh DLR net to ``z -> z + FFN(RMSNorm(z))`` over the cached states."""
    cfg.validate()
    d = teacher_block.d
    if cache.d != d:
        raise ValueError(f"cache dimension {cache.d} != block dimension {d}")
    L = L or depth_for_budget(swiglu_budget(d, teacher_block.d_ff), d, r)
    layer = cache.layer
    prefix = prefix or f"layer{layer}.ffn"
    student = init_dlrnet(d, r, L, Rng(cfg.seed, "phase1_init", layer), prefix)
    rng = Rng(cfg.seed, "phase1_batches", layer)
    z_all = cache.states
    n = z_all.shape[0]
    ev = Rng(cfg.seed, "phase1_eval", layer).permutation(n)[:min(cfg.eval_rows, n)]
    z_eval = z_all[ev]
    f_eval = ffn_block(z_eval, teacher_block)

    def eval_loss():
        t = ag.Tape("inference")
        out = dlrnet_node(t, t.input(z_eval), student)
        return float(ag.relative_mse(out, f_eval).value)

    opt = ag.FlatAdamW(student.params(), weight_decay=cfg.weight_decay)
    rec = TrajectoryRecord(f"phase1.layer{layer}", meta={"layer": layer, "r": r, "L": L})
    rec.meta["eval_initial"] = eval_loss()
    mon = ag.DivergenceMonitor()
    wall = 0.0
    for step in range(cfg.steps):
        idx = rng.integers(n, (cfg.batch_size,))
        z = z_all[idx]
        target = ffn_block(z, teacher_block)
        t0 = time.perf_counter()
        tape = ag.Tape("train_full")
        out = dlrnet_node(tape, tape.input(z), student)
        loss = ag.relative_mse(out, target)
        grads = tape.backward(loss)
        gnorm = grads.global_norm()
        ag.clip_grad_norm(grads, cfg.clip_norm)
        lr = ag.cosine_warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac)
        if math.isfinite(gnorm):
            opt.step(grads, lr)
        wall += time.perf_counter() - t0
        lv = float(loss.value)
        rec.log(step, loss=lv, grad_norm=gnorm, lr=lr, wallclock_s=wall)
        if mon.update(lv) or tape.diverged:
            rec.diverged = True
            break
    rec.meta["eval_final"] = eval_loss() if not rec.diverged else math.nan
    return student, rec


def _phase1_cell(args):
    block, cache, cfg, r, L = args
    return phase1_modulewise(block, cache, cfg, r, L)


# --------------------------------------------------------------------------
# phase 2
# --------------------------------------------------------------------------

def install_dlr(teacher: TransformerParams, students: dict) -> TransformerParams:
    """Copy of ``teacher`` with the FFN of each listed layer replaced."""
    model = teacher.copy()
    for l, s in students.items():
        model.layers[l].ffn = s
    return model


def heldout_topk_kl(student, teacher, windows, k: int) -> float:
    x = windows[:, :-1]
    t = ag.Tape("inference")
    zt = transformer_node(t, teacher, x).value
    zs = transformer_node(t, student, x).value
    return topk_kl(zt, zs, k)


def phase2_logits(student: TransformerParams, teacher: TransformerParams, tokens: np.ndarray,
                  cfg: DistillConfig, eval_tokens: np.ndarray | None = None):
    """Top-k KL distillation of the DLR parameters only; everything else stays bit-identical."""
    cfg.validate(student.vocab)
    dlr = student.dlr_params()
    if not dlr or any(layer.ffn.kind != "dlr" for layer in student.layers):
        raise PreconditionError("phase 2 expects a DLR net at every FFN position")
    flags = {p.name: p.requires_grad for p in student.params()}
    dlr_names = {p.name for p in dlr}
    for p in student.params():
        p.requires_grad = p.name in dlr_names
    try:
        opt = ag.FlatAdamW(dlr, weight_decay=cfg.weight_decay)
        rng = Rng(cfg.seed, "phase2_batches")
        src = tokens if eval_tokens is None else eval_tokens
        eval_w = token_windows(src, 8, min(cfg.seq_len, len(src) - 1), Rng(cfg.seed, "phase2_eval"))
        rec = TrajectoryRecord("phase2", meta={"top_k": cfg.top_k})
        rec.meta["heldout_kl_start"] = heldout_topk_kl(student, teacher, eval_w, cfg.top_k)
        mon = ag.DivergenceMonitor()
        wall = 0.0
        for step in range(cfg.steps):
            w = token_windows(tokens, cfg.batch_size, cfg.seq_len, rng)
            x = w[:, :-1]
            t0 = time.perf_counter()
            zt = transformer_node(ag.Tape("inference"), teacher, x).value
            tape = ag.Tape("train_full")
            loss = ag.topk_kl(transformer_node(tape, student, x), zt, cfg.top_k)
            grads = tape.backward(loss)
            frozen_norm = math.sqrt(sum(float(np.sum(g * g)) for k, g in grads.items()
                                        if k not in dlr_names))
            gnorm = grads.global_norm()
            ag.clip_grad_norm(grads, cfg.clip_norm)
            lr = ag.cosine_warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac)
            if math.isfinite(gnorm):
                opt.step(grads, lr)
            wall += time.perf_counter() - t0
            lv = float(loss.value)
            rec.log(step, loss=lv, grad_norm=gnorm, frozen_grad_norm=frozen_norm, lr=lr,
                    wallclock_s=wall)
            if mon.update(lv) or tape.diverged:
                rec.diverged = True
                break
        rec.meta["heldout_kl_end"] = heldout_topk_kl(student, teacher, eval_w, cfg.top_k)
    finally:
        for p in student.params():
            p.requires_grad = flags.get(p.name, True)
    return student, rec


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------

def evaluate_perplexity(model: TransformerParams, tokens, seq_len: int | None = None) -> float:
    """``exp`` of the teacher-forced mean next-byte cross-entropy."""
    if len(tokens) < 2:
        raise ValueError("corpus must hold at least two tokens")
    return float(math.exp(mean_cross_entropy(model, np.asarray(tokens), seq_len)))


@dataclass
class LockResult:
    model: TransformerParams
    phase1_model: TransformerParams
    report: list
    phase1: list
    phase2: TrajectoryRecord | None


def lock_model(teacher: TransformerParams, r: int, corpus: ByteCorpus, p1: DistillConfig,
               p2: DistillConfig | None, jobs: int | None = 1, cache_dir=None,
               collect_tokens: int | None = None) -> LockResult:
    """Replace every SwiGLU block, train the replacements independently, then jointly."""
    if any(layer.ffn.kind != "swiglu" for layer in teacher.layers):
        raise PreconditionError("teacher must use SwiGLU FFNs")
    caches = collect_all_states(teacher, corpus.train, p1.seq_len, collect_tokens, p1.seed)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        for c in caches:
            c.save(Path(cache_dir) / f"states_layer{c.layer}.dlrm")
    cells = []
    for l, layer in enumerate(teacher.layers):
        L = depth_for_budget(swiglu_budget(layer.ffn.d, layer.ffn.d_ff), layer.ffn.d, r)
        cells.append((layer.ffn, caches[l], p1, r, L))
    results = run_cells(_phase1_cell, cells, jobs)
    report = []
    students = {}
    for l, (student, rec) in enumerate(results):
        if rec.diverged:
            raise DistillationError(l, "phase 1 diverged")
        students[l] = student
        report += [("phase1", l, "rel_mse_initial", rec.meta["eval_initial"]),
                   ("phase1", l, "rel_mse_final", rec.meta["eval_final"]),
                   ("phase1", l, "depth", rec.meta["L"]),
                   ("phase1", l, "wallclock_s", rec.get("wallclock_s")[-1])]
    held = corpus.heldout
    ppl_t = evaluate_perplexity(teacher, held)
    report.append(("teacher", "all", "perplexity", ppl_t))
    p1_model = install_dlr(teacher, students)
    ppl_1 = evaluate_perplexity(p1_model, held)
    report.append(("phase1", "all", "perplexity", ppl_1))
    model = p1_model.copy()
    rec2 = None
    if p2 is not None:
        model, rec2 = phase2_logits(model, teacher, corpus.train, p2, held)
        if rec2.diverged:
            raise DistillationError("all", "phase 2 diverged")
        report += [("phase2", "all", "heldout_topk_kl_start", rec2.meta["heldout_kl_start"]),
                   ("phase2", "all", "heldout_topk_kl_end", rec2.meta["heldout_kl_end"]),
                   ("phase2", "all", "wallclock_s", rec2.get("wallclock_s")[-1])]
    ppl_l = evaluate_perplexity(model, held)
    report += [("locked", "all", "perplexity", ppl_l),
               ("locked", "all", "perplexity_ratio", ppl_l / ppl_t),
               ("locked", "all", "param_count", sum(p.size for p in model.params())),
               ("teacher", "all", "param_count", sum(p.size for p in teacher.params()))]
    return LockResult(model, p1_model, report, [rec for _, rec in results], rec2)


def quality_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "layer", "metric", "value"])
    for stage, layer, metric, value in rows:
        w.writerow([stage, layer, metric, repr(float(value))])
    return buf.getvalue()


def train_teacher(corpus: ByteCorpus, cfg: LMTrainConfig, arch: dict | None = None) -> tuple:
    """Pretrain the toy byte-level transformer that plays the role of the released model."""
    model = init_transformer(seed=cfg.seed, **(arch or {}))
    rec = train_lm(model, corpus.train, cfg, config_id="teacher")
    return model, rec
