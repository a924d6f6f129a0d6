"""Next-byte language-model training loop with per-phase wall-clock accounting."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .blocks import TransformerParams, transformer_node
from .datasets import token_windows
from .records import TrajectoryRecord
from .tensor import Rng


class SimulatedOOM(MemoryError):
    def __init__(self, peak: int, budget: int, batch: int):
        super().__init__(f"peak {peak} elements exceeds budget {budget} at batch {batch}")
        self.peak, self.budget, self.batch = peak, budget, batch


@dataclass
class LMTrainConfig:
    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    schedule: str = "cosine"
    checkpoint_interval: int | None = None
    element_budget: int | None = None
    eval_every: int = 0
    eval_batch: int = 8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def lm_loss_node(tape, model, windows, checkpoint_interval=None, stop_branch=False):
    x, y = windows[:, :-1], windows[:, 1:]
    z = transformer_node(tape, model, x, checkpoint_interval=checkpoint_interval,
                         stop_branch=stop_branch)
    return ag.cross_entropy(z, y.reshape(-1))


def mean_cross_entropy(model: TransformerParams, tokens: np.ndarray, seq_len: int | None = None) -> float:
    """Teacher-forced mean next-byte cross-entropy over ``tokens`` in nats."""
    seq_len = seq_len or model.n_max
    total, count = 0.0, 0
    # windows of seq_len + 1 overlapping by one token, so every byte after the first is scored once
    for i in range(0, max(len(tokens) - 1, 0), seq_len):
        w = tokens[i:i + seq_len + 1]
        if len(w) < 2:
            break
        t = ag.Tape("inference")
        loss = lm_loss_node(t, model, w[None, :])
        n = len(w) - 1
        total += float(loss.value) * n
        count += n
    if count == 0:
        raise ValueError("need at least two tokens")
    return total / count


def train_lm(model: TransformerParams, tokens: np.ndarray, cfg: LMTrainConfig,
             eval_tokens: np.ndarray | None = None, config_id: str = "lm",
             stop_branch: bool = False) -> TrajectoryRecord:
    """AdamW on next-byte cross-entropy over every parameter with ``requires_grad``.

    Each step logs the training loss, tokens seen, and separate forward,
    backward and optimizer spans. With ``element_budget`` set, a step whose
    peak saved-activation count exceeds the budget raises :class:`SimulatedOOM`.
    """
    params = [p for p in model.params() if p.requires_grad]
    opt = ag.FlatAdamW(params, weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed, "lm_batches")
    eval_w = None
    if eval_tokens is not None and cfg.eval_every:
        eval_w = token_windows(eval_tokens, cfg.eval_batch, cfg.seq_len, Rng(cfg.seed, "lm_eval"))
    rec = TrajectoryRecord(config_id, meta={"batch_size": cfg.batch_size, "lr": cfg.lr,
                                            "trainable": int(sum(p.size for p in params))})
    mon = ag.DivergenceMonitor()
    wall = 0.0
    tokens_seen = 0
    for step in range(cfg.steps):
        w = token_windows(tokens, cfg.batch_size, cfg.seq_len, rng)
        lr = (cfg.lr if cfg.schedule == "constant"
              else ag.cosine_warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac))
        tape = ag.Tape("train_full")
        t0 = time.perf_counter()
        loss = lm_loss_node(tape, model, w, cfg.checkpoint_interval, stop_branch)
        t1 = time.perf_counter()
        grads = tape.backward(loss)
        t2 = time.perf_counter()
        if cfg.element_budget is not None and tape.peak_elements > cfg.element_budget:
            raise SimulatedOOM(tape.peak_elements, cfg.element_budget, cfg.batch_size)
        gnorm = grads.global_norm()
        if cfg.clip_norm:
            ag.clip_grad_norm(grads, cfg.clip_norm)
        if math.isfinite(gnorm):
            opt.step(grads, lr)
        t3 = time.perf_counter()
        wall += t3 - t0
        tokens_seen += w.shape[0] * (w.shape[1] - 1)
        lv = float(loss.value)
        vals = dict(loss=lv, tokens=tokens_seen, wallclock_s=wall, forward_s=t1 - t0,
                    backward_s=t2 - t1, optimizer_s=t3 - t2, peak_elements=tape.peak_elements,
                    grad_norm=gnorm, lr=lr)
        if eval_w is not None and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
            et = ag.Tape("inference")
            vals["eval_loss"] = float(lm_loss_node(et, model, eval_w).value)
        rec.log(step, **vals)
        if mon.update(lv) or tape.diverged:
            rec.diverged = True
            break
    return rec


def train_with_oom_fallback(model, tokens, cfg: LMTrainConfig, **kw) -> TrajectoryRecord:
    """Retry at half batch whenever the simulated element budget is exceeded."""
    from dataclasses import replace
    snapshot = [np.array(p.value, copy=True) for p in model.params()]
    attempts = []
    while True:
        try:
            rec = train_lm(model, tokens, cfg, **kw)
            rec.meta["oom_retries"] = attempts
            rec.meta["must_resort"] = bool(attempts)
            return rec
        except SimulatedOOM as e:
            attempts.append({"batch": e.batch, "peak": e.peak, "budget": e.budget})
            for p, v in zip(model.params(), snapshot):
                p.value = np.array(v, copy=True)
            if cfg.batch_size <= 1:
                raise
            cfg = replace(cfg, batch_size=cfg.batch_size // 2)

