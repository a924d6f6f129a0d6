"""What an informed attacker can do to a published model: undo weight symmetries,
search for ill-conditioned solutions by penalized gradient descent, fine-tune
with or without the low-rank nets, and distill the locked blocks back into
SwiGLU form.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .blocks import (DlrNetParams, TransformerParams, dlrnet_node, ffn_block_node, head_node,
                     init_swiglu, layers_node, lora_attach, transformer_node)
from .datasets import ArrayDataset, token_windows
from .lockpipe import DistillConfig, collect_all_states, evaluate_perplexity
from .parallel import run_cells
from .records import TrajectoryRecord
from .tensor import PreconditionError, Rng, svd_small
from .training import LMTrainConfig, lm_loss_node, train_lm, train_with_oom_fallback


# --------------------------------------------------------------------------
# weight symmetries
# --------------------------------------------------------------------------

def scale_reparam(W1, W2, a: float):
    """``(W1 / a, a W2)``: unchanged function through any positively homogeneous activation."""
    if not a > 0:
        raise ValueError("scale must be positive")
    return np.asarray(W1) / a, np.asarray(W2) * a


def insert_invertible(W1, W2, A):
    """``(W2 A^-1, A W1)``; the product ``W2 W1`` is preserved."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    s = svd_small(A)[1]
    if not s[-1] > 1e-10 * s[0]:
        raise PreconditionError(f"A is numerically singular (condition {s[0] / max(s[-1], 1e-300):.3g})")
    W2A = np.linalg.solve(A.T, np.asarray(W2, dtype=np.float64).T).T
    return W2A, A @ np.asarray(W1, dtype=np.float64)


def svd_rebalance(W2, W1):
    """Canonical split ``(U S^1/2, S^1/2 V^T)`` of the product ``W2 W1``.

    Signs follow the SVD convention (largest-magnitude entry of each left
    singular vector positive); the inner dimension is kept.
    """
    W2 = np.asarray(W2, dtype=np.float64)
    W1 = np.asarray(W1, dtype=np.float64)
    U, S, Vt = svd_small(W2 @ W1)
    k = min(W2.shape[1], S.size)
    r = np.sqrt(S[:k])
    return U[:, :k] * r, r[:, None] * Vt[:k]


def random_invertible(n: int, rng: Rng, max_condition: float = 1e6) -> np.ndarray:
    """Random orthogonal factors around log-uniform singular values in [1, max_condition]."""
    Q1, _ = np.linalg.qr(rng.normal((n, n)))
    Q2, _ = np.linalg.qr(rng.normal((n, n)))
    kappa = math.exp(rng.uniform((), 0.0, math.log(max_condition)))
    s = np.exp(np.linspace(0.0, -math.log(kappa), n))
    return (Q1 * s) @ Q2.T


# --------------------------------------------------------------------------
# two-layer ReLU classifier used by the penalty sweep
# --------------------------------------------------------------------------

MLP_KEYS = ("W1", "b1", "W2", "b2")


def init_mlp(n_in: int = 784, hidden: int = 128, n_out: int = 10, seed: int = 0) -> dict:
    r = Rng(seed, "mlp")
    return {"W1": r.normal((hidden, n_in), 0.0, math.sqrt(2.0 / n_in)), "b1": np.zeros(hidden),
            "W2": r.normal((n_out, hidden), 0.0, math.sqrt(1.0 / hidden)), "b2": np.zeros(n_out)}


def mlp_logits(theta: dict, x) -> np.ndarray:
    h = np.maximum(x @ theta["W1"].T + theta["b1"], 0.0)
    return h @ theta["W2"].T + theta["b2"]


def mlp_node(tape, nodes: dict, x):
    xin = tape.constant(x)
    h = ag.relu(ag.linear(xin, nodes["W1"], nodes["b1"]))
    return h, ag.linear(h, nodes["W2"], nodes["b2"])


def train_mlp(data: ArrayDataset, hidden: int = 128, steps: int = 400, lr: float = 1e-3,
              batch: int = 128, seed: int = 0) -> tuple[dict, float]:
    """Adam on cross-entropy; returns the weights and test accuracy."""
    theta = init_mlp(data.x_train.shape[1], hidden, data.n_classes, seed)
    params = [ag.Param(k, theta[k]) for k in MLP_KEYS]
    opt = ag.FlatAdamW(params)
    rng = Rng(seed, "mlp_batches")
    for step in range(steps):
        idx = rng.integers(len(data.y_train), (batch,))
        tape = ag.Tape("train_full")
        nodes = {p.name: tape.param(p) for p in params}
        _, z = mlp_node(tape, nodes, data.x_train[idx])
        loss = ag.cross_entropy(z, data.y_train[idx])
        opt.step(tape.backward(loss), lr)
    theta = {p.name: np.array(p.value, copy=True) for p in params}
    acc = float(np.mean(np.argmax(mlp_logits(theta, data.x_test), axis=1) == data.y_test))
    return theta, acc


def scale_mlp(theta: dict, a: float) -> dict:
    """Scaling symmetry through the ReLU: first layer (and its bias) by 1/a, second layer by a."""
    W1, W2 = scale_reparam(theta["W1"], theta["W2"], a)
    return {"W1": W1, "b1": theta["b1"] / a, "W2": W2, "b2": theta["b2"].copy()}


# --------------------------------------------------------------------------
# penalty sweep
# --------------------------------------------------------------------------

OMEGA_KINDS = ("delta_norm_sq", "hessian_trace")
SCOPES = ("all", "first_layer", "random_10pct", "random_50pct")


@dataclass
class PenaltySweepConfig:
    lambdas: list = field(default_factory=lambda: [float(v) for v in np.logspace(-6, 2, 29)])
    lrs: list = field(default_factory=lambda: [1e-3, 1e-2, 1e-1])
    steps: int = 200
    omega_kind: str = "delta_norm_sq"
    scope: str = "all"
    clip_norm: float = 1.0
    seeds: list = field(default_factory=lambda: [0])
    n_samples: int = 128
    init_perturb: float = 1e-4
    estimator: str = "hutchinson"
    probes: int = 4
    symmetry_scales: list = field(default_factory=lambda: [2.0, 5.0, 10.0, 100.0])
    log_every: int = 1

    def validate(self) -> "PenaltySweepConfig":
        if any(not lam > 0 for lam in self.lambdas):
            raise ValueError("lambda values must be positive")
        if self.omega_kind not in OMEGA_KINDS:
            raise ValueError(f"unknown omega kind {self.omega_kind!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.estimator not in ("exact", "hutchinson"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        return self

    def cells(self):
        k = 0
        for lam in self.lambdas:
            for lr in self.lrs:
                for s in self.seeds:
                    yield k, float(lam), float(lr), int(s)
                    k += 1


def scope_masks(theta: dict, scope: str, seed: int = 0) -> dict:
    """Per-entry 0/1 masks selecting the parameters a penalty looks at."""
    if scope == "all":
        return {k: np.ones_like(v) for k, v in theta.items()}
    if scope == "first_layer":
        return {k: (np.ones_like(v) if k in ("W1", "b1") else np.zeros_like(v)) for k, v in theta.items()}
    frac = {"random_10pct": 0.1, "random_50pct": 0.5}.get(scope)
    if frac is None:
        raise ValueError(f"unknown scope {scope!r}")
    r = Rng(seed, "scope_mask", scope)
    return {k: (r.spawn(k).uniform(v.shape) < frac).astype(np.float64) for k, v in theta.items()}


class PenaltyProblem:
    """Objective pieces for one (data batch, base weights, scope)."""

    def __init__(self, theta0: dict, x: np.ndarray, masks: dict):
        self.theta0 = {k: np.array(v, copy=True) for k, v in theta0.items()}
        self.x = x
        self.masks = masks
        self.f0 = mlp_logits(theta0, x)
        self.f0_sq = np.sum(self.f0 * self.f0, axis=1)
        self.x2 = x * x
        # per-sample input energy seen by each hidden unit through the W1 mask
        self.s_w1 = self.x2 @ masks["W1"].T
        self.theta0_sq = sum(float(np.sum(masks[k] * self.theta0[k] ** 2)) for k in MLP_KEYS)
        self.tr0 = self.trace_values(self.theta0)

    # -- plain numpy evaluation ---------------------------------------------
    def rel_errors(self, theta) -> np.ndarray:
        f = mlp_logits(theta, self.x)
        return np.sum((f - self.f0) ** 2, axis=1) / self.f0_sq

    def trace_values(self, theta) -> np.ndarray:
        """Per-sample trace of the cross-entropy Hessian restricted to the mask."""
        pre = self.x @ theta["W1"].T + theta["b1"]
        m = (pre > 0).astype(np.float64)
        h = pre * m
        z = h @ theta["W2"].T + theta["b2"]
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        pp = p - p * p
        W2 = theta["W2"]
        q = p @ (W2 * W2) - (p @ W2) ** 2
        t = np.sum(pp * ((h * h) @ self.masks["W2"].T), axis=1)
        t += pp @ self.masks["b2"]
        t += np.sum(q * m * self.s_w1, axis=1)
        t += (q * m) @ self.masks["b1"]
        return t

    def omega_plot(self, theta, kind: str) -> float:
        if kind == "delta_norm_sq":
            dsq = sum(float(np.sum(self.masks[k] * (theta[k] - self.theta0[k]) ** 2)) for k in MLP_KEYS)
            return math.sqrt(dsq / self.theta0_sq)
        ratio = self.trace_values(theta) / self.tr0
        return float(np.exp(np.mean(np.log(np.maximum(ratio, 1e-300)))))

    def batch_trace_ratio(self, theta) -> float:
        return float(np.sum(self.trace_values(theta)) / np.sum(self.tr0))

    def metrics(self, theta, kind: str) -> dict:
        """Plot coordinates of one point, evaluating the trace only once."""
        errs = self.rel_errors(theta)
        out = {"rel_error_geomean": float(np.exp(np.mean(np.log(np.maximum(errs, 1e-300)))))}
        if kind == "delta_norm_sq":
            out["omega_rel"] = self.omega_plot(theta, kind)
        else:
            tr = self.trace_values(theta)
            ratio = tr / self.tr0
            out["omega_rel"] = float(np.exp(np.mean(np.log(np.maximum(ratio, 1e-300)))))
            out["batch_trace_ratio"] = float(np.sum(tr) / np.sum(self.tr0))
        return out

    # -- differentiable objective ---------------------------------------------
    def objective(self, tape, nodes: dict, lam: float, kind: str, estimator: str = "exact",
                  probes: int = 4, rng: Rng | None = None):
        xin = tape.constant(self.x)
        pre = ag.linear(xin, nodes["W1"], nodes["b1"])
        h = ag.relu(pre)
        z = ag.linear(h, nodes["W2"], nodes["b2"])
        diff = ag.sub(z, tape.constant(self.f0))
        rel = ag.mul(ag.total(ag.square(diff), axis=1), tape.constant(1.0 / self.f0_sq))
        mse = ag.mean(rel)
        if kind == "delta_norm_sq":
            parts = []
            for k in MLP_KEYS:
                dk = ag.sub(nodes[k], tape.constant(self.theta0[k]))
                parts.append(ag.total(ag.mul(ag.square(dk), tape.constant(self.masks[k]))))
            om = parts[0]
            for q in parts[1:]:
                om = ag.add(om, q)
            omega = ag.scale(om, 1.0 / self.theta0_sq)
        elif estimator == "exact":
            omega = ag.mean(ag.mul(self._trace_node(tape, nodes, pre, h, z), tape.constant(1.0 / self.tr0)))
        else:
            omega = ag.mean(ag.mul(self._hutchinson_node(tape, nodes, pre, h, z, probes, rng),
                                   tape.constant(1.0 / self.tr0)))
        return ag.sub(mse, ag.scale(omega, lam)), mse, omega

    def _trace_node(self, tape, nodes, pre, h, z):
        m = (pre.value > 0).astype(np.float64)
        p = ag.softmax(z)
        pp = ag.sub(p, ag.square(p))
        W2 = nodes["W2"]
        q = ag.sub(ag.matmul(p, ag.square(W2)), ag.square(ag.matmul(p, W2)))
        t_w2 = ag.total(ag.mul(pp, ag.matmul(ag.square(h), tape.constant(self.masks["W2"].T))), axis=1)
        t_b2 = ag.total(ag.mul(pp, tape.constant(self.masks["b2"][None, :])), axis=1)
        t_w1 = ag.total(ag.mul(q, tape.constant(m * self.s_w1)), axis=1)
        t_b1 = ag.total(ag.mul(q, tape.constant(m * self.masks["b1"][None, :])), axis=1)
        return ag.add(ag.add(t_w2, t_b2), ag.add(t_w1, t_b1))

    def _hutchinson_node(self, tape, nodes, pre, h, z, probes, rng):
        """Mean over Rademacher probes of ``v^T G v`` with the Gauss-Newton matrix ``G``,
        which equals the cross-entropy Hessian of a ReLU network almost everywhere."""
        m = (pre.value > 0).astype(np.float64)
        p = ag.softmax(z)
        acc = None
        for _ in range(probes):
            v = {k: rng.rademacher(self.masks[k].shape) * self.masks[k] for k in MLP_KEYS}
            dh = m * (self.x @ v["W1"].T + v["b1"])
            dz = ag.add(ag.linear(h, tape.constant(v["W2"])),
                        ag.linear(tape.constant(dh), nodes["W2"]))
            dz = ag.add(dz, tape.constant(v["b2"][None, :]))
            quad = ag.sub(ag.total(ag.mul(p, ag.square(dz)), axis=1),
                          ag.square(ag.total(ag.mul(p, dz), axis=1)))
            acc = quad if acc is None else ag.add(acc, quad)
        return ag.scale(acc, 1.0 / probes)


def _as_theta(params) -> dict:
    return {p.name: p.value for p in params}


def penalty_trajectory(problem: PenaltyProblem, cfg: PenaltySweepConfig, cell_id: int, lam: float,
                       lr: float, seed: int) -> TrajectoryRecord:
    """SGD with norm clipping on ``rel_mse - lambda * Omega`` from a tiny perturbation of the base weights."""
    r = Rng(seed, "penalty_cell", cfg.omega_kind, cfg.scope, cell_id)
    params = []
    for k in MLP_KEYS:
        base = problem.theta0[k]
        scale_ = cfg.init_perturb * (float(np.sqrt(np.mean(base * base))) or 1.0)
        params.append(ag.Param(k, base + r.spawn("init", k).normal(base.shape, 0.0, scale_)))
    probe_rng = r.spawn("probes")
    cid = f"{cfg.omega_kind}.{cfg.scope}.{cell_id:04d}"
    rec = TrajectoryRecord(cid, meta={"lambda": lam, "lr": lr, "seed": seed,
                                      "omega_kind": cfg.omega_kind, "scope": cfg.scope})
    t0 = time.perf_counter()

    def log(step, gnorm):
        vals = problem.metrics(_as_theta(params), cfg.omega_kind)
        vals.update(grad_norm=gnorm, wallclock_s=time.perf_counter() - t0)
        rec.log(step, **vals)
        return all(math.isfinite(v) for v in vals.values())

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        gnorm = 0.0
        for step in range(cfg.steps):
            if step % cfg.log_every == 0 and not log(step, gnorm):
                rec.diverged = True
                break
            tape = ag.Tape("train_full")
            nodes = {p.name: tape.param(p) for p in params}
            obj, _, _ = problem.objective(tape, nodes, lam, cfg.omega_kind, cfg.estimator,
                                          cfg.probes, probe_rng)
            grads = tape.backward(obj)
            gnorm = grads.global_norm()
            if not math.isfinite(gnorm) or not math.isfinite(float(obj.value)):
                rec.diverged = True
                break
            ag.clip_grad_norm(grads, cfg.clip_norm)
            for p in params:
                p.value = p.value - lr * grads[p.name]
        else:
            if not log(cfg.steps, gnorm):
                rec.diverged = True
    return rec


def symmetry_points(problem: PenaltyProblem, kind: str, scales) -> list[dict]:
    out = []
    for a in scales:
        th = scale_mlp(problem.theta0, a)
        errs = problem.rel_errors(th)
        ge = float(np.exp(np.mean(np.log(np.maximum(errs, 1e-300)))))
        pt = {"a": float(a), "rel_error_geomean": ge, "omega_rel": problem.omega_plot(th, kind)}
        if kind == "hessian_trace":
            pt["batch_trace_ratio"] = problem.batch_trace_ratio(th)
        out.append(pt)
    return out


@dataclass
class SweepResult:
    config: PenaltySweepConfig
    trajectories: list
    symmetry: list
    base_accuracy: float | None = None

    def manifest(self) -> dict:
        return {"config": asdict(self.config), "base_accuracy": self.base_accuracy,
                "symmetry_points": self.symmetry,
                "cells": [{"config_id": t.config_id, **t.meta, "diverged": t.diverged}
                          for t in self.trajectories]}

    def endpoints(self) -> list[dict]:
        return [{"config_id": t.config_id, **t.endpoint, "diverged": t.diverged, **t.meta}
                for t in self.trajectories]


def _penalty_cell(args):
    problem, cfg, cell = args
    return penalty_trajectory(problem, cfg, *cell)


def penalty_lock_sweep(base_model: dict, data: ArrayDataset, cfg: PenaltySweepConfig,
                       jobs: int | None = 1, base_accuracy: float | None = None) -> SweepResult:
    """Penalized gradient descent from the base weights over every (lambda, lr, seed) cell."""
    cfg.validate()
    idx = Rng(0, "penalty_samples").permutation(len(data.y_train))[:cfg.n_samples]
    masks = scope_masks(base_model, cfg.scope, cfg.seeds[0] if cfg.seeds else 0)
    problem = PenaltyProblem(base_model, data.x_train[idx], masks)
    trajs = run_cells(_penalty_cell, [(problem, cfg, c) for c in cfg.cells()], jobs)
    return SweepResult(cfg, trajs, symmetry_points(problem, cfg.omega_kind, cfg.symmetry_scales),
                       base_accuracy)


def sweep_region_check(result: SweepResult, ref_scale: float = 10.0, err_max: float = 0.01) -> dict:
    """Compare trajectory endpoints to the scaling-symmetry reference point."""
    ref = next(p for p in result.symmetry if p["a"] == ref_scale)
    ends = [t.endpoint for t in result.trajectories if len(t)]
    low_err = [e["omega_rel"] for e in ends
               if math.isfinite(e.get("rel_error_geomean", math.nan)) and e["rel_error_geomean"] <= err_max]
    best = max(low_err) if low_err else 0.0
    in_corner = [e for e in ends if e.get("rel_error_geomean", math.inf) <= err_max
                 and e.get("omega_rel", 0.0) >= 0.5 * ref["omega_rel"]]
    return {"ref_error": ref["rel_error_geomean"], "ref_omega": ref["omega_rel"],
            "best_low_error_omega": best, "n_low_error": len(low_err),
            "ref_error_ok": ref["rel_error_geomean"] <= 1e-8,
            "ref_dominates": ref["omega_rel"] >= 2.0 * best,
            "corner_empty": not in_corner, "n_in_corner": len(in_corner)}


# --------------------------------------------------------------------------
# fine-tuning attacks on the transformer
# --------------------------------------------------------------------------

def finetune_attack(model: TransformerParams, tokens, lr: float, steps: int,
                    checkpoint_interval: int | None = None, batch_size: int = 8, seq_len: int = 64,
                    seed: int = 0, element_budget: int | None = None, eval_tokens=None,
                    eval_every: int = 5, inplace: bool = False) -> TrajectoryRecord:
    """Full-parameter AdamW at a constant learning rate with per-phase timings."""
    m = model if inplace else model.copy()
    for p in m.params():
        p.requires_grad = True
    cfg = LMTrainConfig(steps=steps, lr=lr, batch_size=batch_size, seq_len=seq_len, seed=seed,
                        schedule="constant", checkpoint_interval=checkpoint_interval,
                        element_budget=element_budget, eval_every=eval_every if eval_tokens is not None else 0)
    rec = train_with_oom_fallback(m, tokens, cfg, eval_tokens=eval_tokens,
                                  config_id=f"finetune_lr{lr:g}")
    rec.meta.update(checkpoint_interval=checkpoint_interval, batch_size_final=rec.meta.get("batch_size"))
    return rec


def partial_update_attack(model: TransformerParams, tokens, mode: str, lr: float, steps: int,
                          batch_size: int = 8, seq_len: int = 64, seed: int = 0) -> TrajectoryRecord:
    """Train around the locked nets: ``freeze_dlr`` drops their weights from the update,
    ``stop_grad_dlr`` also cuts gradient flow through their branches."""
    if mode not in ("freeze_dlr", "stop_grad_dlr"):
        raise ValueError(f"unknown mode {mode!r}")
    m = model.copy()
    if not m.dlr_params():
        raise PreconditionError("model has no DLR nets")
    dlr_names = {p.name for p in m.dlr_params()}
    for p in m.params():
        p.requires_grad = p.name not in dlr_names
    # gradient bias of severing the branches, measured before any update
    w = token_windows(tokens, batch_size, seq_len, Rng(seed, "bias_probe"))
    g_full = _upstream_grads(m, w, stop_branch=False)
    g_stop = _upstream_grads(m, w, stop_branch=True)
    names = sorted(g_full)
    vf = np.concatenate([g_full[k].ravel() for k in names])
    vs = np.concatenate([g_stop.get(k, np.zeros_like(g_full[k])).ravel() for k in names])
    bias = float(np.linalg.norm(vf - vs) / np.linalg.norm(vf))
    mem = dlr_layer_memory(m, w[:1])
    cfg = LMTrainConfig(steps=steps, lr=lr, batch_size=batch_size, seq_len=seq_len, seed=seed,
                        schedule="constant")
    rec = train_lm(m, tokens, cfg, config_id=f"partial_{mode}_lr{lr:g}",
                   stop_branch=(mode == "stop_grad_dlr"))
    rec.meta.update(mode=mode, bias_ratio=bias, dlr_layer_elements=mem)
    return rec


def _upstream_grads(model, windows, stop_branch: bool):
    tape = ag.Tape("train_full")
    loss = lm_loss_node(tape, model, windows, stop_branch=stop_branch)
    return dict(tape.backward(loss))


def dlr_layer_memory(model: TransformerParams, windows) -> dict:
    """Saved elements per token for every FFN scope (each DLR layer, or a whole SwiGLU
    block) under the model's current trainable set."""
    tape = ag.Tape("train_full")
    lm_loss_node(tape, model, windows)
    n_tok = windows.shape[0] * (windows.shape[1] - 1)
    out = {k: v / n_tok for k, v in tape.scope_total.items()
           if k.startswith("layer") and (k.endswith(".ffn") or ".ffn." in k)}
    tape.release_all()
    return out


def block_input_output_grads(model: TransformerParams, windows, layer: int, stop_branch: bool):
    """Gradients of the loss w.r.t. the input and output of one FFN block."""
    ids = windows[:, :-1]
    tgt = windows[:, 1:].reshape(-1)
    cap = {}
    t0 = ag.Tape("inference")
    transformer_node(t0, model, ids, capture=cap)
    z = cap[layer]
    tape = ag.Tape("train_full")
    zin = tape.input(z, requires_grad=True)
    out = ffn_block_node(tape, zin, model.layers[layer].ffn, stop_branch=stop_branch)
    # continue the forward from the block output to the loss
    yout = tape.input(out.value, requires_grad=True)
    rest = head_node(tape, model, layers_node(tape, model, yout, ids.shape[0], start=layer + 1))
    loss = ag.cross_entropy(rest, tgt)
    ig: dict = {}
    tape.backward(loss, input_grads=ig)
    g_out = ig[yout.id]
    tape2 = ag.Tape("train_full")
    zin2 = tape2.input(z, requires_grad=True)
    out2 = ffn_block_node(tape2, zin2, model.layers[layer].ffn, stop_branch=stop_branch)
    ig2: dict = {}
    tape2.backward(out2, seed=g_out, input_grads=ig2)
    return ig2[zin2.id], g_out


def lora_attack(model: TransformerParams, tokens, targets, rank_l: int, lr: float, steps: int,
                batch_size: int = 8, seq_len: int = 64, seed: int = 0) -> TrajectoryRecord:
    """Adapter fine-tuning on named weights with the rest of the model frozen."""
    m = model.copy()
    lora_attach(m, targets, rank_l, Rng(seed, "lora"))
    w = token_windows(tokens, 1, seq_len, Rng(seed, "lora_mem"))
    mem = dlr_layer_memory(m, w)
    rec = train_lm(m, tokens, LMTrainConfig(steps=steps, lr=lr, batch_size=batch_size,
                                            seq_len=seq_len, seed=seed, schedule="constant"),
                   config_id=f"lora_r{rank_l}_lr{lr:g}")
    rec.meta.update(dlr_layer_elements=mem, targets=list(targets), rank=rank_l)
    return rec


# --------------------------------------------------------------------------
# reverse distillation
# --------------------------------------------------------------------------

def reverse_distill(locked: TransformerParams, tokens, d_ff: int, cfg: DistillConfig,
                    eval_tokens=None, collect_tokens: int | None = None):
    """Distill each DLR block back into a SwiGLU block of width ``d_ff``.

    Returns the unlocked model and a cost report (wall-clock, steps, per-layer
    fit quality). The procedure mirrors the first locking phase with teacher
    and student swapped, so its cost is at least one such phase per layer.
    """
    if not locked.dlr_params():
        raise PreconditionError("model has no DLR nets")
    caches = collect_all_states(locked, tokens, cfg.seq_len, collect_tokens, cfg.seed)
    model = locked.copy()
    report = {"layers": [], "total_wallclock_s": 0.0, "total_steps": 0}
    for l, layer in enumerate(locked.layers):
        if layer.ffn.kind != "dlr":
            continue
        student, rec = _fit_swiglu(layer.ffn, caches[l].states, d_ff, replace(cfg, layer=l), l)
        if rec.diverged:
            report["layers"].append({"layer": l, "diverged": True})
            continue
        model.layers[l].ffn = student
        wall = float(rec.get("wallclock_s")[-1])
        report["layers"].append({"layer": l, "rel_mse_initial": rec.meta["eval_initial"],
                                 "rel_mse_final": rec.meta["eval_final"], "wallclock_s": wall,
                                 "steps": len(rec), "diverged": False})
        report["total_wallclock_s"] += wall
        report["total_steps"] += len(rec)
    if eval_tokens is not None:
        report["perplexity_locked"] = evaluate_perplexity(locked, eval_tokens)
        report["perplexity_reversed"] = evaluate_perplexity(model, eval_tokens)
    return model, report


def _fit_swiglu(teacher: DlrNetParams, states, d_ff: int, cfg: DistillConfig, layer: int):
    d = teacher.d
    student = init_swiglu(d, d_ff, Rng(cfg.seed, "reverse_init", layer), f"layer{layer}.ffn")
    # start the student at zero output so step 0 is the identity, as in the forward direction
    student.w_down.value[:] = 0.0
    rng = Rng(cfg.seed, "reverse_batches", layer)
    n = states.shape[0]
    ev = Rng(cfg.seed, "reverse_eval", layer).permutation(n)[:min(cfg.eval_rows, n)]
    z_eval = states[ev]

    def target(z):
        t = ag.Tape("inference")
        return dlrnet_node(t, t.input(z), teacher).value

    f_eval = target(z_eval)

    def eval_loss():
        t = ag.Tape("inference")
        return float(ag.relative_mse(ffn_block_node(t, t.input(z_eval), student), f_eval).value)

    opt = ag.FlatAdamW(student.params(), weight_decay=cfg.weight_decay)
    rec = TrajectoryRecord(f"reverse.layer{layer}", meta={"eval_initial": eval_loss()})
    mon = ag.DivergenceMonitor()
    wall = 0.0
    for step in range(cfg.steps):
        z = states[rng.integers(n, (cfg.batch_size,))]
        t0 = time.perf_counter()
        f = target(z)
        tape = ag.Tape("train_full")
        loss = ag.relative_mse(ffn_block_node(tape, tape.input(z), student), f)
        grads = tape.backward(loss)
        gnorm = grads.global_norm()
        ag.clip_grad_norm(grads, cfg.clip_norm)
        if math.isfinite(gnorm):
            opt.step(grads, ag.cosine_warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac))
        wall += time.perf_counter() - t0
        lv = float(loss.value)
        rec.log(step, loss=lv, grad_norm=gnorm, wallclock_s=wall)
        if mon.update(lv):
            rec.diverged = True
            break
    rec.meta["eval_final"] = eval_loss()
    return student, rec


def sweep_manifest_json(result: SweepResult) -> str:
    return json.dumps(result.manifest(), indent=1, sort_keys=True, default=float)
