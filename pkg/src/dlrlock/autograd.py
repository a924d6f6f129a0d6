"""Reverse-mode tape with activation-memory accounting.

Every op records the buffers its backward pass needs. The tape counts those
buffers in elements (``saved_elements``) and tracks the high-water mark
(``peak_elements``). Buffers are reference-counted by key so that a tensor kept
by two consumers is counted once, and they are released as backward consumes
them.

Save rules (frozen contract):

* ``rmsnorm`` saves its input.
* ``silu`` / ``relu`` save their pre-activation.
* ``linear`` saves its input only when the weight requires a gradient.
* ``add`` / ``sub`` save nothing.
* ``alpha_scale`` saves the scaled branch output when the scalar requires a gradient.
* ``swiglu`` saves gate pre-activation, up output and SiLU output (plus the
  normalized input when a weight is trained).

A DLR residual layer therefore saves ``3d + 2r`` elements per token when every
parameter is trained and ``d + r`` when all parameters are frozen.
"""
from __future__ import annotations

import contextlib
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import Rng

MODES = ("train_full", "train_frozen", "inference")


class ModeError(RuntimeError):
    pass


class DivergenceWarning(RuntimeWarning):
    pass


class Param:
    """A named trainable array. ``value`` may be rebound to a view of a flat buffer."""

    __slots__ = ("name", "value", "requires_grad")

    def __init__(self, name: str, value, requires_grad: bool = True):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("tape", "id", "value", "parents", "grad_fn", "requires_grad", "param", "saved", "name")

    def __init__(self, tape, value, parents=(), grad_fn=None, requires_grad=False, param=None):
        self.tape = tape
        self.id = tape._next_id()
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.param = param
        self.saved = ()
        self.name = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"


class GradStore(dict):
    """Gradients keyed by parameter name."""

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(g, g)) for g in self.values()))

    def flat(self, names: Iterable[str]) -> np.ndarray:
        return np.concatenate([np.ravel(self[n]) for n in names]) if self else np.zeros(0)


class Tape:
    """One forward/backward record.

    ``mode`` controls what is recorded: ``inference`` saves nothing and refuses
    backward; ``train_frozen`` treats every parameter as a constant; in
    ``train_full`` each parameter's own ``requires_grad`` flag applies.
    """

    def __init__(self, mode: str = "train_full", element_bytes: int = 8, *, _parent=None):
        if mode not in MODES:
            raise ModeError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.element_bytes = element_bytes
        self.nodes: list[Node] = []
        self._refs: dict = {}
        self._sizes: dict = {}
        self._scope = ""
        self.scope_peak: dict[str, int] = defaultdict(int)
        self.scope_total: dict[str, int] = defaultdict(int)
        self.diverged = False
        self._parent = _parent
        self._counter = [0] if _parent is None else _parent._counter
        self._acc = [0, 0] if _parent is None else _parent._acc  # saved, peak
        self._in_checkpoint = _parent is not None
        self._param_nodes: dict[str, Node] = {}

    # ---- bookkeeping -----------------------------------------------------
    def _next_id(self) -> int:
        self._counter[0] += 1
        return self._counter[0]

    @property
    def saved_elements(self) -> int:
        return self._acc[0]

    @property
    def peak_elements(self) -> int:
        return self._acc[1]

    @property
    def saved_bytes(self) -> int:
        return self.saved_elements * self.element_bytes

    @property
    def peak_bytes(self) -> int:
        return self.peak_elements * self.element_bytes

    def reset_peak(self):
        self._acc[1] = self._acc[0]

    @contextlib.contextmanager
    def scope(self, name: str):
        prev = self._scope
        self._scope = name
        try:
            yield
        finally:
            self._scope = prev

    def _save(self, node: Node, buffers: dict):
        keys = []
        for key, arr in buffers.items():
            if key in self._refs:
                self._refs[key] += 1
            else:
                n = int(np.size(arr))
                self._refs[key] = 1
                self._sizes[key] = (n, self._scope)
                self._acc[0] += n
                self.scope_total[self._scope] += n
                if self._acc[0] > self._acc[1]:
                    self._acc[1] = self._acc[0]
            keys.append(key)
        node.saved = tuple(keys)

    def _release(self, node: Node):
        for key in node.saved:
            self._refs[key] -= 1
            if self._refs[key] == 0:
                del self._refs[key]
                n, _ = self._sizes.pop(key)
                self._acc[0] -= n
        node.saved = ()

    def release_all(self):
        for node in self.nodes:
            if node.saved:
                self._release(node)

    def _drop_graph(self):
        # nodes point back at the tape, so break the cycle to free activations promptly
        for node in self.nodes:
            node.grad_fn = None
            node.parents = ()
        self.nodes = []

    def _record(self, value, parents, grad_fn, saved=None) -> Node:
        rg = self.mode != "inference" and any(p.requires_grad for p in parents)
        if rg:
            node = Node(self, value, tuple(parents), grad_fn, True)
            if saved:
                self._save(node, saved)
        else:
            node = Node(self, value)
        self.nodes.append(node)
        if value is not None and np.ndim(value) == 0 and not np.isfinite(value):
            self.diverged = True
        return node

    # ---- leaves ----------------------------------------------------------
    def constant(self, value) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        return node

    def input(self, value, requires_grad: bool = False) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64),
                    requires_grad=requires_grad and self.mode != "inference")
        self.nodes.append(node)
        return node

    def param(self, p: Param) -> Node:
        node = self._param_nodes.get(p.name)
        if node is not None and node.value is p.value:
            return node
        rg = p.requires_grad and self.mode == "train_full"
        node = Node(self, p.value, requires_grad=rg, param=p if rg else None)
        self.nodes.append(node)
        self._param_nodes[p.name] = node
        return node

    # ---- backward ----------------------------------------------------------
    def backward(self, loss: Node, seed=None, grads: GradStore | None = None,
                 input_grads: dict | None = None) -> GradStore:
        """Accumulate gradients of ``loss`` into a :class:`GradStore`.

        ``seed`` defaults to 1 for a scalar loss. ``input_grads`` (node id ->
        gradient) is filled for non-parameter leaves that require a gradient.
        """
        if self.mode == "inference":
            raise ModeError("backward on an inference tape")
        if seed is None:
            if np.size(loss.value) != 1:
                raise ValueError("loss must be scalar")
            seed = np.ones_like(loss.value)
        out = GradStore() if grads is None else grads
        if not loss.requires_grad:
            self.release_all()
            self._drop_graph()
            return out
        g: dict[int, np.ndarray] = {loss.id: np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            gn = g.pop(node.id, None)
            if gn is None:
                if node.saved:
                    self._release(node)
                continue
            if node.grad_fn is None:
                if node.param is not None:
                    name = node.param.name
                    if name in out:
                        out[name] = out[name] + gn
                    else:
                        out[name] = gn
                elif input_grads is not None:
                    input_grads[node.id] = gn
                continue
            pg = node.grad_fn(gn)
            self._release(node)
            for parent, pgrad in zip(node.parents, pg):
                if pgrad is None or not parent.requires_grad:
                    continue
                prev = g.get(parent.id)
                g[parent.id] = pgrad if prev is None else prev + pgrad
        self.release_all()
        self._drop_graph()
        for v in out.values():
            if not np.all(np.isfinite(v)):
                self.diverged = True
                break
        return out


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return a.tape._record(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return a.tape._record(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    saved = {}
    if b.requires_grad:
        saved[a.id] = av
    if a.requires_grad:
        saved[b.id] = bv
    return a.tape._record(av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))),
                          saved)


def scale(a: Node, c: float) -> Node:
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def square(a: Node) -> Node:
    av = a.value
    return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,), {a.id: av})


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    node = a.tape._record(y, (a,), lambda g: (g * y,))
    if node.requires_grad:
        a.tape._save(node, {("out", node.id): y})
    return node


def log(a: Node) -> Node:
    av = a.value
    return a.tape._record(np.log(av), (a,), lambda g: (g / av,), {a.id: av})


def total(a: Node, axis=None, keepdims=False) -> Node:
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: Node) -> Node:
    n = a.value.size
    shape = a.shape
    return a.tape._record(np.mean(a.value), (a,), lambda g: (np.full(shape, g / n),))


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    saved = {}
    if b.requires_grad:
        saved[a.id] = av
    if a.requires_grad:
        saved[b.id] = bv
    return a.tape._record(av @ bv, (a, b),
                          lambda g: (g @ bv.T if a.requires_grad else None,
                                     av.T @ g if b.requires_grad else None),
                          saved)


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w.T (+ b)``; the input is saved only when ``w`` is trained."""
    xv, wv = x.value, w.value
    y = xv @ wv.T
    parents = (x, w)
    if b is not None:
        y = y + b.value
        parents = (x, w, b)
    saved = {x.id: xv} if w.requires_grad else None

    def grad_fn(g):
        gx = g @ wv if x.requires_grad else None
        gw = g.T @ xv if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return x.tape._record(y, parents, grad_fn, saved)


def relu(x: Node) -> Node:
    xv = x.value
    return x.tape._record(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),), {x.id: xv})


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Node) -> Node:
    xv = x.value
    s = _sigmoid(xv)

    def grad_fn(g):
        sg = _sigmoid(xv)
        return (g * sg * (1.0 + xv * (1.0 - sg)),)

    return x.tape._record(xv * s, (x,), grad_fn, {x.id: xv})


RMS_EPS = 1e-6


def rmsnorm_value(x, gain, eps: float = RMS_EPS):
    return x * gain / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rmsnorm(x: Node, gain: Node, eps: float = RMS_EPS) -> Node:
    """Row-wise ``x * gain / sqrt(mean(x^2) + eps)``; saves only ``x``."""
    xv, gv = x.value, gain.value
    inv = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    y = xv * inv * gv

    def grad_fn(g):
        inv_ = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
        xhat = xv * inv_
        gg = _unbroadcast(g * xhat, np.shape(gv)) if gain.requires_grad else None
        gx = None
        if x.requires_grad:
            gy = g * gv
            d = xv.shape[-1]
            gx = inv_ * (gy - xhat * np.sum(gy * xhat, axis=-1, keepdims=True) / d)
        return gx, gg

    return x.tape._record(y, (x, gain), grad_fn, {x.id: xv})


def alpha_scale(u: Node, alpha: Node) -> Node:
    """Scalar-parameter scaling of a branch; saves ``u`` when ``alpha`` is trained."""
    uv, av = u.value, alpha.value
    saved = {u.id: uv} if alpha.requires_grad else None

    def grad_fn(g):
        gu = g * av if u.requires_grad else None
        ga = np.reshape(np.sum(g * uv), np.shape(av)) if alpha.requires_grad else None
        return gu, ga

    return u.tape._record(uv * av, (u, alpha), grad_fn, saved)


def swiglu(xn: Node, w_gate: Node, w_up: Node, w_down: Node) -> Node:
    """``W_down((W_up x) * silu(W_gate x))`` as one recorded op."""
    xv = xn.value
    wg, wu, wd = w_gate.value, w_up.value, w_down.value
    a = xv @ wg.T
    u = xv @ wu.T
    s = a * _sigmoid(a)
    h = u * s
    y = h @ wd.T
    tape = xn.tape
    train_w = w_gate.requires_grad or w_up.requires_grad or w_down.requires_grad
    saved = {("gate", id(a)): a, ("up", id(u)): u}
    if train_w:
        saved[("silu", id(s))] = s
        saved[xn.id] = xv

    def grad_fn(g):
        gh = g @ wd
        gwd = g.T @ (u * s) if w_down.requires_grad else None
        gu = gh * s
        sg = _sigmoid(a)
        ga = gh * u * sg * (1.0 + a * (1.0 - sg))
        gx = (ga @ wg + gu @ wu) if xn.requires_grad else None
        gwg = ga.T @ xv if w_gate.requires_grad else None
        gwu = gu.T @ xv if w_up.requires_grad else None
        return gx, gwg, gwu, gwd

    return tape._record(y, (xn, w_gate, w_up, w_down), grad_fn, saved)


def embed(ids: np.ndarray, table: Node) -> Node:
    tv = table.value
    ids = np.asarray(ids)
    shape = tv.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return table.tape._record(tv[ids], (table,), grad_fn)


def softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Node) -> Node:
    p = softmax_rows(x.value)

    def grad_fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    node = x.tape._record(p, (x,), grad_fn)
    if node.requires_grad:
        x.tape._save(node, {("out", node.id): p})
    return node


def attention(xn: Node, wq: Node, wk: Node, wv: Node, wo: Node, n_heads: int,
              batch: int, causal: bool = True) -> Node:
    """Multi-head softmax self-attention over ``batch`` sequences stacked row-wise."""
    x = xn.value
    n, d = x.shape
    T = n // batch
    hd = d // n_heads
    Wq, Wk, Wv, Wo = wq.value, wk.value, wv.value, wo.value
    q = (x @ Wq.T).reshape(batch, T, n_heads, hd).transpose(0, 2, 1, 3)
    k = (x @ Wk.T).reshape(batch, T, n_heads, hd).transpose(0, 2, 1, 3)
    v = (x @ Wv.T).reshape(batch, T, n_heads, hd).transpose(0, 2, 1, 3)
    sc = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
    if causal:
        mask = np.triu(np.ones((T, T), dtype=bool), 1)
        sc = np.where(mask, -np.inf, sc)
    p = softmax_rows(sc)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(n, d)
    y = ctx @ Wo.T
    saved = {xn.id: x, ("q", id(q)): q, ("k", id(k)): k, ("v", id(v)): v,
             ("p", id(p)): p, ("ctx", id(ctx)): ctx}

    def grad_fn(g):
        gWo = g.T @ ctx if wo.requires_grad else None
        gctx = (g @ Wo).reshape(batch, T, n_heads, hd).transpose(0, 2, 1, 3)
        gp = gctx @ v.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ gctx
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) / math.sqrt(hd)
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        gq = gq.transpose(0, 2, 1, 3).reshape(n, d)
        gk = gk.transpose(0, 2, 1, 3).reshape(n, d)
        gv = gv.transpose(0, 2, 1, 3).reshape(n, d)
        gx = (gq @ Wq + gk @ Wk + gv @ Wv) if xn.requires_grad else None
        return (gx,
                gq.T @ x if wq.requires_grad else None,
                gk.T @ x if wk.requires_grad else None,
                gv.T @ x if wv.requires_grad else None,
                gWo)

    return xn.tape._record(y, (xn, wq, wk, wv, wo), grad_fn, saved)


def cross_entropy(logits: Node, targets: np.ndarray) -> Node:
    """Mean token cross-entropy in nats."""
    z = logits.value
    targets = np.asarray(targets)
    n = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = float(np.mean(lse - zs[np.arange(n), targets]))

    def grad_fn(g):
        p = softmax_rows(z)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return logits.tape._record(np.array(loss), (logits,), grad_fn, {logits.id: z})


def topk_indices(p_teacher: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    order = np.argsort(-p_teacher, axis=-1, kind="stable")
    return order[..., :k]


def _log_softmax(z):
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def topk_kl(student_logits: Node, teacher_logits: np.ndarray, k: int) -> Node:
    """Mean over rows of sum over teacher top-k of ``p_t log(p_t / p_s)`` (no renormalization)."""
    z = student_logits.value
    # both sides through the same log-softmax so equal inputs give exactly zero
    log_pt = _log_softmax(np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64)))
    pt = np.exp(log_pt)
    n, V = pt.shape
    if not 1 <= k <= V:
        raise ValueError("top_k must lie in [1, vocab]")
    idx = topk_indices(pt, k)
    rows = np.arange(n)[:, None]
    log_ps = _log_softmax(z)
    ptk = pt[rows, idx]
    val = float(np.sum(ptk * (log_pt[rows, idx] - log_ps[rows, idx])) / n)

    def grad_fn(g):
        ps = np.exp(log_ps)
        w = np.zeros_like(ps)
        w[rows, idx] = ptk
        # d/dz of -sum_j w_j log p_s,j = -w + p_s * sum(w)
        return ((ps * w.sum(axis=1, keepdims=True) - w) * (g / n),)

    return student_logits.tape._record(np.array(val), (student_logits,), grad_fn,
                                       {student_logits.id: z})


def relative_mse(pred: Node, target: np.ndarray) -> Node:
    """Mean over rows of ``||pred - target||^2 / ||target||^2``."""
    f = np.asarray(target, dtype=np.float64)
    denom = np.sum(f * f, axis=1)
    keep = denom > 0
    if not keep.all():
        warnings.warn(f"relative_mse: {int((~keep).sum())} zero-norm target rows excluded")
    gv = pred.value
    diff = gv - f
    w = np.where(keep, 1.0 / np.where(keep, denom, 1.0), 0.0)
    n = max(int(keep.sum()), 1)
    val = float(np.sum(np.sum(diff * diff, axis=1) * w) / n)

    def grad_fn(g):
        return (2.0 * diff * (w / n)[:, None] * g,)

    return pred.tape._record(np.array(val), (pred,), grad_fn, {pred.id: gv})


def stop_grad(x: Node) -> Node:
    """Same value, treated as a constant by backward."""
    node = Node(x.tape, x.value)
    x.tape.nodes.append(node)
    return node


def dropout(x: Node, p: float, rng: Rng) -> Node:
    """Inverted dropout. Draws from ``rng``, so it is rejected inside checkpoint segments."""
    tape = x.tape
    if tape._in_checkpoint:
        raise ValueError("non-deterministic op 'dropout' inside a checkpoint segment")
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return tape._record(x.value * keep, (x,), lambda g: (g * keep,), {("mask", id(keep)): keep})


# --------------------------------------------------------------------------
# checkpointing
# --------------------------------------------------------------------------

def checkpoint(fn: Callable[[Tape, Node], Node], x: Node, params: Iterable[Param] = ()) -> Node:
    """Run ``fn`` without saving interior buffers; recompute them during backward.

    ``fn(tape, h)`` must be a pure function of ``h`` and the parameters it reads.
    Only the segment input is kept. Backward replays ``fn`` on a child tape that
    shares the memory counters, backpropagates through it, and releases the
    recomputed buffers before returning.
    """
    tape = x.tape
    params = list(params)
    if tape.mode == "inference" or not (x.requires_grad or any(
            p.requires_grad and tape.mode == "train_full" for p in params)):
        sub = Tape("inference", tape.element_bytes, _parent=tape)
        out = fn(sub, sub.input(x.value))
        return tape._record(out.value, (), None)
    probe = Tape("inference", tape.element_bytes, _parent=tape)
    y = fn(probe, probe.input(x.value)).value
    xv = x.value
    holder = {}
    pnodes = [tape.param(p) for p in params]

    def grad_fn(g):
        sub = Tape(tape.mode, tape.element_bytes, _parent=tape)
        sub._scope = tape._scope
        h = sub.input(xv, requires_grad=x.requires_grad)
        out = fn(sub, h)
        ig = {}
        pg = GradStore()
        sub.backward(out, seed=g, grads=pg, input_grads=ig)
        if sub.diverged:
            tape.diverged = True
        holder["grads"] = pg
        res = [ig.get(h.id) if x.requires_grad else None]
        for pn in pnodes:
            res.append(pg.get(pn.param.name) if pn.param is not None else None)
        return tuple(res)

    return tape._record(y, (x, *pnodes), grad_fn, {("ckpt_in", x.id): xv})


# --------------------------------------------------------------------------
# gradient clipping, optimizers, schedules
# --------------------------------------------------------------------------

def clip_grad_norm(grads: GradStore, max_norm: float) -> float:
    """Scale all gradients uniformly so their global L2 norm is at most ``max_norm``.

    Returns the scale applied; NaN when a gradient is non-finite (no scaling done).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = grads.global_norm()
    if not math.isfinite(norm):
        return float("nan")
    scale_ = 1.0 if norm <= max_norm else max_norm / norm
    if scale_ != 1.0:
        for k in grads:
            grads[k] = grads[k] * scale_
    return scale_


@dataclass
class OptimizerState:
    kind: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Iterable[Param], grads: GradStore, lr: float):
    """In-place update of every parameter that has a gradient."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    t = state.step
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if state.kind == "sgd":
            if state.weight_decay:
                p.value -= lr * state.weight_decay * p.value
            p.value -= lr * g
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        if state.weight_decay and state.kind == "adamw":
            p.value -= lr * state.weight_decay * p.value
        p.value -= lr * mhat / (np.sqrt(vhat) + state.eps)


class FlatAdamW:
    """AdamW over a list of parameters packed into one contiguous buffer.

    Packing rebinds each ``Param.value`` to a view of the flat buffer so the
    update is a handful of vector ops regardless of parameter count.
    """

    def __init__(self, params: list[Param], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params]
        self.names = [p.name for p in self.params]
        sizes = [p.size for p in self.params]
        self.offsets = np.cumsum([0] + sizes)
        self.flat = np.concatenate([p.value.ravel() for p in self.params]) if params else np.zeros(0)
        for p, a, b in zip(self.params, self.offsets[:-1], self.offsets[1:]):
            p.value = self.flat[a:b].reshape(p.value.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.step_count = 0

    def gather(self, grads: GradStore) -> np.ndarray:
        out = np.zeros_like(self.flat)
        for name, a, b in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            g = grads.get(name)
            if g is not None:
                out[a:b] = g.ravel()
        return out

    def step(self, grads: GradStore, lr: float):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        g = self.gather(grads)
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** t)
        vhat = self.v / (1 - self.beta2 ** t)
        if self.weight_decay:
            self.flat *= 1.0 - lr * self.weight_decay
        self.flat -= lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_warmup_lr(step: int, total: int, base_lr: float, warmup_frac: float = 0.05,
                     min_lr: float = 0.0) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, cosine decay afterwards.

    ``step`` is 0-based.
    """
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return base_lr * (step + 1) / warm
    prog = (step - warm) / max(1, total - warm)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * min(prog, 1.0)))


class DivergenceMonitor:
    """Flags NaN/Inf loss, or loss above ``factor`` x initial for ``patience`` consecutive steps."""

    def __init__(self, factor: float = 10.0, patience: int = 50):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.run = 0
        self.diverged = False

    def update(self, loss: float) -> bool:
        if not math.isfinite(loss):
            self.diverged = True
            return True
        if self.initial is None:
            self.initial = loss
        if loss > self.factor * self.initial:
            self.run += 1
            if self.run >= self.patience:
                self.diverged = True
        else:
            self.run = 0
        return self.diverged
