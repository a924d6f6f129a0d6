"""Architecture pieces: RMSNorm, SwiGLU FFN, deep low-rank residual nets, attention,
a small pre-norm byte-level transformer, LoRA adapters and the model checkpoint format.
"""
from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Union

import numpy as np

from . import autograd as ag
from .autograd import Node, Param, Tape
from .tensor import Rng, read_matrix, write_matrix


class BudgetError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameter bundles
# --------------------------------------------------------------------------

@dataclass
class SwigluParams:
    w_gate: Param
    w_up: Param
    w_down: Param
    norm_gain: Param

    kind = "swiglu"

    @property
    def d(self) -> int:
        return self.w_gate.value.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w_gate.value.shape[0]

    def params(self) -> list[Param]:
        return [self.w_gate, self.w_up, self.w_down, self.norm_gain]


@dataclass
class DlrLayer:
    V: Param
    U: Param
    alpha: Param
    norm_gain: Param

    def params(self) -> list[Param]:
        return [self.V, self.U, self.alpha, self.norm_gain]


@dataclass
class DlrNetParams:
    layers: list[DlrLayer]

    kind = "dlr"

    @property
    def d(self) -> int:
        return self.layers[0].U.value.shape[0]

    @property
    def r(self) -> int:
        return self.layers[0].U.value.shape[1]

    @property
    def L(self) -> int:
        return len(self.layers)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


FFN = Union[SwigluParams, DlrNetParams]


@dataclass
class AttnParams:
    wq: Param
    wk: Param
    wv: Param
    wo: Param
    norm_gain: Param

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo, self.norm_gain]


@dataclass
class TransformerLayer:
    attn: AttnParams
    ffn: FFN

    def params(self) -> list[Param]:
        return self.attn.params() + self.ffn.params()


@dataclass
class LoraAdapter:
    target: str
    A: Param
    B: Param
    scaling: float

    def params(self) -> list[Param]:
        return [self.A, self.B]


@dataclass
class TransformerParams:
    tok_emb: Param
    pos_emb: Param
    layers: list[TransformerLayer]
    final_gain: Param
    head: Param
    n_heads: int
    adapters: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.tok_emb.value.shape[1]

    @property
    def vocab(self) -> int:
        return self.tok_emb.value.shape[0]

    @property
    def n_max(self) -> int:
        return self.pos_emb.value.shape[0]

    def params(self) -> list[Param]:
        out = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            out += layer.params()
        out += [self.final_gain, self.head]
        for ad in self.adapters.values():
            out += ad.params()
        return out

    def named(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def dlr_params(self) -> list[Param]:
        return [p for layer in self.layers if layer.ffn.kind == "dlr" for p in layer.ffn.params()]

    def copy(self) -> "TransformerParams":
        new = copy.deepcopy(self)
        for p in new.params():
            p.value = np.array(p.value, copy=True)
        return new


# --------------------------------------------------------------------------
# budget, counting, init
# --------------------------------------------------------------------------

def swiglu_budget(d: int, d_ff: int) -> int:
    """Parameters of a SwiGLU sub-block including its norm gain."""
    return 3 * d * d_ff + d


def depth_for_budget(P: int, d: int, r: int) -> int:
    """Deepest DLR net of rank ``r`` fitting ``P`` parameters (each layer: 2dr + d + 1)."""
    if r < 1 or d < 1:
        raise ValueError("d and r must be positive")
    L = P // (2 * d * r + d + 1)
    if L == 0:
        raise BudgetError(f"budget {P} too small for one layer at d={d}, r={r}")
    return int(L)


def param_count(model) -> int:
    if model is None:
        return 0
    if isinstance(model, (list, tuple)):
        return sum(param_count(m) for m in model)
    if isinstance(model, Param):
        return model.size
    return sum(p.size for p in model.params())


def forward_macs(ffn: FFN, weights_only: bool = False) -> int:
    """Multiply-accumulates per token for one FFN sub-block.

    By default every parameter contributes one multiply per token (matrix
    entries, norm gains, ReZero scalars), the usual dense-model convention.
    ``weights_only`` counts the matrix products alone.
    """
    if ffn.kind == "swiglu":
        mats = 3 * ffn.d * ffn.d_ff
        return mats if weights_only else mats + ffn.d
    per = 2 * ffn.d * ffn.r
    return ffn.L * (per if weights_only else per + ffn.d + 1)


def init_swiglu(d: int, d_ff: int, rng: Rng, prefix: str = "ffn") -> SwigluParams:
    return SwigluParams(
        w_gate=Param(f"{prefix}.w_gate", rng.normal((d_ff, d), 0.0, 1.0 / math.sqrt(d))),
        w_up=Param(f"{prefix}.w_up", rng.normal((d_ff, d), 0.0, 1.0 / math.sqrt(d))),
        w_down=Param(f"{prefix}.w_down", rng.normal((d, d_ff), 0.0, 1.0 / math.sqrt(d_ff))),
        norm_gain=Param(f"{prefix}.norm_gain", np.ones(d)),
    )


def init_dlrnet(d: int, r: int, L: int, rng: Rng, prefix: str = "dlr") -> DlrNetParams:
    """U ~ N(0, var 1/(d sqrt L)), V ~ N(0, var 1/r), alpha = 0, gains = 1."""
    if L < 1:
        raise ValueError("L must be >= 1")
    su = math.sqrt(1.0 / (d * math.sqrt(L)))
    sv = math.sqrt(1.0 / r)
    layers = []
    for i in range(L):
        lr_ = rng.spawn("dlr_layer", i)
        layers.append(DlrLayer(
            V=Param(f"{prefix}.{i}.V", lr_.normal((r, d), 0.0, sv)),
            U=Param(f"{prefix}.{i}.U", lr_.normal((d, r), 0.0, su)),
            alpha=Param(f"{prefix}.{i}.alpha", np.zeros(())),
            norm_gain=Param(f"{prefix}.{i}.norm_gain", np.ones(d)),
        ))
    return DlrNetParams(layers)


def init_attention(d: int, rng: Rng, prefix: str = "attn") -> AttnParams:
    s = 1.0 / math.sqrt(d)
    return AttnParams(
        wq=Param(f"{prefix}.wq", rng.normal((d, d), 0.0, s)),
        wk=Param(f"{prefix}.wk", rng.normal((d, d), 0.0, s)),
        wv=Param(f"{prefix}.wv", rng.normal((d, d), 0.0, s)),
        wo=Param(f"{prefix}.wo", rng.normal((d, d), 0.0, s / math.sqrt(2.0))),
        norm_gain=Param(f"{prefix}.norm_gain", np.ones(d)),
    )


def init_transformer(seed: int = 0, vocab: int = 256, d: int = 64, n_layers: int = 4,
                     n_heads: int = 2, d_ff: int = 256, n_max: int = 128) -> TransformerParams:
    rng = Rng(seed, "transformer")
    layers = []
    for l in range(n_layers):
        layers.append(TransformerLayer(
            attn=init_attention(d, rng.spawn("attn", l), f"layer{l}.attn"),
            ffn=init_swiglu(d, d_ff, rng.spawn("ffn", l), f"layer{l}.ffn"),
        ))
    return TransformerParams(
        tok_emb=Param("tok_emb", rng.spawn("tok").normal((vocab, d), 0.0, 0.1)),
        pos_emb=Param("pos_emb", rng.spawn("pos").normal((n_max, d), 0.0, 0.02)),
        layers=layers,
        final_gain=Param("final_gain", np.ones(d)),
        head=Param("head", rng.spawn("head").normal((vocab, d), 0.0, 1.0 / math.sqrt(d))),
        n_heads=n_heads,
    )


def rename(ffn: FFN, prefix: str) -> FFN:
    """Rebase the parameter names of an FFN bundle onto ``prefix``."""
    if ffn.kind == "swiglu":
        for key in ("w_gate", "w_up", "w_down", "norm_gain"):
            getattr(ffn, key).name = f"{prefix}.{key}"
    else:
        for i, layer in enumerate(ffn.layers):
            for key in ("V", "U", "alpha", "norm_gain"):
                getattr(layer, key).name = f"{prefix}.{i}.{key}"
    return ffn


# --------------------------------------------------------------------------
# forward programs
# --------------------------------------------------------------------------

def rmsnorm(x, gain, eps: float = ag.RMS_EPS) -> np.ndarray:
    return ag.rmsnorm_value(np.asarray(x, dtype=np.float64), np.asarray(gain, dtype=np.float64), eps)


def _weight(tape: Tape, p: Param, adapters: dict | None) -> Node:
    w = tape.param(p)
    if adapters and p.name in adapters:
        ad = adapters[p.name]
        delta = ag.scale(ag.matmul(tape.param(ad.B), tape.param(ad.A)), ad.scaling)
        w = ag.add(w, delta)
    return w


def swiglu_node(tape: Tape, x: Node, p: SwigluParams, adapters=None) -> Node:
    return ag.swiglu(x, _weight(tape, p.w_gate, adapters), _weight(tape, p.w_up, adapters),
                     _weight(tape, p.w_down, adapters))


def swiglu_forward(x, p: SwigluParams) -> np.ndarray:
    """``W_down((W_up x) * silu(W_gate x))`` row-wise, no normalization."""
    t = Tape("inference")
    return swiglu_node(t, t.input(np.atleast_2d(x)), p).value


def dlr_layer_node(tape: Tape, h: Node, layer: DlrLayer, adapters=None, stop_branch=False) -> Node:
    xn = ag.rmsnorm(h, tape.param(layer.norm_gain))
    a = ag.linear(xn, _weight(tape, layer.V, adapters))
    s = ag.silu(a)
    u = ag.linear(s, _weight(tape, layer.U, adapters))
    b = ag.alpha_scale(u, tape.param(layer.alpha))
    if stop_branch:
        b = ag.stop_grad(b)
    return ag.add(h, b)


def dlrnet_node(tape: Tape, z: Node, p: DlrNetParams, adapters=None, checkpoint_interval=None,
                stop_branch=False, scope: str = "dlr") -> Node:
    """``h_{i+1} = h_i + alpha_i U_i silu(V_i rmsnorm(h_i))``; returns ``h_L``.

    With ``checkpoint_interval = k`` the chain is cut into segments of ``k``
    residual layers whose interiors are recomputed during backward.
    """
    h = z
    L = p.L
    if not checkpoint_interval:
        for i, layer in enumerate(p.layers):
            with tape.scope(f"{scope}.{i}"):
                h = dlr_layer_node(tape, h, layer, adapters, stop_branch)
        return h
    k = int(checkpoint_interval)
    for start in range(0, L, k):
        seg = p.layers[start:start + k]

        def run(t, x, seg=seg, start=start):
            for j, layer in enumerate(seg):
                with t.scope(f"{scope}.{start + j}"):
                    x = dlr_layer_node(t, x, layer, adapters, stop_branch)
            return x

        seg_params = [q for layer in seg for q in layer.params()]
        if adapters:
            seg_params += [q for name, ad in adapters.items()
                           if any(name == lp.name for lp in seg_params) for q in ad.params()]
        with tape.scope(f"{scope}.ckpt{start}"):
            h = ag.checkpoint(run, h, seg_params)
    return h


def dlrnet_forward(z, p: DlrNetParams) -> np.ndarray:
    t = Tape("inference")
    return dlrnet_node(t, t.input(np.atleast_2d(z)), p).value


def ffn_block_node(tape: Tape, z: Node, ffn: FFN, adapters=None, checkpoint_interval=None,
                   stop_branch=False, scope: str = "ffn") -> Node:
    """The residual sub-block ``z + FFN(RMSNorm(z))`` or its DLR replacement."""
    if ffn.kind == "swiglu":
        with tape.scope(scope):
            xn = ag.rmsnorm(z, tape.param(ffn.norm_gain))
            y = swiglu_node(tape, xn, ffn, adapters)
            if stop_branch:
                y = ag.stop_grad(y)
            return ag.add(z, y)
    return dlrnet_node(tape, z, ffn, adapters, checkpoint_interval, stop_branch, scope)


def ffn_block(z, ffn: FFN) -> np.ndarray:
    t = Tape("inference")
    return ffn_block_node(t, t.input(np.atleast_2d(z)), ffn).value


def attention_node(tape: Tape, xn: Node, p: AttnParams, n_heads: int, batch: int = 1,
                   causal: bool = True, adapters=None) -> Node:
    return ag.attention(xn, _weight(tape, p.wq, adapters), _weight(tape, p.wk, adapters),
                        _weight(tape, p.wv, adapters), _weight(tape, p.wo, adapters),
                        n_heads, batch, causal)


def attention_block(X, p: AttnParams, n_heads: int, causal: bool = True) -> np.ndarray:
    """Self-attention on one sequence ``X`` (n x d); norm and residual are the caller's job."""
    t = Tape("inference")
    return attention_node(t, t.input(np.atleast_2d(X)), p, n_heads, 1, causal).value


def layers_node(tape: Tape, model: TransformerParams, X: Node, batch: int, *, start: int = 0,
                capture: dict | None = None, checkpoint_interval=None, stop_branch=False,
                zero_branches=False) -> Node:
    """Run transformer layers ``start..N-1`` on the residual stream ``X`` (B*T x d)."""
    ad = model.adapters
    for l in range(start, len(model.layers)):
        layer = model.layers[l]
        with tape.scope(f"layer{l}.attn"):
            xn = ag.rmsnorm(X, tape.param(layer.attn.norm_gain))
            a = attention_node(tape, xn, layer.attn, model.n_heads, batch, True, ad)
            Z = X if zero_branches else ag.add(X, a)
        if capture is not None:
            capture[l] = Z.value
        if zero_branches:
            X = Z
            continue
        X = ffn_block_node(tape, Z, layer.ffn, ad, checkpoint_interval, stop_branch,
                           scope=f"layer{l}.ffn")
    if capture is not None:
        capture["final"] = X.value
    return X


def head_node(tape: Tape, model: TransformerParams, X: Node) -> Node:
    with tape.scope("head"):
        xf = ag.rmsnorm(X, tape.param(model.final_gain))
        return ag.linear(xf, _weight(tape, model.head, model.adapters))


def transformer_node(tape: Tape, model: TransformerParams, ids, *, capture: dict | None = None,
                     checkpoint_interval=None, stop_branch=False, zero_branches=False) -> Node:
    """Logits (B*T x vocab) for token ids of shape (B, T) under pre-norm wiring."""
    ids = np.atleast_2d(np.asarray(ids))
    B, T = ids.shape
    if T > model.n_max:
        raise ValueError(f"sequence length {T} exceeds context {model.n_max}")
    with tape.scope("embed"):
        X = ag.add(ag.embed(ids.reshape(-1), tape.param(model.tok_emb)),
                   ag.embed(np.tile(np.arange(T), B), tape.param(model.pos_emb)))
    X = layers_node(tape, model, X, B, capture=capture, checkpoint_interval=checkpoint_interval,
                    stop_branch=stop_branch, zero_branches=zero_branches)
    return head_node(tape, model, X)


def logits(model: TransformerParams, ids) -> np.ndarray:
    t = Tape("inference")
    return transformer_node(t, model, ids).value


# --------------------------------------------------------------------------
# LoRA
# --------------------------------------------------------------------------

def lora_attach(model: TransformerParams, targets, rank_l: int, rng: Rng,
                alpha: float | None = None) -> TransformerParams:
    """Attach zero-initialized LoRA adapters to named weights and freeze the base model."""
    if rank_l < 1:
        raise ValueError("rank_l must be >= 1")
    named = model.named()
    for t in targets:
        if t not in named or named[t].value.ndim != 2:
            raise KeyError(f"LoRA target {t!r} not found")
    for p in model.params():
        p.requires_grad = False
    for t in targets:
        out_dim, in_dim = named[t].value.shape
        r = rng.spawn("lora", t)
        model.adapters[t] = LoraAdapter(
            target=t,
            A=Param(f"lora.{t}.A", r.normal((rank_l, in_dim), 0.0, 1.0 / math.sqrt(in_dim))),
            B=Param(f"lora.{t}.B", np.zeros((out_dim, rank_l))),
            scaling=(alpha if alpha is not None else rank_l) / rank_l,
        )
    return model


# --------------------------------------------------------------------------
# checkpoint files: b"DLRL", u32 version, u32 header length, JSON header, DLRM matrices
# --------------------------------------------------------------------------

MODEL_MAGIC = b"DLRL"
MODEL_VERSION = 1


def describe(model: TransformerParams) -> dict:
    layers = []
    for layer in model.layers:
        if layer.ffn.kind == "swiglu":
            layers.append({"kind": "swiglu", "d_ff": layer.ffn.d_ff})
        else:
            layers.append({"kind": "dlr", "r": layer.ffn.r, "L": layer.ffn.L})
    return {"d": model.d, "vocab": model.vocab, "n_max": model.n_max, "n_heads": model.n_heads,
            "N": len(model.layers), "layers": layers}


def save_model(f: BinaryIO, model: TransformerParams) -> None:
    params = [p for p in model.params() if not p.name.startswith("lora.")]
    header = describe(model)
    header["params"] = [[p.name, list(p.value.shape)] for p in params]
    blob = json.dumps(header, sort_keys=True).encode()
    f.write(struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(blob)))
    f.write(blob)
    for p in params:
        write_matrix(f, np.reshape(p.value, (1, -1)) if p.value.ndim < 2 else p.value)


def load_model(f: BinaryIO) -> TransformerParams:
    magic, version, n = struct.unpack("<4sII", f.read(12))
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    header = json.loads(f.read(n))
    values = {}
    for name, shape in header["params"]:
        values[name] = read_matrix(f).reshape(shape)
    layers = []
    for l, spec in enumerate(header["layers"]):
        pre = f"layer{l}"
        attn = AttnParams(*(Param(f"{pre}.attn.{k}", values[f"{pre}.attn.{k}"])
                            for k in ("wq", "wk", "wv", "wo", "norm_gain")))
        if spec["kind"] == "swiglu":
            ffn = SwigluParams(*(Param(f"{pre}.ffn.{k}", values[f"{pre}.ffn.{k}"])
                                 for k in ("w_gate", "w_up", "w_down", "norm_gain")))
        else:
            ffn = DlrNetParams([
                DlrLayer(*(Param(f"{pre}.ffn.{i}.{k}", values[f"{pre}.ffn.{i}.{k}"])
                           for k in ("V", "U", "alpha", "norm_gain")))
                for i in range(spec["L"])])
        layers.append(TransformerLayer(attn, ffn))
    return TransformerParams(
        tok_emb=Param("tok_emb", values["tok_emb"]),
        pos_emb=Param("pos_emb", values["pos_emb"]),
        layers=layers,
        final_gain=Param("final_gain", values["final_gain"]),
        head=Param("head", values["head"]),
        n_heads=header["n_heads"],
    )


def model_to_bytes(model: TransformerParams) -> bytes:
    buf = io.BytesIO()
    save_model(buf, model)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> TransformerParams:
    return load_model(io.BytesIO(data))
