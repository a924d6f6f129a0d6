"""Experiment configuration: typed sections, strict JSON parsing, round-trip serialization.

A config file is a JSON object with ``kind``, ``seed``, ``out`` and one key per
section the kind uses. Every section maps onto a dataclass; unknown keys at any
level raise :class:`ConfigError`. Seed fields inside sections are offsets from
the master seed, so ``--seed`` shifts every random stream of an experiment at once.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass

from .analysis import MatfacConfig
from .attacks import PenaltySweepConfig
from .lockpipe import DistillConfig, phase1_defaults, phase2_defaults
from .training import LMTrainConfig


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# sections
# --------------------------------------------------------------------------

@dataclass
class DataSpec:
    kind: str = "byte_corpus"
    path: str | None = None
    heldout_frac: float = 0.1
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    classes: int = 10
    dim: int = 784
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("byte_corpus", "mnist_idx", "synthetic_blobs"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")

    def load(self, seed_offset: int = 0):
        from .datasets import load_dataset
        if self.kind == "byte_corpus":
            return load_dataset({"kind": "byte_corpus", "path": self.path,
                                 "heldout_frac": self.heldout_frac})
        if self.kind == "mnist_idx":
            return load_dataset({"kind": "mnist_idx", "train_images": self.train_images,
                                 "train_labels": self.train_labels, "test_images": self.test_images,
                                 "test_labels": self.test_labels})
        return load_dataset({"kind": "synthetic_blobs", "classes": self.classes, "dim": self.dim,
                             "n_train": self.n_train, "n_test": self.n_test,
                             "seed": self.seed + seed_offset})


@dataclass
class ArchSpec:
    vocab: int = 256
    d: int = 64
    n_layers: int = 4
    n_heads: int = 2
    d_ff: int = 256
    n_max: int = 128


@dataclass
class TeacherSpec:
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: LMTrainConfig = field(default_factory=lambda: LMTrainConfig(
        steps=500, lr=3e-3, batch_size=16, seq_len=128))
    model: str | None = None  # reuse a saved teacher instead of training one


@dataclass
class LockSpec:
    r: int = 4
    collect_tokens: int | None = None
    phase1: DistillConfig = field(default_factory=phase1_defaults)
    phase2: DistillConfig | None = field(default_factory=phase2_defaults)
    model: str | None = None  # reuse a saved locked model


@dataclass
class FinetuneSpec:
    lrs: list = field(default_factory=lambda: [3e-6, 1e-5, 3e-5, 1e-4])
    steps: int = 40
    batch_size: int = 8
    seq_len: int = 64
    checkpoint: str = "sqrt"  # locked attacker: "sqrt" (interval sqrt(N L)) or "none"
    element_budget: int | None = None
    eval_every: int = 5
    target_loss: float | None = None
    corpus: DataSpec = field(default_factory=lambda: DataSpec(path="builtin:attack.txt"))
    seed: int = 0


@dataclass
class PartialSpec:
    modes: list = field(default_factory=lambda: ["freeze_dlr", "stop_grad_dlr"])
    lr: float = 1e-4
    steps: int = 40
    batch_size: int = 8
    seq_len: int = 64
    corpus: DataSpec = field(default_factory=lambda: DataSpec(path="builtin:attack.txt"))
    seed: int = 0


@dataclass
class LoraSpec:
    targets: list = field(default_factory=lambda: ["attn.wq", "attn.wv"])
    rank: int = 4
    lr: float = 1e-3
    steps: int = 40
    batch_size: int = 8
    seq_len: int = 64
    corpus: DataSpec = field(default_factory=lambda: DataSpec(path="builtin:attack.txt"))
    seed: int = 0


@dataclass
class ReverseSpec:
    d_ff: int = 256
    collect_tokens: int | None = None
    distill: DistillConfig = field(default_factory=lambda: phase1_defaults(steps=1000))


@dataclass
class MlpSpec:
    hidden: int = 128
    steps: int = 400
    lr: float = 1e-3
    batch: int = 128
    seed: int = 0


@dataclass
class RebalanceSpec:
    n_insertions: int = 10
    max_condition: float = 1e6
    scales: list = field(default_factory=lambda: [0.01, 0.5, 2.0, 100.0])
    seed: int = 0


@dataclass
class MemorySpec:
    configs: list = field(default_factory=lambda: [[64, 4, 85]])
    modes: list = field(default_factory=lambda: ["full", "frozen"])
    seed: int = 0


@dataclass
class KappaSpec:
    d: int = 64
    r: int = 4
    L: int = 85
    d_ff: int = 256
    a_attn: float = 0.0


@dataclass
class ConditionSpec:
    n_pairs: int = 20
    dims: list = field(default_factory=lambda: [2, 3, 4])
    scales: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    target: str = "random"
    seed: int = 0


@dataclass
class HutchinsonSpec:
    diag: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    dense_dim: int = 0  # > 0 adds a random dense quadratic of that size
    probes: int = 10000
    seed: int = 0


@dataclass
class BenchSpec:
    steps: int = 10
    warmup: int = 5
    batch_size: int = 8
    seq_len: int = 64
    repeats: int = 3
    modes: list = field(default_factory=lambda: ["train_full", "inference"])
    checkpoint: str = "sqrt"  # locked model: "sqrt" (interval sqrt(N L)) or "none"
    seed: int = 0


@dataclass
class EvalSpec:
    model: str | None = None
    seq_len: int | None = None


SECTION_TYPES = {
    "data": DataSpec, "teacher": TeacherSpec, "lock": LockSpec, "finetune": FinetuneSpec,
    "partial": PartialSpec, "lora": LoraSpec, "reverse": ReverseSpec, "mlp": MlpSpec,
    "sweep": PenaltySweepConfig, "rebalance": RebalanceSpec, "memory": MemorySpec,
    "kappa": KappaSpec, "condition": ConditionSpec, "hutchinson": HutchinsonSpec,
    "matfac": MatfacConfig, "bench": BenchSpec, "eval": EvalSpec,
}

KIND_SECTIONS = {
    "lock": ("data", "teacher", "lock"),
    "finetune": ("data", "teacher", "lock", "finetune"),
    "partial": ("data", "teacher", "lock", "partial"),
    "lora": ("data", "teacher", "lock", "lora"),
    "reverse": ("data", "teacher", "lock", "reverse"),
    "penalty": ("data", "mlp", "sweep"),
    "rebalance": ("data", "mlp", "rebalance"),
    "memory": ("memory",),
    "kappa": ("kappa",),
    "condition": ("condition",),
    "hutchinson": ("hutchinson",),
    "matfac": ("matfac",),
    "bench": ("data", "teacher", "lock", "bench"),
    "eval": ("data", "eval"),
}

# default dataset per kind when the config omits the data section
_DEFAULT_DATA = {"penalty": lambda: DataSpec(kind="synthetic_blobs"),
                 "rebalance": lambda: DataSpec(kind="synthetic_blobs")}


# --------------------------------------------------------------------------
# generic dataclass <-> plain value conversion
# --------------------------------------------------------------------------

def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def from_plain(cls, value, path: str = ""):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(value, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(value).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - names)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {unknown}")
    kw = {}
    defaults = cls()
    for f in fields(cls):
        if f.name not in value:
            continue
        v = value[f.name]
        tp, optional = _strip_optional(hints[f.name])
        sub = f"{path}.{f.name}" if path else f.name
        if v is None:
            if not optional and getattr(defaults, f.name) is not None:
                raise ConfigError(f"{sub}: null not allowed")
            kw[f.name] = None
        elif is_dataclass(tp):
            kw[f.name] = from_plain(tp, v, sub)
        elif isinstance(getattr(defaults, f.name), tuple) and isinstance(v, list):
            kw[f.name] = tuple(v)
        else:
            kw[f.name] = _check_scalar(tp, v, sub)
    try:
        obj = cls(**kw)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {e}") from e
    return obj


def _check_scalar(tp, v, path):
    if tp is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    if tp is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        return float(v)
    if tp is str and not isinstance(v, str):
        raise ConfigError(f"{path}: expected a string, got {v!r}")
    if tp is bool and not isinstance(v, bool):
        raise ConfigError(f"{path}: expected true/false, got {v!r}")
    if tp in (list, tuple) and not isinstance(v, list):
        raise ConfigError(f"{path}: expected a list, got {v!r}")
    if tp is dict and not isinstance(v, dict):
        raise ConfigError(f"{path}: expected an object, got {v!r}")
    return v


def to_plain(obj):
    """JSON-ready nested value; tuples become lists."""
    if is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


# --------------------------------------------------------------------------
# experiment config
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str
    sections: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KIND_SECTIONS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; "
                              f"expected one of {sorted(KIND_SECTIONS)}")
        allowed = KIND_SECTIONS[self.kind]
        extra = sorted(set(self.sections) - set(allowed))
        if extra:
            raise ConfigError(f"sections {extra} do not apply to kind {self.kind!r}")
        for name in allowed:
            if name not in self.sections:
                make = _DEFAULT_DATA.get(self.kind) if name == "data" else None
                self.sections[name] = make() if make else SECTION_TYPES[name]()

    def __getitem__(self, name):
        return self.sections[name]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if "kind" not in raw:
            raise ConfigError("config needs a 'kind'")
        kind = raw["kind"]
        if kind not in KIND_SECTIONS:
            raise ConfigError(f"unknown experiment kind {kind!r}")
        allowed = set(KIND_SECTIONS[kind])
        unknown = sorted(set(raw) - allowed - {"kind", "seed", "out"})
        if unknown:
            raise ConfigError(f"unknown keys {unknown} for kind {kind!r}")
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        out = raw.get("out", "out")
        if not isinstance(out, str):
            raise ConfigError("out must be a string")
        sections = {k: from_plain(SECTION_TYPES[k], raw[k], k) for k in KIND_SECTIONS[kind] if k in raw}
        return cls(kind, sections, out, seed)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_json(f.read())

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed, "out": self.out}
        for name in KIND_SECTIONS[self.kind]:
            d[name] = to_plain(self.sections[name])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed), sections=dict(self.sections))

    def resolved(self, name: str):
        """Section ``name`` with every ``seed`` field and ``seeds`` list shifted by the master seed."""
        return _shift_seeds(self.sections[name], self.seed)


def _shift_seeds(obj, offset: int):
    if not is_dataclass(obj):
        return obj
    kw = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name == "seed" and isinstance(v, int):
            kw[f.name] = v + offset
        elif f.name == "seeds" and isinstance(v, (list, tuple)):
            kw[f.name] = type(v)(int(s) + offset for s in v)
        elif is_dataclass(v):
            kw[f.name] = _shift_seeds(v, offset)
    return dataclasses.replace(obj, **kw) if kw else obj


def schema() -> dict:
    """Field names and defaults of every section, for documentation."""
    return {name: to_plain(cls()) for name, cls in SECTION_TYPES.items()}


__all__ = ["ConfigError", "ExperimentConfig", "SECTION_TYPES", "KIND_SECTIONS", "from_plain",
           "to_plain", "schema"]
