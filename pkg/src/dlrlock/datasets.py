"""Dataset loaders: MNIST IDX files, raw byte corpora and synthetic Gaussian blobs."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import Rng

IDX_IMAGES = 2051
IDX_LABELS = 2049


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ArrayDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


@dataclass
class ByteCorpus:
    train: np.ndarray
    heldout: np.ndarray
    digest: str

    def __len__(self):
        return len(self.train) + len(self.heldout)


def parse_idx(data: bytes, expect: int | None = None) -> np.ndarray:
    """Parse one IDX buffer. Images come back as float64 in [0, 1], flattened per item."""
    if len(data) < 8:
        raise FormatError("truncated IDX header", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expect is not None and magic != expect):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    if magic == IDX_IMAGES:
        if len(data) < 16:
            raise FormatError("truncated IDX image header", len(data))
        n, rows, cols = struct.unpack(">III", data[4:16])
        need = 16 + n * rows * cols
        if len(data) < need:
            raise FormatError(f"truncated IDX image payload, need {need} bytes", len(data))
        px = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
        return px.reshape(n, rows * cols).astype(np.float64) / 255.0
    (n,) = struct.unpack(">I", data[4:8])
    if len(data) < 8 + n:
        raise FormatError(f"truncated IDX label payload, need {8 + n} bytes", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def read_idx(path, expect: int | None = None) -> np.ndarray:
    return parse_idx(Path(path).read_bytes(), expect)


def builtin_corpus_path(name: str = "corpus.txt") -> Path:
    return Path(str(resources.files("dlrlock") / "corpora" / name))


def byte_corpus(path=None, heldout_frac: float = 0.1) -> ByteCorpus:
    """Bytes as tokens 0..255; the last ``heldout_frac`` of the file is held out."""
    if path is None or str(path).startswith("builtin:"):
        name = "corpus.txt" if path is None else str(path).split(":", 1)[1]
        path = builtin_corpus_path(name)
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"empty corpus {path}")
    toks = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_held = int(round(len(toks) * heldout_frac))
    cut = len(toks) - n_held
    return ByteCorpus(toks[:cut], toks[cut:], hashlib.sha256(raw).hexdigest()[:16])


def synthetic_blobs(classes: int = 10, dim: int = 784, n_train: int = 2000, n_test: int = 500,
                    seed: int = 0, spread: float = 1.0, separation: float = 0.1) -> ArrayDataset:
    """Isotropic Gaussian clusters around random class centers, deterministic per seed."""
    rng = Rng(seed, "blobs")
    centers = rng.spawn("centers").normal((classes, dim), 0.0, separation)

    def draw(n, tag):
        r = rng.spawn(tag)
        y = r.integers(classes, (n,))
        x = centers[y] + r.normal((n, dim), 0.0, spread)
        return x, y

    xt, yt = draw(n_train, "train")
    xs, ys = draw(n_test, "test")
    return ArrayDataset(xt, yt, xs, ys)


def load_dataset(spec: dict):
    """Dispatch on ``spec["kind"]``: ``mnist_idx``, ``byte_corpus`` or ``synthetic_blobs``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "mnist_idx":
        return ArrayDataset(read_idx(spec["train_images"], IDX_IMAGES),
                            read_idx(spec["train_labels"], IDX_LABELS),
                            read_idx(spec["test_images"], IDX_IMAGES),
                            read_idx(spec["test_labels"], IDX_LABELS))
    if kind == "byte_corpus":
        return byte_corpus(spec.get("path"), spec.get("heldout_frac", 0.1))
    if kind == "synthetic_blobs":
        return synthetic_blobs(**spec)
    raise ValueError(f"unknown dataset kind {kind!r}")


def mnist_or_blobs(spec: dict | None, seed: int = 0) -> ArrayDataset:
    """MNIST when all four IDX paths exist, otherwise the synthetic stand-in of the same shape."""
    if spec and all(Path(spec.get(k, "")).is_file() for k in
                    ("train_images", "train_labels", "test_images", "test_labels")):
        return load_dataset({"kind": "mnist_idx", **spec})
    return synthetic_blobs(seed=seed)


def token_windows(tokens: np.ndarray, batch: int, seq_len: int, rng: Rng) -> np.ndarray:
    """``batch`` random windows of ``seq_len + 1`` tokens (inputs plus next-token targets)."""
    if len(tokens) < seq_len + 1:
        raise ValueError("corpus shorter than one window")
    starts = rng.integers(len(tokens) - seq_len, (batch,))
    return np.stack([tokens[s:s + seq_len + 1] for s in starts])


def sequential_windows(tokens: np.ndarray, seq_len: int):
    """Non-overlapping chunks covering ``tokens`` (the last one may be shorter)."""
    return [tokens[i:i + seq_len] for i in range(0, len(tokens), seq_len)]
