"""Dense float64 matrices, a splittable counter-based RNG, and small Jacobi decompositions.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import BinaryIO

import numpy as np

__all__ = [
    "ShapeError",
    "ConvergenceError",
    "PreconditionError",
    "as_matrix",
    "matmul",
    "svd_small",
    "sym_eig_small",
    "power_iteration_norm",
    "Rng",
    "stream_id",
    "rng_fill",
    "write_matrix",
    "read_matrix",
    "matrix_to_bytes",
    "matrix_from_bytes",
]


class ShapeError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


# --------------------------------------------------------------------------
# Jacobi decompositions
# --------------------------------------------------------------------------

def _round_robin(n: int):
    """Yield rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            arr = np.array(pairs, dtype=np.intp)
            yield arr[:, 0], arr[:, 1]
        players = [players[0], players[-1], *players[1:-1]]


def _fix_signs(U: np.ndarray, Vt: np.ndarray):
    # largest-magnitude entry of each U column made positive
    if U.size == 0:
        return U, Vt
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s, Vt * s[:, None]


def _complete_basis(U: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace columns of U where ``valid`` is False by orthonormal completions."""
    m, k = U.shape
    U = U.copy()
    basis = [U[:, j] for j in range(k) if valid[j]]
    e = 0
    for j in range(k):
        if valid[j]:
            continue
        while e < m:
            v = np.zeros(m)
            v[e] = 1.0
            e += 1
            for b in basis:
                v -= (b @ v) * b
            for b in basis:
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                U[:, j] = v / nv
                basis.append(U[:, j])
                break
    return U


def svd_small(m, tol: float = 1e-12, max_sweeps: int = 60):
    """Thin SVD by one-sided (Hestenes) Jacobi with parallel round-robin ordering.

    Returns ``(U, S, Vt)`` with ``S`` descending and non-negative, ``U`` of shape
    ``(rows, k)`` and ``Vt`` of shape ``(k, cols)``, ``k = min(rows, cols)``.
    Column signs follow the convention that the largest-magnitude entry of each
    column of ``U`` is positive. Rotations stop once every column pair satisfies
    ``|a_p . a_q| <= tol * ||a_p|| ||a_q||``.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if min(rows, cols) > 512:
        raise PreconditionError("svd_small is limited to min(rows, cols) <= 512")
    if rows < cols:
        U, S, Vt = svd_small(a.T, tol=tol, max_sweeps=max_sweeps)
        U, Vt = _fix_signs(Vt.T.copy(), U.T.copy())
        return U, S, Vt
    n = cols
    A = a.copy()
    V = np.eye(n)
    rounds = list(_round_robin(n))
    # columns below this squared norm are numerically zero and never rotated
    tiny = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    converged = n < 2
    for _ in range(max_sweeps):
        if converged:
            break
        rotated = False
        for P, Q in rounds:
            ap, aq = A[:, P], A[:, Q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            act = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > tiny) & (beta > tiny)
            if not act.any():
                continue
            rotated = True
            P, Q = P[act], Q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = A[:, P], A[:, Q]
            A[:, P] = c * ap - s * aq
            A[:, Q] = s * ap + c * aq
            vp, vq = V[:, P], V[:, Q]
            V[:, P] = c * vp - s * vq
            V[:, Q] = s * vp + c * vq
        if not rotated:
            converged = True
    if not converged:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")
    S = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    A = A[:, order]
    V = V[:, order]
    scale = S[0] if S.size and S[0] > 0 else 1.0
    valid = S > 1e-15 * scale
    U = np.zeros_like(A)
    U[:, valid] = A[:, valid] / S[valid]
    if not valid.all():
        U = _complete_basis(U, valid)
        S = np.where(valid, S, 0.0)
    U, Vt = _fix_signs(U, V.T.copy())
    return U, S, Vt


def sym_eig_small(m, tol: float = 1e-14, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, descending, by parallel cyclic Jacobi."""
    A = as_matrix(m).copy()
    n = A.shape[0]
    if A.shape != (n, n):
        raise PreconditionError("sym_eig_small needs a square matrix")
    scale = np.abs(A).max() if A.size else 0.0
    if scale == 0.0:
        return np.zeros(n)
    if np.abs(A - A.T).max() > 1e-9 * scale:
        raise PreconditionError("matrix is not symmetric within 1e-9 relative")
    A = 0.5 * (A + A.T)
    rounds = list(_round_robin(n))
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A[offmask])
        if off <= tol * np.linalg.norm(A):
            break
        for P, Q in rounds:
            apq = A[P, Q]
            act = np.abs(apq) > 0.0
            if not act.any():
                continue
            P, Q, apq = P[act], Q[act], apq[act]
            app, aqq = A[P, P], A[Q, Q]
            theta = (aqq - app) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(1.0, theta))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # disjoint rotations commute; apply as one orthogonal J
            ap, aq = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = c * ap - s * aq
            A[:, Q] = s * ap + c * aq
            ap, aq = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * ap - s[:, None] * aq
            A[Q, :] = s[:, None] * ap + c[:, None] * aq
    else:
        raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    return np.sort(np.diag(A))[::-1].copy()


def power_iteration_norm(m, iters: int = 5000, seed: int = 0) -> float:
    """Spectral norm via power iteration on m^T m."""
    A = as_matrix(m)
    v = Rng(seed, "power").normal((A.shape[1], 1))
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - est) <= 1e-15 * new:
            est = new
            break
        est = new
    return float(est)


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_id(master_seed: int, *tags) -> int:
    """Deterministic 64-bit stream key from a master seed and purpose tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for t in tags:
        h.update(b"\x1f")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based SplitMix64 stream.

    Output ``i`` of the stream is ``mix64(key + (i + 1) * GAMMA)`` where the key is
    derived from ``(seed, *tags)``. Integer outputs are identical on every
    platform; normals use Box-Muller pairs ``(r cos t, r sin t)`` interleaved.
    """

    def __init__(self, seed: int, *tags):
        self.seed = int(seed)
        self.tags = tuple(tags)
        self.key = np.uint64(stream_id(seed, *tags))
        self.counter = 0

    def spawn(self, *tags) -> "Rng":
        return Rng(self.seed, *self.tags, *tags)

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.key + idx * _GAMMA)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std <= 0:
            raise ValueError("std must be positive")
        n = int(np.prod(shape))
        k = (n + 1) // 2
        u = self.uniform((2 * k,))
        r = np.sqrt(-2.0 * np.log(1.0 - u[:k]))
        t = 2.0 * np.pi * u[k:]
        z = np.empty(2 * k)
        z[0::2] = r * np.cos(t)
        z[1::2] = r * np.sin(t)
        return (mean + std * z[:n]).reshape(shape)

    def rademacher(self, shape=()) -> np.ndarray:
        # all 64 bits of each word are used, least significant first
        n = int(np.prod(shape))
        words = self.raw((n + 63) // 64).astype("<u8")
        bits = np.unpackbits(words.view(np.uint8), bitorder="little")[:n].astype(np.float64)
        return (2.0 * bits - 1.0).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


def rng_fill(rng: Rng, rows: int, cols: int, dist: str = "normal", mean: float = 0.0,
             std: float = 1.0, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    if dist == "normal":
        return rng.normal((rows, cols), mean, std)
    if dist == "rademacher":
        return rng.rademacher((rows, cols))
    if dist == "uniform":
        return rng.uniform((rows, cols), low, high)
    raise ValueError(f"unknown distribution {dist!r}")


# --------------------------------------------------------------------------
# Binary matrix format: b"DLRM", u32 version, u64 rows, u64 cols, f64 LE data
# --------------------------------------------------------------------------

MATRIX_MAGIC = b"DLRM"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def write_matrix(f: BinaryIO, m) -> None:
    a = as_matrix(m)
    f.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, a.shape[0], a.shape[1]))
    f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated matrix header")
    magic, version, rows, cols = _HEADER.unpack(head)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic {magic!r}")
    if version != MATRIX_VERSION:
        raise ValueError(f"unsupported matrix version {version}")
    nbytes = rows * cols * 8
    body = f.read(nbytes)
    if len(body) != nbytes:
        raise ValueError("truncated matrix body")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def matrix_to_bytes(m) -> bytes:
    buf = io.BytesIO()
    write_matrix(buf, m)
    return buf.getvalue()


def matrix_from_bytes(data: bytes) -> np.ndarray:
    return read_matrix(io.BytesIO(data))
