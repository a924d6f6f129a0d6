"""Closed-form memory and cost predictions, Hessian tools for the scaled matrix
factorization problem, the Hutchinson trace estimator, and the factorization
training experiment.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .blocks import dlrnet_node, init_dlrnet, init_swiglu, ffn_block_node
from .parallel import run_cells
from .records import TrajectoryRecord, first_reach
from .tensor import PreconditionError, Rng, svd_small, sym_eig_small

UNREACHED = math.inf


# --------------------------------------------------------------------------
# activation memory
# --------------------------------------------------------------------------

@dataclass
class MemoryPrediction:
    d: int
    r: int
    L: int
    mode: str
    per_layer_full: int
    per_layer_frozen: int
    n_blocks: int = 1
    swiglu_per_layer: int | None = None

    @property
    def per_layer(self) -> int:
        return self.per_layer_full if self.mode == "full" else self.per_layer_frozen

    @property
    def total(self) -> int:
        return self.per_layer * self.L

    @property
    def total_all_blocks(self) -> int:
        return self.total * self.n_blocks


def swiglu_activation_memory(d: int, d_ff: int) -> int:
    """Per-token elements a trained SwiGLU sub-block keeps: norm input, gate, up, gated product, normed input."""
    return 3 * d_ff + 2 * d


def predicted_activation_memory(d: int, r: int, L: int, mode: str = "full", d_ff: int | None = None,
                                n_blocks: int = 1) -> MemoryPrediction:
    """Per-token saved elements of a DLR net: ``3d + 2r`` per layer when its weights
    train, ``d + r`` when they are frozen but gradients still flow through."""
    if mode not in ("full", "frozen"):
        raise ValueError("mode must be 'full' or 'frozen'")
    if min(d, r, L) < 1:
        raise ValueError("d, r and L must be positive")
    return MemoryPrediction(d, r, L, mode, 3 * d + 2 * r, d + r, n_blocks,
                            None if d_ff is None else swiglu_activation_memory(d, d_ff))


def measure_activation_memory(d: int, r: int, L: int, mode: str = "full", tokens: int = 1,
                              seed: int = 0, checkpoint_interval: int | None = None) -> dict:
    """Run one DLR-net forward on a recording tape and read the counters back.

    The input carries a gradient (as it does inside any network with trained
    layers upstream), so frozen layers still keep what the chain rule needs.
    Counts are per token.
    """
    p = init_dlrnet(d, r, L, Rng(seed, "memory"))
    x = Rng(seed, "memory_x").normal((tokens, d))
    tape = ag.Tape("train_full" if mode == "full" else "train_frozen")
    dlrnet_node(tape, tape.input(x, requires_grad=True), p, checkpoint_interval=checkpoint_interval)
    per_layer = [tape.scope_total.get(f"dlr.{i}", 0) // tokens for i in range(L)]
    return {"per_layer": per_layer, "total": tape.saved_elements // tokens,
            "peak": tape.peak_elements // tokens}


def measure_swiglu_memory(d: int, d_ff: int, mode: str = "full", seed: int = 0) -> int:
    p = init_swiglu(d, d_ff, Rng(seed, "memory_swiglu"))
    tape = ag.Tape("train_full" if mode == "full" else "train_frozen")
    ffn_block_node(tape, tape.input(Rng(seed).normal((1, d)), requires_grad=True), p)
    return tape.saved_elements


def memory_report(configs, modes=("full", "frozen"), seed: int = 0) -> list[dict]:
    """Rows of (layer, mode, predicted_elements, measured_elements, peak_elements)."""
    rows = []
    for d, r, L in configs:
        for mode in modes:
            pred = predicted_activation_memory(d, r, L, mode)
            meas = measure_activation_memory(d, r, L, mode, seed=seed)
            for i, m in enumerate(meas["per_layer"]):
                rows.append({"config": f"d{d}_r{r}_L{L}", "layer": i, "mode": mode,
                             "predicted_elements": pred.per_layer, "measured_elements": m,
                             "peak_elements": meas["peak"]})
            rows.append({"config": f"d{d}_r{r}_L{L}", "layer": "total", "mode": mode,
                         "predicted_elements": pred.total, "measured_elements": meas["total"],
                         "peak_elements": meas["peak"]})
    return rows


def memory_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["config", "layer", "mode", "predicted_elements", "measured_elements", "peak_elements"]
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] for c in cols])
    return buf.getvalue()


def kappa_bound(d: int, r: int, L: int, d_ff: int, a_attn: float = 0.0) -> float:
    """Ratio of per-block training memory, DLR-locked over SwiGLU, with attention cost ``a_attn``."""
    if min(d, r, L, d_ff) <= 0 or a_attn < 0:
        raise ValueError("arguments must be positive")
    return (a_attn + d * L) / (a_attn + d_ff)


# --------------------------------------------------------------------------
# matrix factorization: loss, gradient, Hessian
# --------------------------------------------------------------------------

def vec(m: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(m).ravel(order="F")


def unvec(v: np.ndarray, shape) -> np.ndarray:
    return np.asarray(v).reshape(shape, order="F")


def matfac_loss_grad(W1, W2, M):
    """``||W1 W2 - M||_F^2`` and its gradients ``2 R W2^T`` and ``2 W1^T R``."""
    R = W1 @ W2 - M
    return float(np.sum(R * R)), 2.0 * R @ W2.T, 2.0 * W1.T @ R


def matfac_theta_fn(M, d: int):
    """Loss-with-gradient over ``theta = [vec(W1); vec(W2)]``."""
    n = d * d

    def f(theta):
        W1 = unvec(theta[:n], (d, d))
        W2 = unvec(theta[n:], (d, d))
        loss, g1, g2 = matfac_loss_grad(W1, W2, M)
        return loss, np.concatenate([vec(g1), vec(g2)])

    return f


def matfac_hessian_blocks(W1, W2):
    """Diagonal Hessian blocks w.r.t. ``vec(W1)`` and ``vec(W2)``."""
    d = W1.shape[0]
    eye = np.eye(d)
    return 2.0 * np.kron(W2 @ W2.T, eye), 2.0 * np.kron(eye, W1.T @ W1)


def _grad_only(loss_with_grad):
    def g(theta):
        out = loss_with_grad(theta)
        return np.asarray(out[1] if isinstance(out, tuple) else out, dtype=np.float64)
    return g


def numeric_hessian(loss_with_grad, theta, eps: float = 1e-3, symmetrize: bool = True,
                    return_defect: bool = False):
    """Hessian from five-point central differences of the analytic gradient.

    The stencil is exact for gradients that are cubic polynomials, which covers
    the factorization loss.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    if n > 512:
        raise ValueError("numeric_hessian limited to 512 parameters")
    grad = _grad_only(loss_with_grad)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        H[:, i] = (-grad(theta + 2 * e) + 8 * grad(theta + e) - 8 * grad(theta - e)
                   + grad(theta - 2 * e)) / (12 * eps)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite numeric Hessian entry")
    nrm = np.linalg.norm(H)
    defect = float(np.linalg.norm(H - H.T) / nrm) if nrm > 0 else 0.0
    if symmetrize:
        H = 0.5 * (H + H.T)
    return (H, defect) if return_defect else H


def numeric_hessian_from_loss(loss_fn, theta, eps: float = 1e-4) -> np.ndarray:
    """Second differences of the loss alone; an independent cross-check."""
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    def f(t):
        out = loss_fn(t)
        return float(out[0] if isinstance(out, tuple) else out)

    H = np.empty((n, n))
    f0 = f(theta)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = eps
        H[i, i] = (f(theta + ei) - 2 * f0 + f(theta - ei)) / eps ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = eps
            H[i, j] = H[j, i] = (f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej)
                                 + f(theta - ei - ej)) / (4 * eps ** 2)
    return H


def condition_number(H) -> float:
    """``max |lambda| / min |lambda|`` of a symmetric matrix (infinite when singular)."""
    ev = np.abs(sym_eig_small(H))
    lo = ev.min()
    return math.inf if lo == 0 else float(ev.max() / lo)


def _check_full_rank(W, name):
    s = svd_small(W)[1]
    if s[-1] <= 1e-10 * s[0]:
        raise PreconditionError(f"{name} is rank deficient (sigma_min {s[-1]:.3g})")
    return s


def condition_lower_bound(W1, W2, a: float) -> float:
    """``a^4 sigma_max(W2)^2 / sigma_min(W1)^2`` for the pair scaled to ``(W1/a, a W2)``."""
    s1 = _check_full_rank(np.asarray(W1, dtype=np.float64), "W1")
    s2 = _check_full_rank(np.asarray(W2, dtype=np.float64), "W2")
    return float(a ** 4 * s2[0] ** 2 / s1[-1] ** 2)


@dataclass
class HessianReport:
    a: float
    d: int
    H11: np.ndarray
    H22: np.ndarray
    H: np.ndarray
    eigenvalues: np.ndarray
    condition: float
    bound: float
    block_error: float
    symmetry_defect: float

    @property
    def psd(self) -> bool:
        return bool(self.eigenvalues.min() >= -1e-9 * abs(self.eigenvalues).max())

    @property
    def holds(self) -> bool:
        return self.condition >= self.bound


def hessian_report(W1, W2, M, a: float, eps: float = 1e-3) -> HessianReport:
    """Numeric and analytic Hessian of the factorization loss at ``(W1/a, a W2)``."""
    d = W1.shape[0]
    A, B = W1 / a, W2 * a
    H, defect = numeric_hessian(matfac_theta_fn(M, d), np.concatenate([vec(A), vec(B)]), eps,
                                return_defect=True)
    H11, H22 = matfac_hessian_blocks(A, B)
    n = d * d
    err = max(np.linalg.norm(H[:n, :n] - H11) / np.linalg.norm(H11),
              np.linalg.norm(H[n:, n:] - H22) / np.linalg.norm(H22))
    ev = sym_eig_small(H)
    ab = np.abs(ev)
    cond = math.inf if ab.min() == 0 else float(ab.max() / ab.min())
    return HessianReport(a, d, H11, H22, H, ev, cond, condition_lower_bound(W1, W2, a), float(err),
                         defect)


def conditioning_suite(n_pairs: int = 20, dims=(2, 3, 4), scales=(1.0, 10.0, 100.0), seed: int = 0,
                       target: str = "random") -> list[HessianReport]:
    """Reports for random full-rank pairs with entries N(0, 1/d).

    ``target="random"`` draws ``M`` from the same distribution;
    ``target="product"`` uses ``M = W1 W2 + N(0, 1e-4/d)``, a near-optimal point where the Hessian is
    dominated by its Gauss-Newton part.
    """
    out = []
    for k in range(n_pairs):
        d = dims[k % len(dims)]
        r = Rng(seed, "condition_pair", k)
        sd = 1.0 / math.sqrt(d)
        W1 = r.normal((d, d), 0.0, sd)
        W2 = r.normal((d, d), 0.0, sd)
        if target == "random":
            M = r.normal((d, d), 0.0, sd)
        elif target == "product":
            M = W1 @ W2 + r.normal((d, d), 0.0, 1e-2 * sd)
        else:
            raise ValueError(f"unknown target {target!r}")
        for a in scales:
            out.append(hessian_report(W1, W2, M, a))
    return out


# --------------------------------------------------------------------------
# Hutchinson
# --------------------------------------------------------------------------

def hvp_fd(loss_with_grad, theta, z, eps: float | None = None) -> np.ndarray:
    """``H z`` by central differences of the gradient, step ``sqrt(machine eps) (1 + ||theta||)``."""
    grad = _grad_only(loss_with_grad)
    theta = np.asarray(theta, dtype=np.float64)
    if eps is None:
        eps = math.sqrt(np.finfo(np.float64).eps) * (1.0 + float(np.linalg.norm(theta)))
    hv = (grad(theta + eps * z) - grad(theta - eps * z)) / (2.0 * eps)
    if not np.all(np.isfinite(hv)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return hv


def hutchinson_trace(loss_with_grad, theta, probes: int, rng: Rng, mask=None):
    """Mean of ``z^T H z`` over Rademacher probes; returns (estimate, standard error).

    With ``mask`` (0/1 per parameter) the probes are restricted to that subset,
    estimating the trace of the corresponding principal sub-block.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    vals = np.empty(probes)
    for i in range(probes):
        z = rng.rademacher(theta.shape)
        if mask is not None:
            z = z * mask
        vals[i] = float(z @ hvp_fd(loss_with_grad, theta, z))
    se = float(vals.std(ddof=1) / math.sqrt(probes)) if probes > 1 else math.inf
    return float(vals.mean()), se


# --------------------------------------------------------------------------
# factorization training experiment
# --------------------------------------------------------------------------

@dataclass
class MatfacConfig:
    d: int = 64
    a_values: tuple = (1.0, 100.0)
    optimizers: dict = field(default_factory=lambda: {"sgd": [1e-2, 1e-3, 1e-5],
                                                      "adam": [1e-2, 7e-3, 5e-3]})
    steps: dict = field(default_factory=lambda: {"sgd": 20000, "adam": 5000})
    seeds: tuple = (0, 1, 2, 3, 4)
    threshold_frac: float = 1e-3
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    log_every: int = 1

    def cells(self):
        for opt, lrs in self.optimizers.items():
            for lr in lrs:
                for a in self.a_values:
                    for s in self.seeds:
                        yield opt, float(lr), float(a), int(s)


def matfac_problem(d: int, seed: int):
    r = Rng(seed, "matfac")
    sd = 1.0 / math.sqrt(d)
    M = r.spawn("M").normal((d, d), 0.0, sd)
    W1 = r.spawn("W1").normal((d, d), 0.0, sd)
    W2 = r.spawn("W2").normal((d, d), 0.0, sd)
    return M, W1, W2


def matfac_run(cfg: MatfacConfig, opt: str, lr: float, a: float, seed: int) -> TrajectoryRecord:
    M, W1, W2 = matfac_problem(cfg.d, seed)
    A, B = W1 / a, W2 * a
    steps = cfg.steps[opt] if isinstance(cfg.steps, dict) else int(cfg.steps)
    state = ag.OptimizerState(kind="adam" if opt == "adam" else "sgd")
    pa, pb = ag.Param("W1", A), ag.Param("W2", B)
    rec = TrajectoryRecord(f"{opt}_lr{lr:g}_a{a:g}_s{seed}",
                           meta={"opt": opt, "lr": lr, "a": a, "seed": seed})
    mon = ag.DivergenceMonitor(cfg.divergence_factor, cfg.divergence_patience)
    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            loss, g1, g2 = matfac_loss_grad(pa.value, pb.value, M)
            if step % cfg.log_every == 0 or step == steps or not math.isfinite(loss):
                rec.log(step, loss=loss, grad_norm_w1=float(np.linalg.norm(g1)),
                        grad_norm_w2=float(np.linalg.norm(g2)),
                        wallclock_s=time.perf_counter() - t0)
            if mon.update(loss):
                rec.diverged = True
                break
            if step == steps:
                break
            ag.optimizer_step(state, (pa, pb), ag.GradStore(W1=g1, W2=g2), lr)
    l = rec.get("loss")
    rec.meta["initial_loss"] = float(l[0])
    rec.meta["final_loss"] = float(l[-1])
    hit = first_reach(l, cfg.threshold_frac * l[0])
    rec.meta["steps_to_threshold"] = None if hit is None else int(rec.series["step"][hit])
    return rec


def _matfac_cell(args):
    cfg, cell = args
    return matfac_run(cfg, *cell)


def matfac_experiment(cfg: MatfacConfig, jobs: int | None = 1) -> list[TrajectoryRecord]:
    return run_cells(_matfac_cell, [(cfg, c) for c in cfg.cells()], jobs)


def matfac_summary(records) -> dict:
    """Per (optimizer, lr, a): divergence count, median final loss and median steps-to-threshold."""
    groups: dict = {}
    for r in records:
        m = r.meta
        groups.setdefault((m["opt"], m["lr"], m["a"]), []).append(r)
    out = {}
    for (opt, lr, a), rs in sorted(groups.items()):
        fin = [x.meta["final_loss"] for x in rs if not x.diverged]
        hits = [x.meta["steps_to_threshold"] for x in rs]
        hits_num = [math.inf if h is None else h for h in hits]
        out[f"{opt}|{lr:g}|{a:g}"] = {
            "opt": opt, "lr": lr, "a": a, "n": len(rs),
            "diverged": sum(x.diverged for x in rs),
            "median_final_loss": float(np.median(fin)) if fin else math.nan,
            "median_steps_to_threshold": float(np.median(hits_num)),
            "reached": sum(h is not None for h in hits),
        }
    return out


def fig5_checks(summary: dict, cfg: MatfacConfig) -> dict:
    """The three qualitative claims about the scaled factorization runs."""
    a_hi, a_lo = max(cfg.a_values), min(cfg.a_values)
    sgd = sorted(cfg.optimizers["sgd"], reverse=True)
    get = lambda opt, lr, a: summary[f"{opt}|{lr:g}|{a:g}"]
    n = len(cfg.seeds)
    need = n - 1 if n > 1 else 1
    big_diverge = all(get("sgd", lr, a_hi)["diverged"] >= need for lr in sgd[:2])
    stable = [lr for lr in sgd if get("sgd", lr, a_hi)["diverged"] == 0]
    best_a1 = min(get("sgd", lr, a_lo)["median_final_loss"] for lr in sgd)
    plateau = None
    if stable:
        plateau = get("sgd", min(stable), a_hi)["median_final_loss"]
    plateau_ok = plateau is not None and plateau >= 10.0 * best_a1
    adam_ok = []
    for lr in cfg.optimizers["adam"]:
        hi, lo = get("adam", lr, a_hi), get("adam", lr, a_lo)
        adam_ok.append(hi["diverged"] == 0 and hi["reached"] == n and
                       hi["median_steps_to_threshold"] > lo["median_steps_to_threshold"])
    return {"sgd_large_lrs_diverge": big_diverge, "sgd_plateau_ratio":
            (plateau / best_a1) if plateau is not None and best_a1 > 0 else math.nan,
            "sgd_plateau_above": plateau_ok, "adam_slower_at_scale": all(adam_ok),
            "adam_per_lr": adam_ok}


# --------------------------------------------------------------------------
# empirical locking factor
# --------------------------------------------------------------------------

def kappa_ratios(baseline: TrajectoryRecord, locked: TrajectoryRecord, target_loss: float,
                 key: str = "eval_loss") -> dict:
    """Cost (wall-clock and tokens) for each run to first reach ``target_loss``, locked over baseline."""
    def reach(rec):
        vals = rec.get(key)
        ok = np.nonzero(np.isfinite(vals) & (vals <= target_loss))[0]
        if not ok.size:
            return None
        i = ok[0]
        return rec.get("wallclock_s")[i], rec.get("tokens")[i] if "tokens" in rec.series else np.nan
    b = reach(baseline)
    if b is None:
        raise ValueError("baseline never reaches the target loss; locking factor undefined")
    lk = reach(locked)
    if lk is None:
        return {"wallclock": UNREACHED, "tokens": UNREACHED, "unreached": True}
    return {"wallclock": float(lk[0] / b[0]) if b[0] > 0 else math.inf,
            "tokens": float(lk[1] / b[1]) if b[1] > 0 else math.inf, "unreached": False}


def common_target(baseline: TrajectoryRecord, locked: TrajectoryRecord, key: str = "eval_loss"):
    """Loosest loss both runs reach that neither starts at: the larger of the two best
    losses, provided it lies below both initial losses. ``None`` when no such target exists."""
    vb, vl = baseline.get(key), locked.get(key)
    target = float(max(np.nanmin(vb), np.nanmin(vl)))
    return target if target < min(float(vb[0]), float(vl[0])) else None


def empirical_kappa(baseline: TrajectoryRecord, locked: TrajectoryRecord, target_loss: float,
                    key: str = "eval_loss") -> float:
    """Wall-clock locking factor; ``UNREACHED`` (infinity) when the locked run never gets there."""
    return kappa_ratios(baseline, locked, target_loss, key)["wallclock"]
