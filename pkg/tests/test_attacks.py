import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlrlock import attacks as at
from dlrlock import autograd as ag
from dlrlock import blocks as bl
from dlrlock.datasets import synthetic_blobs
from dlrlock.tensor import PreconditionError, Rng, svd_small

from conftest import fd_grad, rel_err

EPS = np.finfo(np.float64).eps


# ---- symmetry transforms --------------------------------------------------------------

def _mlp(seed=0, n_in=12, hidden=8, n_out=4):
    return at.init_mlp(n_in, hidden, n_out, seed)


def test_scale_reparam_identity_and_errors():
    W1, W2 = Rng(0).normal((4, 3)), Rng(1).normal((2, 4))
    a, b = at.scale_reparam(W1, W2, 1.0)
    assert np.array_equal(a, W1) and np.array_equal(b, W2)
    for bad in (0.0, -2.0):
        with pytest.raises(ValueError):
            at.scale_reparam(W1, W2, bad)


def test_scale_reparam_preserves_relu_mlp():
    th = _mlp()
    x = Rng(5).normal((50, 12))
    f0 = at.mlp_logits(th, x)
    f1 = at.mlp_logits(at.scale_mlp(th, 100.0), x)
    assert np.linalg.norm(f1 - f0) / np.linalg.norm(f0) < 1e-10


def test_scale_reparam_distance_grows_with_a():
    th = _mlp()
    flat = lambda t: np.concatenate([t[k].ravel() for k in at.MLP_KEYS])
    dist = [np.sum((flat(at.scale_mlp(th, a)) - flat(th)) ** 2) for a in (2.0, 10.0, 100.0)]
    assert dist[0] < dist[1] < dist[2]


def test_insert_invertible_examples():
    r = Rng(2)
    W1, W2 = r.normal((5, 7)), r.normal((3, 5))
    a, b = at.insert_invertible(W1, W2, np.eye(5))
    assert np.allclose(a, W2, rtol=0, atol=1e-15) and np.array_equal(b, W1)
    A = at.random_invertible(5, r.spawn("A"), 1e3)
    W2a, W1a = at.insert_invertible(W1, W2, A)
    assert np.linalg.norm(W2a @ W1a - W2 @ W1) / np.linalg.norm(W2 @ W1) < 1e-9
    s = np.array([2.0, 3.0, 0.5, 4.0, 1.5])
    W2d, W1d = at.insert_invertible(W1, W2, np.diag(s))
    assert np.allclose(W1d, s[:, None] * W1) and np.allclose(W2d, W2 / s[None, :])


def test_insert_invertible_rejects_singular():
    A = np.diag([1.0, 1.0, 1e-13])
    with pytest.raises(PreconditionError):
        at.insert_invertible(np.eye(3), np.eye(3), A)
    with pytest.raises(ValueError):
        at.insert_invertible(np.eye(3), np.eye(3), np.ones((3, 2)))


def test_symmetry_ops_preserve_argmax():
    data = synthetic_blobs(n_train=200, n_test=300, seed=1)
    th, _ = at.train_mlp(data, hidden=32, steps=50)
    base = np.argmax(at.mlp_logits(th, data.x_test), axis=1)
    for a in (0.01, 3.0, 100.0):
        assert np.array_equal(np.argmax(at.mlp_logits(at.scale_mlp(th, a), data.x_test), axis=1), base)
    A = at.random_invertible(32, Rng(4), 1e3)
    W2a, W1a = at.insert_invertible(th["W1"], th["W2"], A)
    # an inserted map only commutes with a linear hidden layer, so compare the linear read-out
    lin = data.x_test @ (W2a @ W1a).T
    assert np.array_equal(np.argmax(lin, axis=1), np.argmax(data.x_test @ (th["W2"] @ th["W1"]).T, axis=1))


def test_svd_rebalance_examples():
    u, v = at.svd_rebalance(np.diag([4.0, 1.0]), np.eye(2))
    assert np.allclose(svd_small(u)[1], [2.0, 1.0]) and np.allclose(svd_small(v)[1], [2.0, 1.0])
    u, v = at.svd_rebalance(np.eye(3), np.eye(3))
    assert np.allclose(u.T @ u, np.eye(3)) and np.allclose(v @ v.T, np.eye(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(0, 1000))
def test_svd_rebalance_factors_share_spectrum(n, seed):
    r = Rng(seed)
    W1, W2 = r.normal((n, n + 2)), r.normal((n + 1, n))
    u, v = at.svd_rebalance(W2, W1)
    su, sv = svd_small(u)[1], svd_small(v)[1]
    sp = svd_small(W2 @ W1)[1][:n]
    assert np.allclose(su, np.sqrt(sp), rtol=1e-9, atol=1e-12)
    assert np.allclose(sv, np.sqrt(sp), rtol=1e-9, atol=1e-12)
    assert np.linalg.norm(u @ v - W2 @ W1) <= 1e-10 * np.linalg.norm(W2 @ W1)


def _rebalance_after_insertions(n_ins=10, cond=1e6, seed=0):
    r = Rng(seed, "rebalance_test")
    W1, W2 = r.normal((16, 20)), r.normal((5, 16))
    ref = at.svd_rebalance(W2, W1)
    out = []
    for i in range(n_ins):
        A = at.random_invertible(16, r.spawn("ins", i), cond)
        W2a, W1a = at.insert_invertible(W1, W2, A)
        out.append((np.linalg.cond(A), at.svd_rebalance(W2a, W1a)))
    return ref, out


def test_svd_rebalance_erases_insertions_up_to_rounding():
    (u0, v0), out = _rebalance_after_insertions()
    for cond, (u, v) in out:
        # forward error of the product and its SVD scales with the inserted condition number
        tol = 50 * cond * EPS
        assert np.abs(u - u0).max() <= tol * np.abs(u0).max()
        assert np.abs(v - v0).max() <= tol * np.abs(v0).max()


@pytest.mark.xfail(strict=True, reason="bit-identical canonicalization is not achievable in "
                                       "floating point; see the ledger")
def test_svd_rebalance_bit_identical_after_insertions():
    (u0, v0), out = _rebalance_after_insertions()
    assert all(np.array_equal(u, u0) and np.array_equal(v, v0) for _, (u, v) in out)


# ---- penalty sweep ----------------------------------------------------------------------

def _problem(scope="all", seed=0):
    th = _mlp(seed)
    x = Rng(seed, "px").normal((6, 12))
    return th, at.PenaltyProblem(th, x, at.scope_masks(th, scope, seed))


def _ce_hessian_trace(th, x, masks):
    """Trace of the mean cross-entropy Hessian (labels fixed at the argmax) by finite differences."""
    keys = at.MLP_KEYS
    shapes = [th[k].shape for k in keys]
    sizes = [th[k].size for k in keys]
    flat0 = np.concatenate([th[k].ravel() for k in keys])
    mflat = np.concatenate([masks[k].ravel() for k in keys])

    def unflat(v):
        out, o = {}, 0
        for k, s, n in zip(keys, shapes, sizes):
            out[k] = v[o:o + n].reshape(s)
            o += n
        return out

    def ce_rows(v):
        z = at.mlp_logits(unflat(v), x)
        z = z - z.max(axis=1, keepdims=True)
        return -z[np.arange(len(x)), y] + np.log(np.exp(z).sum(axis=1))

    y = np.argmax(at.mlp_logits(th, x), axis=1)
    h = 1e-4
    f0 = ce_rows(flat0)
    tr = np.zeros(len(x))
    for i in np.nonzero(mflat)[0]:
        e = np.zeros_like(flat0)
        e[i] = h
        tr += (ce_rows(flat0 + e) - 2 * f0 + ce_rows(flat0 - e)) / (h * h)
    return tr


@pytest.mark.parametrize("scope", ["all", "first_layer", "random_50pct"])
def test_trace_formula_matches_finite_difference_hessian(scope):
    th, prob = _problem(scope)
    fd = _ce_hessian_trace(th, prob.x, prob.masks)
    assert rel_err(prob.trace_values(th), fd) < 1e-4


def test_hutchinson_objective_is_unbiased():
    th, prob = _problem()
    t = ag.Tape("inference")
    nodes = {k: t.constant(v) for k, v in th.items()}
    _, _, om_exact = prob.objective(t, nodes, 1.0, "hessian_trace", "exact")
    t = ag.Tape("inference")
    nodes = {k: t.constant(v) for k, v in th.items()}
    _, _, om_h = prob.objective(t, nodes, 1.0, "hessian_trace", "hutchinson", probes=4000,
                                rng=Rng(0, "probe"))
    assert float(om_h.value) == pytest.approx(float(om_exact.value), rel=0.05)
    assert float(om_exact.value) == pytest.approx(1.0, abs=1e-12)  # normalized at theta0


@pytest.mark.parametrize("kind", ["delta_norm_sq", "hessian_trace"])
def test_penalty_objective_gradient_fd(kind):
    th, prob = _problem()
    th = {k: v + Rng(9, k).normal(v.shape, 0.0, 0.05) for k, v in th.items()}

    def value(w1):
        t = ag.Tape("inference")
        nodes = {k: t.constant(w1 if k == "W1" else th[k]) for k in th}
        return float(prob.objective(t, nodes, 0.7, kind, "exact")[0].value)
    t = ag.Tape()
    params = {k: ag.Param(k, v) for k, v in th.items()}
    nodes = {k: t.param(p) for k, p in params.items()}
    grads = t.backward(prob.objective(t, nodes, 0.7, kind, "exact")[0])
    assert rel_err(grads["W1"], fd_grad(value, th["W1"].copy())) < 1e-5


def test_scope_masks_deterministic_and_sized():
    th = at.init_mlp(seed=0)
    m1 = at.scope_masks(th, "random_10pct", seed=3)
    m2 = at.scope_masks(th, "random_10pct", seed=3)
    assert all(np.array_equal(m1[k], m2[k]) for k in th)
    frac = sum(m1[k].sum() for k in th) / sum(th[k].size for k in th)
    assert frac == pytest.approx(0.1, abs=0.01)
    fl = at.scope_masks(th, "first_layer")
    assert fl["W1"].all() and not fl["W2"].any()
    with pytest.raises(ValueError):
        at.scope_masks(th, "nope")


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        at.PenaltySweepConfig(lambdas=[0.0]).validate()
    with pytest.raises(ValueError):
        at.PenaltySweepConfig(scope="half").validate()
    assert len(at.PenaltySweepConfig().lambdas) == 29


def _small_sweep(**kw):
    data = synthetic_blobs(n_train=300, n_test=50, dim=20, seed=0)
    th, acc = at.train_mlp(data, hidden=16, steps=60)
    cfg = at.PenaltySweepConfig(**{"lambdas": [1e-12, 1.0], "lrs": [1e-2], "steps": 15,
                                   "n_samples": 32, **kw})
    return at.penalty_lock_sweep(th, data, cfg, 1, acc)


def test_sweep_tiny_lambda_stays_put_and_reference_exact():
    res = _small_sweep()
    end = res.trajectories[0].endpoint
    assert end["rel_error_geomean"] < 1e-6
    ref = next(p for p in res.symmetry if p["a"] == 10.0)
    assert ref["rel_error_geomean"] <= 1e-8
    assert [p["a"] for p in res.symmetry] == [2.0, 5.0, 10.0, 100.0]


def test_sweep_is_deterministic():
    a = _small_sweep(omega_kind="hessian_trace")
    b = _small_sweep(omega_kind="hessian_trace")
    assert at.sweep_manifest_json(a) == at.sweep_manifest_json(b)
    for x, y in zip(a.trajectories, b.trajectories):
        assert np.array_equal(x.get("rel_error_geomean"), y.get("rel_error_geomean"))
        assert np.array_equal(x.get("omega_rel"), y.get("omega_rel"))


def test_region_check_reports_fields():
    check = at.sweep_region_check(_small_sweep())
    assert {"ref_error_ok", "ref_dominates", "corner_empty", "n_in_corner"} <= set(check)


# ---- transformer attacks -------------------------------------------------------------------

def _tiny_locked(seed=0, L=3):
    m = bl.init_transformer(seed=seed, d=16, n_layers=2, n_heads=2, d_ff=32, n_max=32)
    for l, layer in enumerate(m.layers):
        net = bl.init_dlrnet(16, 2, L, Rng(seed, "dlr", l), f"layer{l}.ffn")
        for dl in net.layers:
            dl.alpha.value = np.array(0.4)
        layer.ffn = net
    return m


def _toks(n=2000):
    return Rng(0, "toks").integers(256, (n,))


def test_finetune_checkpointing_same_losses_lower_peak():
    m = _tiny_locked(L=9)
    a = at.finetune_attack(m, _toks(), 1e-3, 4, None, batch_size=2, seq_len=16)
    b = at.finetune_attack(m, _toks(), 1e-3, 4, 3, batch_size=2, seq_len=16)
    assert np.array_equal(a.get("loss"), b.get("loss"))
    assert b.get("peak_elements")[0] < a.get("peak_elements")[0]
    for k in ("forward_s", "backward_s", "optimizer_s"):
        assert np.all(a.get(k) >= 0)
    # the source model is not modified
    assert float(m.layers[0].ffn.layers[0].alpha.value) == 0.4


def test_finetune_simulated_oom_halves_batch():
    m = _tiny_locked()
    full = at.finetune_attack(m, _toks(), 1e-3, 1, None, batch_size=4, seq_len=16)
    budget = int(full.get("peak_elements")[0] * 0.75)
    rec = at.finetune_attack(m, _toks(), 1e-3, 2, None, batch_size=4, seq_len=16, element_budget=budget)
    assert rec.meta["must_resort"] and rec.meta["batch_size"] == 2
    assert rec.meta["oom_retries"][0]["batch"] == 4


def test_partial_freeze_memory_and_stop_grad_bias():
    m = _tiny_locked()
    rec = at.partial_update_attack(m, _toks(), "freeze_dlr", 1e-3, 2, batch_size=2, seq_len=16)
    per_layer = [v for k, v in rec.meta["dlr_layer_elements"].items()]
    assert per_layer and all(v == 16 + 2 for v in per_layer)
    assert rec.meta["bias_ratio"] > 0
    with pytest.raises(ValueError):
        at.partial_update_attack(m, _toks(), "other", 1e-3, 1)


def test_stop_grad_block_input_equals_output_gradient():
    m = _tiny_locked()
    w = _toks()[:17][None, :]
    g_in, g_out = at.block_input_output_grads(m, w, 0, stop_branch=True)
    assert np.array_equal(g_in, g_out)
    g_in2, g_out2 = at.block_input_output_grads(m, w, 0, stop_branch=False)
    assert not np.allclose(g_in2, g_out2)


def test_lora_attack_trains_adapters_only():
    m = _tiny_locked()
    rec = at.lora_attack(m, _toks(), ["layer0.attn.wo", "layer1.attn.wo"], 2, 1e-3, 2,
                         batch_size=2, seq_len=16)
    assert rec.meta["trainable"] == 2 * (2 * 16 + 16 * 2)
    assert all(v == 16 + 2 for v in rec.meta["dlr_layer_elements"].values())


def test_reverse_distill_restores_swiglu_memory():
    m = _tiny_locked()
    cfg = at.DistillConfig(steps=5, batch_size=8, seq_len=16)
    rev, report = at.reverse_distill(m, _toks(400), 32, cfg, _toks(200))
    assert all(layer.ffn.kind == "swiglu" for layer in rev.layers)
    assert report["total_steps"] == 10 and report["total_wallclock_s"] > 0
    w = _toks()[:2][None, :]
    mem = at.dlr_layer_memory(rev, w)
    assert mem and all(v == 3 * 32 + 2 * 16 for v in mem.values())
    with pytest.raises(PreconditionError):
        at.reverse_distill(rev, _toks(400), 32, cfg)
