import hashlib
import json
import math

import numpy as np
import pytest

from dlrlock import bench
from dlrlock import blocks as bl
from dlrlock.datasets import token_windows
from dlrlock.records import TrajectoryRecord
from dlrlock.tensor import Rng


def _model():
    return bl.init_transformer(seed=0, d=16, n_layers=2, n_heads=2, d_ff=32, n_max=32)


def _batch():
    return token_windows(Rng(0).integers(256, (500,)), 2, 16, Rng(1))


def test_inference_mode_has_no_backward_or_optimizer_time():
    rep = bench.time_step_split(_model(), _batch(), "inference", steps=3, warmup=1)
    assert np.all(rep.backward_s == 0) and np.all(rep.optimizer_s == 0)
    assert rep.backward_fraction == 0.0 and len(rep.forward_s) == 3


def test_training_report_invariants():
    rep = bench.time_step_split(_model(), _batch(), "train_full", steps=4, warmup=1)
    res = 1e-6
    assert np.all(rep.total_s >= rep.forward_s + rep.backward_s + rep.optimizer_s - res)
    assert 0.0 < rep.backward_fraction < 1.0
    s = rep.summary()
    assert {"forward_s", "backward_s", "optimizer_s", "total_s"} <= set(s)
    assert s["total_s"]["p50"] <= s["total_s"]["p95"]
    with pytest.raises(ValueError):
        bench.time_step_split(_model(), _batch(), "sideways")


def test_timing_leaves_model_untouched():
    m = _model()
    before = [p.value.copy() for p in m.params()]
    bench.time_step_split(m, _batch(), "train_full", steps=2, warmup=0, lr=1.0)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, m.params()))


def test_report_from_record():
    rec = TrajectoryRecord("x")
    for i in range(4):
        rec.log(i, forward_s=1.0, backward_s=2.0, optimizer_s=1.0)
    rep = bench.TimingReport.from_record(rec, skip=1)
    assert rep.backward_fraction == pytest.approx(0.75)
    assert rep.backward_forward_ratio == pytest.approx(3.0)
    assert len(rep.total_s) == 3


def test_svg_has_one_path_per_series():
    series = [(f"s{i}", np.arange(1, 6), np.arange(1, 6) * (i + 1.0)) for i in range(3)]
    svg = bench.svg_lines(series, "x", "y", "t<1>", logy=True)
    assert svg.count("<path") == 3
    assert svg.startswith("<svg") and 'version="1.1"' in svg and "t&lt;1&gt;" in svg


def test_stable_hash_ignores_timing_columns():
    a = "step,loss,wallclock_s\n0,1.5,0.1\n"
    b = "step,loss,wallclock_s\n0,1.5,0.9\n"
    c = "step,loss,wallclock_s\n0,1.6,0.1\n"
    assert bench.stable_hash(a) == bench.stable_hash(b) != bench.stable_hash(c)


def test_emit_artifacts_manifest(tmp_path):
    results = {"a.csv": "x,wallclock_s\n1,0.5\n", "b.json": {"v": float("inf")}, "c.bin": b"\x00\x01"}
    man = bench.emit_artifacts(results, tmp_path, "abc", 7)
    assert {f["name"] for f in man["files"]} == set(results)
    for f in man["files"]:
        data = (tmp_path / f["name"]).read_bytes()
        assert f["size"] == len(data) and f["sha256"] == hashlib.sha256(data).hexdigest()
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["seed"] == 7 and on_disk["config_hash"] == "abc" and on_disk["version"]
    csv_entry = next(f for f in man["files"] if f["name"] == "a.csv")
    assert csv_entry["nondeterministic_columns"] == ["wallclock_s"]


def test_rows_csv_formats():
    text = bench.rows_csv([{"a": 1, "b": True, "c": 0.1}])
    assert text == "a,b,c\n1,1,0.1\n"


@pytest.mark.slow
def test_locked_model_has_heavier_backward(toy_teacher, toy_lock, toy_corpus):
    # the locked model trains the way a memory-bound attacker would, with checkpointed segments
    w = token_windows(toy_corpus.train, 4, 64, Rng(0, "bench_test"))
    k = int(round(math.sqrt(sum(layer.ffn.L for layer in toy_lock.model.layers))))
    ratios = {}
    for name, m, ck in (("baseline", toy_teacher, None), ("locked", toy_lock.model, k)):
        ratios[name] = bench.time_step_split(m, w, "train_full", steps=3, warmup=1,
                                             checkpoint_interval=ck).backward_forward_ratio
    assert ratios["locked"] > ratios["baseline"]


@pytest.mark.slow
def test_p50_is_stable_across_repeats(toy_teacher, toy_corpus):
    rows = bench.bench_models({"baseline": toy_teacher}, toy_corpus.train, 8, 64, steps=20, warmup=5,
                              repeats=3, modes=("train_full",))
    assert bench.p50_stability(rows, "baseline") <= 0.2
