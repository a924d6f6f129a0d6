"""Command-line entry point.

    python3 -m dlrlock <command> [sub] --config FILE [--seed N] [--out DIR] [--jobs N]

Every command reads a JSON experiment config and writes CSV/JSON/SVG artifacts
plus ``manifest.json`` into the output directory. Outputs are staged in a
sibling temporary directory and moved into place only when the run succeeds.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import analysis, attacks, bench, lockpipe
from .blocks import model_from_bytes, model_to_bytes
from .config import ConfigError, ExperimentConfig
from .parallel import default_jobs
from .records import TRAJECTORY_COLUMNS, trajectories_csv
from .tensor import Rng

COMMANDS = {
    "lock": None,
    "attack": ("finetune", "partial", "penalty", "rebalance", "reverse", "lora"),
    "analyze": ("memory", "kappa", "condition", "hutchinson"),
    "matfac": None,
    "bench": None,
    "eval": None,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlrlock", description="Deep low-rank locking workbench.")
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--out", default=None, help="output directory (default: config 'out')")
        sp.add_argument("--jobs", type=int, default=None,
                        help="worker processes for independent cells (default: $DLRLOCK_JOBS or 1)")

    for name, subs in COMMANDS.items():
        sp = sub.add_parser(name)
        if subs:
            sp2 = sp.add_subparsers(dest="sub", metavar="kind")
            for s in subs:
                common(sp2.add_parser(s))
        else:
            common(sp)
    return p


def cli_main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None or (COMMANDS[args.command] and getattr(args, "sub", None) is None):
        parser.print_usage(sys.stderr)
        return 2
    kind = args.sub if COMMANDS[args.command] else args.command
    try:
        cfg = ExperimentConfig.load(args.config)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: malformed config: {e}", file=sys.stderr)
        return 1
    if cfg.kind != kind:
        print(f"error: config kind {cfg.kind!r} does not match command {kind!r}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.out)
    jobs = args.jobs if args.jobs is not None else default_jobs()
    try:
        manifest = run_to_dir(cfg, out, jobs)
    except Exception as e:  # reported, not raised: the exit code carries the failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(manifest['files'])} files to {out}")
    return 0


def run_to_dir(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    """Run ``cfg`` and publish its artifacts under ``out``; nothing is left behind on failure."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        results, extra = RUNNERS[cfg.kind](cfg, stage, jobs)
        results["config.json"] = cfg.to_json() + "\n"
        manifest = bench.emit_artifacts(results, stage, cfg.config_hash(), cfg.seed,
                                        {"kind": cfg.kind, **extra})
        out.mkdir(parents=True, exist_ok=True)
        for item in stage.iterdir():
            dest = out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            os.replace(item, dest)
        return manifest
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------

def _read_model(path):
    return model_from_bytes(Path(path).read_bytes())


def _teacher(cfg, corpus):
    t = cfg["teacher"]
    if t.model:
        return _read_model(t.model), None
    train = cfg.resolved("teacher").train
    return lockpipe.train_teacher(corpus, train, vars(t.arch))


def _locked(cfg, teacher, corpus, jobs):
    lk = cfg.resolved("lock")
    if lk.model:
        return _read_model(lk.model), None
    res = lockpipe.lock_model(teacher, lk.r, corpus, lk.phase1, lk.phase2, jobs=jobs,
                              collect_tokens=lk.collect_tokens)
    return res.model, res


def _lock_artifacts(teacher, locked, res, trec, corpus) -> dict:
    out = {"teacher.dlrl": model_to_bytes(teacher), "locked.dlrl": model_to_bytes(locked)}
    if trec is not None:
        out["teacher_trajectory.csv"] = trec.to_csv()
    if res is not None:
        out["quality.csv"] = lockpipe.quality_csv(res.report)
        for r in res.phase1:
            out[f"phase1_layer{r.meta.get('layer', 0)}.csv"] = r.to_csv()
        if res.phase2 is not None:
            out["phase2_trajectory.csv"] = res.phase2.to_csv()
    return out


def _ckpt_interval(model, mode: str):
    if mode == "none":
        return None
    if mode != "sqrt":
        raise ConfigError(f"unknown checkpoint mode {mode!r}")
    nl = sum(layer.ffn.L for layer in model.layers if layer.ffn.kind == "dlr")
    return max(1, int(round(math.sqrt(nl)))) if nl else None


# --------------------------------------------------------------------------
# runners: (cfg, stage_dir, jobs) -> (results, manifest extras)
# --------------------------------------------------------------------------

def run_lock(cfg, stage, jobs):
    corpus = cfg["data"].load()
    teacher, trec = _teacher(cfg, corpus)
    locked, res = _locked(cfg, teacher, corpus, jobs)
    out = _lock_artifacts(teacher, locked, res, trec, corpus)
    summary = {"teacher_perplexity": lockpipe.evaluate_perplexity(teacher, corpus.heldout),
               "locked_perplexity": lockpipe.evaluate_perplexity(locked, corpus.heldout)}
    if res is not None:
        summary["phase1_perplexity"] = lockpipe.evaluate_perplexity(res.phase1_model, corpus.heldout)
    summary["ratio"] = summary["locked_perplexity"] / summary["teacher_perplexity"]
    out["summary.json"] = summary
    return out, {}


def run_finetune(cfg, stage, jobs):
    corpus = cfg["data"].load()
    teacher, _ = _teacher(cfg, corpus)
    locked, _ = _locked(cfg, teacher, corpus, jobs)
    ft = cfg.resolved("finetune")
    attack = ft.corpus.load()
    ck = _ckpt_interval(locked, ft.checkpoint)
    recs, rows = [], []
    for lr in ft.lrs:
        pair = {}
        for name, model, interval in (("baseline", teacher, None), ("locked", locked, ck)):
            rec = attacks.finetune_attack(model, attack.train, lr, ft.steps, interval, ft.batch_size,
                                          ft.seq_len, ft.seed, ft.element_budget, attack.heldout,
                                          ft.eval_every)
            rec.config_id = f"{name}_lr{lr:g}"
            recs.append(rec)
            pair[name] = rec
            rep = bench.TimingReport.from_record(rec, skip=min(1, len(rec) - 1))
            rows.append({"model": name, "lr": lr, "checkpoint_interval": interval or 0,
                         "batch_size": rec.meta.get("batch_size"),
                         "must_resort": rec.meta.get("must_resort", False),
                         "final_eval_loss": float(rec.get("eval_loss")[-1]),
                         **bench._flat(rep.summary())})
        target = ft.target_loss
        if target is None:
            target = analysis.common_target(pair["baseline"], pair["locked"])
        if target is None:
            k = {"wallclock": math.nan, "tokens": math.nan}
            target = math.nan
        else:
            k = analysis.kappa_ratios(pair["baseline"], pair["locked"], target)
        for r in rows[-2:]:
            r.update(target_loss=target, kappa_wallclock=k["wallclock"], kappa_tokens=k["tokens"])
    out = {"finetune_trajectories.csv": _concat_csv(recs), "timing.csv": bench.rows_csv(rows),
           **bench.trajectory_plots(recs, "finetune", "eval_loss")}
    return out, {"checkpoint_interval": ck}


def run_partial(cfg, stage, jobs):
    corpus = cfg["data"].load()
    teacher, _ = _teacher(cfg, corpus)
    locked, _ = _locked(cfg, teacher, corpus, jobs)
    ps = cfg.resolved("partial")
    attack = ps.corpus.load()
    recs, rows = [], []
    for mode in ps.modes:
        rec = attacks.partial_update_attack(locked, attack.train, mode, ps.lr, ps.steps,
                                            ps.batch_size, ps.seq_len, ps.seed)
        recs.append(rec)
        rows.append({"mode": mode, "bias_ratio": rec.meta["bias_ratio"],
                     "final_loss": float(rec.get("loss")[-1]),
                     "dlr_layer_elements_full": rec.meta["dlr_layer_elements"].get("full"),
                     "dlr_layer_elements_frozen": rec.meta["dlr_layer_elements"].get("frozen")})
    return {"partial_trajectories.csv": _concat_csv(recs), "partial.csv": bench.rows_csv(rows),
            **bench.trajectory_plots(recs, "partial")}, {}


def run_lora(cfg, stage, jobs):
    corpus = cfg["data"].load()
    teacher, _ = _teacher(cfg, corpus)
    locked, _ = _locked(cfg, teacher, corpus, jobs)
    ls = cfg.resolved("lora")
    attack = ls.corpus.load()
    recs = []
    for name, model in (("baseline", teacher), ("locked", locked)):
        targets = [n for n in model.named() if any(n == t or n.endswith("." + t) for t in ls.targets)]
        rec = attacks.lora_attack(model, attack.train, targets, ls.rank, ls.lr, ls.steps,
                                  ls.batch_size, ls.seq_len, ls.seed)
        rec.config_id = f"{name}_{rec.config_id}"
        recs.append(rec)
    return {"lora_trajectories.csv": _concat_csv(recs),
            "lora.json": [{"config_id": r.config_id, **r.meta} for r in recs],
            **bench.trajectory_plots(recs, "lora")}, {}


def run_reverse(cfg, stage, jobs):
    corpus = cfg["data"].load()
    teacher, _ = _teacher(cfg, corpus)
    locked, _ = _locked(cfg, teacher, corpus, jobs)
    rs = cfg.resolved("reverse")
    model, report = attacks.reverse_distill(locked, corpus.train, rs.d_ff, rs.distill,
                                            corpus.heldout, rs.collect_tokens)
    return {"reverse.json": report, "reversed.dlrl": model_to_bytes(model)}, {}


def _mlp(cfg):
    data = cfg["data"].load(cfg.seed)
    m = cfg.resolved("mlp")
    theta, acc = attacks.train_mlp(data, m.hidden, m.steps, m.lr, m.batch, m.seed)
    return data, theta, acc


def run_penalty(cfg, stage, jobs):
    data, theta, acc = _mlp(cfg)
    sw = cfg.resolved("sweep")
    res = attacks.penalty_lock_sweep(theta, data, sw, jobs, acc)
    check = attacks.sweep_region_check(res)
    series = [(t.config_id, t.get("rel_error_geomean"), t.get("omega_rel")) for t in res.trajectories]
    plot = bench.svg_lines(series, "relative function error", "relative omega",
                           f"{sw.omega_kind} / {sw.scope}", logx=True, logy=True)
    ends = res.endpoints()
    return {"trajectories.csv": trajectories_csv(res.trajectories, TRAJECTORY_COLUMNS),
            "endpoints.csv": bench.rows_csv(ends, ["config_id", "lambda", "lr", "seed", "step",
                                                   "rel_error_geomean", "omega_rel", "diverged"]),
            "sweep_manifest.json": json.loads(attacks.sweep_manifest_json(res)),
            "region_check.json": check, "symmetry_points.json": res.symmetry,
            "trajectories.svg": plot}, {"base_accuracy": acc}


def run_rebalance(cfg, stage, jobs):
    data, theta, acc = _mlp(cfg)
    rb = cfg.resolved("rebalance")
    base = np.argmax(attacks.mlp_logits(theta, data.x_test), axis=1)
    scale_rows = []
    for a in rb.scales:
        pred = np.argmax(attacks.mlp_logits(attacks.scale_mlp(theta, a), data.x_test), axis=1)
        scale_rows.append({"a": a, "argmax_agreement": float(np.mean(pred == base))})
    W1, W2 = theta["W1"], theta["W2"]
    ref_u, ref_v = attacks.svd_rebalance(W2, W1)
    rng = Rng(rb.seed, "rebalance")
    ins_rows = []
    for i in range(rb.n_insertions):
        A = attacks.random_invertible(W1.shape[0], rng.spawn("insert", i), rb.max_condition)
        W2a, W1a = attacks.insert_invertible(W1, W2, A)
        u, v = attacks.svd_rebalance(W2a, W1a)
        ins_rows.append({"insertion": i, "condition": float(np.linalg.cond(A)),
                         "bit_identical": bool(np.array_equal(u, ref_u) and np.array_equal(v, ref_v)),
                         "max_abs_diff": float(max(np.abs(u - ref_u).max(), np.abs(v - ref_v).max())),
                         "product_rel_diff": float(np.linalg.norm(u @ v - W2 @ W1) / np.linalg.norm(W2 @ W1))})
    return {"scale_reparam.csv": bench.rows_csv(scale_rows), "rebalance.csv": bench.rows_csv(ins_rows)}, \
        {"base_accuracy": acc}


def run_memory(cfg, stage, jobs):
    ms = cfg.resolved("memory")
    rows = analysis.memory_report([tuple(c) for c in ms.configs], tuple(ms.modes), ms.seed)
    return {"memory.csv": analysis.memory_csv(rows)}, \
        {"all_equal": all(r["predicted_elements"] == r["measured_elements"] for r in rows)}


def run_kappa(cfg, stage, jobs):
    k = cfg["kappa"]
    val = analysis.kappa_bound(k.d, k.r, k.L, k.d_ff, k.a_attn)
    return {"kappa.json": {"d": k.d, "r": k.r, "L": k.L, "d_ff": k.d_ff, "a_attn": k.a_attn,
                           "kappa_bound": val}}, {}


def run_condition(cfg, stage, jobs):
    c = cfg.resolved("condition")
    reps = analysis.conditioning_suite(c.n_pairs, tuple(c.dims), tuple(c.scales), c.seed, c.target)
    rows = [{"case": i, "d": r.d, "a": r.a, "condition": r.condition, "bound": r.bound,
             "holds": r.holds, "psd": r.psd, "block_rel_error": r.block_error,
             "min_eigenvalue": float(r.eigenvalues.min())} for i, r in enumerate(reps)]
    summary = {"cases": len(rows), "bound_holds": sum(r["holds"] for r in rows),
               "psd": sum(r["psd"] for r in rows),
               "max_block_rel_error": max(r["block_rel_error"] for r in rows)}
    return {"condition.csv": bench.rows_csv(rows), "summary.json": summary}, {}


def run_hutchinson(cfg, stage, jobs):
    h = cfg.resolved("hutchinson")
    rng = Rng(h.seed, "hutchinson")
    problems = [("diag", np.diag(np.asarray(h.diag, dtype=np.float64)))]
    if h.dense_dim > 0:
        B = rng.spawn("dense").normal((h.dense_dim, h.dense_dim))
        problems.append(("dense", B @ B.T / h.dense_dim))
    rows = []
    for name, A in problems:
        f = _quadratic(A)
        est, se = analysis.hutchinson_trace(f, np.zeros(len(A)), h.probes, rng.spawn(name))
        exact = float(np.trace(A))
        rows.append({"problem": name, "n": len(A), "probes": h.probes, "estimate": est,
                     "stderr": se, "exact": exact, "rel_error": abs(est - exact) / abs(exact)})
    return {"hutchinson.csv": bench.rows_csv(rows)}, {}


def _quadratic(A):
    def f(x):
        return 0.5 * float(x @ A @ x), A @ x
    return f


def run_matfac(cfg, stage, jobs):
    mc = cfg.resolved("matfac")
    recs = analysis.matfac_experiment(mc, jobs)
    summary = analysis.matfac_summary(recs)
    out = {"summary.json": {"cells": summary, "checks": analysis.fig5_checks(summary, mc)}}
    groups: dict = {}
    for r in recs:
        groups.setdefault((r.meta["opt"], r.meta["a"]), []).append(r)
    for (opt, a), rs in sorted(groups.items()):
        stem = f"matfac_{opt}_a{a:g}"
        out[f"{stem}.csv"] = _concat_csv(rs)
        series = [(r.config_id, r.get("step"), r.get("loss")) for r in rs]
        out[f"{stem}.svg"] = bench.svg_lines(series, "step", "loss", f"{opt}, a={a:g}", logy=True)
    return out, {}


def run_bench(cfg, stage, jobs):
    corpus = cfg["data"].load()
    teacher, _ = _teacher(cfg, corpus)
    locked, _ = _locked(cfg, teacher, corpus, jobs)
    b = cfg.resolved("bench")
    rows = bench.bench_models({"baseline": teacher, "locked": locked}, corpus.train, b.batch_size,
                              b.seq_len, b.steps, b.warmup, b.repeats, tuple(b.modes), b.seed,
                              {"locked": _ckpt_interval(locked, b.checkpoint)})
    stab = {m: bench.p50_stability(rows, m) for m in ("baseline", "locked")}
    return {"timing.csv": bench.rows_csv(rows), "stability.json": stab}, {}


def run_eval(cfg, stage, jobs):
    e = cfg["eval"]
    if not e.model:
        raise ConfigError("eval.model must name a saved model file")
    model = _read_model(e.model)
    corpus = cfg["data"].load()
    ppl = lockpipe.evaluate_perplexity(model, corpus.heldout, e.seq_len)
    return {"eval.json": {"model": e.model, "heldout_tokens": int(len(corpus.heldout)),
                          "perplexity": ppl, "cross_entropy": math.log(ppl)}}, {}


def _concat_csv(recs) -> str:
    cols = ["config_id"]
    for r in recs:
        for k in r.series:
            if k not in cols:
                cols.append(k)
    cols.append("diverged")
    parts = [",".join(cols) + "\n"]
    for r in recs:
        parts.append(r.to_csv(cols, header=False))
    return "".join(parts)


RUNNERS = {"lock": run_lock, "finetune": run_finetune, "partial": run_partial, "lora": run_lora,
           "reverse": run_reverse, "penalty": run_penalty, "rebalance": run_rebalance,
           "memory": run_memory, "kappa": run_kappa, "condition": run_condition,
           "hutchinson": run_hutchinson, "matfac": run_matfac, "bench": run_bench, "eval": run_eval}


def main():
    sys.exit(cli_main())
