"""Command-line interface: ``synth``, ``eval``, ``roc``, ``metrics`` and ``qp-bench``.

Every subcommand exits 0 on success. Failures print one machine-readable
line ``error: {"type": ..., "message": ...}`` to stderr and exit 1; usage
errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cf
from . import evaluation as ev
from . import records as rc
from .pipeline import init_poses, synthesize
from .qpsolve import AdmmSettings, QpProblem, admm_solve


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synth


def _chunks(n: int, k: int) -> list:
    """Split ``range(n)`` into ``k`` contiguous nearly equal chunks."""
    k = max(1, min(k, n))
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _synth_chunk(args):
    cfg, source, scale, seed, lo, hi, X0 = args
    model = cfg.load_hand()
    obj = cfg.load_object(source, scale)
    res = synthesize(model, obj, hi - lo, seed=seed, cfg=cfg.synthesis, X0=X0)
    syn = cfg.synthesis
    return rc.build_records(model, obj, res, syn.beta, syn.gamma, syn.mu, index_offset=lo)


def run_synth(cfg: cf.RunConfig, seed: int, out_path: Path, workers: int, log=print) -> list:
    model = cfg.load_hand()
    all_records = []
    t0 = time.perf_counter()
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for source in cfg.objects:
            for scale in cfg.scales:
                obj = cfg.load_object(source, scale)
                X0 = init_poses(model, obj, cfg.batch_size, seed, cfg.synthesis)
                jobs = [(cfg, source, scale, seed, lo, hi, X0[lo:hi])
                        for lo, hi in _chunks(cfg.batch_size, workers)]
                parts = list(pool.map(_synth_chunk, jobs)) if pool else [_synth_chunk(j) for j in jobs]
                recs = [r for p in parts for r in p]
                n_failed = sum(r.failed for r in recs)
                log(f"{obj.name}: {len(recs)} grasps, {n_failed} failed")
                all_records.extend(recs)
    finally:
        if pool:
            pool.shutdown()
    el = time.perf_counter() - t0
    rc.write_records(out_path, all_records)
    log(f"wrote {len(all_records)} records to {out_path}")
    log(f"speed: {len(all_records) / max(el, 1e-12):.2f} grasps/s ({el:.1f} s)")
    return all_records


# ---------------------------------------------------------------------------
# eval / metrics / roc


def _groups(records) -> OrderedDict:
    g = OrderedDict()
    for r in records:
        g.setdefault((r.object_source, r.scale), []).append(r)
    return g


def evaluate_records(cfg: cf.RunConfig, records, with_success: bool = True) -> list:
    """Fill ``metrics`` of every non-failed record in place."""
    model = cfg.load_hand()
    for (source, scale), recs in _groups(records).items():
        obj = cfg.load_object(source, scale)
        live = [r for r in recs if not r.failed]
        if not live:
            continue
        X = np.array([r.x for r in live])
        if with_success:
            Xs = np.array([r.x_s for r in live])
            results = ev.quasi_static_batch(model, obj, X, Xs, cfg.evaluation)
            for r, e in zip(live, results):
                r.metrics.update(success=e.success, pd_mm=e.pd_mm, spd_mm=e.spd_mm, cdc_mm=e.cdc_mm,
                                 n_contacts=e.n_contacts, residuals=e.per_direction_residuals,
                                 eval_notes=e.notes)
        else:
            pd = ev.penetration_depths(model, obj, X) * 1e3
            spd = ev.self_penetration_depths(model, X) * 1e3
            sd = ev.finger_distances(model, obj, X)
            cdc = (sd.max(axis=1) - sd.min(axis=1)) * 1e3
            for i, r in enumerate(live):
                r.metrics.update(pd_mm=float(pd[i]), spd_mm=float(spd[i]), cdc_mm=float(cdc[i]))
    return records


def summarize(records, with_success: bool = True) -> list:
    rows = []
    for (source, scale), recs in _groups(records).items():
        live = [r for r in recs if not r.failed]
        row = OrderedDict(object=recs[0].object_id, n=len(recs), failed=len(recs) - len(live))
        if with_success:
            row["SSR"] = float(np.mean([r.metrics["success"] for r in live])) if live else float("nan")
        for key, col in (("pd_mm", "PD"), ("cdc_mm", "CDC"), ("spd_mm", "SPD")):
            row[col] = float(np.median([r.metrics[key] for r in live])) if live else float("nan")
        row["FVR"] = ev.first_variance_ratio(live) if len(live) >= 2 else float("nan")
        rows.append(row)
    return rows


def _print_table(rows, out=print):
    if not rows:
        out("(no records)")
        return
    cols = list(rows[0])
    fmt = lambda v: f"{v:.3f}" if isinstance(v, float) else str(v)
    widths = [max(len(c), *(len(fmt(r[c])) for r in rows)) for c in cols]
    out("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        out("  ".join(fmt(r[c]).ljust(w) for c, w in zip(cols, widths)))


# ---------------------------------------------------------------------------
# qp-bench


def random_qp_batch(n: int, nv: int, nc: int, seed: int) -> QpProblem:
    """Structurally identical random strictly convex QPs."""
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, nv, nv))
    P = M @ np.swapaxes(M, 1, 2) + 0.1 * np.eye(nv)
    q = rng.normal(size=(n, nv))
    A = np.broadcast_to(rng.normal(size=(nc, nv)), (n, nc, nv)).copy()
    l = -rng.uniform(0.5, 2.0, size=(n, nc))
    u = rng.uniform(0.5, 2.0, size=(n, nc))
    return QpProblem(P, q, A, l, u)


def load_qp_npz(path) -> QpProblem:
    try:
        with np.load(path) as z:
            return QpProblem(z["P"], z["q"], z["A"], z["l"], z["u"])
    except KeyError as exc:
        raise CliError(f"{path}: missing array {exc.args[0]!r} (need P, q, A, l, u)") from exc


def qp_bench(prob: QpProblem, settings: AdmmSettings) -> dict:
    t0 = time.perf_counter()
    batch = admm_solve(prob, settings=settings)
    tb = time.perf_counter() - t0
    t0 = time.perf_counter()
    seq = [admm_solve(prob[i:i + 1], settings=settings) for i in range(len(prob.q))]
    ts = time.perf_counter() - t0
    dobj = max(abs(float(s.objective[0]) - float(batch.objective[i])) for i, s in enumerate(seq))
    return {"n": len(prob.q), "batched_s": tb, "sequential_s": ts, "speedup": ts / max(tb, 1e-12),
            "converged": int(batch.converged.sum()), "max_objective_diff": dobj}


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bigrasp", description="Bilevel force-closure grasp synthesis.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration YAML")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. synthesis.beta=2 (repeatable)")

    s = sub.add_parser("synth", help="synthesize grasps")
    common(s)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--output", "-o")
    s.add_argument("--workers", type=int)
    s.add_argument("--object", action="append", help="object mesh or primitive:<kind> (repeatable)")
    s.add_argument("--scale", type=float, action="append")
    s.add_argument("--batch", type=int)

    for name, hlp in (("eval", "quasi-static evaluation and metric summary"),
                      ("metrics", "PD/SPD/CDC/FVR without the success oracle"),
                      ("roc", "ROC/AUC of energies against success labels")):
        e = sub.add_parser(name, help=hlp)
        common(e)
        e.add_argument("records")
        e.add_argument("--output", "-o", help="write evaluated records here")
        e.add_argument("--json", action="store_true", help="print the summary as JSON")

    q = sub.add_parser("qp-bench", help="batched versus sequential QP timing")
    common(q)
    q.add_argument("--input", help=".npz with arrays P, q, A, l, u")
    q.add_argument("--n", type=int, default=1024)
    q.add_argument("--nv", type=int, default=8)
    q.add_argument("--nc", type=int, default=12)
    q.add_argument("--seed", type=int, default=0)
    return p


def _load_cfg(args) -> cf.RunConfig:
    cfg = cf.load_config(args.config) if args.config else cf.default_config()
    return cf.apply_overrides(cfg, args.set)


def _cmd_synth(args, out) -> int:
    cfg = _load_cfg(args)
    if args.object:
        cfg.objects = args.object
    if args.scale:
        cfg.scales = args.scale
    if args.batch:
        cfg.batch_size = args.batch
    if args.workers:
        cfg.workers = args.workers
    cfg.validate()
    path = Path(args.output) if args.output else cfg.resolve(cfg.output)
    run_synth(cfg, args.seed, path, cfg.workers, log=out)
    return 0


def _read(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"records file not found: {path}")
    return rc.read_records(path)


def _cmd_eval(args, out, with_success=True) -> int:
    cfg = _load_cfg(args)
    recs = evaluate_records(cfg, _read(args.records), with_success)
    rows = summarize(recs, with_success)
    if args.json:
        out(json.dumps(rows))
    else:
        _print_table(rows, out)
    if args.output:
        rc.write_records(args.output, recs)
    return 0


def _cmd_roc(args, out) -> int:
    cfg = _load_cfg(args)
    recs = _read(args.records)
    if any(not r.failed and "success" not in r.metrics for r in recs):
        evaluate_records(cfg, recs, True)
    live = [r for r in recs if not r.failed]
    labels = [bool(r.metrics["success"]) for r in live]
    res = OrderedDict()
    for name, key in (("energy", "energy"), ("baseline", "baseline_energy")):
        res[name] = ev.roc_auc([getattr(r, key) for r in live], labels).auc
    if args.json:
        out(json.dumps(res))
    else:
        for k, v in res.items():
            out(f"AUC({k}) = {v:.4f}")
    if args.output:
        rc.write_records(args.output, recs)
    return 0


def _cmd_qp_bench(args, out) -> int:
    cfg = _load_cfg(args)
    prob = load_qp_npz(args.input) if args.input else random_qp_batch(args.n, args.nv, args.nc, args.seed)
    r = qp_bench(prob, cfg.synthesis.qp)
    out(json.dumps(r))
    return 0


def main(argv=None, out=print) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args, out)
        if args.command == "eval":
            return _cmd_eval(args, out, True)
        if args.command == "metrics":
            return _cmd_eval(args, out, False)
        if args.command == "roc":
            return _cmd_roc(args, out)
        return _cmd_qp_bench(args, out)
    except Exception as exc:  # reported as one parseable line
        msg = json.dumps({"type": type(exc).__name__, "message": str(exc)})
        print(f"error: {msg}", file=sys.stderr)
        return 1


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
