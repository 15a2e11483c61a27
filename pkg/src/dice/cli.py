"""Command-line entry point: ``dice train | influence | experiment | verify``.

Exit codes: 0 success, 2 validation, 3 numeric divergence, 4 path budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import influence as I
from . import model as M
from .config import RunConfig, build_data, build_topology, load_config, with_seed
from .engine import DivergenceError, ReplayError, export_trace, load_eval, load_trace, run_training
from .topology import PathBudgetExceeded

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_BUDGET = 0, 2, 3, 4


class OverwriteError(ValueError):
    pass


def _prepare_dir(path: Path, force: bool) -> Path:
    occupied = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if occupied:
        if not force:
            raise OverwriteError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train(cfg: RunConfig, base: Path):
    topo, w = build_topology(cfg, base)
    shards, ev = build_data(cfg, topo.n, base)
    trace = run_training(cfg.train, topo, w, shards, cfg.model)
    return trace, ev


def _config_and_base(path: str, seed: int | None) -> tuple[RunConfig, Path]:
    cfg = load_config(path)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    return cfg, Path(path).resolve().parent


def cmd_train(args) -> int:
    cfg, base = _config_and_base(args.config, args.seed)
    out = _prepare_dir(Path(args.out), args.force)
    trace, ev = _train(cfg, base)
    manifest = export_trace(trace, out, ev)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    final = json.loads(manifest.read_text())["final_hash"]
    print(f"trained {trace.n} nodes for {trace.T} rounds; final hash {final}")
    return EXIT_OK


def cmd_influence(args) -> int:
    trace_dir = Path(args.trace)
    trace = load_trace(trace_dir)
    ev = load_eval(trace_dir)
    query = I.InfluenceQuery(args.node, args.iter, args.radius, args.index, args.estimator)
    report = I.dice_gt(trace, query, ev) if args.estimator == "gt" else I.estimate(trace, query, ev)
    stem = Path(args.out) if args.out else trace_dir / (
        f"influence_n{args.node}_t{args.iter}_r{args.radius}_{args.estimator}"
        + ("" if args.index is None else f"_i{args.index}")
    )
    for p in (stem.with_suffix(".json"), stem.with_suffix(".csv")):
        if p.exists() and not args.force:
            raise OverwriteError(f"{p} exists; pass --force to overwrite")
    stem.parent.mkdir(parents=True, exist_ok=True)
    report.write(stem)
    hops = " ".join(f"{v:+.6e}" for v in report.per_hop)
    print(f"{args.estimator} node={args.node} iter={args.iter} r={args.radius} total={report.total:+.6e} per_hop=[{hops}]")
    return EXIT_OK


def _alignment(cfg, trace, ev, out) -> dict:
    exp = cfg.experiment
    res = A.run_alignment(trace, ev, exp.trials, cfg.seed, cfg.workers)
    res.write(out)
    summary = res.summary()
    summary["passed"] = res.pearson >= exp.min_pearson
    summary["threshold"] = exp.min_pearson
    return summary


def _anomaly(cfg, trace, ev, out) -> dict:
    exp = cfg.experiment
    window = range(*exp.window) if exp.window else range(trace.T - 1)
    ranking = A.detect_anomaly(trace, exp.victim, ev, window, cfg.workers)
    bad = {a.node for a in cfg.data.anomalies}
    with open(out / "ranking.csv", "w") as f:
        f.write("rank,node,score,anomalous\n")
        for r, (k, s) in enumerate(ranking):
            f.write(f"{r},{k},{s!r},{int(k in bad)}\n")
    return {"victim": exp.victim, "top": ranking[0][0], "anomalous": sorted(bad), "passed": ranking[0][0] in bad}


def _cascade(cfg, trace, ev, out) -> dict:
    exp = cfg.experiment
    stems = exp.stems or ((cfg.topology.dominant[0] if cfg.topology.dominant else 0), trace.n // 2)
    if len(stems) != 2:
        raise A.HarnessError("cascade needs exactly two stems: dominant and peripheral")
    b = cfg.train.batch_size
    injected = trace.shards[exp.inject_node].batch(np.arange(b))
    iters = range(min(exp.iterations, trace.T))
    maps = {s: [A.cascade_map(trace, s, t, ev, injected) for t in iters] for s in stems}
    _write_json(out / "cascade.json", {str(s): [c.to_json() for c in maps[s]] for s in stems})
    means = [float(np.mean([c.out_influence for c in maps[s]])) for s in stems]
    ratio = abs(means[0]) / abs(means[1]) if means[1] != 0 else float("inf")
    return {"stems": list(stems), "mean_out_influence": means, "ratio": ratio,
            "threshold": exp.min_ratio, "passed": ratio > exp.min_ratio}


_HARNESSES = {"alignment": _alignment, "anomaly": _anomaly, "cascade": _cascade}


def cmd_experiment(args) -> int:
    cfg, base = _config_and_base(args.config, args.seed)
    if cfg.experiment is None:
        raise A.HarnessError("config has no experiment block")
    kind = args.kind or cfg.experiment.kind
    if kind != cfg.experiment.kind:
        raise A.HarnessError(f"--kind {kind} does not match experiment.kind {cfg.experiment.kind}")
    if kind not in _HARNESSES:
        raise A.HarnessError(f"unsupported experiment kind {kind!r}")
    out = _prepare_dir(Path(args.out), args.force)
    trace, ev = _train(cfg, base)
    summary = _HARNESSES[kind](cfg, trace, ev, out)
    summary["kind"] = kind
    summary["seed"] = cfg.seed
    (out / "config.json").write_text(cfg.dumps() + "\n")
    _write_json(out / "summary.json", summary)
    verdict = "" if not cfg.experiment.acceptance else (" PASS" if summary["passed"] else " FAIL")
    print(f"{kind}: " + json.dumps({k: v for k, v in summary.items() if k != "kind"}, sort_keys=True) + verdict)
    return EXIT_OK


def cmd_verify(args) -> int:
    specs = [
        M.ModelSpec("linear-regression", (5, 1)),
        M.ModelSpec("logistic-regression", (5, 3)),
        M.ModelSpec("mlp", (5, 8, 3), activation="tanh"),
        M.ModelSpec("mlp", (5, 6, 6, 3), activation="relu"),
    ]
    results = A.verify_numerics(specs, range(args.seeds))
    failed = 0
    for r in results:
        failed += r.status == "fail"
        if args.verbose or r.status != "pass":
            print(f"{r.status:8s} {r.check:17s} {r.model:34s} seed={r.seed} err={r.error:.2e} tol={r.tol:.0e} {r.note}")
    print(f"{len(results)} checks, {failed} failed")
    return EXIT_OK if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dice", description="Decentralized SGD simulator and influence engine.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config and write a trace directory")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    q = sub.add_parser("influence", help="query the influence of one node's update")
    q.add_argument("trace")
    q.add_argument("--node", type=int, required=True)
    q.add_argument("--iter", type=int, required=True)
    q.add_argument("--radius", type=int, default=1)
    q.add_argument("--estimator", choices=("gt", "estimate"), default="estimate")
    q.add_argument("--index", type=int, help="shard index of a single sample to remove")
    q.add_argument("--out", help="output stem; .json and .csv are appended")
    q.add_argument("--force", action="store_true")
    q.set_defaults(fn=cmd_influence)

    e = sub.add_parser("experiment", help="train and run an experiment harness")
    e.add_argument("config")
    e.add_argument("--kind", choices=sorted(_HARNESSES))
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_experiment)

    v = sub.add_parser("verify", help="finite-difference checks of gradients and HVPs")
    v.add_argument("--seeds", type=int, default=5)
    v.add_argument("--verbose", action="store_true")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except PathBudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (ValueError, ReplayError, ArithmeticError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
