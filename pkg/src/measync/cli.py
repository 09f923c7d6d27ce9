"""Command-line interface: ``measync {synth,sync,eval,sweep}``.

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 numerical trouble (a
Sinkhorn edge problem never converged during the run, or a non-finite
gradient aborted it).
"""

import argparse
import csv
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .datagen import (
    ESTIMATE_TO_TRUTH,
    TRUTH_TO_ESTIMATE,
    NoiseModel,
    add_noise,
    avg_min_geodesic,
    generate_ground_truth,
    relative_measures_from_truth,
    sinkhorn_error,
)
from .divergences import GEODESIC, MMD, SINKHORN, SQEUCLIDEAN, GroundCost
from .io import FileFormatError, load_graph, load_result, save_graph, save_result, write_trace
from .measures import HE, LE
from .sync import CONSTANT, INVERSE_WEIGHT, NonFiniteGradientError, SyncConfig, identity_gauge, run

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_UNCONVERGED = 0, 1, 2, 3

COSTS = {"euc": SQEUCLIDEAN, "geo": GEODESIC}
STEP_RULES = {"const": CONSTANT, "invw": INVERSE_WEIGHT}
VARIANTS = ("mmd:euc", "mmd:geo", "sinkhorn:euc", "sinkhorn:geo")
METRICS = ("avg_min_geo_truth2est", "avg_min_geo_est2truth", "sinkhorn_error", "final_loss")


class UsageError(Exception):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_synth_flags(p, sweep=False):
    p.add_argument("--n", type=int, default=10, help="number of cameras")
    p.add_argument("--mode", choices=(HE, LE), default=HE)
    p.add_argument("--sigma", type=float, default=0.0, help="edge noise (radians)")
    p.add_argument("--completeness", type=float, default=1.0)
    if sweep:
        p.add_argument("--k-true", type=int, default=3, help="ground-truth particles per camera")


def _add_sync_flags(p):
    p.add_argument("--loss", choices=(SINKHORN, MMD), default=SINKHORN)
    p.add_argument("--cost", choices=tuple(COSTS), default="geo")
    p.add_argument("--p", type=float, default=1.2, help="geodesic cost exponent")
    p.add_argument("--alpha", type=float, default=0.05, help="entropic regularization")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="mass penalty")
    p.add_argument("--lr", type=float, default=0.01, help="particle step size")
    p.add_argument("--lr-beta", type=float, default=None, help="weight step (default 0.1 * lr)")
    p.add_argument("--step-rule", choices=tuple(STEP_RULES), default="const")
    p.add_argument("--constrained", type=_bool, default=True)
    p.add_argument("--squared", action="store_true", help="use the squared Sinkhorn divergence")
    p.add_argument("--fixed-weights", action="store_true", help="disable weight updates")
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-stride", type=int, default=10)
    p.add_argument("--debug", action="store_true", help="check constraints after every step")


def build_parser():
    parser = _Parser(prog="measync", description="Measure synchronization on SO(3).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic graph and its ground truth")
    _add_synth_flags(p)
    p.add_argument("--k", type=int, default=3, help="ground-truth particles per camera")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("."))

    p = sub.add_parser("sync", help="synchronize the measures of a graph file")
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--mode", choices=(HE, LE), default=HE)
    p.add_argument("--k", type=int, default=3, help="estimated particles per camera")
    p.add_argument("--gauge", type=Path, default=None, help="truth file pinning camera 0")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    _add_sync_flags(p)

    p = sub.add_parser("eval", help="score a result file against a truth file")
    p.add_argument("--result", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--cost", choices=tuple(COSTS), default="geo")
    p.add_argument("--p", type=float, default=1.2)
    p.add_argument("--out", type=Path, default=None, help="metrics CSV (default: next to result)")

    p = sub.add_parser("sweep", help="synth + sync + eval over a parameter grid")
    p.add_argument("--axis", choices=("noise", "sparsity", "particles", "iters"), required=True)
    p.add_argument("--values", type=_float_list, required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--k", type=int, default=12, help="estimated particles per camera")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    _add_synth_flags(p, sweep=True)
    _add_sync_flags(p)
    return parser


# --- shared building blocks (also used by the sweep) -------------------------


def synthesize(n, k, mode, sigma, completeness, seed):
    rng = np.random.default_rng(seed)
    truth = generate_ground_truth(n, k, rng)
    graph = relative_measures_from_truth(truth, mode, completeness, rng)
    graph = add_noise(graph, NoiseModel(sigma), rng)
    return truth, graph


def make_config(args, loss=None, cost=None):
    loss = loss or args.loss
    cost = cost or args.cost
    try:
        return SyncConfig(
            loss=loss,
            mode=args.mode,
            constrained=args.constrained,
            cost=GroundCost(COSTS[cost], args.p),
            alpha=args.alpha,
            lam=args.lam,
            eta_q=args.lr,
            eta_beta=args.lr_beta,
            step_rule=STEP_RULES[args.step_rule],
            max_iter=args.max_iter,
            seed=args.seed,
            K=args.k,
            trace_stride=args.trace_stride,
            update_weights=not args.fixed_weights,
            squared=args.squared,
            debug=args.debug,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def config_echo(config):
    return dataclasses.asdict(config)


def synchronize(graph, config, gauge=None):
    if gauge is None and config.mode == HE:
        gauge = identity_gauge()
    try:
        return run(graph, config, gauge=gauge)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def evaluate(estimate, truth, final_loss, cost, alpha):
    return {
        "avg_min_geo_truth2est": avg_min_geodesic(estimate, truth, TRUTH_TO_ESTIMATE),
        "avg_min_geo_est2truth": avg_min_geodesic(estimate, truth, ESTIMATE_TO_TRUTH),
        "sinkhorn_error": sinkhorn_error(estimate, truth, cost, alpha),
        "final_loss": float("nan") if final_loss is None else float(final_loss),
    }


class _TruthView:
    """Adapter giving a loaded truth file the GroundTruth attributes the metrics use."""

    def __init__(self, data):
        self.beliefs = data.coupling.beliefs
        self.n = len(self.beliefs)


# --- commands ---------------------------------------------------------------


def cmd_synth(args):
    try:
        truth, graph = synthesize(args.n, args.k, args.mode, args.sigma, args.completeness, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    args.out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "generator": "measync.synth",
        "seed": args.seed,
        "sigma": args.sigma,
        "completeness": args.completeness,
        "mode": args.mode,
        "K": args.k,
    }
    save_graph(args.out_dir / "graph.json", graph, meta)
    save_result(args.out_dir / "truth.json", truth.coupling(args.mode), config={"truth": meta})
    atoms = sorted({len(mu) for _, _, mu in graph.edges})
    atoms_text = ",".join(str(a) for a in atoms)
    print(f"n={args.n} K={args.k} edges={len(graph.edges)} atoms/edge={atoms_text}")
    return EXIT_OK


def cmd_sync(args):
    graph, _ = load_graph(args.graph)
    config = make_config(args)
    gauge = None
    if args.gauge is not None:
        gauge = load_result(args.gauge).gauge
    state = synchronize(graph, config, gauge)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    flags = state.ever_converged.tolist()
    save_result(
        args.out_dir / "result.json",
        state.coupling,
        config=config_echo(config),
        final_loss=state.last_loss,
        iterations=state.iteration,
        converged_flags=flags,
        extra={
            "unconverged_steps": state.unconverged_counts.tolist()
            if state.unconverged_counts is not None
            else [0] * len(flags),
            "edges": [[i, j] for i, j, _ in graph.edges],
        },
    )
    write_trace(args.out_dir / "trace.csv", state.loss_trace, state.trace_wallclock)
    print(f"iterations={state.iteration} final_loss={state.last_loss!r}")
    if config.loss == SINKHORN and not all(flags):
        bad = [k for k, ok in enumerate(flags) if not ok]
        print(f"warning: Sinkhorn never converged on edges {bad}", file=sys.stderr)
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_eval(args):
    result = load_result(args.result)
    truth = _TruthView(load_result(args.truth))
    if result.n_cameras != truth.n:
        raise UsageError(f"result has {result.n_cameras} cameras, truth has {truth.n}")
    cost = GroundCost(COSTS[args.cost], args.p)
    metrics = evaluate(result.coupling, truth, result.final_loss, cost, args.alpha)
    out = args.out or args.result.with_name("metrics.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name in METRICS:
            writer.writerow([name, repr(metrics[name])])
    width = max(len(m) for m in METRICS)
    for name in METRICS:
        print(f"{name:<{width}}  {metrics[name]:.6g}")
    return EXIT_OK


def _sweep_cell(args, value, repeat, variant):
    """One (axis value, repeat, variant) cell; returns metric rows."""
    seed = args.seed + repeat
    n, k_true, sigma, comp = args.n, args.k_true, args.sigma, args.completeness
    cell = argparse.Namespace(**vars(args))
    cell.seed = seed
    if args.axis == "noise":
        sigma = value
    elif args.axis == "sparsity":
        comp = value
    elif args.axis == "particles":
        cell.k = int(value)
    else:
        cell.max_iter = int(value)
    loss, cost = variant.split(":")
    if loss == SINKHORN:
        # Sinkhorn-Sync is always constrained with a constant step
        cell.constrained, cell.step_rule = True, "const"
    truth, graph = synthesize(n, k_true, args.mode, sigma, comp, seed)
    config = make_config(cell, loss=loss, cost=cost)
    state = synchronize(graph, config, truth.gauge)
    metrics = evaluate(state, truth, state.last_loss, GroundCost(COSTS[cost], args.p), args.alpha)
    return [(value, repeat, variant, m, metrics[m]) for m in METRICS]


def cmd_sweep(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    cells = [(v, r, var) for v in args.values for r in range(args.repeats) for var in variants]
    threads = int(os.environ.get("MEASYNC_THREADS", "1") or 1)

    def work(cell):
        try:
            return _sweep_cell(args, *cell)
        except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the sweep
            print(f"cell {cell} failed: {exc}", file=sys.stderr)
            return [(cell[0], cell[1], cell[2], "failed", float("nan"))]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = [row for rows in pool.map(work, cells) for row in rows]
    order = {v: i for i, v in enumerate(VARIANTS)}
    rows.sort(key=lambda r: (r[0], r[1], order[r[2]], r[3]))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "repeat", "variant", "metric", "value"])
        for value, repeat, variant, metric, v in rows:
            writer.writerow([repr(float(value)), repeat, variant, metric, repr(float(v))])
    failed = sum(1 for r in rows if r[3] == "failed")
    print(f"cells={len(cells)} failed={failed} -> {args.out_dir / 'sweep.csv'}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "sync": cmd_sync, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"measync: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FileFormatError) as exc:
        print(f"measync: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteGradientError as exc:
        print(f"measync: numerical error: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except SystemExit as exc:
        # --help exits through argparse
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
