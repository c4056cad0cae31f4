"""Command-line pipeline: synth -> weigh -> average -> evaluate -> report.

Stages communicate only via the documented JSON files, so each subcommand
is usable on its own.  Exit codes: 0 success, 1 usage error, 2 data/schema
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    DegenerateGeometryError,
    InsufficientDataError,
    NumericalError,
    SchemaError,
)
from .evaluate import align_rotations, auc, export_cdf
from .losses import LossSpec
from .solver import SolverConfig, load_result_rotations, save_result, solve
from .synth import SynthConfig, generate_graph
from .twoview import covariance_of_rotation
from .viewgraph import (
    EdgeMeasurement,
    ViewGraph,
    ViewNode,
    load_graph,
    load_pairs,
    save_graph,
    spanning_tree_init,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

LOSS_CHOICES = ("trivial", "huber", "soft_l1", "cauchy", "tukey", "gm", "l_half", "magsac")
WEIGHTING_CHOICES = ("none", "inlier_count", "cov_trace", "cov_fro", "cov_full")

# residual-norm scale defaults: raw residuals are radians, whitened
# residuals (cov_* modes) are unitless with sigma ~ 1 for true inliers;
# inlier-count scaling stretches the raw residuals, so its scale is looser
RAW_SCALE_DEFAULT = 0.02
INLIER_SCALE_DEFAULT = 0.06
WHITENED_SCALE_DEFAULT = 3.0


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def default_loss_scale(weighting: str) -> float:
    if weighting.startswith("cov_"):
        return WHITENED_SCALE_DEFAULT
    if weighting == "inlier_count":
        return INLIER_SCALE_DEFAULT
    return RAW_SCALE_DEFAULT


def _parse_noise_mixture(text: str):
    """Parse 'frac:sigma_deg,frac:sigma_deg,...'."""
    out = []
    for item in text.split(","):
        frac, _, sigma = item.partition(":")
        out.append((float(frac), float(sigma)))
    return tuple(out)


def _loss_spec(args) -> LossSpec:
    scale = args.loss_scale if args.loss_scale is not None else default_loss_scale(args.weighting)
    if args.loss == "magsac":
        return LossSpec("magsac", scale=scale, nu=args.magsac_nu, alpha=args.magsac_alpha)
    return LossSpec(args.loss, scale=scale)


def _add_loss_flags(p):
    p.add_argument("--loss", choices=LOSS_CHOICES, default="magsac")
    p.add_argument("--loss-scale", type=float, default=None,
                   help="residual-norm scale / sigma_max (default depends on weighting)")
    p.add_argument("--magsac-nu", type=int, default=3)
    p.add_argument("--magsac-alpha", type=float, default=0.99)
    p.add_argument("--weighting", choices=WEIGHTING_CHOICES, default="cov_full")


def _add_threads_flag(p):
    p.add_argument("--threads", type=int, default=1,
                   help="worker-parallelism cap; execution is deterministic for any value")


def _build_parser() -> _Parser:
    parser = _Parser(prog="rotavg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic view graph with ground truth")
    p.add_argument("--cameras", type=int, required=True)
    p.add_argument("--density", type=float, default=0.25)
    p.add_argument("--noise", type=_parse_noise_mixture, default="0.5:0.5,0.5:5.0",
                   help="mixture 'frac:sigma_deg,...'")
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-covariance", action="store_true",
                   help="omit the true covariance from the edges")
    p.add_argument("--honest-outlier-covariance", action="store_true",
                   help="report a large covariance on outlier edges instead of a confident one")
    p.add_argument("--out", required=True)
    _add_threads_flag(p)

    p = sub.add_parser("weigh", help="fill edge covariances from two-view correspondences")
    p.add_argument("--pairs", required=True, help="correspondence-set JSON")
    p.add_argument("--out", required=True, help="output view-graph JSON")
    p.add_argument("--base", default=None,
                   help="optional existing graph supplying nodes / ground truth")
    p.add_argument("--sigma", type=float, default=1.0, help="pixel residual sigma")
    p.add_argument("--mode", choices=("rotation_only", "marginalize_translation"),
                   default="rotation_only")
    _add_threads_flag(p)

    p = sub.add_parser("average", help="run rotation averaging on a view graph")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    _add_loss_flags(p)
    p.add_argument("--init-criterion",
                   choices=("auto", "inlier_count", "inverse_cov_trace", "unit"),
                   default="auto")
    p.add_argument("--max-outer", type=int, default=32)
    p.add_argument("--max-inner", type=int, default=10)
    _add_threads_flag(p)

    p = sub.add_parser("evaluate", help="compare a result against ground truth")
    p.add_argument("--est", required=True, help="result JSON from 'average'")
    p.add_argument("--gt", required=True, help="view-graph JSON with gt_qwxyz nodes")
    p.add_argument("--thresholds", default="2,5,10,20")
    p.add_argument("--cdf", default=None, help="optional CSV path for the error CDF")
    _add_threads_flag(p)

    p = sub.add_parser("report", help="AUC table over loss x weighting combinations")
    p.add_argument("--in", dest="infile", required=True,
                   help="view-graph JSON with ground truth")
    p.add_argument("--losses", default="soft_l1,magsac")
    p.add_argument("--weightings", default="none,inlier_count,cov_full")
    p.add_argument("--thresholds", default="2,5,10,20")
    p.add_argument("--loss-scale", type=float, default=None)
    p.add_argument("--magsac-nu", type=int, default=3)
    p.add_argument("--magsac-alpha", type=float, default=0.99)
    p.add_argument("--csv", default=None)
    _add_threads_flag(p)

    p = sub.add_parser("bench", help="time the averaging kernels and solver")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--repeats", type=int, default=50)
    _add_loss_flags(p)
    _add_threads_flag(p)

    return parser


def _check_threads(args):
    if getattr(args, "threads", 1) < 1:
        raise _UsageError("--threads must be >= 1")


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        loss=_loss_spec(args),
        weighting=args.weighting,
        max_outer_irls=getattr(args, "max_outer", 32),
        max_inner_gn=getattr(args, "max_inner", 10),
    )


def _cmd_synth(args) -> int:
    config = SynthConfig(
        n_cameras=args.cameras,
        edge_density=args.density,
        noise_sigmas_deg=args.noise if isinstance(args.noise, tuple) else _parse_noise_mixture(args.noise),
        outlier_fraction=args.outliers,
        seed=args.seed,
        report_true_covariance=not args.no_covariance,
        outlier_covariance="honest" if args.honest_outlier_covariance else "confident",
    )
    scene = generate_graph(config)
    save_graph(scene.graph, args.out)
    print(f"wrote {args.out}: {len(scene.graph.nodes)} nodes, "
          f"{len(scene.graph.edges)} edges, {len(scene.outlier_edge_ids)} outliers",
          file=sys.stderr)
    return EXIT_OK


def _cmd_weigh(args) -> int:
    pairs = load_pairs(args.pairs)
    base = load_graph(args.base) if args.base else None
    node_ids = set()
    for (i, j), _ in pairs:
        node_ids.update((i, j))
    if base is not None:
        nodes = [base.nodes[nid] if nid in base.nodes else ViewNode(nid)
                 for nid in sorted(node_ids | set(base.nodes))]
    else:
        nodes = [ViewNode(nid) for nid in sorted(node_ids)]
    edges = []
    for (i, j), geom in pairs:
        try:
            cov = covariance_of_rotation(geom, residual_sigma=args.sigma, mode=args.mode)
            covariance = cov.covariance
        except (DegenerateGeometryError, InsufficientDataError) as exc:
            print(f"pair ({i}, {j}): {exc}; leaving covariance unset", file=sys.stderr)
            covariance = None
        edges.append(EdgeMeasurement(
            i, j, geom.rotation, covariance=covariance, inlier_count=len(geom.matches),
        ))
    save_graph(ViewGraph(nodes, edges), args.out)
    print(f"wrote {args.out}: {len(edges)} weighted edges", file=sys.stderr)
    return EXIT_OK


def _cmd_average(args) -> int:
    g = load_graph(args.infile)
    config = _solver_config(args)
    init = spanning_tree_init(g, args.init_criterion)
    result = solve(g, init, config)
    save_result(result, args.out)
    print(f"final cost {result.final_cost:.6g} after {result.outer_iterations} "
          f"outer iterations (converged={result.converged})", file=sys.stderr)
    return EXIT_OK


def _gt_rotations(g: ViewGraph):
    gt = {nid: n.gt_rotation for nid, n in g.nodes.items() if n.gt_rotation is not None}
    if not gt:
        raise SchemaError("graph carries no ground-truth rotations (gt_qwxyz)")
    return gt


def _cmd_evaluate(args) -> int:
    est = load_result_rotations(args.est)
    gt = _gt_rotations(load_graph(args.gt))
    common = set(est) & set(gt)
    if not common:
        raise SchemaError("estimate and ground truth share no node ids")
    thresholds = [float(t) for t in args.thresholds.split(",")]
    alignment = align_rotations(est, gt)
    errors = list(alignment.per_view_errors.values())
    header = " ".join(f"AUC@{t:g}" for t in thresholds)
    print(f"views {len(errors)}  median_err_deg {np.median(errors):.4f}")
    print(header)
    print(" ".join(f"{auc(errors, t):6.2f}" for t in thresholds))
    if args.cdf:
        export_cdf(errors, args.cdf)
    return EXIT_OK


def _cmd_report(args) -> int:
    g = load_graph(args.infile)
    gt = _gt_rotations(g)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    losses = args.losses.split(",")
    weightings = args.weightings.split(",")
    rows = []
    for loss in losses:
        for weighting in weightings:
            ns = argparse.Namespace(
                loss=loss, weighting=weighting, loss_scale=args.loss_scale,
                magsac_nu=args.magsac_nu, magsac_alpha=args.magsac_alpha,
            )
            config = _solver_config(ns)
            init = spanning_tree_init(g, "auto")
            result = solve(g, init, config)
            alignment = align_rotations(result.rotations, gt)
            errors = list(alignment.per_view_errors.values())
            rows.append((loss, weighting, [auc(errors, t) for t in thresholds]))
    name_w = max(len(f"{l}+{w}") for l, w, _ in rows) + 2
    head = "setting".ljust(name_w) + "".join(f"AUC@{t:g}".rjust(9) for t in thresholds)
    print(head)
    for loss, weighting, aucs in rows:
        print(f"{loss}+{weighting}".ljust(name_w) + "".join(f"{a:9.2f}" for a in aucs))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["loss", "weighting"] + [f"auc@{t:g}" for t in thresholds])
            for loss, weighting, aucs in rows:
                writer.writerow([loss, weighting] + [f"{a:.4f}" for a in aucs])
    return EXIT_OK


def _cmd_bench(args) -> int:
    g = load_graph(args.infile)
    node_ids = g.node_ids
    index = {nid: row for row, nid in enumerate(node_ids)}
    init = spanning_tree_init(g, "auto")
    quats = np.array([init[nid].quaternion for nid in node_ids])
    edges = np.array([[index[e.i], index[e.j]] for e in g.edges], dtype=np.int64)
    meas = np.array([e.rotation.quaternion for e in g.edges])

    def time_fn(fn, repeats):
        fn(quats, edges, meas)  # warm-up (jit compilation)
        start = time.perf_counter()
        for _ in range(repeats):
            fn(quats, edges, meas)
        return (time.perf_counter() - start) / repeats

    print(f"graph: {len(node_ids)} nodes, {len(g.edges)} edges")
    t_np = time_fn(kernels.edge_terms_numpy, args.repeats)
    print(f"edge_terms numpy : {t_np * 1e6:10.1f} us/call")
    if kernels.USING_NUMBA:
        t_nb = time_fn(kernels.edge_terms_numba, args.repeats)
        print(f"edge_terms numba : {t_nb * 1e6:10.1f} us/call  (speedup x{t_np / t_nb:.2f})")
    else:
        print("edge_terms numba : unavailable (ROTAVG_DISABLE_NUMBA set or numba missing)")
    config = _solver_config(args)
    start = time.perf_counter()
    result = solve(g, init, config)
    elapsed = time.perf_counter() - start
    print(f"full solve ({kernels.backend_name()} backend): {elapsed:.3f} s, "
          f"{result.outer_iterations} outer iterations")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "weigh": _cmd_weigh,
    "average": _cmd_average,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _check_threads(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (_UsageError, ConfigurationError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateGeometryError, InsufficientDataError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
