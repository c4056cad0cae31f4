"""IRLS-wrapped damped Gauss-Newton rotation averaging.

Minimizes  sum_e rho(||W_e L_e(R_i, R_j, R_ij)||^2)  over all absolute
rotations, where ``W_e`` is the per-edge weighting transform (identity,
scalar, or the covariance whitener ``D_e^T``) and ``rho`` a robust loss.

The outer loop freezes IRLS weights from the current residuals; the inner
loop runs Levenberg-damped Gauss-Newton on the resulting weighted
least-squares problem over right tangent-space updates
``R_i <- R_i exp(delta_i)``, with the smallest-id node held fixed (gauge).
Inner steps are accepted only when they decrease the frozen weighted
least-squares cost, which (rho being concave in the squared residual)
guarantees the robust cost never increases across outer iterations.

All traversal and summation is in sorted edge-key order, so identical
inputs produce bit-identical results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import kernels
from .errors import ConfigurationError, NumericalError
from .losses import LossSpec, evaluate_loss
from .so3 import Rotation, exp_so3, relative_residual
from .viewgraph import EdgeMeasurement, ViewGraph, connected_components

logger = logging.getLogger(__name__)

WEIGHTING_MODES = ("none", "inlier_count", "cov_trace", "cov_fro", "cov_full")

# switch from dense to sparse normal equations above this node count
DENSE_NODE_LIMIT = 64


@dataclass(frozen=True)
class SolverConfig:
    loss: LossSpec = field(default_factory=lambda: LossSpec("trivial"))
    weighting: str = "none"
    max_outer_irls: int = 32
    max_inner_gn: int = 10
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    cost_rel_tol: float = 1e-9
    damping_init: float = 1e-4
    fallback_to_unit: bool = True

    def __post_init__(self):
        if self.weighting not in WEIGHTING_MODES:
            raise ConfigurationError(
                f"unknown weighting mode {self.weighting!r}; choose from {WEIGHTING_MODES}"
            )
        if self.max_outer_irls < 1 or self.max_inner_gn < 1:
            raise ConfigurationError("iteration caps must be >= 1")
        for name in ("gradient_tol", "step_tol", "cost_rel_tol", "damping_init"):
            if getattr(self, name) <= 0.0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class AveragingResult:
    rotations: dict[int, Rotation]
    final_cost: float
    outer_iterations: int
    converged: bool
    edge_weights: dict[tuple[int, int], float]
    edge_residual_norms: dict[tuple[int, int], float]
    termination: str = ""
    unit_fallback_edges: int = 0


def _edge_transform(e: EdgeMeasurement, weighting: str, mean_inliers: float,
                    fallback_to_unit: bool):
    """3x3 transform W_e applied to the raw residual; None means identity."""
    if weighting == "none":
        return None
    missing_cov = e.covariance is None
    if weighting == "inlier_count":
        if e.inlier_count is None:
            if not fallback_to_unit:
                raise ConfigurationError(
                    f"edge ({e.i}, {e.j}) has no inlier count for inlier_count weighting"
                )
            logger.warning("edge (%d, %d): missing inlier count, using unit weight", e.i, e.j)
            return None
        return math.sqrt(e.inlier_count / mean_inliers) * np.eye(3)
    if missing_cov:
        if not fallback_to_unit:
            raise ConfigurationError(
                f"edge ({e.i}, {e.j}) has no covariance for {weighting} weighting"
            )
        logger.warning("edge (%d, %d): missing covariance, using unit weight", e.i, e.j)
        return None
    if weighting == "cov_full":
        return e.whitener.T.copy()
    if weighting == "cov_trace":
        return np.eye(3) / math.sqrt(float(np.trace(e.covariance)))
    if weighting == "cov_fro":
        inv = e.whitener @ e.whitener.T
        return math.sqrt(float(np.linalg.norm(inv)) / 3.0) * np.eye(3)
    raise ConfigurationError(f"unknown weighting mode {weighting!r}")


def _mean_inliers(g: ViewGraph) -> float:
    counts = [e.inlier_count for e in g.edges if e.inlier_count is not None]
    return float(np.mean(counts)) if counts else 1.0


def edge_weighted_residual(e: EdgeMeasurement, ri: Rotation, rj: Rotation,
                           weighting: str, mean_inliers: float = 1.0) -> np.ndarray:
    """Weighted residual W_e L_e for one edge (see module docstring)."""
    r = relative_residual(ri, rj, e.rotation)
    w = _edge_transform(e, weighting, mean_inliers, fallback_to_unit=True)
    return r if w is None else w @ r


def _transform_stack(g: ViewGraph, config: SolverConfig):
    """(E, 3, 3) weighting transforms plus the unit-fallback count."""
    mean_inl = _mean_inliers(g)
    mats = np.empty((len(g.edges), 3, 3))
    fallbacks = 0
    for idx, e in enumerate(g.edges):
        w = _edge_transform(e, config.weighting, mean_inl, config.fallback_to_unit)
        if w is None:
            mats[idx] = np.eye(3)
            if config.weighting != "none":
                fallbacks += 1
        else:
            mats[idx] = w
    return mats, fallbacks


def cost(g: ViewGraph, rotations: dict[int, Rotation], config: SolverConfig) -> float:
    """Robust objective sum_e rho(||W_e r_e||^2), summed in edge-key order."""
    transforms, _ = _transform_stack(g, config)
    total = 0.0
    for idx, e in enumerate(g.edges):
        r = transforms[idx] @ relative_residual(rotations[e.i], rotations[e.j], e.rotation)
        s = float(r @ r)
        if not math.isfinite(s):
            raise NumericalError(f"non-finite residual on edge ({e.i}, {e.j})")
        total += evaluate_loss(config.loss, s).value
    return total


def chordal_cost(g: ViewGraph, rotations: dict[int, Rotation]) -> float:
    """Reference chordal objective sum_e ||R_ij R_j - R_i||_F^2."""
    total = 0.0
    for e in g.edges:
        d = e.rotation.matrix @ rotations[e.j].matrix - rotations[e.i].matrix
        total += float(np.sum(d * d))
    return total


def _quats_from_init(node_ids, init):
    quats = np.empty((len(node_ids), 4))
    for row, nid in enumerate(node_ids):
        quats[row] = init[nid].quaternion
    return quats


def _apply_step(quats, delta):
    """Right-multiplicative update R_i <- R_i exp(delta_i), per node."""
    out = quats.copy()
    for row in range(quats.shape[0]):
        d = delta[row]
        if d[0] == 0.0 and d[1] == 0.0 and d[2] == 0.0:
            continue
        q = Rotation(quats[row]).compose(exp_so3(d)).quaternion
        out[row] = q
    return out


def _weighted_ls_cost(rw, lw):
    return float(np.sum(lw * np.sum(rw * rw, axis=1)))


def _solve_normal_equations(h_blocks, grad, free_index, n_free, lam, dense):
    """Solve (H + lam I) delta = -grad over the gauge-reduced system."""
    if dense:
        h = np.zeros((3 * n_free, 3 * n_free))
        for (a, b), block in h_blocks.items():
            h[3 * a:3 * a + 3, 3 * b:3 * b + 3] += block
            if a != b:
                h[3 * b:3 * b + 3, 3 * a:3 * a + 3] += block.T
        h[np.arange(3 * n_free), np.arange(3 * n_free)] += lam
        return np.linalg.solve(h, -grad)
    rows, cols, vals = [], [], []
    for (a, b), block in h_blocks.items():
        for u in range(3):
            for v in range(3):
                rows.append(3 * a + u)
                cols.append(3 * b + v)
                vals.append(block[u, v])
                if a != b:
                    rows.append(3 * b + v)
                    cols.append(3 * a + u)
                    vals.append(block[u, v])
    for d in range(3 * n_free):
        rows.append(d)
        cols.append(d)
        vals.append(lam)
    h = scipy.sparse.csc_matrix(
        (vals, (rows, cols)), shape=(3 * n_free, 3 * n_free)
    )
    return scipy.sparse.linalg.spsolve(h, -grad)


def solve(g: ViewGraph, init: dict[int, Rotation], config: SolverConfig) -> AveragingResult:
    """Run IRLS + damped Gauss-Newton rotation averaging."""
    if len(connected_components(g)) != 1:
        raise ValueError("graph is disconnected; solve each component separately")
    node_ids = g.node_ids
    missing = [nid for nid in node_ids if nid not in init]
    if missing:
        raise ValueError(f"initialization missing nodes {missing}")
    index = {nid: row for row, nid in enumerate(node_ids)}
    n = len(node_ids)
    edges_idx = np.array([[index[e.i], index[e.j]] for e in g.edges], dtype=np.int64)
    meas = np.array([e.rotation.quaternion for e in g.edges])
    transforms, fallbacks = _transform_stack(g, config)
    quats = _quats_from_init(node_ids, init)

    gauge_row = 0  # smallest node id is pinned to its initial rotation
    free_rows = np.array([r for r in range(n) if r != gauge_row])
    free_index = {row: k for k, row in enumerate(free_rows)}
    dense = n <= DENSE_NODE_LIMIT

    def residuals(q):
        res, amat = kernels.edge_terms(q, edges_idx, meas)
        rw = np.einsum("eab,eb->ea", transforms, res)
        return res, amat, rw

    def robust_cost_of(rw):
        total = 0.0
        weights = np.empty(len(g.edges))
        for idx in range(len(g.edges)):
            s = float(rw[idx] @ rw[idx])
            ev = evaluate_loss(config.loss, s)
            total += ev.value
            weights[idx] = ev.weight
        return total, weights

    res, amat, rw = residuals(quats)
    robust_cost, lw = robust_cost_of(rw)
    if not math.isfinite(robust_cost):
        bad = int(np.argmax(~np.isfinite(np.sum(rw, axis=1))))
        e = g.edges[bad]
        raise NumericalError(f"non-finite cost contribution on edge ({e.i}, {e.j})")

    converged = False
    termination = "max_outer_irls"
    outer_done = 0
    lam = config.damping_init

    for outer in range(config.max_outer_irls):
        outer_done = outer + 1
        prev_quats = quats.copy()
        prev_cost = robust_cost

        # inner: damped Gauss-Newton on the frozen-weight LS problem
        ls_cost = _weighted_ls_cost(rw, lw)
        for _ in range(config.max_inner_gn):
            # B_e = W_e A_e; J_i = -B_e, J_j = +B_e
            b = transforms @ amat
            grad = np.zeros(3 * (n - 1))
            h_blocks: dict[tuple[int, int], np.ndarray] = {}
            for idx in range(len(g.edges)):
                i_row, j_row = int(edges_idx[idx, 0]), int(edges_idx[idx, 1])
                be = b[idx]
                btb = lw[idx] * (be.T @ be)
                btr = lw[idx] * (be.T @ rw[idx])
                for row, sign in ((i_row, -1.0), (j_row, 1.0)):
                    if row == gauge_row:
                        continue
                    a = free_index[row]
                    grad[3 * a:3 * a + 3] += sign * btr
                    key = (a, a)
                    h_blocks[key] = h_blocks.get(key, 0.0) + btb
                if i_row != gauge_row and j_row != gauge_row:
                    a, c = free_index[i_row], free_index[j_row]
                    key = (min(a, c), max(a, c))
                    h_blocks[key] = h_blocks.get(key, 0.0) - (btb if a < c else btb.T)
            if np.max(np.abs(grad)) < config.gradient_tol:
                break

            accepted = False
            for _ in range(12):
                delta_free = _solve_normal_equations(
                    h_blocks, grad, free_index, n - 1, lam, dense
                )
                if not np.all(np.isfinite(delta_free)):
                    lam *= 10.0
                    continue
                delta = np.zeros((n, 3))
                delta[free_rows] = delta_free.reshape(-1, 3)
                trial = _apply_step(quats, delta)
                _, _, rw_trial = residuals(trial)
                ls_trial = _weighted_ls_cost(rw_trial, lw)
                if ls_trial <= ls_cost:
                    quats = trial
                    res, amat, rw = residuals(quats)
                    ls_cost = ls_trial
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    break
                lam *= 10.0
            if not accepted:
                break
            if np.linalg.norm(delta_free) < config.step_tol:
                break

        new_cost, new_lw = robust_cost_of(rw)
        if not math.isfinite(new_cost):
            raise NumericalError("non-finite robust cost during optimization")
        if new_cost > prev_cost + 1e-12:
            # IRLS safeguard: reject and stop at the previous iterate
            quats = prev_quats
            res, amat, rw = residuals(quats)
            robust_cost, lw = robust_cost_of(rw)
            converged = True
            termination = "irls_non_decrease_guard"
            break
        robust_cost, lw = new_cost, new_lw
        if abs(prev_cost - robust_cost) <= config.cost_rel_tol * max(1.0, prev_cost):
            converged = True
            termination = "cost_rel_tol"
            break

    rotations = {nid: Rotation(quats[index[nid]]) for nid in node_ids}
    final_cost = cost(g, rotations, config)
    edge_weights = {}
    edge_residual_norms = {}
    for idx, e in enumerate(g.edges):
        edge_weights[e.key] = float(lw[idx])
        edge_residual_norms[e.key] = float(np.linalg.norm(res[idx]))
    return AveragingResult(
        rotations=rotations,
        final_cost=final_cost,
        outer_iterations=outer_done,
        converged=converged,
        edge_weights=edge_weights,
        edge_residual_norms=edge_residual_norms,
        termination=termination,
        unit_fallback_edges=fallbacks,
    )


def save_result(result: AveragingResult, path) -> None:
    """Write the result JSON (rotations, cost, diagnostics)."""
    import json

    doc = {
        "rotations": [
            {"id": nid, "qwxyz": list(result.rotations[nid].quaternion)}
            for nid in sorted(result.rotations)
        ],
        "final_cost": result.final_cost,
        "iterations": result.outer_iterations,
        "converged": result.converged,
        "termination": result.termination,
        "edge_weights": [
            {
                "i": i,
                "j": j,
                "weight": result.edge_weights[(i, j)],
                "residual_norm": result.edge_residual_norms[(i, j)],
            }
            for (i, j) in sorted(result.edge_weights)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_result_rotations(path) -> dict[int, Rotation]:
    """Read back the rotations of a result JSON."""
    import json

    from .errors import SchemaError

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, dict) or "rotations" not in doc:
        raise SchemaError(f"{path}: expected object with 'rotations'")
    out = {}
    for rec in doc["rotations"]:
        out[int(rec["id"])] = Rotation(np.asarray(rec["qwxyz"], dtype=np.float64))
    return out
