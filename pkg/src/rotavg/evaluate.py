"""Alignment to ground truth and rotation-error statistics.

Estimates and ground truth differ by the gauge freedom of the averaging
objective: a common right-multiplied rotation.  The alignment therefore
fits one rotation ``R_align`` minimizing a robust (Cauchy) cost over the
per-node discrepancies ``m_i = R_i^T R_i'`` (ground truth vs. estimate) and
reports ``error_i = ||Log(m_i R_align^T)||``, the geodesic angle between
the ground truth and the gauge-corrected estimate ``R_i' R_align^T``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .losses import LossSpec, evaluate_loss
from .so3 import Rotation, exp_so3, log_so3

__all__ = ["AlignmentResult", "align_rotations", "auc", "export_cdf"]

# Cauchy scale (radians) for the robust single-rotation fit
ALIGN_CAUCHY_SCALE = 0.1


@dataclass(frozen=True)
class AlignmentResult:
    r_align: Rotation
    per_view_errors: dict[int, float]  # degrees
    inlier_fraction_under_5deg: float


def _chordal_mean_quat(quats: np.ndarray) -> Rotation:
    """Single-rotation chordal mean via the quaternion eigenvector method."""
    m = np.zeros((4, 4))
    ref = quats[0]
    for q in quats:
        if float(q @ ref) < 0.0:
            q = -q
        m += np.outer(q, q)
    _, vecs = np.linalg.eigh(m)
    return Rotation(vecs[:, -1])


def _jr_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = np.array([
        [0.0, -phi[2], phi[1]],
        [phi[2], 0.0, -phi[0]],
        [-phi[1], phi[0], 0.0],
    ])
    if theta < 1e-4:
        c = 1.0 / 12.0 + theta ** 2 / 720.0
    else:
        c = 1.0 / theta ** 2 - (np.cos(theta / 2.0) / np.sin(theta / 2.0)) / (2.0 * theta)
    return np.eye(3) + 0.5 * k + c * (k @ k)


def fit_alignment_rotation(discrepancies: list[Rotation], loss: LossSpec) -> Rotation:
    """Robust mean of the per-node discrepancies m_i (IRLS + damped GN)."""
    quats = np.array([m.quaternion for m in discrepancies])
    r_align = _chordal_mean_quat(quats)

    def residuals(r):
        rt = r.inverse()
        return np.array([log_so3(m.compose(rt)) for m in discrepancies])

    lam = 1e-6
    prev_cost = None
    for _ in range(64):
        res = residuals(r_align)
        s = np.sum(res * res, axis=1)
        evals = [evaluate_loss(loss, float(si)) for si in s]
        cost = sum(ev.value for ev in evals)
        if prev_cost is not None and abs(prev_cost - cost) <= 1e-14 * max(1.0, prev_cost):
            break
        prev_cost = cost
        w = np.array([ev.weight for ev in evals])
        # residual r_i = Log(m_i R^T); for R <- R exp(d): dr/dd = -Jr_inv(r_i) R
        rmat = r_align.matrix
        h = np.zeros((3, 3))
        grad = np.zeros(3)
        for i in range(len(discrepancies)):
            j = -_jr_inv(res[i]) @ rmat
            h += w[i] * (j.T @ j)
            grad += w[i] * (j.T @ res[i])
        if np.max(np.abs(grad)) < 1e-14:
            break
        accepted = False
        for _ in range(10):
            try:
                delta = np.linalg.solve(h + lam * np.eye(3), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = r_align.compose(exp_so3(delta))
            res_t = residuals(trial)
            s_t = np.sum(res_t * res_t, axis=1)
            cost_t = sum(evaluate_loss(loss, float(si)).value for si in s_t)
            if cost_t <= cost:
                r_align = trial
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or np.linalg.norm(delta) < 1e-14:
            break
    return r_align


def align_rotations(
    est: dict[int, Rotation],
    gt: dict[int, Rotation],
    loss: LossSpec | None = None,
) -> AlignmentResult:
    """Fit the gauge rotation and compute per-view errors in degrees."""
    common = sorted(set(est) & set(gt))
    if not common:
        raise ValueError("estimate and ground truth share no node ids")
    if loss is None:
        loss = LossSpec("cauchy", scale=ALIGN_CAUCHY_SCALE)
    discrepancies = [gt[nid].inverse().compose(est[nid]) for nid in common]
    r_align = fit_alignment_rotation(discrepancies, loss)
    errors = {}
    for nid, m in zip(common, discrepancies):
        ang = float(np.linalg.norm(log_so3(m.compose(r_align.inverse()))))
        errors[nid] = np.degrees(ang)
    under5 = sum(1 for e in errors.values() if e < 5.0) / len(errors)
    return AlignmentResult(
        r_align=r_align,
        per_view_errors=errors,
        inlier_fraction_under_5deg=under5,
    )


def auc(errors, threshold: float) -> float:
    """Exact area under the step recall curve, in percent.

    AUC@a = (100/N) * sum_i max(0, 1 - e_i / a).
    """
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("empty error list")
    if not np.all(np.isfinite(errors)):
        raise ValueError("non-finite errors")
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    return float(np.mean(np.maximum(0.0, 100.0 * (1.0 - errors / threshold))))


def export_cdf(errors, path) -> None:
    """Write sorted errors with their empirical CDF as CSV."""
    errors = sorted(float(e) for e in errors)
    if not errors:
        raise ValueError("empty error list")
    n = len(errors)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["error_deg", "cdf"])
        for i, e in enumerate(errors):
            writer.writerow([repr(e), repr((i + 1) / n)])
