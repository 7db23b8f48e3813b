"""Grasp evaluation: a quasi-static success oracle and the penetration,
contact-consistency, diversity and ROC metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from scipy.spatial.transform import Rotation

from . import _kernels
from . import contact as ct
from . import hand as hd
from .assets import ObjectModel
from .geometry import point_queries as geo_point_queries
from .pipeline import _Evaluator, SynthesisConfig
from .energy import force_closure_directions
from .qpsolve import AdmmSettings, QpProblem, admm_solve


@dataclass(frozen=True)
class EvalConfig:
    mass_kg: float = 0.03
    gravity: float = 9.8
    mu: float = 0.6
    residual_tol: float = 1e-3  # relative to |w_g|
    penetration_tol_mm: float = 3.0
    contact_tol: float = 0.002
    force_budget: float = 20.0  # total normal force in units of mass * g
    min_contacts: int = 2


@dataclass
class EvalResult:
    success: bool
    per_direction_residuals: np.ndarray
    pd_mm: float
    spd_mm: float
    cdc_mm: float
    n_contacts: int
    notes: str = ""


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def _vec(x):
    return np.asarray(x.to_vector() if isinstance(x, hd.GraspConfig) else x, dtype=float)


def _evaluator(model, obj):
    return _Evaluator(model, obj, SynthesisConfig(), force_closure_directions())


# ---------------------------------------------------------------------------
# penetration and consistency metrics


def penetration_depths(model: hd.HandModel, obj: ObjectModel, X: np.ndarray) -> np.ndarray:
    """Maximum hand/object intersection depth per grasp, meters."""
    X = np.atleast_2d(X)
    ev = _evaluator(model, obj)
    _, hinge = ev.mesh_queries(hd.fk_batch(model, X))
    hb, _, depth, _, _ = hinge
    out = np.zeros(len(X))
    np.maximum.at(out, hb, depth)
    return out


def penetration_depth(model: hd.HandModel, x, obj: ObjectModel) -> float:
    """Maximum intersection depth between hand and object, millimeters."""
    return float(penetration_depths(model, obj, _vec(x)[None])[0] * 1e3)


def self_penetration_depths(model: hd.HandModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    if len(model.part_pairs) == 0:
        return np.zeros(len(X))
    fk = hd.fk_batch(model, X)
    ht = _evaluator_tables(model)
    B, K, P = len(X), len(ht.V), len(ht.part_links)
    HW = np.einsum("bkij,kj->bki", fk.R[:, ht.links], ht.V) + fk.T[:, ht.links]
    ranges = (ht.ranges[None] + (np.arange(B) * K)[:, None, None]).reshape(-1, 2)
    pp = model.part_pairs
    pairs = (pp[None] + (np.arange(B) * P)[:, None, None]).reshape(-1, 2)
    dist, *_ = _kernels.pair_queries(np.ascontiguousarray(HW.reshape(-1, 3)), ranges,
                                     np.ascontiguousarray(pairs))
    depth = np.maximum(-dist.reshape(B, len(pp)), 0.0)
    return depth.max(axis=1)


def _evaluator_tables(model):
    from .pipeline import _hand_tables
    return _hand_tables(model)


def self_penetration_depth(model: hd.HandModel, x) -> float:
    """Maximum intersection depth between non-adjacent hand parts, millimeters."""
    return float(self_penetration_depths(model, _vec(x)[None])[0] * 1e3)


def finger_distances(model: hd.HandModel, obj: ObjectModel, X: np.ndarray) -> np.ndarray:
    """Signed fingertip-mesh distances to the object (B, m), meters."""
    ev = _evaluator(model, obj)
    mc, _ = ev.mesh_queries(hd.fk_batch(model, np.atleast_2d(X)), want_hinge=False)
    return mc.sd


def fingertip_sphere_contacts(model: hd.HandModel, obj: ObjectModel, X: np.ndarray):
    """Contacts of the fingertip spheres with the object.

    The contact point is the object surface point closest to the fingertip
    centre and the normal is the object's inward normal there; this stays
    well defined when the fingertip is pushed into the surface.

    Returns:
        points (B, m, 3), inward normals (B, m, 3), signed gap (B, m) between
        fingertip sphere and surface, meters.
    """
    X = np.atleast_2d(X)
    fk = hd.fk_batch(model, X)
    C = hd.points_world(fk, model.tip_links, model.tip_points)
    W, SD, NR, _ = geo_point_queries(C.reshape(-1, 3), obj.table)
    B, m = C.shape[:2]
    W, SD, NR = W.reshape(B, m, 3), SD.reshape(B, m), NR.reshape(B, m, 3)
    diff = C - W
    rho = np.linalg.norm(diff, axis=-1)
    outside = (SD > 0) & (rho > 1e-9)
    n_out = np.where(outside[..., None], diff / np.maximum(rho, 1e-300)[..., None], NR)
    return W, -n_out, SD - model.tip_radii


def contact_distance_consistency(model: hd.HandModel, x, obj: ObjectModel) -> float:
    """Spread (max - min) of per-finger signed distances, millimeters."""
    sd = finger_distances(model, obj, _vec(x)[None])[0]
    return float((sd.max() - sd.min()) * 1e3)


# ---------------------------------------------------------------------------
# quasi-static oracle


def _gravity_targets() -> np.ndarray:
    """Wrenches that resist unit gravity along +-x, +-y, +-z (zero torque
    about the mass centre)."""
    g = np.concatenate([np.eye(3), -np.eye(3)])
    return np.concatenate([-g, np.zeros((6, 3))], axis=1)


def resist_residuals(W: np.ndarray, targets: np.ndarray, budget: float) -> np.ndarray:
    """``min ||W lam - t||`` over ``lam >= 0`` with ``sum(lam) <= budget``.

    Solved exactly by non-negative least squares; when that solution breaks
    the budget the constrained problem goes to the batched ADMM solver with
    polishing.

    Args:
        W: (B, 6, N) edge wrenches.
        targets: (s, 6) wrenches to produce.
        budget: bound on the total edge weight.

    Returns:
        (B, s) residual norms.
    """
    B, _, N = W.shape
    s = len(targets)
    out = np.empty((B, s))
    over = []
    for b in range(B):
        for j in range(s):
            lam, rnorm = nnls(W[b], targets[j])
            if lam.sum() <= budget * (1 + 1e-12):
                out[b, j] = rnorm
            else:
                over.append((b, j))
    if over:
        Wo = np.stack([W[b] for b, _ in over])
        t = np.stack([targets[j] for _, j in over])
        Wt = np.swapaxes(Wo, 1, 2)
        P = 2 * Wt @ Wo
        P = 0.5 * (P + np.swapaxes(P, 1, 2))
        q = -2 * (Wt @ t[:, :, None])[:, :, 0]
        A = np.vstack([np.ones((1, N)), np.eye(N)])
        l = np.concatenate([[-np.inf], np.zeros(N)])
        u = np.concatenate([[budget], np.full(N, np.inf)])
        k = len(over)
        prob = QpProblem(P, q, np.broadcast_to(A, (k,) + A.shape).copy(), np.tile(l, (k, 1)),
                         np.tile(u, (k, 1)))
        sol = admm_solve(prob, settings=AdmmSettings(max_iters=4000, eps_abs=1e-10, polish=True),
                         validate=False)
        lam = np.clip(sol.x, 0.0, None)
        lam *= np.minimum(1.0, budget / np.maximum(lam.sum(axis=1), 1e-300))[:, None]
        r = np.linalg.norm(np.einsum("kij,kj->ki", Wo, lam) - t, axis=1)
        for (b, j), v in zip(over, r):
            out[b, j] = v
    return out


def quasi_static_batch(model: hd.HandModel, obj: ObjectModel, X: np.ndarray, X_s: np.ndarray,
                       cfg: EvalConfig | None = None) -> list:
    """Evaluate grasps ``X`` with squeeze poses ``X_s``.

    Contacts are fingertip spheres within ``contact_tol`` of the object at
    ``X_s`` (penetrating ones included, see
    :func:`fingertip_sphere_contacts`). A grasp succeeds when each of the
    six gravity wrenches can be resisted to within ``residual_tol`` under
    the force budget, at least ``min_contacts`` fingertips touch, and the
    penetration depth at ``X`` stays below ``penetration_tol_mm``.
    """
    cfg = cfg or EvalConfig()
    X, X_s = np.atleast_2d(X), np.atleast_2d(X_s)
    B = len(X)
    P, Nin, gap = fingertip_sphere_contacts(model, obj, X_s)
    touch = gap <= cfg.contact_tol
    W, _, _ = ct.wrench_edges_batch(P, Nin, cfg.mu)
    mask = np.repeat(touch, ct.N_EDGES, axis=1)
    W = W * mask[:, None, :]
    resid = resist_residuals(W, _gravity_targets(), cfg.force_budget)
    pd = penetration_depths(model, obj, X) * 1e3
    spd = self_penetration_depths(model, X) * 1e3
    sd_x = finger_distances(model, obj, X)
    cdc = (sd_x.max(axis=1) - sd_x.min(axis=1)) * 1e3
    out = []
    for b in range(B):
        n_c = int(touch[b].sum())
        notes = []
        if n_c == 0:
            notes.append("no contacts at squeeze pose")
        elif n_c < cfg.min_contacts:
            notes.append(f"only {n_c} contact(s)")
        if pd[b] > cfg.penetration_tol_mm:
            notes.append(f"penetration {pd[b]:.2f} mm")
        bad = resid[b] > cfg.residual_tol
        if np.any(bad):
            notes.append(f"{int(bad.sum())} gravity direction(s) not resisted")
        ok = n_c >= cfg.min_contacts and not np.any(bad) and pd[b] <= cfg.penetration_tol_mm
        out.append(EvalResult(bool(ok), resid[b], float(pd[b]), float(spd[b]), float(cdc[b]), n_c,
                              "; ".join(notes)))
    return out


def quasi_static_check(model: hd.HandModel, record, obj: ObjectModel, mass_kg: float = 0.03,
                       g: float = 9.8, mu: float = 0.6, cfg: EvalConfig | None = None) -> EvalResult:
    """Single-grasp oracle; ``record`` provides ``x`` and ``x_s``."""
    cfg = cfg or EvalConfig(mass_kg=mass_kg, gravity=g, mu=mu)
    return quasi_static_batch(model, obj, _vec(record.x)[None], _vec(record.x_s)[None], cfg)[0]


# ---------------------------------------------------------------------------
# diversity and ROC


def pose_features(X: np.ndarray) -> np.ndarray:
    """[axis-angle (3), translation (3), joints (n)] per pose."""
    X = np.atleast_2d(X)
    R, _ = hd.project_rotations(X[:, :9].reshape(-1, 3, 3))
    rv = Rotation.from_matrix(R).as_rotvec()
    ang = np.linalg.norm(rv, axis=1)
    flip = (ang > np.pi - 1e-9) & (rv[:, 0] < 0)
    rv[flip] = -rv[flip]
    return np.concatenate([rv, X[:, 9:12], X[:, 12:]], axis=1)


def first_variance_ratio(records, return_flag: bool = False):
    """Share (percent) of total variance along the first principal axis.

    Args:
        records: grasp records (objects with ``x``) or a feature matrix whose
            rows are already ``[axis-angle, translation, joints]``.
        return_flag: also return whether the set was degenerate.
    """
    if isinstance(records, np.ndarray):
        F = np.atleast_2d(np.asarray(records, dtype=float))
    else:
        F = pose_features(np.array([_vec(r.x) for r in records]))
    if len(F) < 2:
        raise ValueError("need at least two grasps")
    ev = np.linalg.eigvalsh(np.cov(F, rowvar=False).reshape(F.shape[1], F.shape[1]))
    total = ev.sum()
    if total <= 1e-300:
        return (100.0, True) if return_flag else 100.0
    val = float(ev[-1] / total * 100.0)
    return (val, False) if return_flag else val


def roc_auc(energies, labels) -> RocCurve:
    """ROC of the rule "energy <= threshold predicts success"."""
    e = np.asarray(energies, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if e.shape != y.shape or e.ndim != 1:
        raise ValueError("energies and labels must be equal-length 1-D sequences")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both successful and failed grasps")
    thr = np.unique(e)
    order = np.argsort(e, kind="stable")
    es, ys = e[order], y[order]
    # counts of predictions (energy <= threshold) for every unique threshold
    idx = np.searchsorted(es, thr, side="right")
    tp = np.concatenate([[0], np.cumsum(ys)])[idx]
    fp = np.concatenate([[0], np.cumsum(~ys)])[idx]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[-np.inf], thr])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(thresholds, tpr, fpr, auc)
