"""Grasp-quality energies: the bilevel force-closure energy, its envelope
gradient, the fine-stage surrogate, the QP baseline and the Q1 metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import contact as ct
from .qpsolve import AdmmSettings, QpProblem, QpSolution, admm_solve, assemble_lower_qp


@dataclass(frozen=True)
class TaskWrenchSet:
    directions: np.ndarray  # (s, 6)

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if d.shape[1] != 6 or len(d) == 0:
            raise ValueError("task wrenches must be a nonempty list of 6-vectors")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-8):
            raise ValueError("task wrench directions must be unit vectors")
        object.__setattr__(self, "directions", d)

    def __len__(self):
        return len(self.directions)


def force_closure_directions() -> TaskWrenchSet:
    """Unit forces along +-x, +-y, +-z with zero torque."""
    I = np.eye(6)[:3]
    return TaskWrenchSet(np.concatenate([[I[0], -I[0]], [I[1], -I[1]], [I[2], -I[2]]]))


def wrench_axis_directions() -> TaskWrenchSet:
    """The twelve signed coordinate axes of wrench space."""
    I = np.eye(6)
    return TaskWrenchSet(np.stack([s * I[i] for i in range(6) for s in (1.0, -1.0)]))


@dataclass
class EnergyReport:
    total: float
    per_direction: np.ndarray
    contact_forces: np.ndarray  # (s, 8 m) edge weights per direction
    converged: np.ndarray  # (s,) bool
    gradient: np.ndarray | None = None


@dataclass
class BatchEnergy:
    """Batched lower-level solution for B grasps and s directions."""

    Q: np.ndarray  # (B, s)
    lam: np.ndarray  # (B, s, 8 m)
    W: np.ndarray  # (B, 6, 8 m)
    d: np.ndarray  # (B, m, 3)
    e: np.ndarray  # (B, m, 3)
    solution: QpSolution

    @property
    def total(self) -> np.ndarray:
        return self.Q.sum(axis=1)


def _lower_batch(W: np.ndarray, dirs: np.ndarray, beta: float, gamma: float) -> QpProblem:
    B, _, N = W.shape
    s = len(dirs)
    Wr = np.repeat(W, s, axis=0)
    tr = np.tile(dirs, (B, 1))
    return assemble_lower_qp(Wr, tr, beta, gamma)


def batch_grasp_energy(P: np.ndarray, N: np.ndarray, directions: TaskWrenchSet, beta: float, gamma: float,
                       mu: float, warm: QpSolution | None = None,
                       settings: AdmmSettings | None = None) -> BatchEnergy:
    """Solve every lower-level problem for contacts ``P``, inward normals ``N`` (B, m, 3)."""
    W, d, e = ct.wrench_edges_batch(P, N, mu)
    B = W.shape[0]
    dirs = directions.directions
    prob = _lower_batch(W, dirs, beta, gamma)
    if warm is not None and warm.x.shape != prob.q.shape:
        warm = None
    sol = admm_solve(prob, warm=warm, settings=settings, validate=False)
    Q = np.maximum(sol.objective + beta ** 2, 0.0).reshape(B, len(dirs))
    lam = sol.x.reshape(B, len(dirs), -1)
    return BatchEnergy(Q, lam, W, d, e, sol)


def energy_contact_gradient(P, N, be: BatchEnergy, directions: TaskWrenchSet, beta: float, mu: float):
    """Envelope gradient of ``sum_j Q_j`` w.r.t. contact points and normals.

    ``lam*`` is held fixed; the normal gradient includes the dependence of the
    tangent basis on ``n``. Returns (gP, gN), each (B, m, 3).
    """
    B, m, _ = P.shape
    k = ct.N_EDGES
    dirs = directions.directions
    lam = np.maximum(be.lam, 0.0).reshape(B, len(dirs), m, k)
    th = ct.edge_angles(k)
    a = lam.sum(axis=-1)
    b = mu * (lam * np.cos(th)).sum(axis=-1)
    c = mu * (lam * np.sin(th)).sum(axis=-1)
    d, e = be.d, be.e
    f = a[..., None] * N[:, None] + b[..., None] * d[:, None] + c[..., None] * e[:, None]  # (B, s, m, 3)
    r = beta * dirs[None] - np.einsum("bij,bsj->bsi", be.W, be.lam)  # (B, s, 6)
    rf, rt = r[..., None, :3], r[..., None, 3:]
    gf = -2.0 * (rf + np.cross(rt, P[:, None]))
    gP = (-2.0 * np.cross(f, rt)).sum(axis=1)
    gn = (a[..., None] * gf).sum(axis=1)
    gd = (b[..., None] * gf).sum(axis=1)
    ge = (c[..., None] * gf).sum(axis=1)
    # e = n x d
    gn = gn + np.cross(d, ge)
    gd = gd + np.cross(ge, N)
    # d = u / |u|, u = n x axis
    axis = np.zeros_like(N)
    use_y = np.abs(N[..., 0]) > ct._FALLBACK_DOT
    axis[..., 0] = np.where(use_y, 0.0, 1.0)
    axis[..., 1] = np.where(use_y, 1.0, 0.0)
    u = np.cross(N, axis)
    un = np.linalg.norm(u, axis=-1, keepdims=True)
    gu = (gd - d * np.sum(d * gd, axis=-1, keepdims=True)) / un
    gn = gn + np.cross(axis, gu)
    return gP, gn


def grasp_energy(contacts, directions: TaskWrenchSet | None = None, beta: float = 10.0,
                 gamma: float | None = None, mu: float = 0.6, settings: AdmmSettings | None = None,
                 with_gradient: bool = False) -> EnergyReport:
    """Force-closure energy ``sum_j min_lam ||beta t_j - W lam||^2`` of one grasp.

    Args:
        contacts: list of :class:`~bigrasp.contact.ContactFrame`.
        directions: task wrenches, force-closure set when omitted.
        beta: target wrench magnitude.
        gamma: total normal-force floor, ``0.1 m`` when omitted.
        mu: friction coefficient.
        settings: ADMM parameters.
        with_gradient: also return the envelope gradient w.r.t. contact
            points and normals, flattened as ``[gP (m, 3), gN (m, 3)]``.
    """
    directions = directions or force_closure_directions()
    m = len(contacts)
    gamma = 0.1 * m if gamma is None else gamma
    P = np.array([c.p for c in contacts])[None]
    N = np.array([c.n for c in contacts])[None]
    be = batch_grasp_energy(P, N, directions, beta, gamma, mu, settings=settings)
    grad = None
    if with_gradient:
        gP, gN = energy_contact_gradient(P, N, be, directions, beta, mu)
        grad = np.concatenate([gP[0].ravel(), gN[0].ravel()])
    return EnergyReport(float(be.Q[0].sum()), be.Q[0].copy(), be.lam[0].copy(),
                        be.solution.converged.copy(), grad)


def qp_baseline_energy(contacts, gamma: float | None = None, mu: float = 0.6,
                       settings: AdmmSettings | None = None) -> EnergyReport:
    """Baseline energy ``min ||W lam||^2`` subject to the normal-force floor
    (the bilevel energy with ``beta = 0``)."""
    return grasp_energy(contacts, TaskWrenchSet(np.eye(6)[:1]), 0.0, gamma, mu, settings)


# ---------------------------------------------------------------------------
# Q1


def primitive_wrenches(contacts, mu: float, edge_count: int = ct.N_EDGES) -> np.ndarray:
    """Per-contact edge wrenches, (m, edge_count, 6)."""
    W = ct.contact_wrench_matrix(contacts, mu, edge_count)
    return W.T.reshape(len(contacts), edge_count, 6)


def _affine_basis(pts: np.ndarray, tol: float):
    c = pts.mean(axis=0)
    _, s, Vt = np.linalg.svd(pts - c, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))
    return c, Vt[:rank]


def _hull_vertices(pts: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Vertices of conv(pts), handling lower-dimensional point sets."""
    if len(pts) <= 2:
        return pts
    c, basis = _affine_basis(pts, tol)
    r = len(basis)
    if r == 0:
        return pts[:1]
    y = (pts - c) @ basis.T
    if r == 1:
        return pts[[np.argmin(y[:, 0]), np.argmax(y[:, 0])]]
    if len(pts) <= r + 1:
        return pts
    try:
        hull = ConvexHull(y, qhull_options="Qt Qx" if r > 4 else "Qt")
    except QhullError:
        return pts
    return pts[np.sort(hull.vertices)]


def gws_vertices(wrenches: np.ndarray) -> np.ndarray:
    """Vertices of the Minkowski sum over contacts of conv({0} U edge wrenches)."""
    cur = np.zeros((1, 6))
    for w in wrenches:
        S = np.vstack([np.zeros((1, 6)), w])
        cur = (cur[:, None, :] + S[None, :, :]).reshape(-1, 6)
        cur = _hull_vertices(cur)
    return cur


def q1_metric(contacts, mu: float = 0.6, edge_count: int = ct.N_EDGES) -> float:
    """Radius of the largest origin-centred ball inside the grasp wrench space.

    The wrench space is the set of wrenches reachable with normal force at
    most 1 per contact under the pyramidal cone. Returns 0 when the origin
    lies on its boundary or the space is not full-dimensional.
    """
    if len(contacts) < 1:
        raise ValueError("need at least one contact")
    V = gws_vertices(primitive_wrenches(contacts, mu, edge_count))
    if len(V) < 7:
        return 0.0
    _, basis = _affine_basis(V, 1e-10)
    if len(basis) < 6:
        return 0.0
    try:
        hull = ConvexHull(V, qhull_options="Qt Qx")
    except QhullError:
        return 0.0
    return float(max(0.0, np.min(-hull.equations[:, -1])))


# ---------------------------------------------------------------------------
# fine-stage surrogate


def fine_stage_surrogate(c_world, anchors):
    """``Q' = sum_i ||c_i - p_i||^2`` and its gradient w.r.t. the hand points."""
    diff = np.asarray(c_world, dtype=float) - np.asarray(anchors, dtype=float)
    return float(np.sum(diff ** 2)), 2.0 * diff


def fine_stage_surrogate_pose(R, T, c_local, anchors):
    """Surrogate with ``c_i = R_i c_local_i + T_i`` (``c_local`` detached).

    Args:
        R: (m, 3, 3) link rotations.
        T: (m, 3) link translations.
        c_local: (m, 3) detached contact points in the link frames.
        anchors: (m, 3) target object points.

    Returns:
        value, gradient w.r.t. R (m, 3, 3), gradient w.r.t. T (m, 3).
    """
    c = np.einsum("mij,mj->mi", R, c_local) + T
    val, g = fine_stage_surrogate(c, anchors)
    return val, g[:, :, None] * np.asarray(c_local)[:, None, :], g
