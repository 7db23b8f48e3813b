"""Batched ADMM for QPs with a shared structure.

Problems have the standard form::

    minimise 0.5 x'Px + q'x  subject to  l <= Ax <= u

and are stacked along a leading batch axis. The iteration follows the
operator-splitting scheme popularised by OSQP (penalty ``rho``, proximal
regularisation ``sigma``, over-relaxation ``alpha``) with a per-element
adaptive ``rho`` and an optional active-set polish at the end. Every batch
element evolves independently, so batched and one-by-one solves agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contact import N_EDGES

CONVERGED = "converged"
MAX_ITERS = "max_iters"

_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_EQ_SCALE = 1e3


@dataclass
class QpProblem:
    P: np.ndarray  # (B, N, N)
    q: np.ndarray  # (B, N)
    A: np.ndarray  # (B, M, N)
    l: np.ndarray  # (B, M)
    u: np.ndarray  # (B, M)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.P.ndim == 2:
            self.P, self.q, self.A = self.P[None], self.q[None], self.A[None]
            self.l, self.u = self.l[None], self.u[None]

    @property
    def batch(self) -> int:
        return self.P.shape[0]

    @property
    def n(self) -> int:
        return self.P.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def __getitem__(self, idx) -> "QpProblem":
        idx = np.atleast_1d(np.arange(self.batch)[idx])
        return QpProblem(self.P[idx], self.q[idx], self.A[idx], self.l[idx], self.u[idx])

    def validate(self, psd_tol: float = 1e-9):
        B, N = self.q.shape
        M = self.l.shape[1]
        if self.P.shape != (B, N, N) or self.A.shape != (B, M, N) or self.u.shape != (B, M):
            raise ValueError("inconsistent QP batch dimensions")
        if not np.all(np.isfinite(self.P)) or not np.all(np.isfinite(self.q)) or not np.all(np.isfinite(self.A)):
            raise ValueError("QP data must be finite")
        scale = np.maximum(1.0, np.abs(self.P).max(axis=(1, 2)))
        if np.any(np.abs(self.P - np.swapaxes(self.P, 1, 2)).max(axis=(1, 2)) > psd_tol * scale):
            raise ValueError("P must be symmetric")
        if np.any(self.l > self.u):
            raise ValueError("constraint bounds must satisfy l <= u")
        ev = np.linalg.eigvalsh(self.P)
        bad = ev[:, 0] < -psd_tol * np.maximum(1.0, np.abs(ev[:, -1]))
        if np.any(bad):
            raise ValueError(f"P is not positive semidefinite for batch elements {np.nonzero(bad)[0][:5].tolist()}")


@dataclass
class QpSolution:
    x: np.ndarray  # (B, N) primal
    z: np.ndarray  # (B, M) constraint values
    dual: np.ndarray  # (B, M)
    objective: np.ndarray  # (B,)
    converged: np.ndarray  # (B,) bool
    primal_res: np.ndarray
    dual_res: np.ndarray
    iterations: np.ndarray
    rho: np.ndarray = field(repr=False)  # (B,) final scalar penalty

    @property
    def status(self) -> list:
        return [CONVERGED if c else MAX_ITERS for c in self.converged]

    def __getitem__(self, idx) -> "QpSolution":
        idx = np.atleast_1d(np.arange(len(self.objective))[idx])
        return QpSolution(self.x[idx], self.z[idx], self.dual[idx], self.objective[idx], self.converged[idx],
                          self.primal_res[idx], self.dual_res[idx], self.iterations[idx], self.rho[idx])

    @staticmethod
    def concatenate(sols) -> "QpSolution":
        return QpSolution(*(np.concatenate([getattr(s, f) for s in sols]) for f in
                            ("x", "z", "dual", "objective", "converged", "primal_res", "dual_res",
                             "iterations", "rho")))


@dataclass(frozen=True)
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    max_iters: int = 4000
    eps_abs: float = 1e-5
    eps_rel: float = 0.0
    check_interval: int = 5
    adaptive_rho: bool = True
    adapt_interval: int = 25
    adapt_tolerance: float = 5.0
    polish: bool = True


def _rho_vector(rho: np.ndarray, l: np.ndarray, u: np.ndarray) -> np.ndarray:
    r = np.broadcast_to(rho[:, None], l.shape).copy()
    eq = np.abs(u - l) < 1e-12
    free = np.isinf(l) & np.isinf(u)
    r[eq] *= _EQ_SCALE
    r[free] = _RHO_MIN
    return r


def _kkt_inverse(P, A, rho_vec, sigma):
    N = P.shape[1]
    K = P + sigma * np.eye(N) + np.swapaxes(A, 1, 2) @ (rho_vec[:, :, None] * A)
    return np.linalg.inv(K)


def _mv(M, v):
    return (M @ v[:, :, None])[:, :, 0]


def _residuals(prob: QpProblem, x, z, y):
    Ax = _mv(prob.A, x)
    Px = _mv(prob.P, x)
    Aty = _mv(np.swapaxes(prob.A, 1, 2), y)
    rp = np.abs(Ax - z).max(axis=1) if z.shape[1] else np.zeros(len(x))
    rd = np.abs(Px + prob.q + Aty).max(axis=1)
    norm_p = np.maximum(np.abs(Ax).max(axis=1, initial=0.0), np.abs(z).max(axis=1, initial=0.0))
    norm_d = np.maximum.reduce([np.abs(Px).max(axis=1), np.abs(Aty).max(axis=1), np.abs(prob.q).max(axis=1)])
    return rp, rd, norm_p, norm_d


def admm_solve(problems: QpProblem, warm: QpSolution | None = None, max_iters: int | None = None,
               eps_p: float | None = None, eps_d: float | None = None,
               settings: AdmmSettings | None = None, validate: bool = True) -> QpSolution:
    """Solve a batch of QPs.

    Args:
        problems: batched problem data.
        warm: previous solution of a batch with the same shape; its primal,
            slack, dual and penalty are used as the starting point.
        max_iters: iteration cap (overrides ``settings``).
        eps_p: absolute primal residual tolerance (infinity norm).
        eps_d: absolute dual residual tolerance (infinity norm).
        settings: remaining solver parameters.
        validate: check symmetry, bounds and positive semidefiniteness of P.

    Returns:
        A :class:`QpSolution` with one entry per batch element.
    """
    s = settings or AdmmSettings()
    max_iters = s.max_iters if max_iters is None else max_iters
    eps_p = s.eps_abs if eps_p is None else eps_p
    eps_d = s.eps_abs if eps_d is None else eps_d
    prob = problems
    if validate:
        prob.validate()
    B, N, M = prob.batch, prob.n, prob.m

    if warm is not None:
        if warm.x.shape != (B, N) or warm.z.shape != (B, M):
            raise ValueError("warm start does not match the problem batch")
        x = warm.x.copy()
        z = np.clip(warm.z, prob.l, prob.u)
        y = warm.dual.copy()
        rho = np.clip(warm.rho.copy(), _RHO_MIN, _RHO_MAX)
    else:
        x = np.zeros((B, N))
        z = np.clip(np.zeros((B, M)), prob.l, prob.u)
        y = np.zeros((B, M))
        rho = np.full(B, float(s.rho))

    out_x, out_z, out_y = x.copy(), z.copy(), y.copy()
    out_rp = np.full(B, np.inf)
    out_rd = np.full(B, np.inf)
    out_it = np.zeros(B, dtype=np.int64)
    out_conv = np.zeros(B, dtype=bool)
    out_rho = rho.copy()

    active = np.arange(B)
    P, q, A, l, u = prob.P, prob.q, prob.A, prob.l, prob.u
    At = np.swapaxes(A, 1, 2)
    rho_vec = _rho_vector(rho, l, u)
    Kinv = _kkt_inverse(P, A, rho_vec, s.sigma)
    sigma, alpha = s.sigma, s.alpha

    it = 0
    while it < max_iters and len(active):
        rhs = sigma * x - q + _mv(At, rho_vec * z - y)
        xt = _mv(Kinv, rhs)
        zt = _mv(A, xt)
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rho_vec, l, u)
        y = y + rho_vec * (zr - z_new)
        z = z_new
        it += 1

        check = it % s.check_interval == 0 or it == max_iters
        adapt = s.adaptive_rho and it % s.adapt_interval == 0
        if not (check or adapt):
            continue
        sub = QpProblem.__new__(QpProblem)
        sub.P, sub.q, sub.A, sub.l, sub.u = P, q, A, l, u
        rp, rd, norm_p, norm_d = _residuals(sub, x, z, y)
        tol_p = eps_p + s.eps_rel * norm_p
        tol_d = eps_d + s.eps_rel * norm_d
        done = (rp <= tol_p) & (rd <= tol_d)
        if it == max_iters:
            done = np.ones_like(done)
        if np.any(done):
            ids = active[done]
            out_x[ids], out_z[ids], out_y[ids] = x[done], z[done], y[done]
            out_rp[ids], out_rd[ids], out_it[ids] = rp[done], rd[done], it
            out_conv[ids] = (rp[done] <= tol_p[done]) & (rd[done] <= tol_d[done])
            out_rho[ids] = rho[done]
            keep = ~done
            active = active[keep]
            x, z, y, rho = x[keep], z[keep], y[keep], rho[keep]
            P, q, A, At, l, u = P[keep], q[keep], A[keep], At[keep], l[keep], u[keep]
            rho_vec, Kinv = rho_vec[keep], Kinv[keep]
            rp, rd, norm_p, norm_d = rp[keep], rd[keep], norm_p[keep], norm_d[keep]
        if adapt and len(active):
            num = rp / np.maximum(norm_p, 1e-12)
            den = rd / np.maximum(norm_d, 1e-12)
            ratio = np.sqrt(num / np.maximum(den, 1e-300))
            new_rho = np.clip(rho * ratio, _RHO_MIN, _RHO_MAX)
            change = (new_rho > rho * s.adapt_tolerance) | (new_rho < rho / s.adapt_tolerance)
            change &= np.isfinite(new_rho) & (rd > 0)
            if np.any(change):
                rho = np.where(change, new_rho, rho)
                rho_vec[change] = _rho_vector(rho[change], l[change], u[change])
                Kinv[change] = _kkt_inverse(P[change], A[change], rho_vec[change], sigma)

    sol = QpSolution(out_x, out_z, out_y, np.zeros(B), out_conv, out_rp, out_rd, out_it, out_rho)
    if s.polish:
        _polish(prob, sol, eps_p, eps_d)
    sol.objective = 0.5 * np.einsum("bi,bi->b", sol.x, _mv(prob.P, sol.x)) + np.einsum("bi,bi->b", prob.q, sol.x)
    return sol


def _polish(prob: QpProblem, sol: QpSolution, eps_p: float, eps_d: float, delta: float = 1e-7, refine: int = 5):
    """Active-set refinement: solve the equality-constrained KKT system on the
    constraints the ADMM iterate deems active, and keep the result only if it
    improves both residuals (or meets tolerance)."""
    B, N, M = prob.batch, prob.n, prob.m
    z, y = sol.z, sol.dual
    lower = (z - prob.l < -y) | (np.abs(prob.u - prob.l) < 1e-12)
    upper = (prob.u - z < y) & ~lower
    act = lower | upper
    bound = np.where(lower, prob.l, prob.u)
    K = np.zeros((B, N + M, N + M))
    K[:, :N, :N] = prob.P
    Aact = prob.A * act[:, :, None]
    K[:, :N, N:] = np.swapaxes(Aact, 1, 2)
    K[:, N:, :N] = Aact
    idx = np.arange(M)
    K[:, N + idx, N + idx] = np.where(act, 0.0, 1.0)
    rhs = np.concatenate([-prob.q, np.where(act, bound, 0.0)], axis=1)
    Kreg = K.copy()
    di = np.arange(N)
    Kreg[:, di, di] += delta
    Kreg[:, N + idx, N + idx] -= np.where(act, delta, 0.0)
    try:
        sol_v = np.linalg.solve(Kreg, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return
    for _ in range(refine):
        r = rhs - (K @ sol_v[:, :, None])[:, :, 0]
        sol_v = sol_v + np.linalg.solve(Kreg, r[:, :, None])[:, :, 0]
    xp = sol_v[:, :N]
    yp = np.where(act, sol_v[:, N:], 0.0)
    # enforce dual sign consistency with the guessed active bound
    ok = np.all(np.where(lower & ~(np.abs(prob.u - prob.l) < 1e-12), yp <= 1e-9, True), axis=1)
    ok &= np.all(np.where(upper, yp >= -1e-9, True), axis=1)
    zp = np.clip(_mv(prob.A, xp), prob.l, prob.u)
    rp, rd, _, _ = _residuals(prob, xp, zp, yp)
    good = ok & np.all(np.isfinite(sol_v), axis=1) & (
        ((rp <= eps_p) & (rd <= eps_d)) | ((rp <= sol.primal_res) & (rd <= sol.dual_res)))
    if np.any(good):
        sol.x[good], sol.z[good], sol.dual[good] = xp[good], zp[good], yp[good]
        sol.primal_res[good], sol.dual_res[good] = rp[good], rd[good]
        sol.converged[good] = (rp[good] <= eps_p) & (rd[good] <= eps_d)


# ---------------------------------------------------------------------------
# the grasp lower-level problem


def lower_qp_constraints(m: int, gamma: float, k: int = N_EDGES):
    """Constraint block shared by every lower-level QP with ``m`` contacts."""
    if m < 1:
        raise ValueError("need at least one contact")
    if gamma > m:
        raise ValueError(f"gamma={gamma} exceeds the number of contacts m={m}: the force floor "
                         "cannot be met under unit per-contact caps")
    N = k * m
    A = np.zeros((m + 1 + N, N))
    for i in range(m):
        A[i, i * k:(i + 1) * k] = 1.0
    A[m, :] = 1.0
    A[m + 1:, :] = np.eye(N)
    low = np.concatenate([np.zeros(m), [gamma], np.zeros(N)])
    up = np.concatenate([np.ones(m), [np.inf], np.full(N, np.inf)])
    return A, low, up


def assemble_lower_qp(W: np.ndarray, t: np.ndarray, beta: float, gamma: float, k: int = N_EDGES) -> QpProblem:
    """Lower-level QP in edge-weight coordinates.

    Args:
        W: stacked edge wrenches, (6, k m) or batched (B, 6, k m).
        t: task wrench direction(s), (6,) or (B, 6).
        beta: target wrench magnitude, ``beta >= 0``.
        gamma: floor on the total normal force.
        k: edges per contact.

    Returns:
        Problem whose optimal value plus ``beta**2`` is ``min ||beta t - W lam||^2``.
    """
    W = np.asarray(W, dtype=float)
    t = np.asarray(t, dtype=float)
    if W.ndim == 2:
        W = W[None]
    if t.ndim == 1:
        t = np.broadcast_to(t, (W.shape[0], 6))
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    B, _, N = W.shape
    if N % k:
        raise ValueError("wrench matrix width must be a multiple of the edge count")
    m = N // k
    A, low, up = lower_qp_constraints(m, gamma, k)
    Wt = np.swapaxes(W, 1, 2)
    P = 2.0 * Wt @ W
    P = 0.5 * (P + np.swapaxes(P, 1, 2))
    q = -2.0 * beta * _mv(Wt, t)
    return QpProblem(P, q, np.broadcast_to(A, (B,) + A.shape).copy(),
                     np.broadcast_to(low, (B, len(low))).copy(), np.broadcast_to(up, (B, len(up))).copy())


def solution_wrench(lam: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Applied wrench ``W lam`` for (N,) / (B, N) weights."""
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 1:
        return np.asarray(W) @ lam
    return _mv(np.asarray(W), lam)
