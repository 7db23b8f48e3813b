"""Independent reference implementations used only by the tests.

None of these call into the package: each recomputes its quantity from the
definition with a different (slower) algorithm.
"""
from __future__ import annotations

import itertools

import numpy as np
import quadprog
from scipy.spatial import ConvexHull


# ---------------------------------------------------------------------------
# geometry


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def convex_distance(Va: np.ndarray, Vb: np.ndarray, iters: int = 5000) -> float:
    """min |Va' a - Vb' b| over simplex weights a, b, by accelerated
    projected gradient (FISTA)."""
    na, nb = len(Va), len(Vb)
    M = np.vstack([Va, -Vb])  # (na + nb, 3)
    H = M @ M.T
    L = 2 * np.linalg.eigvalsh(H)[-1]
    w = np.concatenate([np.full(na, 1 / na), np.full(nb, 1 / nb)])
    y, t = w.copy(), 1.0
    for _ in range(iters):
        g = 2 * H @ y
        z = y - g / L
        wn = np.concatenate([_project_simplex(z[:na]), _project_simplex(z[na:])])
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = wn + (t - 1) / tn * (wn - w)
        w, t = wn, tn
    return float(np.linalg.norm(M.T @ w))


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)


def scan_depth(Va: np.ndarray, Vb: np.ndarray, n_dirs: int = 1000, refine: int = 8) -> float:
    """Minimum translation separating two overlapping polytopes, scanning
    candidate directions: min over d of h_A(d) + h_B(-d).

    The support sum is only piecewise smooth, so the best ``refine`` grid
    directions are polished with a local simplex search on the sphere.
    """
    from scipy.optimize import minimize

    def h(D):
        return (Va @ D.T).max(axis=0) + (-(Vb @ D.T)).max(axis=0)

    D = fibonacci_sphere(n_dirs)
    hv = h(D)
    best = float(hv.min())
    for i in np.argsort(hv)[:refine]:
        res = minimize(lambda v: h((v / np.linalg.norm(v))[None])[0], D[i], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, float(res.fun))
    return best


def minkowski_depth(Va: np.ndarray, Vb: np.ndarray) -> float:
    """Exact depth: distance from the origin to the boundary of A - B."""
    M = (Va[:, None, :] - Vb[None, :, :]).reshape(-1, 3)
    return float(np.min(-ConvexHull(M).equations[:, 3]))


def surface_samples(vertices: np.ndarray, faces: np.ndarray, n: int, rng) -> np.ndarray:
    """Area-weighted face samples plus vertices and edge points."""
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    pts = ((1 - s)[:, None] * tri[pick, 0] + (s * (1 - r2))[:, None] * tri[pick, 1]
           + (s * r2)[:, None] * tri[pick, 2])
    lin = np.linspace(0, 1, 200)[None, :, None]
    a = vertices[faces[:, [0, 1, 2]].ravel()][:, None]
    b = vertices[faces[:, [1, 2, 0]].ravel()][:, None]
    edges = ((1 - lin) * a + lin * b).reshape(-1, 3)
    return np.vstack([pts, vertices, edges])


def inside_hull(p: np.ndarray, vertices: np.ndarray) -> bool:
    """Membership via an LP-free test: p inside iff below every hull facet."""
    eq = ConvexHull(vertices).equations
    return bool(np.all(eq[:, :3] @ p + eq[:, 3] <= 1e-12))


def exact_point_distance(p, vertices) -> float:
    """Signed point-to-hull distance: projection onto the hull (outside) or
    the nearest facet plane (inside)."""
    eq = ConvexHull(vertices).equations
    if np.all(eq[:, :3] @ p + eq[:, 3] <= 0):
        return float(np.max(eq[:, :3] @ p + eq[:, 3]))
    return convex_distance(np.asarray(p, float)[None], vertices)


def sampled_point_distance(p, vertices, faces, rng, n=1000000) -> float:
    S = surface_samples(vertices, faces, n, rng)
    d = float(np.linalg.norm(S - p, axis=1).min())
    return -d if inside_hull(p, vertices) else d


# ---------------------------------------------------------------------------
# kinematics


def _rot_axis(axis, q):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    x, y, z = axis
    c, s, C = np.cos(q), np.sin(q), 1 - np.cos(q)
    return np.array([[c + x * x * C, x * y * C - z * s, x * z * C + y * s],
                     [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
                     [z * x * C - y * s, z * y * C + x * s, c + z * z * C]])


def _rpy(r, p, y):
    Rx = _rot_axis([1, 0, 0], r)
    Ry = _rot_axis([0, 1, 0], p)
    Rz = _rot_axis([0, 0, 1], y)
    return Rz @ Ry @ Rx


def homogeneous(R, t):
    H = np.eye(4)
    H[:3, :3] = R
    H[:3, 3] = t
    return H


def chain_fk(spec: dict, root_R: np.ndarray, root_t: np.ndarray, joints: np.ndarray) -> dict:
    """World 4x4 transforms of every link by naive chain multiplication."""
    links = {l["name"]: l for l in spec["links"]}
    jidx = {j["child"]: (i, j) for i, j in enumerate(spec.get("joints", []))}
    out = {}

    def world(name):
        if name in out:
            return out[name]
        l = links[name]
        if l.get("parent") is None:
            H = homogeneous(root_R, root_t)
        else:
            H = world(l["parent"]) @ homogeneous(_rpy(*l.get("rpy", [0, 0, 0])), l.get("xyz", [0, 0, 0]))
            if name in jidx:
                i, j = jidx[name]
                H = H @ homogeneous(_rot_axis(j["axis"], joints[i]), np.zeros(3))
        out[name] = H
        return H

    for n in links:
        world(n)
    return out


def random_rotations(n: int, rng) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        e = np.zeros_like(x, dtype=float)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# quadratic programs


def qp_reference(P, q, A, l, u):
    """Solve min 0.5 x'Px + q'x s.t. l <= Ax <= u with the Goldfarb-Idnani
    dual active-set method. Returns (x, objective)."""
    rows, rhs = [], []
    for i in range(len(l)):
        if np.isfinite(u[i]) and np.isfinite(l[i]) and abs(u[i] - l[i]) < 1e-12:
            continue
        if np.isfinite(l[i]):
            rows.append(A[i])
            rhs.append(l[i])
        if np.isfinite(u[i]):
            rows.append(-A[i])
            rhs.append(-u[i])
    eq = [i for i in range(len(l)) if np.isfinite(l[i]) and np.isfinite(u[i]) and abs(u[i] - l[i]) < 1e-12]
    C = np.array([A[i] for i in eq] + rows).reshape(-1, len(q))
    b = np.array([l[i] for i in eq] + rhs)
    Ps = 0.5 * (P + P.T)
    if len(C) == 0:
        x = np.linalg.solve(Ps, -q)
    else:
        x = quadprog.solve_qp(Ps, -q, C.T, b, meq=len(eq))[0]
    return x, float(0.5 * x @ P @ x + q @ x)


def edge_wrenches(P, N, mu, k=8):
    """Edge wrench matrix (6, k m) of contacts at P with inward unit normals N,
    tangent basis built from first principles (d from n x axis)."""
    cols = []
    for p, n in zip(P, N):
        n = np.asarray(n, float)
        a = np.array([0.0, 1.0, 0.0]) if abs(n[0]) > 0.99 else np.array([1.0, 0.0, 0.0])
        d = np.cross(n, a)
        d /= np.linalg.norm(d)
        e = np.cross(n, d)
        for kk in range(k):
            th = 2 * np.pi * kk / k
            v = n + mu * (np.cos(th) * d + np.sin(th) * e)
            cols.append(np.concatenate([v, np.cross(p, v)]))
    return np.array(cols).T


def lower_qp_reference(W, t, beta, gamma, k=8):
    """Q = min ||beta t - W lam||^2 under per-contact caps and the floor, via
    quadprog on a lightly regularised Hessian. Returns (Q, lam)."""
    n = W.shape[1]
    m = n // k
    P = 2 * W.T @ W + 1e-12 * np.eye(n)
    q = -2 * beta * W.T @ t
    C, b = [], []
    for i in range(m):
        row = np.zeros(n)
        row[i * k:(i + 1) * k] = -1.0
        C.append(row)
        b.append(-1.0)
    C.append(np.ones(n))
    b.append(gamma)
    C.extend(np.eye(n))
    b.extend(np.zeros(n))
    lam = quadprog.solve_qp(P, -q, np.array(C).T, np.array(b), 0)[0]
    r = beta * t - W @ lam
    return float(r @ r), lam


# ---------------------------------------------------------------------------
# wrench space


def q1_bruteforce(P, N, mu, k=8) -> float:
    """Largest origin ball inside the Minkowski sum of per-contact
    conv({0} U edge wrenches), by enumerating every sum of one candidate per
    contact and taking one convex hull."""
    W = edge_wrenches(P, N, mu, k).T.reshape(len(P), k, 6)
    options = [np.vstack([np.zeros(6), w]) for w in W]
    pts = np.array([sum(c) for c in itertools.product(*options)])
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-10) < 6:
        return 0.0
    hull = ConvexHull(pts)
    return float(max(0.0, np.min(-hull.equations[:, -1])))


# ---------------------------------------------------------------------------
# statistics


def auc_pairs(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUC where a lower score predicts the positive class."""
    sp = np.asarray(scores_pos)[:, None]
    sn = np.asarray(scores_neg)[None, :]
    return float(((sp < sn).sum() + 0.5 * (sp == sn).sum()) / (sp.size * sn.size))


# ---------------------------------------------------------------------------
# problem generators


def random_feasible_qps(rng, B, N, M, eq_frac=0.1, inf_frac=0.2):
    """Strictly convex QPs whose bounds bracket a random point, with some
    equality rows and some one-sided rows."""
    from bigrasp.qpsolve import QpProblem

    L = rng.normal(size=(B, N, N))
    P = L @ np.swapaxes(L, 1, 2) + 0.1 * np.eye(N)
    q = rng.normal(size=(B, N))
    A = rng.normal(size=(B, M, N))
    x0 = rng.normal(size=(B, N)) * 0.5
    c = np.einsum("bmn,bn->bm", A, x0)
    l = c - rng.uniform(0.1, 2, size=(B, M))
    u = c + rng.uniform(0.1, 2, size=(B, M))
    eq = rng.random((B, M)) < eq_frac
    eq[:, min(N, M) - 1:] = False
    l = np.where(eq, c, l)
    u = np.where(eq, c, u)
    one_sided = (rng.random((B, M)) < inf_frac) & ~eq
    u = np.where(one_sided, np.inf, u)
    return QpProblem(P, q, A, l, u)


def _sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def grasp_corpus(rng, n=200):
    """Constructed contact sets on the unit sphere and a unit cube face:
    antipodal pairs, tripods, single pokes and tangent-only contacts (several
    contacts sharing one normal). Returns a list of (kind, P, N)."""
    kinds = ["antipodal", "tripod", "poke", "tangent"]
    out = []
    for i in range(n):
        kind = kinds[i % 4]
        if kind == "antipodal":
            u = _sphere_dirs(rng, 1)[0]
            P = np.stack([u, -u])
        elif kind == "tripod":
            # three points near a random great circle, jittered off it
            z = _sphere_dirs(rng, 1)[0]
            a = np.cross(z, [1.0, 0, 0] if abs(z[0]) < 0.9 else [0, 1.0, 0])
            a /= np.linalg.norm(a)
            b = np.cross(z, a)
            ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3 + rng.normal(size=3) * 0.6
            lift = rng.normal(size=3) * 0.4
            P = np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b + lift[:, None] * z
            P /= np.linalg.norm(P, axis=1, keepdims=True)
        elif kind == "poke":
            P = _sphere_dirs(rng, 1)
        else:
            m = int(rng.integers(2, 4))
            P = np.column_stack([rng.uniform(-0.5, 0.5, (m, 2)), np.full(m, 0.5)])
            out.append((kind, P, np.tile([0, 0, -1.0], (m, 1))))
            continue
        out.append((kind, P, -P))
    return out
