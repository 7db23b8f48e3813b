"""Compiled convex-geometry kernels (GJK, EPA, point/polytope queries).

Everything here works on plain float64 arrays in world coordinates so the
public wrappers in :mod:`bigrasp.geometry` can pose parts with numpy and
hand the vertices over in bulk.
"""
import numpy as np
from numba import njit

GJK_MAX_ITERS = 128
EPA_MAX_ITERS = 192
EPA_MAX_VERTS = 256
EPA_MAX_FACES = 1024
EPA_MAX_EDGES = 512

# non-empty subsets of a 4-simplex ordered by size so ties keep the smaller one
_SUBSETS = np.array([1, 2, 4, 8, 3, 5, 6, 9, 10, 12, 7, 11, 13, 14, 15], dtype=np.int64)


@njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def support_index(V, d):
    best = -np.inf
    idx = 0
    for i in range(V.shape[0]):
        s = V[i, 0] * d[0] + V[i, 1] * d[1] + V[i, 2] * d[2]
        if s > best:
            best = s
            idx = i
    return idx


@njit(cache=True)
def closest_on_simplex(Y, k, lam):
    """Closest point of conv(Y[:k]) to the origin by subset enumeration.

    Writes barycentric weights into ``lam`` (zeros for unused vertices) and
    returns (squared distance, subset bitmask).
    """
    best = np.inf
    best_mask = 1
    best_lam = np.zeros(4)
    M = np.zeros((3, 3))
    rhs = np.zeros(3)
    mu = np.zeros(3)
    idx = np.zeros(4, dtype=np.int64)
    scale = 0.0
    for i in range(k):
        scale = max(scale, _dot(Y[i], Y[i]))
    for s in range(_SUBSETS.shape[0]):
        mask = _SUBSETS[s]
        if mask >= (1 << k):
            continue
        n = 0
        for i in range(4):
            if (mask >> i) & 1:
                idx[n] = i
                n += 1
        y0 = Y[idx[0]]
        ok = True
        for a in range(n - 1):
            da = Y[idx[a + 1]] - y0
            rhs[a] = -_dot(da, y0)
            for b in range(n - 1):
                M[a, b] = _dot(da, Y[idx[b + 1]] - y0)
        # gaussian elimination with partial pivoting on the (n-1)x(n-1) Gram system
        m = n - 1
        A = M[:m, :m].copy()
        r = rhs[:m].copy()
        tr = 0.0
        for a in range(m):
            tr += A[a, a]
        for c in range(m):
            piv = c
            for rr in range(c + 1, m):
                if abs(A[rr, c]) > abs(A[piv, c]):
                    piv = rr
            if abs(A[piv, c]) <= 1e-13 * tr:
                ok = False
                break
            if piv != c:
                for cc in range(m):
                    tmp = A[c, cc]
                    A[c, cc] = A[piv, cc]
                    A[piv, cc] = tmp
                tmp = r[c]
                r[c] = r[piv]
                r[piv] = tmp
            for rr in range(c + 1, m):
                f = A[rr, c] / A[c, c]
                for cc in range(c, m):
                    A[rr, cc] -= f * A[c, cc]
                r[rr] -= f * r[c]
        if not ok:
            continue
        for c in range(m - 1, -1, -1):
            acc = r[c]
            for cc in range(c + 1, m):
                acc -= A[c, cc] * mu[cc]
            mu[c] = acc / A[c, c]
        l0 = 1.0
        for a in range(m):
            l0 -= mu[a]
        if l0 < -1e-12:
            continue
        neg = False
        for a in range(m):
            if mu[a] < -1e-12:
                neg = True
        if neg:
            continue
        p = l0 * y0
        for a in range(m):
            p = p + mu[a] * Y[idx[a + 1]]
        d2 = _dot(p, p)
        if d2 < best * (1.0 - 1e-9) - 1e-300 or (best == np.inf):
            best = d2
            best_mask = mask
            best_lam[:] = 0.0
            best_lam[idx[0]] = max(l0, 0.0)
            for a in range(m):
                best_lam[idx[a + 1]] = max(mu[a], 0.0)
        if best <= 1e-28 * max(scale, 1e-300):
            break
    tot = best_lam.sum()
    for i in range(4):
        lam[i] = best_lam[i] / tot
    return best, best_mask


@njit(cache=True)
def gjk(VA, VB):
    """Distance between conv(VA) and conv(VB).

    Returns (dist, pa, pb, Y, IA, IB, k, overlap) where Y/IA/IB hold the final
    simplex (Minkowski points and source vertex indices).
    """
    Y = np.zeros((4, 3))
    IA = np.zeros(4, dtype=np.int64)
    IB = np.zeros(4, dtype=np.int64)
    lam = np.zeros(4)
    Y[0] = VA[0] - VB[0]
    IA[0] = 0
    IB[0] = 0
    k = 1
    lam[0] = 1.0
    v = Y[0].copy()
    scale = 0.0
    for i in range(VA.shape[0]):
        scale = max(scale, _dot(VA[i], VA[i]))
    for i in range(VB.shape[0]):
        scale = max(scale, _dot(VB[i], VB[i]))
    scale = np.sqrt(scale) + 1e-300
    overlap = False
    prev_vv = np.inf
    for _ in range(GJK_MAX_ITERS):
        vv = _dot(v, v)
        if vv <= (1e-13 * scale) ** 2:
            overlap = True
            break
        nd = -v
        ia = support_index(VA, nd)
        ib = support_index(VB, v)
        w = VA[ia] - VB[ib]
        gap = vv - _dot(v, w)
        if gap <= 1e-13 * vv + (1e-15 * scale) ** 2:
            break
        dup = False
        for i in range(k):
            if IA[i] == ia and IB[i] == ib:
                dup = True
        if dup:
            break
        Y[k] = w
        IA[k] = ia
        IB[k] = ib
        k += 1
        d2, mask = closest_on_simplex(Y, k, lam)
        # compact the simplex to the supporting subset
        n = 0
        Yn = np.zeros((4, 3))
        IAn = np.zeros(4, dtype=np.int64)
        IBn = np.zeros(4, dtype=np.int64)
        ln = np.zeros(4)
        for i in range(k):
            if (mask >> i) & 1:
                Yn[n] = Y[i]
                IAn[n] = IA[i]
                IBn[n] = IB[i]
                ln[n] = lam[i]
                n += 1
        Y[:] = Yn
        IA[:] = IAn
        IB[:] = IBn
        lam[:] = ln
        k = n
        v = np.zeros(3)
        for i in range(k):
            v = v + lam[i] * Y[i]
        if k == 4:
            overlap = True
            break
        if d2 >= prev_vv * (1.0 - 1e-14):
            break
        prev_vv = d2
    pa = np.zeros(3)
    pb = np.zeros(3)
    for i in range(k):
        pa = pa + lam[i] * VA[IA[i]]
        pb = pb + lam[i] * VB[IB[i]]
    if overlap:
        return 0.0, pa, pb, Y, IA, IB, k, True
    return np.sqrt(_dot(v, v)), pa, pb, Y, IA, IB, k, False


@njit(cache=True)
def _face_plane(P, a, b, c, center):
    n = _cross(P[b] - P[a], P[c] - P[a])
    ln = np.sqrt(_dot(n, n))
    if ln <= 1e-300:
        return n, np.inf, False
    n = n / ln
    return n, _dot(n, P[a]), True


@njit(cache=True)
def _line_perp(d):
    ad = np.abs(d)
    e = np.zeros(3)
    if ad[0] <= ad[1] and ad[0] <= ad[2]:
        e[0] = 1.0
    elif ad[1] <= ad[2]:
        e[1] = 1.0
    else:
        e[2] = 1.0
    p = _cross(d, e)
    return p / np.sqrt(_dot(p, p))


@njit(cache=True)
def epa(VA, VB, Y, IA, IB, k):
    """Penetration depth of overlapping conv(VA), conv(VB).

    Starts from a GJK simplex containing the origin. Returns
    (depth, n, pa, pb, ok) where ``n`` is the outward normal of the Minkowski
    difference A - B at its boundary point closest to the origin; translating
    A by ``-depth * n`` brings the parts into touching contact.
    """
    P = np.zeros((EPA_MAX_VERTS, 3))
    PA = np.zeros(EPA_MAX_VERTS, dtype=np.int64)
    PB = np.zeros(EPA_MAX_VERTS, dtype=np.int64)
    scale = 0.0
    for i in range(VA.shape[0]):
        scale = max(scale, _dot(VA[i], VA[i]))
    for i in range(VB.shape[0]):
        scale = max(scale, _dot(VB[i], VB[i]))
    scale = np.sqrt(scale) + 1e-300
    tol = 1e-11 * scale
    nv = 0
    for i in range(k):
        P[nv] = Y[i]
        PA[nv] = IA[i]
        PB[nv] = IB[i]
        nv += 1
    # grow the simplex into a full-dimensional tetrahedron
    if nv == 1:
        dirs = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0]])
        for j in range(6):
            ia = support_index(VA, dirs[j])
            ib = support_index(VB, -dirs[j])
            w = VA[ia] - VB[ib]
            if np.sqrt(_dot(w - P[0], w - P[0])) > tol:
                P[nv] = w
                PA[nv] = ia
                PB[nv] = ib
                nv += 1
                break
        if nv == 1:
            return 0.0, np.array([1.0, 0.0, 0.0]), VA[PA[0]].copy(), VB[PB[0]].copy(), False
    if nv == 2:
        dl = P[1] - P[0]
        dl = dl / np.sqrt(_dot(dl, dl))
        perp = _line_perp(dl)
        found = False
        for j in range(6):
            ang = j * np.pi / 3.0
            c = np.cos(ang)
            s = np.sin(ang)
            d = c * perp + s * _cross(dl, perp)
            ia = support_index(VA, d)
            ib = support_index(VB, -d)
            w = VA[ia] - VB[ib]
            off = (w - P[0]) - _dot(w - P[0], dl) * dl
            if np.sqrt(_dot(off, off)) > tol:
                P[nv] = w
                PA[nv] = ia
                PB[nv] = ib
                nv += 1
                found = True
                break
        if not found:
            return 0.0, perp, VA[PA[0]].copy(), VB[PB[0]].copy(), False
    if nv == 3:
        n = _cross(P[1] - P[0], P[2] - P[0])
        n = n / np.sqrt(_dot(n, n))
        ia1 = support_index(VA, n)
        ib1 = support_index(VB, -n)
        w1 = VA[ia1] - VB[ib1]
        ia2 = support_index(VA, -n)
        ib2 = support_index(VB, n)
        w2 = VA[ia2] - VB[ib2]
        h1 = _dot(w1 - P[0], n)
        h2 = -_dot(w2 - P[0], n)
        if max(h1, h2) <= tol:
            return 0.0, n, VA[PA[0]].copy(), VB[PB[0]].copy(), False
        if h1 >= h2:
            P[nv] = w1
            PA[nv] = ia1
            PB[nv] = ib1
        else:
            P[nv] = w2
            PA[nv] = ia2
            PB[nv] = ib2
        nv += 1

    center = (P[0] + P[1] + P[2] + P[3]) / 4.0
    F = np.zeros((EPA_MAX_FACES, 3), dtype=np.int64)
    FN = np.zeros((EPA_MAX_FACES, 3))
    FD = np.zeros(EPA_MAX_FACES)
    alive = np.zeros(EPA_MAX_FACES, dtype=np.bool_)
    nf = 0
    init = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    for j in range(4):
        a = init[j, 0]
        b = init[j, 1]
        c = init[j, 2]
        n, d, good = _face_plane(P, a, b, c, center)
        if _dot(n, P[a] - center) < 0.0:
            tmp = b
            b = c
            c = tmp
            n = -n
            d = -d
        F[nf, 0] = a
        F[nf, 1] = b
        F[nf, 2] = c
        FN[nf] = n
        FD[nf] = d if good else np.inf
        alive[nf] = True
        nf += 1

    E = np.zeros((EPA_MAX_EDGES, 2), dtype=np.int64)
    ok = True
    best = 0
    for _ in range(EPA_MAX_ITERS):
        best = -1
        bd = np.inf
        for f in range(nf):
            if alive[f] and FD[f] < bd:
                bd = FD[f]
                best = f
        if best < 0:
            ok = False
            break
        n = FN[best]
        ia = support_index(VA, n)
        ib = support_index(VB, -n)
        w = VA[ia] - VB[ib]
        if _dot(w, n) - bd <= 1e-10 * scale:
            break
        if nv >= EPA_MAX_VERTS:
            ok = False
            break
        P[nv] = w
        PA[nv] = ia
        PB[nv] = ib
        wi = nv
        nv += 1
        ne = 0
        overflow = False
        for f in range(nf):
            if not alive[f]:
                continue
            if _dot(FN[f], w - P[F[f, 0]]) > 1e-12 * scale or f == best:
                alive[f] = False
                for e in range(3):
                    a = F[f, e]
                    b = F[f, (e + 1) % 3]
                    shared = -1
                    for q in range(ne):
                        if E[q, 0] == b and E[q, 1] == a:
                            shared = q
                            break
                    if shared >= 0:
                        E[shared, 0] = E[ne - 1, 0]
                        E[shared, 1] = E[ne - 1, 1]
                        ne -= 1
                    else:
                        if ne >= EPA_MAX_EDGES:
                            overflow = True
                            break
                        E[ne, 0] = a
                        E[ne, 1] = b
                        ne += 1
        if overflow or nf + ne > EPA_MAX_FACES:
            ok = False
            # restore the last good face set is not possible; report current best
            break
        for q in range(ne):
            a = E[q, 0]
            b = E[q, 1]
            n2, d2, good = _face_plane(P, a, b, wi, center)
            F[nf, 0] = a
            F[nf, 1] = b
            F[nf, 2] = wi
            FN[nf] = n2
            FD[nf] = d2 if good else np.inf
            alive[nf] = True
            nf += 1
        # compact dead faces when the table fills up
        if nf > EPA_MAX_FACES - 64:
            m = 0
            for f in range(nf):
                if alive[f]:
                    F[m] = F[f]
                    FN[m] = FN[f]
                    FD[m] = FD[f]
                    alive[m] = True
                    m += 1
            for f in range(m, nf):
                alive[f] = False
            nf = m
    else:
        ok = False
    if not ok:
        best = -1
        bd = np.inf
        for f in range(nf):
            if alive[f] and FD[f] < bd:
                bd = FD[f]
                best = f
    if best < 0:
        return 0.0, np.array([1.0, 0.0, 0.0]), VA[PA[0]].copy(), VB[PB[0]].copy(), False
    a = F[best, 0]
    b = F[best, 1]
    c = F[best, 2]
    n = FN[best].copy()
    depth = max(FD[best], 0.0)
    q = depth * n
    # barycentric coordinates of q in triangle (a, b, c)
    v0 = P[b] - P[a]
    v1 = P[c] - P[a]
    v2 = q - P[a]
    d00 = _dot(v0, v0)
    d01 = _dot(v0, v1)
    d11 = _dot(v1, v1)
    d20 = _dot(v2, v0)
    d21 = _dot(v2, v1)
    den = d00 * d11 - d01 * d01
    if den > 0:
        bv = (d11 * d20 - d01 * d21) / den
        bw = (d00 * d21 - d01 * d20) / den
    else:
        bv = 0.0
        bw = 0.0
    bu = 1.0 - bv - bw
    pa = bu * VA[PA[a]] + bv * VA[PA[b]] + bw * VA[PA[c]]
    pb = bu * VB[PB[a]] + bv * VB[PB[b]] + bw * VB[PB[c]]
    return depth, n, pa, pb, ok


@njit(cache=True)
def signed_distance_pair(VA, VB):
    """GJK distance, falling back to EPA on overlap.

    Returns (signed distance, pa, pb, normal from B to A, status) where status
    is 0 for disjoint, 1 for penetrating, 2 for a degenerate EPA fallback.
    """
    dist, pa, pb, Y, IA, IB, k, overlap = gjk(VA, VB)
    if not overlap:
        nrm = pa - pb
        ln = np.sqrt(_dot(nrm, nrm))
        if ln > 0:
            nrm = nrm / ln
        else:
            nrm = np.array([1.0, 0.0, 0.0])
        return dist, pa, pb, nrm, 0
    depth, n, pa, pb, ok = epa(VA, VB, Y, IA, IB, k)
    return -depth, pa, pb, -n, 1 if ok else 2


@njit(cache=True)
def pair_queries(V, ranges, pairs):
    """Signed distances for many (part, part) pairs stored in one vertex table.

    ``ranges[i]`` is the [start, stop) row span of part i in ``V``.
    """
    n = pairs.shape[0]
    dist = np.zeros(n)
    PA = np.zeros((n, 3))
    PB = np.zeros((n, 3))
    NR = np.zeros((n, 3))
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        a = pairs[i, 0]
        b = pairs[i, 1]
        VA = V[ranges[a, 0]:ranges[a, 1]]
        VB = V[ranges[b, 0]:ranges[b, 1]]
        d, pa, pb, nr, st = signed_distance_pair(VA, VB)
        dist[i] = d
        PA[i] = pa
        PB[i] = pb
        NR[i] = nr
        status[i] = st
    return dist, PA, PB, NR, status


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@njit(cache=True)
def _cpt(p0, p1, p2, V, ia, ib, ic):
    """Allocation-free closest point on triangle (V[ia], V[ib], V[ic])."""
    ax, ay, az = V[ia, 0], V[ia, 1], V[ia, 2]
    abx, aby, abz = V[ib, 0] - ax, V[ib, 1] - ay, V[ib, 2] - az
    acx, acy, acz = V[ic, 0] - ax, V[ic, 1] - ay, V[ic, 2] - az
    apx, apy, apz = p0 - ax, p1 - ay, p2 - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = p0 - V[ib, 0], p1 - V[ib, 1], p2 - V[ib, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return V[ib, 0], V[ib, 1], V[ib, 2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = p0 - V[ic, 0], p1 - V[ic, 1], p2 - V[ic, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return V[ic, 0], V[ic, 1], V[ic, 2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bx, by, bz = V[ib, 0], V[ib, 1], V[ib, 2]
        return bx + w * (V[ic, 0] - bx), by + w * (V[ic, 1] - by), bz + w * (V[ic, 2] - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def point_queries(points, V, F, FN, FO, FC, FR, face_ranges):
    """Nearest surface point of a union of convex parts for each query point.

    ``F`` indexes rows of ``V``; ``FN``/``FO`` are outward face planes
    (n . x <= o inside); ``FC``/``FR`` are face bounding spheres;
    ``face_ranges[j]`` spans part j's faces. Returns (witness, signed
    distance, outward normal, part index).
    """
    npnt = points.shape[0]
    npart = face_ranges.shape[0]
    W = np.zeros((npnt, 3))
    SD = np.zeros(npnt)
    NR = np.zeros((npnt, 3))
    PI = np.zeros(npnt, dtype=np.int64)
    for i in range(npnt):
        p0 = points[i, 0]
        p1 = points[i, 1]
        p2 = points[i, 2]
        best_sd = np.inf
        for j in range(npart):
            f0 = face_ranges[j, 0]
            f1 = face_ranges[j, 1]
            # half-space membership
            worst = -np.inf
            wf = f0
            for f in range(f0, f1):
                s = FN[f, 0] * p0 + FN[f, 1] * p1 + FN[f, 2] * p2 - FO[f]
                if s > worst:
                    worst = s
                    wf = f
            if worst <= 0.0:
                if worst < best_sd:
                    best_sd = worst
                    W[i, 0] = p0 - worst * FN[wf, 0]
                    W[i, 1] = p1 - worst * FN[wf, 1]
                    W[i, 2] = p2 - worst * FN[wf, 2]
                    NR[i, 0] = FN[wf, 0]
                    NR[i, 1] = FN[wf, 1]
                    NR[i, 2] = FN[wf, 2]
                    PI[i] = j
                continue
            if worst >= best_sd:
                continue
            # the nearest point lies on a face whose plane sees p; the most
            # violated plane gives a lower bound and usually the answer
            qx, qy, qz = _cpt(p0, p1, p2, V, F[wf, 0], F[wf, 1], F[wf, 2])
            bd = (p0 - qx) ** 2 + (p1 - qy) ** 2 + (p2 - qz) ** 2
            bf = wf
            lim = worst * worst * (1.0 + 1e-12)
            if bd > lim:
                for f in range(f0, f1):
                    s = FN[f, 0] * p0 + FN[f, 1] * p1 + FN[f, 2] * p2 - FO[f]
                    if s <= 0.0 or s * s >= bd or f == wf:
                        continue
                    dc = np.sqrt((p0 - FC[f, 0]) ** 2 + (p1 - FC[f, 1]) ** 2 + (p2 - FC[f, 2]) ** 2) - FR[f]
                    if dc > 0.0 and dc * dc >= bd:
                        continue
                    x, y, z = _cpt(p0, p1, p2, V, F[f, 0], F[f, 1], F[f, 2])
                    d2 = (p0 - x) ** 2 + (p1 - y) ** 2 + (p2 - z) ** 2
                    if d2 < bd:
                        bd = d2
                        qx, qy, qz = x, y, z
                        bf = f
                        if bd <= lim:
                            break
            sd = np.sqrt(bd)
            if sd < best_sd:
                best_sd = sd
                PI[i] = j
                W[i, 0] = qx
                W[i, 1] = qy
                W[i, 2] = qz
                if sd > 1e-12:
                    NR[i, 0] = (p0 - qx) / sd
                    NR[i, 1] = (p1 - qy) / sd
                    NR[i, 2] = (p2 - qz) / sd
                else:
                    NR[i, 0] = FN[bf, 0]
                    NR[i, 1] = FN[bf, 1]
                    NR[i, 2] = FN[bf, 2]
        SD[i] = best_sd
    return W, SD, NR, PI


@njit(cache=True)
def sphere_pair_hinge(C, pa, pb, radii):
    """Sum of squared overlaps of sphere pairs and its gradient w.r.t. centres.

    C is (B, S, 3); returns value (B,) and gradient (B, S, 3).
    """
    B, S = C.shape[0], C.shape[1]
    value = np.zeros(B)
    g = np.zeros((B, S, 3))
    for b in range(B):
        for k in range(pa.shape[0]):
            i, j = pa[k], pb[k]
            dx = C[b, i, 0] - C[b, j, 0]
            dy = C[b, i, 1] - C[b, j, 1]
            dz = C[b, i, 2] - C[b, j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            h = radii[i] + radii[j] - d
            if h <= 0.0:
                continue
            value[b] += h * h
            s = -2.0 * h / max(d, 1e-12)
            g[b, i, 0] += s * dx
            g[b, i, 1] += s * dy
            g[b, i, 2] += s * dz
            g[b, j, 0] -= s * dx
            g[b, j, 1] -= s * dy
            g[b, j, 2] -= s * dz
    return value, g
