"""Convex-geometry kernel: distances, nearest points, penetration depth,
sphere proxies and OBB broad-phase culling.

Parts are stored in their own frame; "posed" parts are produced with
:meth:`ConvexPart.transformed`. All query functions are pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from . import _kernels

MERGE_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (degenerate hull, contract violation)."""


@dataclass(frozen=True)
class OBB:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray  # columns are box axes in the part frame

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "OBB":
        return OBB(R @ self.center + t, self.half_extents.copy(), R @ self.rotation)

    def contains(self, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        local = (np.asarray(pts) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents + tol, axis=-1)


def _pca_obb(vertices: np.ndarray) -> OBB:
    c = vertices.mean(axis=0)
    cov = np.cov((vertices - c).T)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1].copy()
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1
    local = (vertices - c) @ axes
    lo, hi = local.min(axis=0), local.max(axis=0)
    half = np.maximum((hi - lo) / 2, 1e-12)
    center = c + axes @ ((hi + lo) / 2)
    return OBB(center, half, axes)


@dataclass(frozen=True)
class ConvexPart:
    """Convex polytope: hull vertices, outward-oriented triangles, OBB."""

    vertices: np.ndarray
    faces: np.ndarray
    obb: OBB
    normals: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)
    name: str = ""

    @classmethod
    def from_points(cls, points, name: str = "") -> "ConvexPart":
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        pts = _merge_close(pts, MERGE_TOL)
        if len(pts) < 4:
            raise GeometryError(f"degenerate hull {name!r}: fewer than 4 distinct vertices")
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
            raise GeometryError(f"degenerate hull {name!r}: vertices are coplanar")
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise GeometryError(f"degenerate hull {name!r}: {exc}") from exc
        keep = np.unique(hull.vertices)
        remap = -np.ones(len(pts), dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        verts = pts[keep]
        faces = remap[hull.simplices]
        eq = hull.equations
        # orient every triangle so its winding matches the outward plane normal
        a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
        wind = np.einsum("ij,ij->i", np.cross(b - a, c - a), eq[:, :3])
        flip = wind < 0
        faces[flip] = faces[flip][:, [0, 2, 1]]
        normals = eq[:, :3] / np.linalg.norm(eq[:, :3], axis=1, keepdims=True)
        offsets = np.einsum("ij,ij->i", normals, verts[faces[:, 0]])
        return cls(verts, faces, _pca_obb(verts), normals, offsets, name)

    def transformed(self, R, t) -> "ConvexPart":
        R = np.asarray(R, dtype=float)
        t = np.asarray(t, dtype=float)
        n = self.normals @ R.T
        v = self.vertices @ R.T + t
        return ConvexPart(v, self.faces, self.obb.transformed(R, t), n,
                          np.einsum("ij,ij->i", n, v[self.faces[:, 0]]), self.name)

    def translated(self, t) -> "ConvexPart":
        return self.transformed(np.eye(3), t)

    def volume_centroid(self) -> tuple[float, np.ndarray]:
        ref = self.vertices.mean(axis=0)
        a, b, c = (self.vertices[self.faces[:, k]] - ref for k in range(3))
        vols = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
        cents = (a + b + c) / 4.0 + ref
        vol = vols.sum()
        return float(vol), (vols[:, None] * cents).sum(axis=0) / vol

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        c = self.obb.center
        return c, float(np.linalg.norm(self.vertices - c, axis=1).max())


def _merge_close(pts: np.ndarray, tol: float) -> np.ndarray:
    tree = cKDTree(pts)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return pts
    drop = np.zeros(len(pts), dtype=bool)
    for i, j in sorted(map(tuple, pairs)):
        if not drop[i]:
            drop[j] = True
    return pts[~drop]


@dataclass(frozen=True)
class SphereProxy:
    center_local: np.ndarray
    radius: float
    link_id: int

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError("sphere proxy radius must be positive")


@dataclass
class NearestPointResult:
    point_a: np.ndarray
    point_b: np.ndarray
    distance: float  # negative when penetrating
    normal: np.ndarray  # unit, from b towards a
    part_index: int = 0


# ---------------------------------------------------------------------------
# primitive constructors


def box(half_extents, center=(0.0, 0.0, 0.0), name="box") -> ConvexPart:
    h = np.asarray(half_extents, dtype=float)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return ConvexPart.from_points(corners * h + np.asarray(center, dtype=float), name)


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0), name="sphere") -> ConvexPart:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        nf = []
        for a, b, c in f:
            mids = []
            for i, j in ((a, b), (b, c), (c, a)):
                key = (min(i, j), max(i, j))
                if key not in cache:
                    m = verts[i] + verts[j]
                    verts.append(m / np.linalg.norm(m))
                    cache[key] = len(verts) - 1
                mids.append(cache[key])
            ab, bc, ca = mids
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    pts = np.array(verts) * radius + np.asarray(center, dtype=float)
    return ConvexPart.from_points(pts, name)


def cylinder(radius, half_height, segments=24, name="cylinder") -> ConvexPart:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    pts = np.concatenate([np.c_[ring, np.full(segments, -half_height)],
                          np.c_[ring, np.full(segments, half_height)]])
    return ConvexPart.from_points(pts, name)


def capsule(radius, half_length, segments=16, rings=4, axis=2, name="capsule",
            circumscribe=False) -> ConvexPart:
    """Hull of two hemispherical caps joined along ``axis``.

    With ``circumscribe`` the vertices are pushed out so the polytope
    contains the true capsule (useful when a proxy sphere must sit inside).
    """
    pts = []
    scale = 1.0
    if circumscribe:
        scale = 1.0 / (np.cos(np.pi / segments) * np.cos(np.pi / (4 * rings)))
    ang = 2 * np.pi * np.arange(segments) / segments
    for sgn in (-1.0, 1.0):
        for r in range(rings + 1):
            phi = (np.pi / 2) * r / rings
            rr = radius * np.cos(phi) * scale
            z = sgn * (half_length + radius * np.sin(phi) * scale)
            if r == rings:
                pts.append([0.0, 0.0, z])
                continue
            for a in ang:
                pts.append([rr * np.cos(a), rr * np.sin(a), z])
    pts = np.array(pts)
    if axis != 2:
        perm = {0: [2, 0, 1], 1: [1, 2, 0]}[axis]
        pts = pts[:, perm]
    return ConvexPart.from_points(pts, name)


# ---------------------------------------------------------------------------
# packed part tables for the compiled kernels


@dataclass(frozen=True)
class PartTable:
    """Several parts flattened into the arrays the kernels consume."""

    V: np.ndarray
    F: np.ndarray
    FN: np.ndarray
    FO: np.ndarray
    FC: np.ndarray
    FR: np.ndarray
    vert_ranges: np.ndarray
    face_ranges: np.ndarray

    @classmethod
    def build(cls, parts) -> "PartTable":
        parts = list(parts)
        if not parts:
            raise GeometryError("need at least one part")
        V, F, FN, FO, vr, fr = [], [], [], [], [], []
        nv = nf = 0
        for p in parts:
            V.append(p.vertices)
            F.append(p.faces + nv)
            FN.append(p.normals)
            FO.append(p.offsets)
            vr.append((nv, nv + len(p.vertices)))
            fr.append((nf, nf + len(p.faces)))
            nv += len(p.vertices)
            nf += len(p.faces)
        V = np.ascontiguousarray(np.concatenate(V))
        F = np.concatenate(F).astype(np.int64)
        tri = V[F]
        FC = tri.mean(axis=1)
        FR = np.linalg.norm(tri - FC[:, None], axis=2).max(axis=1) * (1 + 1e-12)
        return cls(V, F, np.ascontiguousarray(np.concatenate(FN)), np.concatenate(FO), FC, FR,
                   np.array(vr, dtype=np.int64), np.array(fr, dtype=np.int64))


def _check_part(p: ConvexPart):
    if len(p.vertices) < 4:
        raise GeometryError("degenerate hull: fewer than 4 vertices")


# ---------------------------------------------------------------------------
# queries


def gjk_distance(a: ConvexPart, b: ConvexPart) -> NearestPointResult:
    """Separation distance and witness points of two posed parts.

    Overlapping parts report distance 0 (use :func:`epa_depth` for depth).
    """
    _check_part(a)
    _check_part(b)
    dist, pa, pb, *_rest, overlap = _kernels.gjk(a.vertices, b.vertices)
    if overlap or dist <= 0:
        return NearestPointResult(pa, pb, 0.0, _fallback_normal(a, b))
    return NearestPointResult(pa, pb, float(dist), (pa - pb) / dist)


def _fallback_normal(a: ConvexPart, b: ConvexPart) -> np.ndarray:
    d = a.vertices.mean(axis=0) - b.vertices.mean(axis=0)
    n = np.linalg.norm(d)
    return d / n if n > 0 else np.array([1.0, 0.0, 0.0])


def epa_depth(a: ConvexPart, b: ConvexPart) -> tuple[float, np.ndarray]:
    """Penetration depth and the unit direction that separates ``a`` from ``b``.

    Translating ``a`` by ``depth * direction`` leaves the parts touching.
    Raises :class:`GeometryError` when the parts are disjoint.
    """
    _check_part(a)
    _check_part(b)
    dist, pa, pb, Y, IA, IB, k, overlap = _kernels.gjk(a.vertices, b.vertices)
    if not overlap:
        raise GeometryError(f"epa_depth called on disjoint parts (distance {dist:.3g})")
    depth, n, pa, pb, ok = _kernels.epa(a.vertices, b.vertices, Y, IA, IB, k)
    direction = -n
    return float(depth), _canonical_direction(direction)


def _canonical_direction(d: np.ndarray) -> np.ndarray:
    # exact zeros avoid signed-zero noise in reported directions
    d = np.where(np.abs(d) < 1e-15, 0.0, d)
    return d / np.linalg.norm(d)


def signed_distance(a: ConvexPart, b: ConvexPart) -> NearestPointResult:
    """GJK distance for disjoint parts, negative EPA depth for overlapping ones."""
    d, pa, pb, nr, _ = _kernels.signed_distance_pair(a.vertices, b.vertices)
    return NearestPointResult(pa, pb, float(d), nr)


def point_to_mesh(p, parts) -> NearestPointResult:
    """Nearest surface point of a union of posed convex parts.

    ``point_a`` is the query point, ``point_b`` the surface witness and
    ``normal`` the outward surface normal there.
    """
    parts = list(parts)
    table = PartTable.build(parts)
    p = np.asarray(p, dtype=float).reshape(1, 3)
    W, SD, NR, PI = point_queries(p, table)
    return NearestPointResult(p[0], W[0], float(SD[0]), NR[0], int(PI[0]))


def point_queries(points: np.ndarray, table: PartTable):
    """Batched nearest-surface query: (witness, signed distance, normal, part)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    return _kernels.point_queries(pts, table.V, table.F, table.FN, table.FO, table.FC, table.FR,
                                  table.face_ranges)


def obb_sphere_distance(obb: OBB, center, radius: float) -> float:
    """Lower bound on the distance between a part (inside ``obb``) and a ball."""
    return float(obb_sphere_distances(obb, np.asarray(center, dtype=float)[None], radius)[0])


def obb_sphere_distances(obb: OBB, centers: np.ndarray, radius) -> np.ndarray:
    local = (np.asarray(centers, dtype=float) - obb.center) @ obb.rotation
    excess = np.maximum(np.abs(local) - obb.half_extents, 0.0)
    outside = np.linalg.norm(excess, axis=-1)
    inside = np.minimum(np.max(np.abs(local) - obb.half_extents, axis=-1), 0.0)
    return outside + inside - radius


def broadphase_cull(sphere_center, sphere_radius: float, parts, reference_dist: float) -> list[int]:
    """Indices of parts whose OBB is closer to the sphere than ``reference_dist``.

    ``reference_dist`` must be an upper bound on the distance from the
    enclosed geometry to the whole object (the proxy-sphere distance).
    """
    keep = []
    for i, part in enumerate(parts):
        if obb_sphere_distance(part.obb, sphere_center, sphere_radius) <= reference_dist + 1e-12:
            keep.append(i)
    return keep
