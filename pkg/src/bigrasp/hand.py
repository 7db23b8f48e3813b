"""Floating-base hand model: forward kinematics, pose parameterisation,
joint limits, fingertip contact sites and pose-gradient plumbing.

A pose vector is ``x = [r (9, row-major rotation), t (3), q (n)]``. Batched
functions take ``X`` of shape ``(B, 12 + n)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import _kernels
from . import geometry as geo

HAND_FORMAT_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"


class HandSpecError(ValueError):
    pass


@dataclass
class GraspConfig:
    rotation: np.ndarray
    translation: np.ndarray
    joints: np.ndarray

    @classmethod
    def from_vector(cls, x) -> "GraspConfig":
        x = np.asarray(x, dtype=float)
        return cls(x[:9].reshape(3, 3).copy(), x[9:12].copy(), x[12:].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.rotation, float).reshape(9),
                               np.asarray(self.translation, float), np.asarray(self.joints, float)])

    def projected(self) -> "GraspConfig":
        return GraspConfig(project_rotation(self.rotation.reshape(9)), self.translation.copy(), self.joints.copy())


@dataclass
class LinkPose:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p):
        return self.rotation @ np.asarray(p, dtype=float) + self.translation


@dataclass(frozen=True)
class HandModel:
    """Immutable kinematic tree with sphere proxies and convex collision parts.

    Links are stored in topological order with the root at index 0.
    """

    name: str
    link_names: list
    parents: np.ndarray
    fixed_R: np.ndarray
    fixed_t: np.ndarray
    joint_of_link: np.ndarray  # -1 for fixed links
    joint_names: list
    joint_axes: np.ndarray
    joint_limits: np.ndarray
    sphere_centers: np.ndarray
    sphere_radii: np.ndarray
    sphere_links: np.ndarray
    parts: list  # (link index, ConvexPart in link frame)
    tip_links: np.ndarray
    tip_points: np.ndarray
    tip_radii: np.ndarray
    adjacency: frozenset
    sphere_pairs: np.ndarray = field(repr=False)
    part_pairs: np.ndarray = field(repr=False)

    @property
    def n_links(self) -> int:
        return len(self.link_names)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def dim(self) -> int:
        return 12 + self.n_joints

    @property
    def n_tips(self) -> int:
        return len(self.tip_links)

    def joint_mid(self) -> np.ndarray:
        return self.joint_limits.mean(axis=1)

    def clamp_joints(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def link_parts(self, link: int) -> list:
        return [p for l, p in self.parts if l == link]

    def identity_config(self, joints=None) -> GraspConfig:
        q = self.joint_mid() if joints is None else np.asarray(joints, dtype=float)
        return GraspConfig(np.eye(3), np.zeros(3), q.copy())


# ---------------------------------------------------------------------------
# loading


def _rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _build_part(spec: dict, base_dir: Path | None) -> geo.ConvexPart:
    kind = spec.get("type")
    center = np.asarray(spec.get("center", [0.0, 0.0, 0.0]), dtype=float)
    if kind == "box":
        return geo.box(spec["half_extents"], center)
    if kind == "capsule":
        part = geo.capsule(spec["radius"], spec["half_length"], segments=spec.get("segments", 12),
                           rings=spec.get("rings", 3), axis=spec.get("axis", 2),
                           circumscribe=spec.get("circumscribe", False))
        return part.translated(center)
    if kind == "cylinder":
        part = geo.cylinder(spec["radius"], spec["half_height"], segments=spec.get("segments", 16))
        return part.translated(center)
    if kind == "sphere":
        return geo.icosphere(spec["radius"], spec.get("subdivisions", 1), center)
    if kind == "mesh":
        from .assets import read_obj
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        groups = read_obj(path)
        pts = np.concatenate([v for v, _ in groups.values()])
        return geo.ConvexPart.from_points(pts * spec.get("scale", 1.0) + center, path.stem)
    raise HandSpecError(f"unknown collision part type {kind!r}")


def hand_from_spec(spec: dict, base_dir: Path | None = None) -> HandModel:
    version = spec.get("format_version")
    if version != HAND_FORMAT_VERSION:
        raise HandSpecError(f"hand spec format_version {version!r}, expected {HAND_FORMAT_VERSION}")
    raw_links = spec["links"]
    names = [l["name"] for l in raw_links]
    if len(set(names)) != len(names):
        raise HandSpecError("duplicate link names")
    by_name = {l["name"]: l for l in raw_links}
    roots = [l["name"] for l in raw_links if l.get("parent") is None]
    if len(roots) != 1:
        raise HandSpecError(f"expected exactly one root link, found {roots}")
    # topological order, breadth first from the root, children in file order
    order = [roots[0]]
    while len(order) < len(names):
        grew = False
        for l in raw_links:
            if l["name"] not in order and l.get("parent") in order:
                order.append(l["name"])
                grew = True
        if not grew:
            missing = sorted(set(names) - set(order))
            raise HandSpecError(f"links unreachable from root or cyclic: {missing}")
    index = {n: i for i, n in enumerate(order)}
    L = len(order)
    parents = np.full(L, -1, dtype=np.int64)
    fixed_R = np.zeros((L, 3, 3))
    fixed_t = np.zeros((L, 3))
    for n in order:
        l = by_name[n]
        i = index[n]
        if l.get("parent") is not None:
            if l["parent"] not in index:
                raise HandSpecError(f"link {n!r} has unknown parent {l['parent']!r}")
            parents[i] = index[l["parent"]]
        fixed_R[i] = _rpy_matrix(l.get("rpy", [0.0, 0.0, 0.0]))
        fixed_t[i] = l.get("xyz", [0.0, 0.0, 0.0])

    joints = spec.get("joints", [])
    joint_of_link = np.full(L, -1, dtype=np.int64)
    jnames, axes, limits = [], [], []
    for j, js in enumerate(joints):
        if js.get("type", "revolute") != "revolute":
            raise HandSpecError(f"joint {js.get('name')!r}: only revolute joints are supported")
        child = js["child"]
        if child not in index or index[child] == 0:
            raise HandSpecError(f"joint {js.get('name')!r} has invalid child {child!r}")
        if joint_of_link[index[child]] >= 0:
            raise HandSpecError(f"link {child!r} driven by two joints")
        ax = np.asarray(js["axis"], dtype=float)
        ax = ax / np.linalg.norm(ax)
        lo, hi = (float(v) for v in js["limits"])
        if not lo < hi:
            raise HandSpecError(f"joint {js.get('name')!r}: lower limit must be below upper limit")
        joint_of_link[index[child]] = j
        jnames.append(js.get("name", f"joint{j}"))
        axes.append(ax)
        limits.append((lo, hi))

    centers, radii, slinks, parts = [], [], [], []
    for n in order:
        l = by_name[n]
        for s in l.get("spheres", []):
            proxy = geo.SphereProxy(np.asarray(s[:3], dtype=float), float(s[3]), index[n])
            centers.append(proxy.center_local)
            radii.append(proxy.radius)
            slinks.append(index[n])
        for ps in l.get("parts", []):
            parts.append((index[n], _build_part(ps, base_dir)))

    tips = spec.get("fingertips", [])
    if len(tips) < 2:
        raise HandSpecError("a hand needs at least two fingertip contact sites")
    for t in tips:
        if t["link"] not in index:
            raise HandSpecError(f"fingertip on unknown link {t['link']!r}")
    adjacency = frozenset(frozenset((index[a], index[b])) for a, b in spec.get("adjacency", []))

    sphere_links = np.array(slinks, dtype=np.int64)
    spairs = [(a, b) for a, b in itertools.combinations(range(len(radii)), 2)
              if sphere_links[a] != sphere_links[b]
              and frozenset((sphere_links[a], sphere_links[b])) not in adjacency]
    ppairs = [(a, b) for a, b in itertools.combinations(range(len(parts)), 2)
              if parts[a][0] != parts[b][0] and frozenset((parts[a][0], parts[b][0])) not in adjacency]
    return HandModel(
        name=spec.get("name", "hand"),
        link_names=order,
        parents=parents,
        fixed_R=fixed_R,
        fixed_t=fixed_t,
        joint_of_link=joint_of_link,
        joint_names=jnames,
        joint_axes=np.array(axes).reshape(-1, 3),
        joint_limits=np.array(limits).reshape(-1, 2),
        sphere_centers=np.array(centers).reshape(-1, 3),
        sphere_radii=np.array(radii),
        sphere_links=sphere_links,
        parts=parts,
        tip_links=np.array([index[t["link"]] for t in tips], dtype=np.int64),
        tip_points=np.array([t["point"] for t in tips], dtype=float),
        tip_radii=np.array([t["radius"] for t in tips], dtype=float),
        adjacency=adjacency,
        sphere_pairs=np.array(spairs, dtype=np.int64).reshape(-1, 2),
        part_pairs=np.array(ppairs, dtype=np.int64).reshape(-1, 2),
    )


def load_hand(path) -> HandModel:
    path = Path(path)
    with open(path) as f:
        spec = yaml.safe_load(f)
    return hand_from_spec(spec, path.parent)


def builtin_hand() -> HandModel:
    """The bundled three-finger test hand (two flexion joints per finger)."""
    return load_hand(DATA_DIR / "tripod_hand.yaml")


# ---------------------------------------------------------------------------
# rotations


def project_rotation(raw9, return_flag: bool = False):
    """Nearest rotation (Frobenius) to a 3x3 matrix given as 9 reals."""
    M = np.asarray(raw9, dtype=float).reshape(1, 3, 3)
    if not np.any(M):
        raise ValueError("cannot project an all-zero rotation block")
    R, flags = project_rotations(M)
    return (R[0], bool(flags[0])) if return_flag else R[0]


def project_rotations(M: np.ndarray):
    """Batched polar projection. Returns (R, rank_deficient flags)."""
    U, s, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    D = np.ones_like(s)
    D[:, 2] = np.sign(det)
    D[D == 0] = 1.0
    R = (U * D[:, None, :]) @ Vt
    flags = s[:, 1] <= 1e-9 * np.maximum(s[:, 0], 1e-300)
    if np.any(flags):
        for b in np.nonzero(flags)[0]:
            R[b] = _gram_schmidt(M[b])
    return R, flags


def _gram_schmidt(M: np.ndarray) -> np.ndarray:
    cols = M.T + 1e-6 * np.eye(3)
    c0 = cols[0] if np.linalg.norm(cols[0]) > 1e-12 else np.array([1.0, 0.0, 0.0])
    c0 = c0 / np.linalg.norm(c0)
    c1 = cols[1] - (cols[1] @ c0) * c0
    if np.linalg.norm(c1) <= 1e-12:
        c1 = np.cross(c0, [0.0, 0.0, 1.0]) if abs(c0[2]) < 0.9 else np.cross(c0, [1.0, 0.0, 0.0])
    c1 = c1 / np.linalg.norm(c1)
    return np.stack([c0, c1, np.cross(c0, c1)], axis=1)


def polar_backward(M: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the projected rotation back to the raw matrix."""
    U, s, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    neg = det < 0
    U = U.copy()
    s = s.copy()
    U[neg, :, 2] *= -1
    s[neg, 2] *= -1
    V = np.swapaxes(Vt, 1, 2)
    H = np.swapaxes(U, 1, 2) @ gR @ V
    den = s[:, :, None] + s[:, None, :]
    idx = np.arange(3)
    den[:, idx, idx] = 1.0
    den = np.where(np.abs(den) < 1e-12, 1e-12, den)
    K = (H - np.swapaxes(H, 1, 2)) / den
    K[:, idx, idx] = 0.0
    return U @ K @ Vt


def rodrigues(axis: np.ndarray, q: np.ndarray) -> np.ndarray:
    K = skew(axis)
    s, c = np.sin(q)[:, None, None], np.cos(q)[:, None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# forward kinematics


@dataclass
class FKResult:
    R: np.ndarray  # (B, L, 3, 3)
    T: np.ndarray  # (B, L, 3)
    A: np.ndarray  # (B, L, 3, 3) local rotation of each link w.r.t. its parent
    raw: np.ndarray  # (B, 3, 3) unprojected root block


def fk_batch(model: HandModel, X: np.ndarray) -> FKResult:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"pose batch must have shape (B, {model.dim}), got {X.shape}")
    B, L = X.shape[0], model.n_links
    raw = X[:, :9].reshape(B, 3, 3)
    R = np.empty((B, L, 3, 3))
    T = np.empty((B, L, 3))
    A = np.empty((B, L, 3, 3))
    R[:, 0], _ = project_rotations(raw)
    T[:, 0] = X[:, 9:12]
    A[:, 0] = np.eye(3)
    for l in range(1, L):
        p = model.parents[l]
        j = model.joint_of_link[l]
        if j >= 0:
            A[:, l] = model.fixed_R[l] @ rodrigues(model.joint_axes[j], X[:, 12 + j])
        else:
            A[:, l] = model.fixed_R[l]
        R[:, l] = R[:, p] @ A[:, l]
        T[:, l] = T[:, p] + R[:, p] @ model.fixed_t[l]
    return FKResult(R, T, A, raw)


def fk_backward(model: HandModel, X: np.ndarray, fk: FKResult, gR: np.ndarray, gT: np.ndarray) -> np.ndarray:
    """Reverse-mode pass from per-link pose gradients to a pose-vector gradient."""
    gR = gR.copy()
    gT = gT.copy()
    B = X.shape[0]
    gX = np.zeros((B, model.dim))
    for l in range(model.n_links - 1, 0, -1):
        p = model.parents[l]
        j = model.joint_of_link[l]
        gT[:, p] += gT[:, l]
        gR[:, p] += gT[:, l][:, :, None] * model.fixed_t[l][None, None, :]
        gR[:, p] += gR[:, l] @ np.swapaxes(fk.A[:, l], 1, 2)
        if j >= 0:
            gA = np.swapaxes(fk.R[:, p], 1, 2) @ gR[:, l]
            dA = fk.A[:, l] @ skew(model.joint_axes[j])
            gX[:, 12 + j] += np.einsum("bij,bij->b", gA, dA)
    gX[:, 9:12] = gT[:, 0]
    gX[:, :9] = polar_backward(fk.raw, gR[:, 0]).reshape(B, 9)
    return gX


def points_world(fk: FKResult, links: np.ndarray, local: np.ndarray) -> np.ndarray:
    """World positions (B, K, 3) of points fixed in the given links."""
    return np.einsum("bkij,kj->bki", fk.R[:, links], local) + fk.T[:, links]


def points_world_batch(fk: FKResult, links: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Like :func:`points_world` with per-grasp local points (B, K, 3)."""
    return np.einsum("bkij,bkj->bki", fk.R[:, links], local) + fk.T[:, links]


def accumulate_point_grads(gR, gT, links, local, gP):
    """Add d/dR, d/dT contributions of world points ``R[l] @ local + T[l]``."""
    local = np.asarray(local)
    if local.ndim == 2:
        outer = gP[:, :, :, None] * local[None, :, None, :]
    else:
        outer = gP[:, :, :, None] * local[:, :, None, :]
    onehot = (np.asarray(links)[None, :] == np.arange(gR.shape[1])[:, None]).astype(float)
    gR += np.einsum("lk,bkij->blij", onehot, outer)
    gT += np.einsum("lk,bki->bli", onehot, gP)


def forward_kinematics(model: HandModel, x: GraspConfig) -> list:
    vec = x.to_vector() if isinstance(x, GraspConfig) else np.asarray(x, dtype=float)
    if vec.shape != (model.dim,):
        raise ValueError(f"pose has {vec.shape[0]} entries, model expects {model.dim}")
    fk = fk_batch(model, vec[None])
    return [LinkPose(fk.R[0, l].copy(), fk.T[0, l].copy()) for l in range(model.n_links)]


def fingertip_contacts(model: HandModel, x: GraspConfig) -> list:
    poses = forward_kinematics(model, x)
    return [(poses[l].apply(c), poses[l]) for l, c in zip(model.tip_links, model.tip_points)]


# ---------------------------------------------------------------------------
# penalty energies


def limit_energy_batch(model: HandModel, X: np.ndarray):
    q = X[:, 12:]
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    below = np.maximum(lo - q, 0.0)
    above = np.maximum(q - hi, 0.0)
    value = (below ** 2 + above ** 2).sum(axis=1)
    grad = np.zeros_like(X)
    grad[:, 12:] = -2 * below + 2 * above
    return value, grad


def limit_energy(model: HandModel, x):
    vec = x.to_vector() if isinstance(x, GraspConfig) else np.asarray(x, dtype=float)
    v, g = limit_energy_batch(model, vec[None])
    return float(v[0]), g[0]


def sphere_centers_world(model: HandModel, fk: FKResult) -> np.ndarray:
    return points_world(fk, model.sphere_links, model.sphere_centers)


def self_penetration_terms(model: HandModel, fk: FKResult):
    """Value (B,) and gradients w.r.t. sphere centres (B, S, 3)."""
    C = sphere_centers_world(model, fk)
    if len(model.sphere_pairs) == 0:
        return np.zeros(C.shape[0]), np.zeros_like(C)
    return _kernels.sphere_pair_hinge(np.ascontiguousarray(C), model.sphere_pairs[:, 0].copy(),
                                      model.sphere_pairs[:, 1].copy(), model.sphere_radii)


def self_penetration_energy_batch(model: HandModel, X: np.ndarray):
    fk = fk_batch(model, X)
    value, gC = self_penetration_terms(model, fk)
    gR = np.zeros_like(fk.R)
    gT = np.zeros_like(fk.T)
    accumulate_point_grads(gR, gT, model.sphere_links, model.sphere_centers, gC)
    return value, fk_backward(model, X, fk, gR, gT)


def self_penetration_energy(model: HandModel, x):
    vec = x.to_vector() if isinstance(x, GraspConfig) else np.asarray(x, dtype=float)
    v, g = self_penetration_energy_batch(model, vec[None])
    return float(v[0]), g[0]


def hand_parts_world(model: HandModel, fk: FKResult, b: int) -> list:
    """Collision parts of grasp ``b`` posed in the world frame."""
    return [p.transformed(fk.R[b, l], fk.T[b, l]) for l, p in model.parts]
