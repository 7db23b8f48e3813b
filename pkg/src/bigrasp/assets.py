"""Object ingestion: OBJ meshes of pre-decomposed convex parts, normalisation
and the primitive test corpus."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo

NONCONVEX_TOLERANCE = 0.05
PRIMITIVES = ("sphere", "box", "cylinder", "capsule", "flat_box")


class AssetError(ValueError):
    pass


@dataclass
class ObjectModel:
    parts: list
    mass_center: np.ndarray
    scale: float
    source: str
    diagonal: float
    name: str = ""
    table: geo.PartTable = field(default=None, repr=False)

    def __post_init__(self):
        if not self.parts:
            raise AssetError("an object needs at least one convex part")
        if self.table is None:
            self.table = geo.PartTable.build(self.parts)

    @property
    def vertices(self) -> np.ndarray:
        return np.concatenate([p.vertices for p in self.parts])

    def bounding_sphere(self):
        V = self.vertices
        c = 0.5 * (V.min(axis=0) + V.max(axis=0))
        return c, float(np.linalg.norm(V - c, axis=1).max())

    def aabb(self):
        V = self.vertices
        return V.min(axis=0), V.max(axis=0)


def read_obj(path) -> dict:
    """Parse an OBJ file into ``{group: (vertices, triangles)}``.

    Faces are fan-triangulated; ``g`` and ``o`` statements open a group.
    Vertices of each group are the ones its faces reference, reindexed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    verts = []
    groups: dict = {}
    current = "default"
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                try:
                    if len(tok) < 4:
                        raise ValueError("fewer than 3 coordinates")
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError as exc:
                    raise AssetError(f"{path}:{lineno}: malformed vertex") from exc
            elif tok[0] in ("g", "o"):
                current = " ".join(tok[1:]) or f"group{len(groups)}"
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise AssetError(f"{path}:{lineno}: face with fewer than 3 vertices")
                tris = groups.setdefault(current, [])
                for j in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[j], idx[j + 1]))
    V = np.array(verts, dtype=float).reshape(-1, 3)
    if not groups:
        if len(V) == 0:
            raise AssetError(f"{path}: no geometry")
        return {"default": (V, np.zeros((0, 3), dtype=np.int64))}
    out = {}
    for name, tris in groups.items():
        T = np.array(tris, dtype=np.int64)
        if T.min() < 0 or T.max() >= len(V):
            raise AssetError(f"{path}: group {name!r} references a missing vertex")
        used, inv = np.unique(T.ravel(), return_inverse=True)
        out[name] = (V[used], inv.reshape(-1, 3))
    return out


def write_obj(path, parts, names=None):
    """Write convex parts as OBJ groups."""
    lines = []
    offset = 1
    for i, p in enumerate(parts):
        name = (names[i] if names else p.name) or f"part{i}"
        lines.append(f"g {name}")
        lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in p.vertices]
        lines += [f"f {a + offset} {b + offset} {c + offset}" for a, b, c in p.faces]
        offset += len(p.vertices)
    Path(path).write_text("\n".join(lines) + "\n")


def mesh_volume(V: np.ndarray, T: np.ndarray) -> float:
    if len(T) == 0:
        return 0.0
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    return abs(float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum()) / 6.0)


def load_object(path, scale: float = 1.0, recenter: bool = True, check_convex: bool = True) -> ObjectModel:
    """Load pre-decomposed convex parts and normalise the object.

    The bounding-box diagonal is normalised to 2 and then multiplied by
    ``scale``; with ``recenter`` the volume-weighted centroid moves to the origin.
    """
    if not scale > 0:
        raise AssetError("scale must be positive")
    groups = read_obj(path)
    allv = np.concatenate([v for v, _ in groups.values()])
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise AssetError(f"{path}: degenerate bounding box")
    factor = 2.0 * scale / diag
    center = 0.5 * (lo + hi)
    parts = []
    for name, (V, T) in groups.items():
        try:
            part = geo.ConvexPart.from_points((V - center) * factor, name)
        except geo.GeometryError as exc:
            raise AssetError(f"part {name!r}: {exc}") from exc
        if check_convex and len(T):
            vol = mesh_volume((V - center) * factor, T)
            hull_vol, _ = part.volume_centroid()
            if hull_vol > (1.0 + NONCONVEX_TOLERANCE) * vol:
                raise AssetError(f"part {name!r} is not convex: hull volume {hull_vol:.4g} exceeds "
                                 f"mesh volume {vol:.4g} by more than {NONCONVEX_TOLERANCE:.0%}")
        parts.append(part)
    mc = mass_center(parts)
    if recenter:
        parts = [p.translated(-mc) for p in parts]
    return ObjectModel(parts, mass_center(parts), float(scale), str(path), 2.0 * scale,
                       Path(path).stem)


def mass_center(parts) -> np.ndarray:
    vols, cents = zip(*(p.volume_centroid() for p in parts))
    vols = np.array(vols)
    return (vols[:, None] * np.array(cents)).sum(axis=0) / vols.sum()


def object_from_parts(parts, scale: float = 1.0, name: str = "object", source: str = "<memory>") -> ObjectModel:
    """Normalise parts exactly as :func:`load_object` does."""
    allv = np.concatenate([p.vertices for p in parts])
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    factor = 2.0 * scale / float(np.linalg.norm(hi - lo))
    center = 0.5 * (lo + hi)
    parts = [geo.ConvexPart.from_points((p.vertices - center) * factor, p.name) for p in parts]
    mc = mass_center(parts)
    parts = [p.translated(-mc) for p in parts]
    return ObjectModel(parts, mass_center(parts), float(scale), source, 2.0 * scale, name)


def primitive_parts(kind: str) -> list:
    """Unnormalised convex parts of a named primitive."""
    if kind == "sphere":
        return [geo.icosphere(1.0, 2, name="sphere")]
    if kind == "box":
        return [geo.box([1.0, 1.0, 1.0], name="box")]
    if kind == "cylinder":
        return [geo.cylinder(1.0, 1.0, 24, name="cylinder")]
    if kind == "capsule":
        return [geo.capsule(1.0, 1.0, 16, 4, name="capsule")]
    if kind == "flat_box":
        return [geo.box([1.0, 1.0, 0.35], name="flat_box")]
    if kind == "dumbbell":
        return [geo.box([1.0, 1.0, 1.0], [-2.0, 0.0, 0.0], name="big"),
                geo.box([0.5, 0.5, 0.5], [1.5, 0.0, 0.0], name="small")]
    raise AssetError(f"unknown primitive {kind!r}; choose from {PRIMITIVES + ('dumbbell',)}")


def primitive_object(kind: str, scale: float = 0.1) -> ObjectModel:
    return object_from_parts(primitive_parts(kind), scale, f"{kind}@{scale:g}", f"primitive:{kind}")
