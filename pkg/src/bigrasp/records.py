"""Grasp records: the dataset row and its line-oriented JSON persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hand as hd
from .assets import ObjectModel
from .energy import TaskWrenchSet, batch_grasp_energy, force_closure_directions
from .qpsolve import AdmmSettings

RECORD_FORMAT_VERSION = 1
RECORD_KIND = "bigrasp.grasp"

# lower-level settings when scoring finished grasps
SCORING_QP = AdmmSettings(max_iters=4000, eps_abs=1e-9, polish=True)


class RecordFormatError(ValueError):
    pass


@dataclass
class GraspRecord:
    """One synthesized grasp.

    Poses are full pose vectors ``[R (9), t (3), q (n)]``. ``energy`` is the
    force-closure energy at ``x`` and ``baseline_energy`` the ``beta = 0``
    energy, both on the mesh contacts at ``x``.
    """

    object_id: str
    object_source: str
    scale: float
    seed: int
    index: int
    x_p: np.ndarray
    x: np.ndarray
    x_s: np.ndarray
    energy: float
    energy_per_direction: np.ndarray
    baseline_energy: float
    contact_points: np.ndarray  # (m, 3)
    contact_normals: np.ndarray  # (m, 3) inward
    contact_distances: np.ndarray  # (m,)
    failed: bool = False
    notes: str = ""
    stage_energies: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def grasp_config(self, which: str = "x") -> hd.GraspConfig:
        return hd.GraspConfig.from_vector(getattr(self, which))

    def to_dict(self) -> dict:
        return {
            "kind": RECORD_KIND,
            "format_version": RECORD_FORMAT_VERSION,
            "object_id": self.object_id,
            "object_source": self.object_source,
            "scale": float(self.scale),
            "seed": int(self.seed),
            "index": int(self.index),
            "x_p": _floats(self.x_p),
            "x": _floats(self.x),
            "x_s": _floats(self.x_s),
            "energy": float(self.energy),
            "energy_per_direction": _floats(self.energy_per_direction),
            "baseline_energy": float(self.baseline_energy),
            "contact_points": _floats(self.contact_points),
            "contact_normals": _floats(self.contact_normals),
            "contact_distances": _floats(self.contact_distances),
            "failed": bool(self.failed),
            "notes": self.notes,
            "stage_energies": {k: float(v) for k, v in self.stage_energies.items()},
            "metrics": {k: _metric(v) for k, v in self.metrics.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspRecord":
        if d.get("kind") != RECORD_KIND:
            raise RecordFormatError(f"not a grasp record (kind={d.get('kind')!r})")
        v = d.get("format_version")
        if v != RECORD_FORMAT_VERSION:
            raise RecordFormatError(f"record format version {v} is not supported "
                                    f"(this build reads version {RECORD_FORMAT_VERSION})")
        try:
            return cls(
                object_id=d["object_id"], object_source=d["object_source"], scale=float(d["scale"]),
                seed=int(d["seed"]), index=int(d["index"]),
                x_p=_array(d["x_p"]), x=_array(d["x"]), x_s=_array(d["x_s"]),
                energy=float(d["energy"]), energy_per_direction=_array(d["energy_per_direction"]),
                baseline_energy=float(d["baseline_energy"]),
                contact_points=_array(d["contact_points"]).reshape(-1, 3),
                contact_normals=_array(d["contact_normals"]).reshape(-1, 3),
                contact_distances=_array(d["contact_distances"]),
                failed=bool(d["failed"]), notes=str(d["notes"]),
                stage_energies={k: float(v) for k, v in d["stage_energies"].items()},
                metrics=dict(d["metrics"]),
            )
        except KeyError as exc:
            raise RecordFormatError(f"record is missing field {exc.args[0]!r}") from exc

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraspRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _array(v) -> np.ndarray:
    return np.asarray(v, dtype=float)


def _metric(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return _floats(v)
    return v


def dumps_record(r: GraspRecord) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(r.to_dict(), sort_keys=True, allow_nan=True, separators=(",", ":"))


def loads_record(line: str) -> GraspRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"malformed record line: {exc}") from exc
    if not isinstance(d, dict):
        raise RecordFormatError("record line is not a JSON object")
    return GraspRecord.from_dict(d)


def write_records(path, records) -> None:
    """Write records as JSON lines, one record per line."""
    text = "".join(dumps_record(r) + "\n" for r in records)
    Path(path).write_text(text)


def read_records(path) -> list:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(loads_record(line))
            except RecordFormatError as exc:
                raise RecordFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def score_grasps(model: hd.HandModel, obj: ObjectModel, X: np.ndarray, beta: float = 1.0,
                 gamma: float | None = None, mu: float = 0.6,
                 directions: TaskWrenchSet | None = None, settings: AdmmSettings | None = None):
    """Force-closure and baseline energies on the mesh contacts of poses ``X``.

    Returns:
        MeshContacts, energy (B,), per-direction energy (B, s), baseline (B,).
    """
    from .pipeline import mesh_contacts

    directions = directions or force_closure_directions()
    settings = settings or SCORING_QP
    X = np.atleast_2d(X)
    mc = mesh_contacts(model, obj, X)
    m = model.n_tips
    g = 0.1 * m if gamma is None else gamma
    N = -mc.nu
    be = batch_grasp_energy(mc.p, N, directions, beta, g, mu, settings=settings)
    base = batch_grasp_energy(mc.p, N, TaskWrenchSet(np.eye(6)[:1]), 0.0, g, mu, settings=settings)
    return mc, be.total, be.Q, base.total


def build_records(model: hd.HandModel, obj: ObjectModel, result, beta: float = 1.0,
                  gamma: float | None = None, mu: float = 0.6, index_offset: int = 0) -> list:
    """Turn a :class:`~bigrasp.pipeline.SynthesisResult` into records."""
    mc, E, Ej, base = score_grasps(model, obj, result.x, beta, gamma, mu)
    out = []
    for b in range(len(result.x)):
        stage_e = {k: float(v["energy"][b]) for k, v in result.traces.items()}
        out.append(GraspRecord(
            object_id=obj.name, object_source=obj.source, scale=float(obj.scale), seed=int(result.seed),
            index=index_offset + b,
            x_p=result.x_p[b].copy(), x=result.x[b].copy(), x_s=result.x_s[b].copy(),
            energy=float(E[b]), energy_per_direction=Ej[b].copy(), baseline_energy=float(base[b]),
            contact_points=mc.p[b].copy(), contact_normals=-mc.nu[b].copy(),
            contact_distances=mc.sd[b].copy(),
            failed=bool(result.failed[b]), notes=result.notes[b], stage_energies=stage_e,
        ))
    return out
