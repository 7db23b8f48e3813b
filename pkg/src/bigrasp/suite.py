"""Desk-scale benchmark: five primitives at two scales with the built-in hand.

``run_suite`` synthesizes a batch per case, scores every non-failed grasp
with the quasi-static oracle and reports per-case and pooled metrics. The
same routine drives the ablation comparisons.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as ev
from . import hand as hd
from . import pipeline as pl
from .assets import PRIMITIVES, primitive_object
from .records import score_grasps

SUITE_SCALES = (0.06, 0.1)
VARIANTS = {
    "full": lambda c: c,
    "no_coarse_to_fine": pl.ablation_no_coarse_to_fine,
    "no_offset": pl.ablation_no_offset,
}


@dataclass
class CaseResult:
    kind: str
    scale: float
    n: int
    n_failed: int
    success: np.ndarray  # (n_live,) bool
    pd_mm: np.ndarray
    cdc_mm: np.ndarray
    clearance_mm: np.ndarray  # pre-grasp fingertip distances (n_live, m)
    energy: np.ndarray
    baseline_energy: np.ndarray
    seconds: float


@dataclass
class SuiteResult:
    variant: str
    cases: list = field(default_factory=list)
    seconds: float = 0.0

    def _pool(self, name):
        return np.concatenate([getattr(c, name).ravel() for c in self.cases])

    @property
    def success_rate(self) -> float:
        return float(self._pool("success").mean())

    @property
    def median_pd_mm(self) -> float:
        return float(np.median(self._pool("pd_mm")))

    @property
    def median_cdc_mm(self) -> float:
        return float(np.median(self._pool("cdc_mm")))

    @property
    def median_clearance_mm(self) -> float:
        return float(np.median(self._pool("clearance_mm")))

    def auc(self) -> tuple[float, float]:
        """AUC of the bilevel energy and of the ``beta = 0`` baseline."""
        labels = self._pool("success")
        return (ev.roc_auc(self._pool("energy"), labels).auc,
                ev.roc_auc(self._pool("baseline_energy"), labels).auc)

    def table(self) -> list:
        rows = []
        for c in self.cases:
            rows.append(f"{c.kind:9s} {c.scale:<5g} n {c.n} failed {c.n_failed} "
                        f"success {c.success.mean():.2f} PD {np.median(c.pd_mm):.2f} "
                        f"CDC {np.median(c.cdc_mm):.2f} clearance {np.median(c.clearance_mm):.1f} "
                        f"({c.seconds:.0f} s)")
        return rows


def run_case(model: hd.HandModel, kind: str, scale: float, batch: int, seed: int,
             cfg: pl.SynthesisConfig, eval_cfg: ev.EvalConfig | None = None) -> CaseResult:
    t0 = time.perf_counter()
    obj = primitive_object(kind, scale)
    r = pl.synthesize(model, obj, batch, seed=seed, cfg=cfg)
    live = ~r.failed
    res = ev.quasi_static_batch(model, obj, r.x[live], r.x_s[live], eval_cfg)
    clear = ev.finger_distances(model, obj, r.x_p[live]) * 1e3
    if live.any():
        _, E, _, base = score_grasps(model, obj, r.x[live], cfg.beta, cfg.gamma, cfg.mu)
    else:
        E = base = np.zeros(0)
    return CaseResult(kind, scale, batch, int(r.failed.sum()),
                      np.array([e.success for e in res], dtype=bool),
                      np.array([e.pd_mm for e in res]), np.array([e.cdc_mm for e in res]),
                      clear, np.asarray(E), np.asarray(base), time.perf_counter() - t0)


def run_suite(variant: str = "full", batch: int = 64, seed: int = 0, kinds=PRIMITIVES,
              scales=SUITE_SCALES, model: hd.HandModel | None = None, log=None) -> SuiteResult:
    """Run every (object, scale) case of one variant.

    Args:
        variant: ``full``, ``no_coarse_to_fine`` or ``no_offset``.
        batch: grasps per case.
        seed: initialisation seed shared by all cases.
        kinds: primitive object names.
        scales: object scales.
        model: hand model; the built-in hand when omitted.
        log: optional callable receiving one line per finished case.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    model = model or hd.builtin_hand()
    cfg = VARIANTS[variant](pl.SynthesisConfig())
    out = SuiteResult(variant)
    t0 = time.perf_counter()
    for scale in scales:
        for kind in kinds:
            out.cases.append(run_case(model, kind, scale, batch, seed, cfg))
            if log:
                log(out.table()[-1])
    out.seconds = time.perf_counter() - t0
    return out


if __name__ == "__main__":  # pragma: no cover
    import sys

    for v in sys.argv[1:] or ["full"]:
        s = run_suite(v, log=lambda line: print(line, flush=True))
        auc_e, auc_b = s.auc()
        print(f"[{v}] success {s.success_rate:.3f} PD {s.median_pd_mm:.3f} CDC {s.median_cdc_mm:.3f} "
              f"clearance {s.median_clearance_mm:.2f} AUC {auc_e:.3f} vs baseline {auc_b:.3f} "
              f"time {s.seconds:.0f} s", flush=True)
