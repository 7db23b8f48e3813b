"""Upper-level grasp optimisation: coarse sphere stage, fine (pre-grasp) and
final mesh stages, and squeeze-pose extrapolation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import geometry as geo
from . import hand as hd
from .assets import ObjectModel
from .energy import TaskWrenchSet, batch_grasp_energy, energy_contact_gradient, force_closure_directions
from .qpsolve import AdmmSettings

SPHERES = "spheres"
MESHES = "meshes"
WEIGHT_KEYS = ("grasp", "distance", "limit", "self_pen", "inter_pen")
BLOCKS = ("rotation", "translation", "joints")


@dataclass
class StageConfig:
    name: str
    iterations: int
    contact_mode: str
    distance_offset: float
    energy_weights: dict
    step_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError(f"stage {self.name!r}: iterations must be positive")
        if self.contact_mode not in (SPHERES, MESHES):
            raise ValueError(f"stage {self.name!r}: contact_mode must be {SPHERES!r} or {MESHES!r}")
        missing = set(WEIGHT_KEYS) - set(self.energy_weights)
        if missing:
            raise ValueError(f"stage {self.name!r}: missing energy weights {sorted(missing)}")
        if any(v < 0 for v in self.energy_weights.values()):
            raise ValueError(f"stage {self.name!r}: energy weights must be nonnegative")


DEFAULT_WEIGHTS = {"grasp": 200.0, "distance": 2000.0, "limit": 10.0, "self_pen": 1000.0, "inter_pen": 1000.0}
DEFAULT_MESH_WEIGHTS = {"grasp": 2000.0, "distance": 2000.0, "limit": 10.0, "self_pen": 1000.0, "inter_pen": 20000.0}


def default_stages(offset: float = 0.01) -> list:
    return [
        StageConfig("coarse", 300, SPHERES, offset, dict(DEFAULT_WEIGHTS)),
        StageConfig("fine", 100, MESHES, offset, dict(DEFAULT_MESH_WEIGHTS), step_size=0.25),
        StageConfig("final", 100, MESHES, 0.0, dict(DEFAULT_MESH_WEIGHTS), step_size=0.25),
    ]


@dataclass
class SynthesisConfig:
    stages: list = field(default_factory=default_stages)
    beta: float = 1.0
    gamma: float | None = None  # 0.1 m when None
    mu: float = 0.6
    qp: AdmmSettings = field(default_factory=lambda: AdmmSettings(max_iters=25, polish=False))
    learning_rate: dict = field(default_factory=lambda: {"rotation": 0.1, "translation": 0.05, "joints": 0.2})
    max_step: dict = field(default_factory=lambda: {"rotation": 0.05, "translation": 0.005, "joints": 0.06})
    lr_floor: float = 0.05
    init_distance: float = 0.07
    init_joint_jitter: float = 0.1
    init_roll: bool = True
    fd_step: float = 1e-5
    pregrasp_mode: str = "stage"  # or "scaled": x_p from joints scaled by pregrasp_scale
    pregrasp_scale: float = 0.9
    divergence_distance: float = 1.0

    def gamma_for(self, m: int) -> float:
        return 0.1 * m if self.gamma is None else self.gamma


def ablation_no_coarse_to_fine(cfg: SynthesisConfig) -> SynthesisConfig:
    """Every stage uses sphere proxies and the bilevel grasp energy."""
    stages = [dataclasses.replace(s, contact_mode=SPHERES, energy_weights=dict(cfg.stages[0].energy_weights))
              for s in cfg.stages]
    return dataclasses.replace(cfg, stages=stages)


def ablation_no_offset(cfg: SynthesisConfig) -> SynthesisConfig:
    """No distance offset anywhere; the pre-grasp comes from joint scaling."""
    stages = [dataclasses.replace(s, distance_offset=0.0) for s in cfg.stages]
    return dataclasses.replace(cfg, stages=stages, pregrasp_mode="scaled")


@dataclass
class SynthesisResult:
    x_p: np.ndarray  # (B, D)
    x: np.ndarray
    x_s: np.ndarray
    failed: np.ndarray  # (B,) bool
    notes: list
    traces: dict  # stage name -> {"energy": (B,), "tip_distance": (B, m)}
    anchors: np.ndarray  # coarse-stage object points (B, m, 3)
    seed: int = 0


# ---------------------------------------------------------------------------
# initialisation and squeeze


def _rotation_to_z(z: np.ndarray) -> np.ndarray:
    """Rotations whose third column is ``z`` (B, 3) with a fixed tangent choice."""
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    a = np.where(np.abs(z[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    x = np.cross(a, z)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=2)


def init_poses(model: hd.HandModel, obj: ObjectModel, n: int, seed: int,
               cfg: SynthesisConfig | None = None) -> np.ndarray:
    """Initial pose vectors (n, D): roots on an inflated bounding sphere,
    palm normal aimed at the object centre, random roll, jittered joints."""
    cfg = cfg or SynthesisConfig()
    rng = np.random.default_rng(seed)
    center, radius = obj.bounding_sphere()
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    roll = rng.uniform(0.0, 2 * np.pi, size=n) if cfg.init_roll else np.zeros(n)
    jit = rng.uniform(-1.0, 1.0, size=(n, model.n_joints))
    R = _rotation_to_z(-dirs)
    c, s = np.cos(roll), np.sin(roll)
    Rz = np.zeros((n, 3, 3))
    Rz[:, 0, 0], Rz[:, 0, 1], Rz[:, 1, 0], Rz[:, 1, 1], Rz[:, 2, 2] = c, -s, s, c, 1.0
    R = R @ Rz
    T = center + dirs * (radius + cfg.init_distance)
    span = model.joint_limits[:, 1] - model.joint_limits[:, 0]
    q = model.clamp_joints(model.joint_mid() + cfg.init_joint_jitter * span * 0.5 * jit)
    return np.concatenate([R.reshape(n, 9), T, q], axis=1)


def squeeze_pose(x, x_p, model: hd.HandModel | None = None):
    """``x_s = 2x - x_p`` on translation and joints; the relative rotation
    from ``x_p`` to ``x`` is applied once more to the rotation."""
    x = np.asarray(x.to_vector() if isinstance(x, hd.GraspConfig) else x, dtype=float)
    x_p = np.asarray(x_p.to_vector() if isinstance(x_p, hd.GraspConfig) else x_p, dtype=float)
    if x.shape != x_p.shape:
        raise ValueError("grasp and pre-grasp dimensions differ")
    single = x.ndim == 1
    X, XP = np.atleast_2d(x), np.atleast_2d(x_p)
    R, _ = hd.project_rotations(X[:, :9].reshape(-1, 3, 3))
    Rp, _ = hd.project_rotations(XP[:, :9].reshape(-1, 3, 3))
    Rs = R @ (np.swapaxes(Rp, 1, 2) @ R)
    out = 2 * X - XP
    out[:, :9] = hd.project_rotations(Rs)[0].reshape(-1, 9)
    if model is not None:
        out[:, 12:] = model.clamp_joints(out[:, 12:])
    return out[0] if single else out


def _scaled_pregrasp(model: hd.HandModel, X: np.ndarray, factor: float) -> np.ndarray:
    out = X.copy()
    out[:, 12:] = model.clamp_joints(X[:, 12:] * factor)
    return out


# ---------------------------------------------------------------------------
# energy terms


@dataclass
class _HandTables:
    V: np.ndarray  # (K, 3) local vertices of all hand parts
    links: np.ndarray  # (K,)
    ranges: np.ndarray  # (P, 2)
    part_links: np.ndarray  # (P,)
    sphere_c: np.ndarray  # (P, 3) local bounding-sphere centres
    sphere_r: np.ndarray  # (P,)
    mean_local: np.ndarray  # (P, 3)
    tip_parts: np.ndarray  # (m,)


def _hand_tables(model: hd.HandModel) -> _HandTables:
    V, L, rng, pl, sc, sr, ml = [], [], [], [], [], [], []
    n = 0
    for link, part in model.parts:
        V.append(part.vertices)
        L.append(np.full(len(part.vertices), link))
        rng.append((n, n + len(part.vertices)))
        n += len(part.vertices)
        pl.append(link)
        c, r = part.bounding_sphere()
        sc.append(c)
        sr.append(r)
        ml.append(part.vertices.mean(axis=0))
    pl = np.array(pl, dtype=np.int64)
    tips = []
    for l in model.tip_links:
        idx = np.nonzero(pl == l)[0]
        if len(idx) == 0:
            raise ValueError(f"fingertip link {model.link_names[l]!r} has no collision part")
        tips.append(idx[0])
    return _HandTables(np.concatenate(V), np.concatenate(L).astype(np.int64), np.array(rng, dtype=np.int64), pl,
                       np.array(sc), np.array(sr), np.array(ml), np.array(tips, dtype=np.int64))


@dataclass
class MeshContacts:
    """Fingertip mesh queries for a batch: hand witness, object witness,
    outward normal at the object and signed distance."""

    c: np.ndarray  # (B, m, 3)
    p: np.ndarray
    nu: np.ndarray
    sd: np.ndarray  # (B, m)


class _Evaluator:
    def __init__(self, model: hd.HandModel, obj: ObjectModel, cfg: SynthesisConfig,
                 directions: TaskWrenchSet):
        self.model = model
        self.obj = obj
        self.cfg = cfg
        self.dirs = directions
        self.ht = _hand_tables(model)
        self.table = obj.table
        self.obbs = [p.obb for p in obj.parts]
        self.obj_means = np.array([p.vertices.mean(axis=0) for p in obj.parts])
        self.obj_center, self.obj_radius = obj.bounding_sphere()
        self.alpha = model.tip_radii
        self.gamma = cfg.gamma_for(model.n_tips)

    # -- sphere stage --------------------------------------------------------
    def _point_query(self, pts):
        shape = pts.shape[:-1]
        W, SD, NR, _ = geo.point_queries(pts.reshape(-1, 3), self.table)
        return W.reshape(shape + (3,)), SD.reshape(shape), NR.reshape(shape + (3,))

    def tip_queries(self, C: np.ndarray):
        """Object witness, signed distance, outward normal and their
        finite-difference Jacobians for fingertip centres (B, m, 3)."""
        h = self.cfg.fd_step
        offs = np.concatenate([np.zeros((1, 3)), h * np.eye(3), -h * np.eye(3)])
        pts = C[:, :, None, :] + offs[None, None]
        W, SD, NR = self._point_query(pts)
        p, sd = W[:, :, 0], SD[:, :, 0]
        Jp = (W[:, :, 1:4] - W[:, :, 4:7]).transpose(0, 1, 3, 2) / (2 * h)  # (B, m, 3 out, 3 in)
        diff = C - p
        rho = np.linalg.norm(diff, axis=-1)
        outside = (sd > 0) & (rho > 1e-7)
        n_out = np.where(outside[..., None], diff / np.maximum(rho, 1e-12)[..., None], NR[:, :, 0])
        # d n / d c = (I - n n^T)(I - Jp) / rho outside, zero inside
        Pn = np.eye(3) - n_out[..., :, None] * n_out[..., None, :]
        Jn = Pn @ (np.eye(3) - Jp) / np.maximum(rho, 1e-12)[..., None, None]
        Jn = np.where(outside[..., None, None], Jn, 0.0)
        return p, sd, n_out, Jp, Jn

    def sphere_terms(self, X, offset, weights, warm=None, with_grasp=True):
        model, cfg = self.model, self.cfg
        B = X.shape[0]
        fk = hd.fk_batch(model, X)
        gR = np.zeros_like(fk.R)
        gT = np.zeros_like(fk.T)
        total = np.zeros(B)
        parts = {}

        C = hd.points_world(fk, model.tip_links, model.tip_points)
        p, sd, n_out, Jp, Jn = self.tip_queries(C)
        gC = np.zeros_like(C)
        # distance: (sd - alpha - offset)^2, analytic in c, finite-difference in p
        res = sd - self.alpha - offset
        e_d = (res ** 2).sum(axis=1)
        grad_sd = n_out - np.einsum("bmji,bmj->bmi", Jp, n_out)
        gC += weights["distance"] * 2 * res[..., None] * grad_sd
        total += weights["distance"] * e_d
        parts["distance"] = e_d

        sol = None
        if with_grasp and weights["grasp"] > 0:
            be = batch_grasp_energy(p, -n_out, self.dirs, cfg.beta, self.gamma, cfg.mu, warm=warm, settings=cfg.qp)
            gP, gN = energy_contact_gradient(p, -n_out, be, self.dirs, cfg.beta, cfg.mu)
            g = np.einsum("bmji,bmj->bmi", Jp, gP) - np.einsum("bmji,bmj->bmi", Jn, gN)
            gC += weights["grasp"] * g
            total += weights["grasp"] * be.total
            parts["grasp"] = be.total
            sol = be.solution
        hd.accumulate_point_grads(gR, gT, model.tip_links, model.tip_points, gC)

        # inter-penetration of all sphere proxies with the object
        S = hd.sphere_centers_world(model, fk)
        # only spheres reaching into the object's bounding sphere can overlap it
        near = np.linalg.norm(S - self.obj_center, axis=-1) < self.obj_radius + model.sphere_radii
        hinge = np.zeros(S.shape[:2])
        snr = np.zeros_like(S)
        if near.any():
            _, ssd, nr = self._point_query(S[near])
            hinge[near] = np.maximum(model.sphere_radii[np.nonzero(near)[1]] - ssd, 0.0)
            snr[near] = nr
        e_ip = (hinge ** 2).sum(axis=1)
        gS = weights["inter_pen"] * (-2 * hinge)[..., None] * snr
        total += weights["inter_pen"] * e_ip
        parts["inter_pen"] = e_ip

        e_sp, gSs = hd.self_penetration_terms(model, fk)
        gS = gS + weights["self_pen"] * gSs
        total += weights["self_pen"] * e_sp
        parts["self_pen"] = e_sp
        hd.accumulate_point_grads(gR, gT, model.sphere_links, model.sphere_centers, gS)

        G = hd.fk_backward(model, X, fk, gR, gT)
        e_l, g_l = hd.limit_energy_batch(model, X)
        total += weights["limit"] * e_l
        G += weights["limit"] * g_l
        parts["limit"] = e_l
        info = {"p": p, "n_out": n_out, "tip_distance": sd - self.alpha, "parts": parts, "qp": sol}
        return total, G, info

    # -- mesh stage ----------------------------------------------------------
    def posed_hand_vertices(self, fk) -> np.ndarray:
        ht = self.ht
        return np.einsum("bkij,kj->bki", fk.R[:, ht.links], ht.V) + fk.T[:, ht.links]

    def mesh_queries(self, fk, want_hinge: bool = True):
        """Fingertip contacts and overlapping hand/object part pairs."""
        ht = self.ht
        B = fk.R.shape[0]
        K = len(ht.V)
        HW = self.posed_hand_vertices(fk)
        V = np.ascontiguousarray(np.concatenate([HW.reshape(-1, 3), self.table.V]))
        P = len(ht.part_links)
        J = len(self.obbs)
        hand_rng = (ht.ranges[None, :, :] + (np.arange(B) * K)[:, None, None]).reshape(-1, 2)
        obj_rng = self.table.vert_ranges + B * K
        ranges = np.concatenate([hand_rng, obj_rng])
        # broad phase on bounding spheres of posed hand parts
        Rl = fk.R[:, ht.part_links]
        Tl = fk.T[:, ht.part_links]
        centers = np.einsum("bpij,pj->bpi", Rl, ht.sphere_c) + Tl  # (B, P, 3)
        means = np.einsum("bpij,pj->bpi", Rl, ht.mean_local) + Tl
        lb = np.stack([geo.obb_sphere_distances(o, centers, ht.sphere_r[None, :]) for o in self.obbs], axis=-1)
        # fingertip pairs: keep object parts whose lower bound beats the best upper bound
        tp = ht.tip_parts
        ub = np.linalg.norm(means[:, tp, None, :] - self.obj_means[None, None], axis=-1)  # (B, m, J)
        keep_tip = lb[:, tp] <= ub.min(axis=-1, keepdims=True) + 1e-12
        bb, ii, jj = np.nonzero(keep_tip)
        tip_pairs = np.stack([bb * P + tp[ii], B * P + jj], axis=1)
        pairs = [tip_pairs]
        if want_hinge:
            hb, hp, hj = np.nonzero(lb <= 1e-12)
            hinge_pairs = np.stack([hb * P + hp, B * P + hj], axis=1)
            pairs.append(hinge_pairs)
        allp = np.ascontiguousarray(np.concatenate(pairs).astype(np.int64))
        dist, PA, PB, NR, _ = _kernels.pair_queries(V, ranges, allp)
        nt = len(tip_pairs)
        m = len(tp)
        sd = np.full((B, m), np.inf)
        c = np.zeros((B, m, 3))
        p = np.zeros((B, m, 3))
        nu = np.zeros((B, m, 3))
        for r in range(nt):  # first minimum wins, in (grasp, tip, part) order
            b, i = bb[r], ii[r]
            if dist[r] < sd[b, i]:
                sd[b, i], c[b, i], p[b, i], nu[b, i] = dist[r], PA[r], PB[r], NR[r]
        contacts = MeshContacts(c, p, nu, sd)
        hinge = None
        if want_hinge:
            hd_ = dist[nt:]
            over = hd_ < 0
            hinge = (hb[over], hp[over], -hd_[over], PA[nt:][over], NR[nt:][over])
        return contacts, hinge

    def mesh_terms(self, X, offset, weights, anchors, anchor_normals):
        model = self.model
        B = X.shape[0]
        fk = hd.fk_batch(model, X)
        gR = np.zeros_like(fk.R)
        gT = np.zeros_like(fk.T)
        total = np.zeros(B)
        parts = {}
        mc, hinge = self.mesh_queries(fk)
        tl = model.tip_links
        # detached witness in the link frame
        c_local = np.einsum("bmji,bmj->bmi", fk.R[:, tl], mc.c - fk.T[:, tl])
        c_w = hd.points_world_batch(fk, tl, c_local)
        target = mc.p + offset * mc.nu
        diff_d = c_w - target
        e_d = (diff_d ** 2).sum(axis=(1, 2))
        diff_q = c_w - (anchors + offset * anchor_normals)
        e_q = (diff_q ** 2).sum(axis=(1, 2))
        gC = weights["distance"] * 2 * diff_d + weights["grasp"] * 2 * diff_q
        hd.accumulate_point_grads(gR, gT, tl, c_local, gC)
        total += weights["distance"] * e_d + weights["grasp"] * e_q
        parts["distance"] = e_d
        parts["grasp"] = e_q

        hb, hp, depth, pa, nr = hinge
        e_ip = np.zeros(B)
        np.add.at(e_ip, hb, depth ** 2)
        if len(hb):
            links = self.ht.part_links[hp]
            loc = np.einsum("kji,kj->ki", fk.R[hb, links], pa - fk.T[hb, links])
            g = weights["inter_pen"] * (-2 * depth)[:, None] * nr
            np.add.at(gR, (hb, links), g[:, :, None] * loc[:, None, :])
            np.add.at(gT, (hb, links), g)
        total += weights["inter_pen"] * e_ip
        parts["inter_pen"] = e_ip

        e_sp, gS = hd.self_penetration_terms(model, fk)
        hd.accumulate_point_grads(gR, gT, model.sphere_links, model.sphere_centers, weights["self_pen"] * gS)
        total += weights["self_pen"] * e_sp
        parts["self_pen"] = e_sp
        G = hd.fk_backward(model, X, fk, gR, gT)
        e_l, g_l = hd.limit_energy_batch(model, X)
        total += weights["limit"] * e_l
        G += weights["limit"] * g_l
        parts["limit"] = e_l
        info = {"contacts": mc, "tip_distance": mc.sd, "parts": parts}
        return total, G, info


# ---------------------------------------------------------------------------
# public energy helpers


def coarse_distance_energy(model: hd.HandModel, x, obj: ObjectModel, offset: float = 0.0,
                           fd_step: float = 1e-5):
    """Sphere-stage distance energy ``sum (sd_i - alpha_i - offset)^2`` and its pose gradient."""
    vec = np.asarray(x.to_vector() if isinstance(x, hd.GraspConfig) else x, dtype=float)
    cfg = SynthesisConfig(fd_step=fd_step)
    ev = _Evaluator(model, obj, cfg, force_closure_directions())
    w = {k: 0.0 for k in WEIGHT_KEYS}
    w["distance"] = 1.0
    total, G, _ = ev.sphere_terms(vec[None], offset, w, with_grasp=False)
    return float(total[0]), G[0]


def fine_contact_query(model: hd.HandModel, x, obj: ObjectModel):
    """Per fingertip: (hand witness c^f, object witness p^f, signed distance,
    witness in the link frame)."""
    vec = np.asarray(x.to_vector() if isinstance(x, hd.GraspConfig) else x, dtype=float)
    ev = _Evaluator(model, obj, SynthesisConfig(), force_closure_directions())
    fk = hd.fk_batch(model, vec[None])
    mc, _ = ev.mesh_queries(fk, want_hinge=False)
    tl = model.tip_links
    c_local = np.einsum("mji,mj->mi", fk.R[0, tl], mc.c[0] - fk.T[0, tl])
    return [(mc.c[0, i], mc.p[0, i], float(mc.sd[0, i]), c_local[i]) for i in range(model.n_tips)]


def mesh_contacts(model: hd.HandModel, obj: ObjectModel, X: np.ndarray) -> MeshContacts:
    ev = _Evaluator(model, obj, SynthesisConfig(), force_closure_directions())
    mc, _ = ev.mesh_queries(hd.fk_batch(model, np.atleast_2d(X)), want_hinge=False)
    return mc


# ---------------------------------------------------------------------------
# optimiser


def _step(model, X, G, cfg: SynthesisConfig, scale: float):
    B = X.shape[0]
    step = np.empty_like(X)
    sl = {"rotation": slice(0, 9), "translation": slice(9, 12), "joints": slice(12, None)}
    for k in BLOCKS:
        s = -scale * cfg.learning_rate[k] * G[:, sl[k]]
        cap = scale * cfg.max_step[k]
        n = np.linalg.norm(s, axis=1, keepdims=True)
        s = np.where(n > cap, s * (cap / np.maximum(n, 1e-300)), s)
        step[:, sl[k]] = s
    Xn = X + step
    R, _ = hd.project_rotations(Xn[:, :9].reshape(B, 3, 3))
    Xn[:, :9] = R.reshape(B, 9)
    Xn[:, 12:] = model.clamp_joints(Xn[:, 12:])
    return Xn


def _lr_scale(cfg: SynthesisConfig, stage: StageConfig, t: int) -> float:
    c = 0.5 * (1 + math.cos(math.pi * t / stage.iterations))
    return stage.step_size * (cfg.lr_floor + (1 - cfg.lr_floor) * c)


def synthesize(model: hd.HandModel, obj: ObjectModel, n_grasps: int, seed: int = 0,
               cfg: SynthesisConfig | None = None, X0: np.ndarray | None = None,
               directions: TaskWrenchSet | None = None) -> SynthesisResult:
    """Run all stages for a batch of grasps.

    Args:
        model: hand model.
        obj: target object (mass centre at the origin).
        n_grasps: batch size.
        seed: initialisation seed.
        cfg: synthesis settings; defaults when omitted.
        X0: explicit initial poses (n_grasps, D), overriding the sampler.
        directions: task wrenches of the sphere-stage grasp energy.
    """
    cfg = cfg or SynthesisConfig()
    if n_grasps < 1:
        raise ValueError("n_grasps must be at least 1")
    X = init_poses(model, obj, n_grasps, seed, cfg) if X0 is None else np.array(X0, dtype=float)
    if X.shape != (n_grasps, model.dim):
        raise ValueError(f"initial poses must have shape ({n_grasps}, {model.dim})")
    ev = _Evaluator(model, obj, cfg, directions or force_closure_directions())
    B, m = n_grasps, model.n_tips
    failed = np.zeros(B, dtype=bool)
    notes = [""] * B
    anchors = np.zeros((B, m, 3))
    anchor_n = np.zeros((B, m, 3))
    have_anchor = False
    traces = {}
    x_p = None
    stage_energy = np.zeros(B)
    tip_d = np.zeros((B, m))
    center = obj.bounding_sphere()[0]

    for si, stage in enumerate(cfg.stages):
        warm = None
        warm_ids = None
        for t in range(stage.iterations):
            act = np.nonzero(~failed)[0]
            if len(act) == 0:
                break
            Xa = X[act]
            if stage.contact_mode == SPHERES:
                w = None
                if warm is not None:
                    pos = np.searchsorted(warm_ids, act)
                    rows = (pos[:, None] * len(ev.dirs) + np.arange(len(ev.dirs))[None]).ravel()
                    w = warm[rows]
                E, G, info = ev.sphere_terms(Xa, stage.distance_offset, stage.energy_weights, warm=w)
                warm, warm_ids = info["qp"], act
            else:
                if not have_anchor:
                    raise ValueError("mesh stages need a preceding sphere stage for the contact anchors")
                E, G, info = ev.mesh_terms(Xa, stage.distance_offset, stage.energy_weights,
                                           anchors[act], anchor_n[act])
            stage_energy[act] = E
            tip_d[act] = info["tip_distance"]
            if stage.contact_mode == SPHERES:
                anchors[act], anchor_n[act] = info["p"], info["n_out"]
            bad = ~np.isfinite(E) | ~np.all(np.isfinite(G), axis=1)
            Xn = _step(model, Xa, np.where(bad[:, None], 0.0, G), cfg, _lr_scale(cfg, stage, t))
            bad |= ~np.all(np.isfinite(Xn), axis=1)
            bad |= np.linalg.norm(Xn[:, 9:12] - center, axis=1) > cfg.divergence_distance
            for b in act[bad]:
                failed[b] = True
                notes[b] = f"diverged in stage {stage.name!r} at iteration {t}"
            good = act[~bad]
            X[good] = Xn[~bad]
        if stage.contact_mode == SPHERES:
            have_anchor = True
            # anchors refer to the final iterate of the stage
            act = np.nonzero(~failed)[0]
            if len(act):
                _, _, info = ev.sphere_terms(X[act], stage.distance_offset, stage.energy_weights, with_grasp=False)
                anchors[act], anchor_n[act] = info["p"], info["n_out"]
                tip_d[act] = info["tip_distance"]
        traces[stage.name] = {"energy": stage_energy.copy(), "tip_distance": tip_d.copy()}
        if si == len(cfg.stages) - 2:
            x_p = X.copy()
    if x_p is None:
        x_p = X.copy()
    if cfg.pregrasp_mode == "scaled":
        x_p = _scaled_pregrasp(model, X, cfg.pregrasp_scale)
    elif cfg.pregrasp_mode != "stage":
        raise ValueError(f"unknown pregrasp_mode {cfg.pregrasp_mode!r}")
    x_s = squeeze_pose(X, x_p, model)
    return SynthesisResult(x_p, X.copy(), x_s, failed, notes, traces, anchors, seed)
