"""Pose fitting by preconditioned gradient descent with backtracking.

Each view gets its own pose, expressed in that camera's frame; the
multi-view terms tie them together. Correspondences (ICP matches, and the
lifting coordinates in ``icp`` mode) are frozen between re-matches, so every
accepted step within a block lowers the energy.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .energy import EnergyProblem, EnergyReport, EnergyWeights, ViewData, pose_vertices, total_energy_pose
from .kinematics import DegenerateFitError, PoseParams
from .mesh_core import RiggedMesh
from .synth import Camera, Scene, backproject, pose_in_camera

log = logging.getLogger(__name__)

MODES = ("fixed-gt", "icp", "free")
ARMIJO = 1e-4
MIN_STEP = 1e-12
# relative decrease test is taken against max(|E|, ENERGY_FLOOR), so it still fires near E = 0
ENERGY_FLOOR = 1.0


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    tol: float = 1e-8
    step: float = 1.0  # initial step, in preconditioned (roughly mm) units
    grow: float = 2.0
    mode: str = "icp"
    rematch_period: int = 1
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    seed: int = 0
    icp_target: str = "surface"
    multiview: bool = True
    corr_scale: float = 0.05  # grid units per preconditioned unit in free mode
    direction: str = "cg"  # "cg" (Polak-Ribiere+) or "gd" (steepest descent)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.rematch_period < 1:
            raise ValueError("rematch_period must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.direction not in ("cg", "gd"):
            raise ValueError("direction must be 'cg' or 'gd'")
        if self.step <= 0 or self.grow < 1:
            raise ValueError("step must be positive and grow >= 1")


@dataclass
class FitResult:
    theta: PoseParams  # world frame, from view 0
    thetas: list[PoseParams]  # per view, world frame
    corr: list[np.ndarray | None]
    trace: list[dict]
    wall_time: float
    converged: bool
    reason: str = ""
    reports: list[EnergyReport] = field(default_factory=list, repr=False)


def pose_from_camera(theta: PoseParams, camera: Camera) -> PoseParams:
    """Inverse of ``pose_in_camera``."""
    R = camera.R.T @ so3.exp(theta.rotation)
    return PoseParams(theta.scale, so3.log(R), camera.R.T @ (theta.translation - camera.t), theta.locals.copy())


def perturb_pose(theta: PoseParams, rot_deg: float, trans_mm: float, seed: int = 0) -> PoseParams:
    """Uniform axis-angle of magnitude <= rot_deg on every local, uniform translation <= trans_mm on the root."""
    if rot_deg < 0 or trans_mm < 0:
        raise ValueError("perturbation bounds must be >= 0")
    rng = np.random.default_rng(seed)
    n = len(theta.locals)

    def ball(k, radius):
        d = rng.normal(size=(k, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * radius * rng.uniform(size=(k, 1)) ** (1.0 / 3.0)

    locals_ = theta.locals.copy()
    if rot_deg > 0:
        delta = ball(n, np.deg2rad(rot_deg))
        for j in range(n):
            locals_[j] = so3.log(so3.exp(theta.locals[j]) @ so3.exp(delta[j]))
    t = theta.translation.copy()
    if trans_mm > 0:
        t = t + ball(1, trans_mm)[0]
    return PoseParams(theta.scale, theta.rotation.copy(), t, locals_)


def _subtree_radius(mesh: RiggedMesh) -> np.ndarray:
    """RMS distance of each joint's descendant vertices to the joint."""
    parents = mesh.parents
    part = mesh.part_of_vertex
    out = np.zeros(mesh.n_joints)
    for j in range(mesh.n_joints):
        desc = {j}
        changed = True
        while changed:
            changed = False
            for k, p in enumerate(parents):
                if p in desc and k not in desc:
                    desc.add(k)
                    changed = True
        v = mesh.vertices[np.isin(part, list(desc))]
        out[j] = np.sqrt(((v - mesh.rest_joints[j]) ** 2).sum(axis=1).mean()) if len(v) else 1.0
    return np.maximum(out, 1.0)


def pose_scales(mesh: RiggedMesh) -> np.ndarray:
    rad = _subtree_radius(mesh)
    root = int(np.flatnonzero(mesh.parents == -1)[0])
    others = [j for j in range(mesh.n_joints) if j != root]
    return np.concatenate([[1.0 / rad[root]], np.full(3, 1.0 / rad[root]), np.ones(3),
                           np.repeat(1.0 / rad[others], 3)])


def problem_from_scene(scene: Scene, views: list[int] | None = None, weights: EnergyWeights | None = None,
                       icp_target: str = "surface", multiview: bool = True) -> EnergyProblem:
    views = list(range(len(scene.frames))) if views is None else views
    data = []
    for v in views:
        pts, pix = backproject(scene.frames[v])
        data.append(ViewData(scene.frames[v].camera, pts, pix))
    return EnergyProblem(scene.mesh, scene.embedding, data, weights or EnergyWeights(),
                         icp_target=icp_target, multiview=multiview)


def gt_corr(scene: Scene, views: list[int], problem: EnergyProblem) -> list[np.ndarray]:
    out = []
    G = problem.embedding.grid_size
    for v, data in zip(views, problem.views):
        gt = scene.frames[v].gt
        if gt is None:
            raise ValueError(f"view {v} carries no ground-truth correspondences")
        c = gt.corr[data.pixels[:, 1], data.pixels[:, 0]].astype(np.float64)
        ok = gt.mask[data.pixels[:, 1], data.pixels[:, 0]]
        if not ok.all():
            raise ValueError(f"view {v}: depth pixels without ground-truth correspondence")
        out.append(np.clip(c, 0.0, G - 1))
    return out


class _State:
    """Parameter vector <-> per-view poses and corr arrays."""

    def __init__(self, problem: EnergyProblem, thetas, corr, free: bool, pose_scale, corr_scale):
        self.n_views = problem.n_views
        self.pose_size = thetas[0].size
        self.free = free
        self.corr_shapes = [None if c is None else c.shape for c in corr]
        scales = [np.tile(pose_scale, self.n_views)]
        if free:
            scales += [np.full(c.size, corr_scale) for c in corr if c is not None]
        self.scale = np.concatenate(scales)
        self.G = problem.embedding.grid_size

    def pack(self, thetas, corr) -> np.ndarray:
        parts = [t.to_vector() for t in thetas]
        if self.free:
            parts += [c.ravel() for c in corr if c is not None]
        return np.concatenate(parts)

    def unpack(self, x, fixed_corr):
        k = self.pose_size
        thetas = [PoseParams.from_vector(x[i * k:(i + 1) * k]) for i in range(self.n_views)]
        if not self.free:
            return thetas, fixed_corr
        off = self.n_views * k
        corr = []
        for shape in self.corr_shapes:
            if shape is None:
                corr.append(None)
                continue
            n = int(np.prod(shape))
            corr.append(x[off:off + n].reshape(shape))
            off += n
        return thetas, corr

    def project(self, x) -> np.ndarray:
        x = x.copy()
        if self.free:
            off = self.n_views * self.pose_size
            x[off:] = np.clip(x[off:], 0.0, self.G - 1)
        return x


def _gradient_vector(rep: EnergyReport, free: bool) -> np.ndarray:
    parts = list(rep.grad_theta)
    if free:
        parts += [g.ravel() for g in rep.grad_corr if g is not None]
    return np.concatenate(parts)


def fit_problem(problem: EnergyProblem, init: list[PoseParams], config: FitConfig,
                corr_init: list[np.ndarray] | None = None) -> FitResult:
    """Minimise the total energy over per-view camera-frame poses (and corr in free mode)."""
    t0 = time.perf_counter()
    mesh = problem.mesh
    V = problem.n_views
    if len(init) != V:
        raise ValueError("need one initial pose per view")
    for th in init:
        th.validate()
    mode = config.mode
    grid_coords = problem.embedding.grid_coords
    if mode == "fixed-gt" and corr_init is None:
        raise ValueError("fixed-gt mode needs ground-truth correspondences")
    free = mode == "free"
    scale = pose_scales(mesh)
    thetas = list(init)
    matches = problem.match([pose_vertices(mesh, th) for th in thetas])

    def icp_corr(m):
        return [None if m[(v, v)] is None else m[(v, v)].mesh_coords(grid_coords) for v in range(V)]

    if mode == "icp":
        corr = icp_corr(matches)
    elif corr_init is not None:
        corr = [None if c is None else np.array(c, dtype=np.float64) for c in corr_init]
    else:
        corr = icp_corr(matches)
    state = _State(problem, thetas, corr, free, scale, config.corr_scale)
    x = state.pack(thetas, corr)

    def evaluate(xv, m):
        th, c = state.unpack(xv, corr)
        for t in th:
            if t.scale <= 0:
                return None
        try:
            return total_energy_pose(problem, th, c, m)
        except DegenerateFitError:
            return None

    def rematch(xv):
        nonlocal matches, corr
        th, _ = state.unpack(xv, corr)
        matches = problem.match([pose_vertices(mesh, t) for t in th])
        if mode == "icp":
            corr = icp_corr(matches)
        r = evaluate(xv, matches)
        if r is None:
            raise DegenerateFitError("refinement became degenerate after re-matching")
        return r

    rep = evaluate(x, matches)
    if rep is None or not np.isfinite(rep.total):
        raise FloatingPointError("energy is not finite at the initial pose")
    trace: list[dict] = []
    reports: list[EnergyReport] = []
    step = config.step
    converged = False
    reason = "max_iters"
    since_match = 0
    g_prev = d_prev = None
    for it in range(config.max_iters):
        g = _gradient_vector(rep, free) * state.scale
        gn2 = float(g @ g)
        fresh = since_match == 0
        direction = -g
        if config.direction == "cg" and not fresh and g_prev is not None:
            # Polak-Ribiere+, restarted when it stops being a descent direction
            beta = max(0.0, float(g @ (g - g_prev)) / max(float(g_prev @ g_prev), 1e-300))
            cand = -g + beta * d_prev
            if float(cand @ g) < 0:
                direction = cand
        accepted = False
        new_rep = None
        while gn2 > 0 and step >= MIN_STEP:
            x_try = state.project(x + step * state.scale * direction)
            d = (x_try - x) / state.scale
            new_rep = evaluate(x_try, matches)
            if new_rep is not None and np.isfinite(new_rep.total) and \
                    new_rep.total <= rep.total + ARMIJO * float(g @ d):
                accepted = True
                break
            step *= 0.5
        trace.append({"iter": it, "total": rep.total, **rep.terms, "grad_norm": float(np.sqrt(gn2)),
                      "step": step if accepted else 0.0, "rematched": fresh})
        reports.append(rep)
        if not accepted:
            if fresh:
                converged, reason = True, "zero gradient" if gn2 == 0 else "step underflow"
                break
            step = config.step
            since_match = 0
            rep = rematch(x)
            continue
        decrease = rep.total - new_rep.total
        g_prev, d_prev = g, direction
        x, rep = x_try, new_rep
        step *= config.grow
        since_match += 1
        small = decrease <= config.tol * max(abs(rep.total), ENERGY_FLOOR)
        if since_match >= config.rematch_period or small:
            if small and fresh:
                converged, reason = True, "tol"
                break
            since_match = 0
            rep = rematch(x)
    thetas, corr_out = state.unpack(x, corr)
    cams = [v.camera for v in problem.views]
    world = [pose_from_camera(th, cam) for th, cam in zip(thetas, cams)]
    trace.append({"iter": len(trace), "total": rep.total, **rep.terms,
                  "grad_norm": float(np.linalg.norm(_gradient_vector(rep, free) * state.scale)),
                  "step": 0.0, "rematched": False})
    reports.append(rep)
    return FitResult(world[0], world, corr_out, trace, time.perf_counter() - t0, converged, reason, reports)


def fit(scene: Scene, init: PoseParams, config: FitConfig, views: list[int] | None = None) -> FitResult:
    """Fit a world-frame initial pose to the scene's views."""
    views = list(range(len(scene.frames))) if views is None else list(views)
    problem = problem_from_scene(scene, views, config.weights, config.icp_target, config.multiview)
    init_views = [pose_in_camera(init, scene.frames[v].camera) for v in views]
    corr = None
    if config.mode == "fixed-gt" or (config.mode == "free" and all(scene.frames[v].gt is not None for v in views)):
        corr = gt_corr(scene, views, problem)
    return fit_problem(problem, init_views, config, corr)
