"""Central finite-difference checks of every analytic gradient in the package."""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import dualgrid, energy, so3
from .assets import build_toy_rig
from .embedding import embed_mesh
from .kinematics import PoseParams, fit_similarity, fit_similarity_vjp, fk_compose
from .synth import look_at

EPS_STEP = np.finfo(float).eps ** (1.0 / 3.0)
# coordinates differenced per configuration for the whole-energy checks
SUBSET = 120


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float | None = None,
                       index: np.ndarray | None = None) -> np.ndarray:
    """Gradient of a scalar function by central differences, step scaled to each coordinate.

    With ``index`` only those flat coordinates are differenced; the result has one entry per index.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    idx = np.arange(flat.size) if index is None else np.asarray(index)
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        step = (EPS_STEP if h is None else h) * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        out[j] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step)
    return out.reshape(x.shape) if index is None else out


def _subset(rng, size, n=SUBSET):
    return np.sort(rng.choice(size, min(n, size), replace=False))


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


@dataclass
class Check:
    name: str
    config: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


LINEAR_TOL = 1e-4
TOL = 1e-3


@lru_cache(maxsize=1)
def toy_setup():
    mesh = build_toy_rig()
    emb, _ = embed_mesh(mesh, grid_size=8, max_iters=500)
    return mesh, emb


def _coords(rng, n, G):
    # keep away from integer nodes, where the clamped window start jumps
    m = rng.uniform(0.0, G - 1, size=(n, 2))
    frac = m - np.floor(m)
    return np.where(frac < 1e-3, m + 2e-3, m)


def _toy_pose(rng, n_joints, spread=0.4):
    return PoseParams(rng.uniform(0.9, 1.1), rng.normal(scale=0.3, size=3),
                      np.array([0.0, -20.0, 380.0]) + rng.normal(scale=5.0, size=3),
                      rng.uniform(-spread, spread, size=(n_joints - 1, 3)))


def _toy_problem(rng, n_views, n_points=15, weights=None, kernel=4):
    mesh, emb = toy_setup()
    cams = [look_at((0.0, 20.0, -380.0))]
    if n_views > 1:
        cams.append(look_at((150.0, 20.0, -350.0)))
    if n_views > 2:
        cams.append(look_at((-150.0, 40.0, -350.0)))
    theta = _toy_pose(rng, mesh.n_joints)
    P_world = energy.pose_vertices(mesh, PoseParams(theta.scale, theta.rotation, np.zeros(3), theta.locals))
    views = []
    for cam in cams:
        pts = cam.to_camera(P_world[rng.choice(len(P_world), n_points)] + rng.normal(scale=2.0, size=(n_points, 3)))
        views.append(energy.ViewData(cam, pts))
    w = weights or energy.EnergyWeights(kappa2=0.1, t_col=5.0, beta=1.0)
    prob = energy.EnergyProblem(mesh, emb, views, w, kernel=kernel)
    verts = [cam.to_camera(P_world) + rng.normal(scale=1.5, size=P_world.shape) for cam in cams]
    corr = [_coords(rng, n_points, emb.grid_size) for _ in cams]
    return prob, verts, corr


def check_dualgrid(rng, cfg):
    G, K, n, d = 8, 4, 6, 3
    m = _coords(rng, n, G)
    f = rng.normal(size=(n, d))
    U = rng.normal(size=(G, G, d))
    df, dm = dualgrid.extension_vjp(m, f, G, K, U)
    out = [
        Check("extension_vjp/features", cfg,
              rel_error(df, central_difference(lambda x: float((U * dualgrid.extension(m, x, G, K)).sum()), f)),
              LINEAR_TOL),
        Check("extension_vjp/coords", cfg,
              rel_error(dm, central_difference(lambda x: float((U * dualgrid.extension(x, f, G, K)).sum()), m)), TOL),
    ]
    grid = rng.normal(size=(G, G, d))
    up = rng.normal(size=(n, d))
    dgrid, dm2 = dualgrid.sampling_vjp(grid, m, K, up)
    out += [
        Check("sampling_vjp/grid", cfg,
              rel_error(dgrid, central_difference(lambda x: float((up * dualgrid.sampling(x, m, K)).sum()), grid)),
              LINEAR_TOL),
        Check("sampling_vjp/coords", cfg,
              rel_error(dm2, central_difference(lambda x: float((up * dualgrid.sampling(grid, x, K)).sum()), m)), TOL),
    ]
    return out


def check_similarity(rng, cfg):
    n = int(rng.integers(10, 30))
    q = rng.normal(scale=30.0, size=(n, 3))
    s = rng.uniform(0.5, 2.0)
    R = so3.random_rotation(rng)
    p = s * q @ R.T + rng.normal(scale=20.0, size=3) + rng.normal(scale=2.0, size=(n, 3))
    g_s = rng.normal()
    g_r = rng.normal(size=(3, 3))
    g_t = rng.normal(size=3)

    def f(x):
        T = fit_similarity(x, q)
        return g_s * T.s + float((g_r * T.R).sum()) + float(g_t @ T.t)

    return [Check("fit_similarity_vjp", cfg, rel_error(fit_similarity_vjp(p, q, g_s, g_r, g_t),
                                                       central_difference(f, p)), TOL)]


def check_terms(rng, cfg):
    prob, verts, corr = _toy_problem(rng, 1)
    mesh = prob.mesh
    P = verts[0]
    pts = prob.views[0].points
    w = prob.weights
    out = []
    m = energy.match_points(pts, P, mesh.faces)
    _, g = energy.icp_term(pts, P, m, w.beta)
    out.append(Check("icp_term", cfg, rel_error(g, central_difference(
        lambda x: energy.icp_term(pts, x, m, w.beta)[0], P)), TOL))
    lr = energy.lifting_term(pts, corr[0], prob.lift, P, w.beta)
    out.append(Check("lifting_term/vertices", cfg, rel_error(lr.grad_vertices, central_difference(
        lambda x: energy.lifting_term(pts, corr[0], prob.lift, x, w.beta).value, P)), TOL))
    out.append(Check("lifting_term/corr", cfg, rel_error(lr.grad_corr, central_difference(
        lambda x: energy.lifting_term(pts, x, prob.lift, P, w.beta).value, corr[0])), TOL))
    joints = rng.uniform(0.0, 8.0, size=(mesh.n_joints + 3, 3))
    parents = np.r_[-1, np.arange(mesh.n_joints + 2)]
    _, g = energy.collision_term(joints, parents, w.t_col)
    out.append(Check("collision_term", cfg, rel_error(g, central_difference(
        lambda x: energy.collision_term(x, parents, w.t_col)[0], joints)), TOL))
    _, g = energy.arap_term(mesh, P)
    out.append(Check("arap_term", cfg, rel_error(g, central_difference(lambda x: energy.arap_term(mesh, x)[0], P)),
                     TOL))
    T = fk_compose(mesh, _toy_pose(rng, mesh.n_joints))
    T[1:, :3, 3] += rng.normal(scale=2.0, size=(mesh.n_joints - 1, 3))
    _, g = energy.offset_from_transforms(mesh, T)

    def off(x):
        return energy.offset_from_transforms(mesh, x)[0]

    num = central_difference(off, T)
    num[:, 3, :] = 0.0
    out.append(Check("offset_term", cfg, rel_error(g, num), LINEAR_TOL))
    return out


def check_multiview(rng, cfg):
    prob, verts, corr = _toy_problem(rng, 3, n_points=8)
    canon = [energy.to_canonical(v, d.camera) for v, d in zip(verts, prob.views)]
    _, g, med = energy.mv_vertex_term(canon, 1.0)
    out = [Check("mv_vertex", cfg, rel_error(np.stack(g), central_difference(
        lambda x: energy.mv_vertex_term(list(x), 1.0, med)[0], np.stack(canon))), TOL)]
    w = energy.EnergyWeights(alpha=0.0, lambda1=0.0, lambda2=1.0, eta1=1.0, eta2=1.0)
    prob.weights = w
    matches = prob.match(verts)
    rep = energy.total_energy(prob, verts, corr, matches)

    def f(x):
        vs = [x[i] for i in range(len(verts))]
        return energy.total_energy(prob, vs, corr, matches, rep.mv_median).total

    x0 = np.stack(verts)
    idx = _subset(rng, x0.size)
    out.append(Check("multiview_term", cfg, rel_error(np.stack(rep.grad_vertices).ravel()[idx],
                                                      central_difference(f, x0, index=idx)), TOL))
    return out


def check_total(rng, cfg):
    out = []
    prob, verts, corr = _toy_problem(rng, 2, n_points=10)
    matches = prob.match(verts)
    rep = energy.total_energy(prob, verts, corr, matches)
    n_v = verts[0].size
    x0 = np.concatenate([v.ravel() for v in verts] + [c.ravel() for c in corr])

    def f(x):
        vs = [x[i * n_v:(i + 1) * n_v].reshape(-1, 3) for i in range(2)]
        off = 2 * n_v
        cs = [x[off:off + corr[0].size].reshape(-1, 2), x[off + corr[0].size:].reshape(-1, 2)]
        return energy.total_energy(prob, vs, cs, matches, rep.mv_median).total

    idx = _subset(rng, x0.size)
    out.append(Check("total_energy/vertices", cfg, rel_error(rep.gradient[idx], central_difference(f, x0, index=idx)),
                     TOL))
    mesh = prob.mesh
    thetas = [_toy_pose(rng, mesh.n_joints, spread=0.2) for _ in range(2)]
    pm = prob.match([energy.pose_vertices(mesh, t) for t in thetas])
    rp = energy.total_energy_pose(prob, thetas, corr, pm)
    k = thetas[0].size
    y0 = np.concatenate([t.to_vector() for t in thetas])

    def fp(y):
        th = [PoseParams.from_vector(y[i * k:(i + 1) * k]) for i in range(2)]
        return energy.total_energy_pose(prob, th, corr, pm, rp.mv_median).total

    out.append(Check("total_energy/pose", cfg, rel_error(np.concatenate(rp.grad_theta), central_difference(fp, y0)),
                     TOL))
    return out


SUITES = {
    "dualgrid": check_dualgrid,
    "similarity": check_similarity,
    "terms": check_terms,
    "multiview": check_multiview,
    "total": check_total,
}


def run_suite(n_configs: int = 20, seed: int = 0, suites=None) -> tuple[list[Check], float]:
    """All checks over ``n_configs`` seeded random configurations. Returns (checks, seconds)."""
    t0 = time.perf_counter()
    checks = []
    for name in suites or SUITES:
        for cfg in range(n_configs):
            rng = np.random.default_rng([seed, cfg, list(SUITES).index(name)])
            checks += SUITES[name](rng, cfg)
    return checks, time.perf_counter() - t0


def summarize(checks: list[Check]) -> list[dict]:
    rows = {}
    for c in checks:
        r = rows.setdefault(c.name, {"name": c.name, "configs": 0, "max_error": 0.0, "tol": c.tol, "failed": 0})
        r["configs"] += 1
        r["max_error"] = max(r["max_error"], c.error)
        r["failed"] += not c.passed
    return list(rows.values())
