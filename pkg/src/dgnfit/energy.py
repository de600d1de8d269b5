"""Fitting energies with analytic gradients.

Vertex-space evaluation works on per-view vertex estimates expressed in each
camera's frame; pose-space evaluation chains the vertex gradients through
skinning and forward kinematics. Data and prior terms are means over points
or vertices (collision and offset are plain sums over pairs and joints), and
every per-view quantity is averaged over views.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import dualgrid
from .embedding import MeshEmbedding
from .kinematics import (PoseParams, fk_compose, fk_compose_vjp, fk_decompose, fk_decompose_vjp, lbs,
                         lbs_vjp, refine, refine_vjp)
from .mesh_core import RiggedMesh

log = logging.getLogger(__name__)

EMPTY_MASS = 1e-9


@dataclass(frozen=True)
class EnergyWeights:
    alpha: float = 1.0  # lifting
    lambda1: float = 1.0  # prior
    kappa1: float = 1.0  # arap
    kappa2: float = 0.1  # offset, mm^-2
    lambda2: float = 1.0  # multi-view
    eta1: float = 1.0  # cross-view icp
    eta2: float = 1.0  # cross-view lifting
    t_col: float = 5.0
    beta: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name} must be finite and >= 0, got {v}")
        if self.t_col <= 0 or self.beta <= 0:
            raise ValueError("t_col and beta must be positive")

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> EnergyWeights:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown weights: {sorted(extra)}")
        return cls(**{k: float(v) for k, v in d.items()})


TERMS = ("data_icp", "data_lifting", "collision", "arap", "offset", "mv_vertex", "mv_icp", "mv_lifting")


@dataclass
class EnergyReport:
    total: float
    terms: dict
    gradient: np.ndarray  # flat, in the order of the evaluated variables
    grad_vertices: list = field(default_factory=list)
    grad_corr: list = field(default_factory=list)
    grad_theta: list = field(default_factory=list)
    skipped: int = 0
    mv_median: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {"total": float(self.total)}
        d.update({k: float(v) for k, v in self.terms.items()})
        d["grad_norm"] = float(np.linalg.norm(self.gradient))
        d["skipped"] = int(self.skipped)
        return d


# --- robust distance ---------------------------------------------------------


def smooth_l1(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Huber penalty of the vector norm along the last axis."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    r = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    return np.where(r < beta, r * r / (2 * beta), r - beta / 2)


def smooth_l1_grad(x: np.ndarray, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1)
    quad = r < beta
    val = np.where(quad, r * r / (2 * beta), r - beta / 2)
    scale = np.where(quad, 1.0 / beta, 1.0 / np.where(quad, 1.0, r))
    return val, x * scale[..., None]


# --- correspondences -----------------------------------------------------------


@dataclass(frozen=True)
class Matches:
    """Each depth point's target is sum_k bary[i, k] * vertices[vidx[i, k]]."""

    vidx: np.ndarray  # (N, 3)
    bary: np.ndarray  # (N, 3)
    face: np.ndarray | None = None  # (N,) for surface matches

    def __len__(self):
        return len(self.vidx)

    def targets(self, vertices: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nkc->nc", self.bary, vertices[self.vidx])

    def scatter(self, g_targets: np.ndarray, n_vertices: int) -> np.ndarray:
        out = np.zeros((n_vertices, 3))
        flat = self.vidx.ravel()
        w = (self.bary[:, :, None] * g_targets[:, None, :]).reshape(-1, 3)
        for c in range(3):
            out[:, c] = np.bincount(flat, weights=w[:, c], minlength=n_vertices)
        return out

    def mesh_coords(self, coords: np.ndarray) -> np.ndarray:
        """Interpolated per-vertex coordinates (e.g. grid coordinates) at the targets."""
        return np.einsum("nk,nkc->nc", self.bary, coords[self.vidx])


def _face_normals(vertices, faces):
    tri = vertices[faces]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), tri


def frontal_faces(vertices: np.ndarray, faces: np.ndarray, eye=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Faces whose outward normal points towards the camera centre (same test as the renderer's cull)."""
    n, tri = _face_normals(vertices, faces)
    return np.einsum("ij,ij->i", n, tri.mean(axis=1) - np.asarray(eye)) < 0


def frontal_vertices(vertices: np.ndarray, faces: np.ndarray, eye=(0.0, 0.0, 0.0),
                     view_dir: np.ndarray | None = None) -> np.ndarray:
    """Vertices whose area-weighted normal faces the camera.

    With ``view_dir`` the test is ``normal . view_dir < 0``; otherwise the
    per-vertex ray from ``eye`` is used.
    """
    n, _ = _face_normals(vertices, faces)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], n)
    d = vertices - np.asarray(eye) if view_dir is None else np.broadcast_to(view_dir, vertices.shape)
    length = np.linalg.norm(vn, axis=1)
    return (length > 0) & (np.einsum("ij,ij->i", vn, d) < 0)


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Barycentrics (k, 3) of the closest point on each triangle to the paired query point."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    one, zero = np.ones_like(d1), np.zeros_like(d1)
    choices = [
        np.stack([one, zero, zero], 1),
        np.stack([zero, one, zero], 1),
        np.stack([1 - t_ab, t_ab, zero], 1),
        np.stack([zero, zero, one], 1),
        np.stack([1 - t_ac, zero, t_ac], 1),
        np.stack([zero, 1 - t_bc, t_bc], 1),
    ]
    out = np.stack([1 - v_in - w_in, v_in, w_in], 1)
    for cond, ch in reversed(list(zip(conds, choices))):
        out = np.where(cond[:, None], ch, out)
    return out


def _best_per_point(point_ids, face_ids, dist2, n_points):
    """Index of the closest candidate per point; ties go to the lowest face id."""
    order = np.argsort(point_ids, kind="stable")
    pid = point_ids[order]
    starts = np.flatnonzero(np.r_[True, pid[1:] != pid[:-1]])
    if len(starts) != n_points:
        raise RuntimeError("some depth points found no candidate triangle")
    d = dist2[order]
    counts = np.diff(np.r_[starts, len(order)])
    best_d = np.repeat(np.minimum.reduceat(d, starts), counts)
    f = np.where(d == best_d, face_ids[order], np.iinfo(np.int64).max)
    best_f = np.repeat(np.minimum.reduceat(f, starts), counts)
    hit = np.flatnonzero(f == best_f)
    first = hit[np.r_[True, pid[hit][1:] != pid[hit][:-1]]]
    return order[first]


def match_surface(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, eye=(0.0, 0.0, 0.0)) -> Matches:
    """Exact closest point on the frontal triangles for every depth point."""
    points = np.asarray(points, dtype=np.float64)
    fid = np.flatnonzero(frontal_faces(vertices, faces, eye))
    if fid.size == 0:
        raise ValueError("no frontal surface to match against")
    tri = vertices[faces[fid]]
    centroid = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroid[:, None], axis=2).max(axis=1)
    # an upper bound on every point's surface distance: its nearest frontal-face vertex
    fv = np.unique(faces[fid])
    d_vert, _ = cKDTree(vertices[fv]).query(points)
    cut = max(2.0 * float(np.median(radius)), float(np.quantile(radius, 0.99)))
    small = radius <= cut
    big = np.flatnonzero(~small)
    small_ids = np.flatnonzero(small)
    pt_parts, f_parts = [], []
    if small_ids.size:
        tree = cKDTree(centroid[small_ids])
        hits = tree.query_ball_point(points, d_vert + radius[small_ids].max() + 1e-9)
        counts = np.array([len(h) for h in hits])
        pi = np.repeat(np.arange(len(points)), counts)
        fi = small_ids[np.concatenate([np.asarray(h, dtype=np.int64) for h in hits])] \
            if counts.sum() else np.zeros(0, np.int64)
        # a triangle can only beat the nearest vertex if its bounding sphere is within reach
        near = np.linalg.norm(points[pi] - centroid[fi], axis=1) <= d_vert[pi] + radius[fi] + 1e-9
        pt_parts.append(pi[near])
        f_parts.append(fi[near])
    if big.size:
        pt_parts.append(np.repeat(np.arange(len(points)), big.size))
        f_parts.append(np.tile(big, len(points)))
    pi = np.concatenate(pt_parts)
    fi = np.concatenate(f_parts)
    bary = closest_point_on_triangles(points[pi], tri[fi, 0], tri[fi, 1], tri[fi, 2])
    q = np.einsum("nk,nkc->nc", bary, tri[fi])
    d2 = ((points[pi] - q) ** 2).sum(axis=1)
    best = _best_per_point(pi, fid[fi], d2, len(points))
    face = fid[fi[best]]
    return Matches(faces[face].copy(), bary[best], face)


def match_vertices(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, eye=(0.0, 0.0, 0.0),
                   view_dir: np.ndarray | None = None) -> Matches:
    """Nearest frontal vertex for every depth point."""
    front = np.flatnonzero(frontal_vertices(vertices, faces, eye, view_dir))
    if front.size == 0:
        raise ValueError("no frontal vertices to match against")
    _, k = cKDTree(vertices[front]).query(np.asarray(points, dtype=np.float64))
    v = front[k]
    bary = np.zeros((len(v), 3))
    bary[:, 0] = 1.0
    return Matches(np.repeat(v[:, None], 3, axis=1), bary)


def match_points(points, vertices, faces, eye=(0.0, 0.0, 0.0), target: str = "surface") -> Matches:
    if target == "surface":
        return match_surface(points, vertices, faces, eye)
    if target == "vertex":
        return match_vertices(points, vertices, faces, eye)
    raise ValueError(f"unknown ICP target {target!r}")


# --- data terms ----------------------------------------------------------------


def icp_term(points: np.ndarray, vertices: np.ndarray, matches: Matches, beta: float = 1.0):
    """Mean smooth-L1 distance from each point to its (frozen) match. Returns (value, d/d vertices)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        warnings.warn("icp_term called with no depth points", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros_like(vertices)
    if len(matches) != len(points):
        raise ValueError("matches do not correspond to the depth points")
    val, g = smooth_l1_grad(points - matches.targets(vertices), beta)
    n = len(points)
    return float(val.sum() / n), matches.scatter(-g / n, len(vertices))


class LiftOperator:
    """Weight-normalised scatter of per-vertex values onto the mesh grid.

    Row ``node`` of the (G*G, n) matrix holds each vertex's extension weight
    on that node divided by the node's total weight mass, so constant
    per-vertex fields come back exactly. Nodes with no mass map to zero.
    """

    def __init__(self, embedding: MeshEmbedding, kernel: int = dualgrid.DEFAULT_KERNEL):
        G = embedding.grid_size
        m = embedding.grid_coords
        idx, w = dualgrid.window_weights(m, G, kernel)
        n = len(m)
        cols = np.repeat(np.arange(n), idx.shape[1])
        S = sparse.csr_matrix((w.ravel(), (idx.ravel(), cols)), shape=(G * G, n))
        mass = np.asarray(S.sum(axis=1)).ravel()
        inv = np.where(mass >= EMPTY_MASS, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
        self.grid_size = G
        self.kernel = kernel
        self.mass = mass.reshape(G, G, 1)
        self.matrix = sparse.diags(inv) @ S
        self.matrix_t = self.matrix.T.tocsr()

    def coord_map(self, vertices: np.ndarray) -> np.ndarray:
        G = self.grid_size
        return np.asarray(self.matrix @ vertices).reshape(G, G, -1)

    def coord_map_vjp(self, g_grid: np.ndarray) -> np.ndarray:
        G = self.grid_size
        return np.asarray(self.matrix_t @ g_grid.reshape(G * G, -1))


@dataclass
class LiftingResult:
    value: float
    grad_vertices: np.ndarray
    grad_corr: np.ndarray
    skipped: int


def lifting_term(points: np.ndarray, corr: np.ndarray, op: LiftOperator, vertices: np.ndarray,
                 beta: float = 1.0) -> LiftingResult:
    """Mean smooth-L1 distance between each point and the surface position sampled at its mesh coordinate."""
    points = np.asarray(points, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    n_v = len(vertices)
    if len(points) == 0:
        warnings.warn("lifting_term called with no depth points", RuntimeWarning, stacklevel=2)
        return LiftingResult(0.0, np.zeros((n_v, 3)), np.zeros((0, 2)), 0)
    if corr.shape != (len(points), 2):
        raise ValueError("corr must hold one 2D grid coordinate per point")
    K = op.kernel
    qmass = dualgrid.sampling(op.mass, corr, K)[:, 0]
    keep = qmass >= EMPTY_MASS
    skipped = int((~keep).sum())
    g_corr = np.zeros_like(corr)
    if not keep.any():
        return LiftingResult(0.0, np.zeros((n_v, 3)), g_corr, skipped)
    J = op.coord_map(vertices)
    c = corr[keep]
    lifted = dualgrid.sampling(J, c, K)
    val, g = smooth_l1_grad(points[keep] - lifted, beta)
    n = int(keep.sum())
    dgrid, dm = dualgrid.sampling_vjp(J, c, K, -g / n)
    g_corr[keep] = dm
    return LiftingResult(float(val.sum() / n), op.coord_map_vjp(dgrid), g_corr, skipped)


def lift_points(corr: np.ndarray, op: LiftOperator, vertices: np.ndarray) -> np.ndarray:
    return dualgrid.sampling(op.coord_map(vertices), corr, op.kernel)


# --- prior terms ---------------------------------------------------------------


def collision_pairs(parents: np.ndarray) -> np.ndarray:
    n = len(parents)
    i, j = np.triu_indices(n, 1)
    adjacent = (parents[j] == i) | (parents[i] == j)
    return np.stack([i[~adjacent], j[~adjacent]], axis=1)


def collision_term(joints: np.ndarray, parents: np.ndarray, t_col: float = 5.0):
    """Sum over non-adjacent joint pairs of max(t_col - distance, 0). Returns (value, d/d joints)."""
    joints = np.asarray(joints, dtype=np.float64)
    if len(joints) < 2:
        raise ValueError("collision_term needs at least two joints")
    pairs = collision_pairs(np.asarray(parents))
    d = joints[pairs[:, 0]] - joints[pairs[:, 1]]
    dist = np.linalg.norm(d, axis=1)
    active = (dist < t_col) & (dist > 0)
    value = float(np.maximum(t_col - dist, 0.0).sum())
    g = np.zeros_like(joints)
    u = d[active] / dist[active, None]
    np.add.at(g, pairs[active, 0], -u)
    np.add.at(g, pairs[active, 1], u)
    return value, g


def arap_term(mesh: RiggedMesh, estimated: np.ndarray, ref=None):
    """Mean squared distance between the estimate and its per-part rigid refit.

    The gradient includes the path through the refit. Returns (value, d/d estimate).
    """
    ref = refine(mesh, estimated) if ref is None else ref
    d = estimated - ref.vertices
    n = len(d)
    value = float((d * d).sum() / n)
    g = 2.0 * d / n
    g_a, g_t = lbs_vjp(mesh, -g)
    return value, g + refine_vjp(mesh, ref, g_a, g_t)


def offset_term(locals_: np.ndarray, root: int = 0):
    """Sum of squared translations of the non-root local transforms. Returns (value, d/d locals)."""
    L = np.asarray(locals_, dtype=np.float64)
    t = L[:, :3, 3].copy()
    t[root] = 0.0
    g = np.zeros_like(L)
    g[:, :3, 3] = 2.0 * t
    return float((t * t).sum()), g


def offset_from_transforms(mesh: RiggedMesh, transforms: np.ndarray):
    """offset_term of fk_decompose(transforms); gradient w.r.t. the (parts, 4, 4) transforms."""
    L, _ = fk_decompose(mesh, transforms)
    root = int(np.flatnonzero(mesh.parents == -1)[0])
    value, g_l = offset_term(L, root)
    return value, fk_decompose_vjp(mesh, transforms, g_l)


@dataclass
class PriorResult:
    collision: float
    arap: float
    offset: float
    grad: np.ndarray  # of lambda1 * (collision + kappa1 arap + kappa2 offset)


def prior_terms(mesh: RiggedMesh, estimated: np.ndarray, w: EnergyWeights) -> PriorResult:
    ref = refine(mesh, estimated)
    col, g_j = collision_term(ref.joints, mesh.parents, w.t_col)
    d = estimated - ref.vertices
    n = len(d)
    arap = float((d * d).sum() / n)
    g_direct = w.lambda1 * w.kappa1 * 2.0 * d / n
    off, g_T = offset_from_transforms(mesh, ref.transforms)
    g_a, g_t = lbs_vjp(mesh, -g_direct, w.lambda1 * g_j)
    g_a = g_a + w.lambda1 * w.kappa2 * g_T[:, :3, :3]
    g_t = g_t + w.lambda1 * w.kappa2 * g_T[:, :3, 3]
    return PriorResult(col, arap, off, g_direct + refine_vjp(mesh, ref, g_a, g_t))


# --- multi-view ----------------------------------------------------------------


def _rigid(camera):
    R, t = np.asarray(camera.R, dtype=np.float64), np.asarray(camera.t, dtype=np.float64)
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) <= 0:
        raise ValueError("extrinsics must be rigid transforms")
    return R, t


def to_canonical(vertices: np.ndarray, camera) -> np.ndarray:
    R, t = _rigid(camera)
    return (vertices - t) @ R


def mv_vertex_term(canonical: list[np.ndarray], beta: float = 1.0, median: np.ndarray | None = None):
    """Mean over views and vertices of smooth-L1 to the componentwise median.

    The median is treated as a constant: the gradient ignores its dependence
    on the inputs. Pass ``median`` to evaluate against a given one.
    Returns (value, per-view gradients, median).
    """
    if len(canonical) < 2:
        raise ValueError("multi-view terms need at least two views")
    C = np.stack(canonical)
    med = np.median(C, axis=0) if median is None else np.asarray(median, dtype=np.float64)
    val, g = smooth_l1_grad(C - med, beta)
    V, n = C.shape[:2]
    return float(val.sum() / (V * n)), list(g / (V * n)), med


# --- problem + total -----------------------------------------------------------


@dataclass
class ViewData:
    camera: object  # synth.Camera or anything with R, t
    points: np.ndarray  # (N, 3) in this camera's frame
    pixels: np.ndarray | None = None


def view_pairs(n_views: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n_views) for b in range(n_views) if a != b]


@dataclass
class EnergyProblem:
    mesh: RiggedMesh
    embedding: MeshEmbedding
    views: list[ViewData]
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    kernel: int = dualgrid.DEFAULT_KERNEL
    icp_target: str = "surface"
    multiview: bool = True

    def __post_init__(self):
        if not self.views:
            raise ValueError("need at least one view")
        self.lift = LiftOperator(self.embedding, self.kernel)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def use_mv(self) -> bool:
        return self.multiview and self.n_views > 1

    def map_to_view(self, vertices: np.ndarray, src: int, dst: int) -> np.ndarray:
        if src == dst:
            return vertices
        Rb, tb = _rigid(self.views[dst].camera)
        return to_canonical(vertices, self.views[src].camera) @ Rb.T + tb

    def match(self, vertex_list: list[np.ndarray]) -> dict:
        """Frozen correspondences for every (source view, target view) pair that is evaluated."""
        pairs = [(v, v) for v in range(self.n_views)]
        if self.use_mv:
            pairs += view_pairs(self.n_views)
        out = {}
        for a, b in pairs:
            Q = self.map_to_view(vertex_list[a], a, b)
            pts = self.views[b].points
            out[(a, b)] = match_points(pts, Q, self.mesh.faces, target=self.icp_target) if len(pts) else None
        return out


def total_energy(problem: EnergyProblem, vertex_list: list[np.ndarray], corr_list: list[np.ndarray | None],
                 matches: dict, mv_median: np.ndarray | None = None) -> EnergyReport:
    """Energy of per-view vertex estimates (each in its own camera frame).

    ``corr_list[v]`` holds the lifting grid coordinates of view v's points
    (None disables lifting for that view). Gradient order: all vertex
    arrays, then all non-None corr arrays. ``mv_median`` pins the
    multi-view median (otherwise computed from the current estimates).
    """
    w = problem.weights
    mesh = problem.mesh
    V = problem.n_views
    if len(vertex_list) != V or len(corr_list) != V:
        raise ValueError("need one vertex estimate and one corr entry per view")
    terms = dict.fromkeys(TERMS, 0.0)
    g_verts = [np.zeros_like(mesh.vertices) for _ in range(V)]
    g_corr = [None if c is None else np.zeros_like(c, dtype=np.float64) for c in corr_list]
    skipped = 0
    median = None
    for v in range(V):
        P = vertex_list[v]
        view = problem.views[v]
        if len(view.points):
            val, g = icp_term(view.points, P, matches[(v, v)], w.beta)
            terms["data_icp"] += val / V
            g_verts[v] += g / V
            if corr_list[v] is not None and w.alpha > 0:
                lr = lifting_term(view.points, corr_list[v], problem.lift, P, w.beta)
                terms["data_lifting"] += lr.value / V
                g_verts[v] += w.alpha * lr.grad_vertices / V
                g_corr[v] += w.alpha * lr.grad_corr / V
                skipped += lr.skipped
        if w.lambda1 > 0:
            pr = prior_terms(mesh, P, w)
            terms["collision"] += pr.collision / V
            terms["arap"] += pr.arap / V
            terms["offset"] += pr.offset / V
            g_verts[v] += pr.grad / V
    if problem.use_mv and w.lambda2 > 0:
        canon = [to_canonical(vertex_list[v], problem.views[v].camera) for v in range(V)]
        val, gc, median = mv_vertex_term(canon, w.beta, mv_median)
        terms["mv_vertex"] = val
        for v in range(V):
            R, _ = _rigid(problem.views[v].camera)
            g_verts[v] += w.lambda2 * gc[v] @ R.T
        pairs = view_pairs(V)
        for a, b in pairs:
            view = problem.views[b]
            if not len(view.points):
                continue
            Q = problem.map_to_view(vertex_list[a], a, b)
            # d Q / d P_a = R_b R_a^T
            back = _rigid(problem.views[b].camera)[0] @ _rigid(problem.views[a].camera)[0].T
            val, g = icp_term(view.points, Q, matches[(a, b)], w.beta)
            terms["mv_icp"] += val / len(pairs)
            g_verts[a] += w.lambda2 * w.eta1 * (g @ back) / len(pairs)
            if corr_list[b] is not None and w.eta2 > 0:
                lr = lifting_term(view.points, corr_list[b], problem.lift, Q, w.beta)
                terms["mv_lifting"] += lr.value / len(pairs)
                g_verts[a] += w.lambda2 * w.eta2 * (lr.grad_vertices @ back) / len(pairs)
                g_corr[b] += w.lambda2 * w.eta2 * lr.grad_corr / len(pairs)
                skipped += lr.skipped
    total = combine(terms, w)
    flat = np.concatenate([g.ravel() for g in g_verts] + [g.ravel() for g in g_corr if g is not None])
    return EnergyReport(total, terms, flat, g_verts, g_corr, [], skipped, median)


def combine(terms: dict, w: EnergyWeights) -> float:
    mv = terms["mv_vertex"] + w.eta1 * terms["mv_icp"] + w.eta2 * terms["mv_lifting"]
    prior = terms["collision"] + w.kappa1 * terms["arap"] + w.kappa2 * terms["offset"]
    return float(terms["data_icp"] + w.alpha * terms["data_lifting"] + w.lambda1 * prior + w.lambda2 * mv)


def pose_vertices(mesh: RiggedMesh, theta: PoseParams) -> np.ndarray:
    return lbs(mesh, fk_compose(mesh, theta))[0]


def total_energy_pose(problem: EnergyProblem, thetas: list[PoseParams], corr_list: list[np.ndarray | None],
                      matches: dict, mv_median: np.ndarray | None = None) -> EnergyReport:
    """total_energy with vertices generated from per-view poses; gradient w.r.t. the pose vectors then corr."""
    mesh = problem.mesh
    verts = [pose_vertices(mesh, th) for th in thetas]
    rep = total_energy(problem, verts, corr_list, matches, mv_median)
    g_theta = []
    for th, gv in zip(thetas, rep.grad_vertices):
        g_a, g_t = lbs_vjp(mesh, gv)
        g_T = np.zeros((mesh.n_joints, 4, 4))
        g_T[:, :3, :3] = g_a
        g_T[:, :3, 3] = g_t
        g_theta.append(fk_compose_vjp(mesh, th, g_T))
    rep.grad_theta = g_theta
    rep.gradient = np.concatenate(g_theta + [g.ravel() for g in rep.grad_corr if g is not None])
    return rep
