"""Similarity alignment, linear blend skinning and forward kinematics.

Per-part transforms are handled as stacked homogeneous matrices of shape
``(parts, 4, 4)``; the linear block of each is ``s * R``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import so3
from .mesh_core import RiggedMesh


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    s: float
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> SimilarityTransform:
        a = m[:3, :3]
        s = float(np.cbrt(np.linalg.det(a)))
        if s <= 0:
            raise ValueError("matrix is not an orientation-preserving similarity")
        u, _, vt = np.linalg.svd(a)
        return cls(s, u @ vt, m[:3, 3].copy())

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        m[:3, 3] = self.t
        return m

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.s * np.asarray(x) @ self.R.T + self.t

    def inverse(self) -> SimilarityTransform:
        return SimilarityTransform(1.0 / self.s, self.R.T, -(self.R.T @ self.t) / self.s)

    def to_dict(self) -> dict:
        return {"s": float(self.s), "R": self.R.ravel().tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> SimilarityTransform:
        return cls(float(d["s"]), np.asarray(d["R"], float).reshape(3, 3), np.asarray(d["t"], float))


@dataclass(frozen=True)
class PoseParams:
    """Root similarity (scale, axis-angle, translation) plus per-joint axis-angles.

    ``locals`` has one row per non-root joint, in joint-index order.
    """

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    locals: np.ndarray

    @classmethod
    def rest(cls, n_joints: int, translation=(0.0, 0.0, 0.0)) -> PoseParams:
        return cls(1.0, np.zeros(3), np.asarray(translation, float), np.zeros((n_joints - 1, 3)))

    @property
    def size(self) -> int:
        return 7 + self.locals.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.scale], self.rotation, self.translation, self.locals.ravel()])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> PoseParams:
        x = np.asarray(x, dtype=np.float64)
        return cls(float(x[0]), x[1:4].copy(), x[4:7].copy(), x[7:].reshape(-1, 3).copy())

    def validate(self) -> None:
        x = self.to_vector()
        if not np.all(np.isfinite(x)):
            raise ValueError("pose parameters must be finite")
        if self.scale <= 0:
            raise ValueError("global scale must be positive")
        if np.any(np.linalg.norm(self.locals, axis=1) >= np.pi):
            raise ValueError("local rotations must lie on the principal branch (|w| < pi)")

    def global_transform(self) -> SimilarityTransform:
        return SimilarityTransform(self.scale, so3.exp(self.rotation), self.translation.copy())

    def to_dict(self) -> dict:
        return {
            "global": {"s": self.scale, "omega": self.rotation.tolist(), "t": self.translation.tolist()},
            "locals": self.locals.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PoseParams:
        g = d["global"]
        return cls(float(g["s"]), np.asarray(g["omega"], float), np.asarray(g["t"], float),
                   np.asarray(d["locals"], float).reshape(-1, 3))


def canonical_rotation_vector(w: np.ndarray) -> np.ndarray:
    """Map an axis-angle onto the principal branch."""
    return so3.log(so3.exp(w))


# --- closed-form similarity fit ----------------------------------------------


@dataclass(frozen=True)
class SimilarityFit:
    """A fit plus the intermediates needed for its vector-Jacobian product."""

    transform: SimilarityTransform
    src_mean: np.ndarray
    tgt_mean: np.ndarray
    tgt_centered: np.ndarray
    tgt_var: float
    cov: np.ndarray


def _fit(src: np.ndarray, tgt: np.ndarray) -> SimilarityFit:
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and tgt must be matching (n, 3) arrays")
    n = len(src)
    if n < 3:
        raise DegenerateFitError(f"need at least 3 point pairs, got {n}")
    mu_p = src.mean(axis=0)
    mu_q = tgt.mean(axis=0)
    qc = tgt - mu_q
    sv_q = np.linalg.svd(qc, compute_uv=False)
    if sv_q[1] < 1e-9 * sv_q[0] or sv_q[0] == 0:
        raise DegenerateFitError("template points are collinear or coincident")
    cov = (src - mu_p).T @ qc / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateFitError("estimated points are collinear or coincident")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = (u * sign) @ vt
    var_q = float((qc * qc).sum() / n)
    s = float((d * sign).sum() / var_q)
    if s <= 0:
        raise DegenerateFitError("non-positive scale")
    t = mu_p - s * r @ mu_q
    return SimilarityFit(SimilarityTransform(s, r, t), mu_p, mu_q, qc, var_q, cov)


def fit_similarity(src: np.ndarray, tgt: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity T with ``src ~ s R tgt + t`` (Umeyama/Kabsch closed form)."""
    return _fit(src, tgt).transform


def _fit_vjp(fit: SimilarityFit, n: int, g_s: float, g_r: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    T = fit.transform
    g_r = np.array(g_r, dtype=np.float64)
    # t = mu_p - s R mu_q
    g_mu_p = np.array(g_t, dtype=np.float64)
    g_s = g_s - float(g_t @ (T.R @ fit.tgt_mean))
    g_r -= T.s * np.outer(g_t, fit.tgt_mean)
    # s = tr(R^T cov) / var_q  (R is stationary for tr(R^T cov), so only cov moves s)
    g_cov = (g_s / fit.tgt_var) * T.R
    # R = argmax_{SO(3)} tr(R^T cov): dR = R [w], (tr(M) I - M) w = vee(R^T dcov - dcov^T R)
    m = T.R.T @ fit.cov
    m = 0.5 * (m + m.T)
    k = np.trace(m) * np.eye(3) - m
    ev = np.linalg.eigvalsh(k)
    if ev[0] < 1e-6 * max(abs(ev[-1]), 1e-300):
        raise DegenerateFitError("singular values too close for a stable rotation gradient")
    b = np.linalg.solve(k, so3.vee_skew(T.R.T @ g_r))
    g_cov += T.R @ so3.hat(b)
    # cov = (P - mu_p)^T Qc / n; the mean term vanishes since sum(Qc) = 0
    return fit.tgt_centered @ g_cov.T / n + g_mu_p / n


def fit_similarity_vjp(src: np.ndarray, tgt: np.ndarray, g_s: float, g_r: np.ndarray,
                       g_t: np.ndarray) -> np.ndarray:
    """Gradient of a scalar of the fitted (s, R, t) with respect to ``src``."""
    return _fit_vjp(_fit(src, tgt), len(src), g_s, g_r, g_t)


# --- skinning --------------------------------------------------------------


def transforms_to_array(transforms) -> np.ndarray:
    if isinstance(transforms, np.ndarray):
        return transforms
    return np.stack([t.matrix for t in transforms])


def lbs(mesh: RiggedMesh, part_transforms) -> tuple[np.ndarray, np.ndarray]:
    """Pose the rest mesh. Returns (vertices, joint positions)."""
    T = transforms_to_array(part_transforms)
    if len(T) != mesh.n_joints:
        raise ValueError(f"expected {mesh.n_joints} part transforms, got {len(T)}")
    # per-vertex blended affine map: sum_k w_vk [A_k | t_k]
    M = (mesh.weights @ T[:, :3, :].reshape(len(T), 12)).reshape(-1, 3, 4)
    v = mesh.vertices
    posed = (M[:, :, :3] * v[:, None, :]).sum(axis=2) + M[:, :, 3]
    A = T[:, :3, :3]
    joints = np.einsum("kij,kj->ki", A, mesh.rest_joints) + T[:, :3, 3]
    return posed, joints


def lbs_vjp(mesh: RiggedMesh, g_vertices: np.ndarray, g_joints: np.ndarray | None = None):
    """Cotangents (g_A, g_t) on the part transforms' linear blocks and translations."""
    n = mesh.n_vertices
    vh = np.concatenate([mesh.vertices, np.ones((n, 1))], axis=1)
    g_m = (g_vertices[:, :, None] * vh[:, None, :]).reshape(n, 12)
    g = (mesh.weights.T @ g_m).reshape(-1, 3, 4)
    g_a = g[:, :, :3].copy()
    g_t = g[:, :, 3].copy()
    if g_joints is not None:
        g_a += g_joints[:, :, None] * mesh.rest_joints[:, None, :]
        g_t += g_joints
    return g_a, g_t


# --- forward kinematics ----------------------------------------------------


def _frames(mesh: RiggedMesh) -> tuple[np.ndarray, np.ndarray]:
    if "frames" not in mesh._cache:
        F = np.stack([j.frame_matrix for j in mesh.joints])
        mesh._cache["frames"] = (F, np.linalg.inv(F))
    return mesh._cache["frames"]


def recompose(mesh: RiggedMesh, locals_: np.ndarray) -> np.ndarray:
    """T_root = L_root; T_j = T_parent F_j L_j F_j^-1 (F_j: bone-frame pose)."""
    F, Finv = _frames(mesh)
    T = np.empty_like(locals_)
    parents = mesh.parents
    for j in mesh.topological_order():
        p = parents[j]
        T[j] = locals_[j] if p < 0 else T[p] @ F[j] @ locals_[j] @ Finv[j]
    return T


def pose_locals(mesh: RiggedMesh, theta: PoseParams) -> np.ndarray:
    L = np.tile(np.eye(4), (mesh.n_joints, 1, 1))
    root = int(np.flatnonzero(mesh.parents == -1)[0])
    L[root] = theta.global_transform().matrix
    others = [j for j in range(mesh.n_joints) if j != root]
    for row, j in enumerate(others):
        L[j, :3, :3] = so3.exp(theta.locals[row])
    return L


def fk_compose(mesh: RiggedMesh, theta: PoseParams) -> np.ndarray:
    """Per-part global transforms (parts, 4, 4) for a pose."""
    if theta.locals.shape != (mesh.n_joints - 1, 3):
        raise ValueError("pose has the wrong number of local rotations")
    return recompose(mesh, pose_locals(mesh, theta))


def fk_compose_vjp(mesh: RiggedMesh, theta: PoseParams, g_T: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pose vector given cotangents on the (parts, 4, 4) transforms."""
    F, Finv = _frames(mesh)
    L = pose_locals(mesh, theta)
    T = recompose(mesh, L)
    g = np.array(g_T, dtype=np.float64)
    g[:, 3, :] = 0.0
    parents = mesh.parents
    root = int(np.flatnonzero(parents == -1)[0])
    others = [j for j in range(mesh.n_joints) if j != root]
    row_of = {j: r for r, j in enumerate(others)}
    out = np.zeros(theta.size)
    for j in reversed(mesh.topological_order()):
        p = parents[j]
        if p < 0:
            ga = g[j, :3, :3]
            rot = so3.exp(theta.rotation)
            out[0] = np.sum(ga * rot)
            out[1:4] = np.einsum("ab,abi->i", theta.scale * ga, so3.exp_jacobian(theta.rotation))
            out[4:7] = g[j, :3, 3]
            continue
        m = F[j] @ L[j] @ Finv[j]
        g[p] += g[j] @ m.T
        g[p, 3, :] = 0.0
        g_m = T[p].T @ g[j]
        g_l = F[j].T @ g_m @ Finv[j].T
        w = theta.locals[row_of[j]]
        r = 7 + 3 * row_of[j]
        out[r:r + 3] = np.einsum("ab,abi->i", g_l[:3, :3], so3.exp_jacobian(w))
    return out


def fk_decompose(mesh: RiggedMesh, part_transforms) -> tuple[np.ndarray, list[SimilarityTransform]]:
    """Recover local transforms L_j = F_j^-1 T_parent^-1 T_j F_j.

    Returns the (parts, 4, 4) locals (the root's local is its global
    transform) and their [sR | t] split.
    """
    T = transforms_to_array(part_transforms)
    F, Finv = _frames(mesh)
    L = np.empty_like(T)
    for j, p in enumerate(mesh.parents):
        if p < 0:
            L[j] = T[j]
        else:
            if np.linalg.det(T[p, :3, :3]) <= 0:
                raise DegenerateFitError(f"parent transform of joint {j} is singular")
            L[j] = Finv[j] @ np.linalg.inv(T[p]) @ T[j] @ F[j]
    return L, [SimilarityTransform.from_matrix(m) for m in L]


def fk_decompose_vjp(mesh: RiggedMesh, part_transforms: np.ndarray, g_L: np.ndarray) -> np.ndarray:
    T = transforms_to_array(part_transforms)
    F, Finv = _frames(mesh)
    g_T = np.zeros_like(T)
    for j, p in enumerate(mesh.parents):
        gl = np.array(g_L[j])
        gl[3, :] = 0.0
        if p < 0:
            g_T[j] += gl
            continue
        pinv = np.linalg.inv(T[p])
        g_T[j] += (Finv[j] @ pinv).T @ gl @ F[j].T
        g_pinv = Finv[j].T @ gl @ (T[j] @ F[j]).T
        g_T[p] -= pinv.T @ g_pinv @ pinv.T
    g_T[:, 3, :] = 0.0
    return g_T


def joint_angles(local: SimilarityTransform) -> dict:
    return {"axis_angle": so3.log(local.R).tolist(), "euler_zyx": so3.euler_zyx(local.R).tolist()}


# --- refinement ------------------------------------------------------------


def fit_sets(mesh: RiggedMesh, rigid_tol: float = 1e-9) -> list[np.ndarray]:
    """Vertex indices used for each part's rigid fit.

    Vertices fully bound to the part when there are enough of them for a
    well-posed fit, otherwise every vertex whose argmax weight is the part.
    """
    key = ("fit_sets", rigid_tol)
    if key in mesh._cache:
        return mesh._cache[key]
    part = mesh.part_of_vertex
    sets = []
    for k in range(mesh.n_joints):
        members = np.flatnonzero(part == k)
        core = members[mesh.weights[members, k] >= 1.0 - rigid_tol]
        chosen = members
        if len(core) >= 4:
            q = mesh.vertices[core] - mesh.vertices[core].mean(axis=0)
            sv = np.linalg.svd(q, compute_uv=False)
            if sv[1] > 1e-6 * sv[0]:
                chosen = core
        if len(chosen) < 3:
            raise DegenerateFitError(f"part {k} has fewer than 3 vertices")
        sets.append(chosen)
    mesh._cache[key] = sets
    return sets


@dataclass(frozen=True)
class Refinement:
    transforms: np.ndarray  # (parts, 4, 4)
    vertices: np.ndarray
    joints: np.ndarray
    fits: tuple[SimilarityFit, ...]


def refine(mesh: RiggedMesh, estimated: np.ndarray) -> Refinement:
    """Fit one similarity per part to the estimate, then re-pose the template by LBS."""
    est = np.asarray(estimated, dtype=np.float64)
    if est.shape != mesh.vertices.shape:
        raise ValueError(f"expected {mesh.vertices.shape} estimated vertices, got {est.shape}")
    fits = []
    for k, idx in enumerate(fit_sets(mesh)):
        try:
            fits.append(_fit(est[idx], mesh.vertices[idx]))
        except DegenerateFitError as exc:
            raise DegenerateFitError(f"part {k}: {exc}") from exc
    T = np.stack([f.transform.matrix for f in fits])
    verts, joints = lbs(mesh, T)
    return Refinement(T, verts, joints, tuple(fits))


def refine_vjp(mesh: RiggedMesh, ref: Refinement, g_a: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    """Pull cotangents on the part transforms (linear block, translation) back to the estimate."""
    out = np.zeros_like(mesh.vertices)
    for k, (idx, fit) in enumerate(zip(fit_sets(mesh), ref.fits)):
        if not (np.any(g_a[k]) or np.any(g_t[k])):
            continue
        T = fit.transform
        g_s = float(np.sum(g_a[k] * T.R))
        g_r = T.s * g_a[k]
        out[idx] += _fit_vjp(fit, len(idx), g_s, g_r, g_t[k])
    return out
