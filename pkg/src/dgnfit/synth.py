"""Synthetic depth data: pinhole z-buffer rendering, corruption, scene bundles.

Pixel ``(u, v)`` samples the image plane at its integer coordinates, so the
principal point ``(cx, cy)`` back-projects onto the optical axis. Depth
images are stored row-major as ``depth[v, u]``.
"""

from __future__ import annotations

import json
import shutil
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import MeshEmbedding
from .kinematics import PoseParams, fk_compose, lbs
from .mesh_core import RiggedMesh, load_rigged_mesh, save_rigged_mesh
from . import so3

DEFAULT_RESOLUTION = 64


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        R = np.asarray(self.R, dtype=np.float64)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("camera extrinsic rotation must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.R.T + self.t

    def to_world(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.t) @ self.R

    def project(self, x_cam: np.ndarray) -> np.ndarray:
        x = np.asarray(x_cam, dtype=np.float64)
        return np.stack([self.fx * x[..., 0] / x[..., 2] + self.cx,
                         self.fy * x[..., 1] / x[..., 2] + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsics": {"R": self.R.ravel().tolist(), "t": self.t.tolist()}}

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        ext = d.get("extrinsics", {})
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.asarray(ext.get("R", np.eye(3).ravel()), float).reshape(3, 3),
                   np.asarray(ext.get("t", np.zeros(3)), float))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), focal: float = 100.0,
            resolution: int = DEFAULT_RESOLUTION) -> Camera:
    """Camera at ``eye`` looking at ``target``; image y points along ``-up``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    c = (resolution - 1) / 2.0
    return Camera(focal, focal, c, c, resolution, resolution, R, -R @ eye)


def default_rig(n_views: int = 3, distance: float = 380.0, spread_deg: float = 60.0,
                resolution: int = DEFAULT_RESOLUTION, focal: float = 100.0) -> list[Camera]:
    """Cameras on an arc in the x-z plane around the origin; view 0 looks along +z."""
    if n_views == 1:
        angles = [0.0]
    else:
        angles = np.linspace(-spread_deg, spread_deg, n_views)
        angles = sorted(angles, key=abs)
    cams = []
    for a in np.deg2rad(angles):
        eye = distance * np.array([np.sin(a), 0.0, -np.cos(a)])
        cams.append(look_at(eye, focal=focal * resolution / DEFAULT_RESOLUTION, resolution=resolution))
    return cams


@dataclass
class GroundTruth:
    theta: PoseParams | None
    corr: np.ndarray  # (H, W, 2) float32, grid coordinates
    mask: np.ndarray  # (H, W) bool
    face_id: np.ndarray | None = None  # (H, W) int32, -1 where empty
    bary: np.ndarray | None = None  # (H, W, 3) perspective-correct barycentrics


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) float32, mm, 0 = hole
    camera: Camera
    gt: GroundTruth | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


# --- rasterizer --------------------------------------------------------------

_NEAR = 1e-6


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _is_top_left(ax, ay, bx, by):
    # for counter-clockwise (positive-area) winding in (u, v) image coordinates
    return ((ay == by) & (bx < ax)) | (by < ay)


def _raster_candidates(tri, uv, z, width, height):
    """All (triangle, pixel) pairs inside the triangles, with barycentrics."""
    a, b, c = uv[:, 0], uv[:, 1], uv[:, 2]
    umin = np.clip(np.ceil(uv[:, :, 0].min(axis=1)), 0, width).astype(np.int64)
    umax = np.clip(np.floor(uv[:, :, 0].max(axis=1)), -1, width - 1).astype(np.int64)
    vmin = np.clip(np.ceil(uv[:, :, 1].min(axis=1)), 0, height).astype(np.int64)
    vmax = np.clip(np.floor(uv[:, :, 1].max(axis=1)), -1, height - 1).astype(np.int64)
    nu = np.maximum(umax - umin + 1, 0)
    nv = np.maximum(vmax - vmin + 1, 0)
    count = nu * nv
    total = int(count.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3 + (np.zeros((0, 3)), np.zeros(0))
    owner = np.repeat(np.arange(len(tri)), count)
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    pu = umin[owner] + local % nu[owner]
    pv = vmin[owner] + local // nu[owner]
    px, py = pu.astype(np.float64), pv.astype(np.float64)
    A, B, C = a[owner], b[owner], c[owner]
    w0 = _edge(B[:, 0], B[:, 1], C[:, 0], C[:, 1], px, py)
    w1 = _edge(C[:, 0], C[:, 1], A[:, 0], A[:, 1], px, py)
    w2 = _edge(A[:, 0], A[:, 1], B[:, 0], B[:, 1], px, py)
    inside = np.ones(total, dtype=bool)
    for w, (P, Q) in zip((w0, w1, w2), ((B, C), (C, A), (A, B))):
        tl = _is_top_left(P[:, 0], P[:, 1], Q[:, 0], Q[:, 1])
        inside &= (w > 0) | ((w == 0) & tl)
    area = w0 + w1 + w2
    lam = np.stack([w0, w1, w2], axis=1)[inside] / area[inside, None]
    owner, pu, pv = owner[inside], pu[inside], pv[inside]
    # perspective-correct: 1/z is affine in screen space
    iz = lam / z[owner]
    inv_depth = iz.sum(axis=1)
    return owner, pu, pv, iz / inv_depth[:, None], 1.0 / inv_depth


def rasterize(vertices_cam: np.ndarray, faces: np.ndarray, camera: Camera, workers: int = 1):
    """Z-buffer of the front-facing triangles.

    Returns ``(depth, face_id, bary)`` with depth in float64 (0 = empty).
    Equal depths resolve to the lower triangle index.
    """
    V = np.asarray(vertices_cam, dtype=np.float64)
    tri = V[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("ij,ij->i", n, tri.mean(axis=1)) < 0
    front &= np.all(tri[:, :, 2] > _NEAR, axis=1)
    fid = np.flatnonzero(front)
    W, H = camera.width, camera.height
    depth = np.zeros((H, W))
    face_id = np.full((H, W), -1, dtype=np.int32)
    bary = np.zeros((H, W, 3))
    if fid.size == 0:
        return depth, face_id, bary
    uv = camera.project(tri[fid])
    z = tri[fid][:, :, 2]
    # orient every triangle counter-clockwise in image space
    area = _edge(uv[:, 0, 0], uv[:, 0, 1], uv[:, 1, 0], uv[:, 1, 1], uv[:, 2, 0], uv[:, 2, 1])
    keep = area != 0
    fid, uv, z, area = fid[keep], uv[keep], z[keep], area[keep]
    flip = area < 0
    perm = np.where(flip[:, None], [0, 2, 1], [0, 1, 2])
    uv = np.take_along_axis(uv, perm[:, :, None], axis=1)
    z = np.take_along_axis(z, perm, axis=1)

    def band(rows):
        lo, hi = rows
        vmin = uv[:, :, 1].min(axis=1)
        vmax = uv[:, :, 1].max(axis=1)
        sel = np.flatnonzero((vmax >= lo - 1) & (vmin <= hi))
        uvb = uv[sel].copy()
        owner, pu, pv, lam, zz = _raster_candidates(sel, uvb, z[sel], W, H)
        m = (pv >= lo) & (pv < hi)
        return sel[owner[m]], pu[m], pv[m], lam[m], zz[m]

    edges = np.linspace(0, H, max(1, workers) + 1).astype(int)
    bands = list(zip(edges[:-1], edges[1:]))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(band, bands))
    else:
        parts = [band(b) for b in bands]
    owner = np.concatenate([p[0] for p in parts])
    pu = np.concatenate([p[1] for p in parts])
    pv = np.concatenate([p[2] for p in parts])
    lam = np.concatenate([p[3] for p in parts])
    zz = np.concatenate([p[4] for p in parts])
    pix = pv * W + pu
    order = np.lexsort((owner, zz, pix))
    pix_s = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    # undo the image-space reordering so barycentrics follow the face's vertex order
    lam_w = lam[win]
    flipped = flip[owner[win]]
    lam_w[flipped] = lam_w[flipped][:, [0, 2, 1]]
    depth.ravel()[pix[win]] = zz[win]
    face_id.ravel()[pix[win]] = fid[owner[win]]
    bary.reshape(-1, 3)[pix[win]] = lam_w
    return depth, face_id, bary


def render_depth(mesh: RiggedMesh, posed_vertices: np.ndarray, camera: Camera,
                 embedding: MeshEmbedding | None = None, theta: PoseParams | None = None,
                 workers: int = 1) -> DepthFrame:
    """Render world-frame posed vertices; fills ground-truth correspondences when an embedding is given."""
    vc = camera.to_camera(posed_vertices)
    depth, face_id, bary = rasterize(vc, mesh.faces, camera, workers=workers)
    mask = face_id >= 0
    corr = np.zeros(depth.shape + (2,), dtype=np.float32)
    if embedding is not None and mask.any():
        g = embedding.grid_coords
        tri_g = g[mesh.faces[face_id[mask]]]  # (k, 3, 2)
        corr[mask] = np.einsum("kj,kjc->kc", bary[mask], tri_g).astype(np.float32)
    gt = GroundTruth(theta, corr, mask, face_id, bary)
    return DepthFrame(depth.astype(np.float32), camera, gt)


def backproject(frame: DepthFrame) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points of the valid pixels and their (u, v) indices."""
    cam = frame.camera
    v, u = np.nonzero(frame.depth > 0)
    z = frame.depth[v, u].astype(np.float64)
    pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    return pts, np.stack([u, v], axis=1)


# --- corruption --------------------------------------------------------------


def corrupt(frame: DepthFrame, noise_sigma: float = 0.0, hole_fraction: float = 0.0,
            seed: int | np.random.SeedSequence = 0, max_radius: float = 4.0) -> DepthFrame:
    """Gaussian depth noise plus elliptical holes covering ``hole_fraction`` of the valid pixels."""
    if not 0.0 <= hole_fraction <= 1.0:
        raise ValueError("hole_fraction must lie in [0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    depth = frame.depth.copy()
    valid = depth > 0
    if noise_sigma > 0:
        noisy = depth[valid].astype(np.float64) + rng.normal(0.0, noise_sigma, int(valid.sum()))
        depth[valid] = np.where(noisy > 0, noisy, 0.0).astype(np.float32)
        valid = depth > 0
    target = int(round(hole_fraction * valid.sum()))
    H, W = depth.shape
    vv, uu = np.mgrid[0:H, 0:W]
    removed = 0
    while removed < target:
        cand = np.flatnonzero(valid.ravel())
        center = cand[rng.integers(len(cand))]
        cv, cu = divmod(int(center), W)
        ra, rb = rng.uniform(1.0, max_radius, 2)
        ang = rng.uniform(0.0, np.pi)
        du, dv = uu - cu, vv - cv
        x = (du * np.cos(ang) + dv * np.sin(ang)) / ra
        y = (-du * np.sin(ang) + dv * np.cos(ang)) / rb
        r2 = x * x + y * y
        inside = np.flatnonzero((r2.ravel() <= 1.0) & valid.ravel())
        if inside.size == 0:
            inside = np.array([center])
        # innermost pixels first so a partial blob stays contiguous
        inside = inside[np.argsort(r2.ravel()[inside], kind="stable")][:target - removed]
        depth.ravel()[inside] = 0.0
        valid.ravel()[inside] = False
        removed += inside.size
    return DepthFrame(depth, frame.camera, frame.gt)


# --- scenes ------------------------------------------------------------------


def pose_in_camera(theta: PoseParams, camera: Camera) -> PoseParams:
    """Express a world-frame pose in a camera frame (only the root changes)."""
    R = camera.R @ so3.exp(theta.rotation)
    return PoseParams(theta.scale, so3.log(R), camera.R @ theta.translation + camera.t, theta.locals.copy())


def posed_world(mesh: RiggedMesh, theta: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    return lbs(mesh, fk_compose(mesh, theta))


@dataclass
class Scene:
    mesh: RiggedMesh
    embedding: MeshEmbedding
    theta: PoseParams  # world frame
    frames: list[DepthFrame]
    meta: dict = field(default_factory=dict)

    @property
    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]


def make_scene(mesh: RiggedMesh, embedding: MeshEmbedding, theta: PoseParams, cameras: list[Camera],
               noise: float = 0.0, holes: float = 0.0, seed: int = 0, workers: int = 1) -> Scene:
    if not cameras:
        raise ValueError("need at least one camera")
    theta.validate()
    verts, _ = posed_world(mesh, theta)
    seeds = np.random.SeedSequence(seed).spawn(len(cameras))
    frames = []
    for cam, ss in zip(cameras, seeds):
        clean = render_depth(mesh, verts, cam, embedding, pose_in_camera(theta, cam), workers=workers)
        frames.append(corrupt(clean, noise, holes, ss) if (noise > 0 or holes > 0) else clean)
    return Scene(mesh, embedding, theta, frames, {"noise": noise, "holes": holes, "seed": seed})


# --- file formats --------------------------------------------------------------

_DEPTH_MAGIC = b"DGND"
_CORR_FLAG = 1 << 31


def write_depth_frame(path: str | Path, frame: DepthFrame) -> None:
    cam = frame.camera
    H, W = frame.depth.shape
    has_corr = frame.gt is not None
    header = _DEPTH_MAGIC + struct.pack("<II", W, H | (_CORR_FLAG if has_corr else 0))
    header += struct.pack("<4f", cam.fx, cam.fy, cam.cx, cam.cy)
    header += struct.pack("<12f", *cam.R.ravel(), *cam.t)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
        if has_corr:
            fh.write(np.ascontiguousarray(frame.gt.corr, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(frame.gt.mask, dtype=np.uint8).tobytes())


def read_depth_frame(path: str | Path, theta: PoseParams | None = None) -> DepthFrame:
    """Read a frame. Camera parameters come back at float32 precision, re-orthonormalized."""
    raw = Path(path).read_bytes()
    if raw[:4] != _DEPTH_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    W, Hf = struct.unpack("<II", raw[4:12])
    has_corr = bool(Hf & _CORR_FLAG)
    H = Hf & ~_CORR_FLAG
    fx, fy, cx, cy = struct.unpack("<4f", raw[12:28])
    ext = np.array(struct.unpack("<12f", raw[28:76]), dtype=np.float64)
    u, _, vt = np.linalg.svd(ext[:9].reshape(3, 3))
    off = 76
    depth = np.frombuffer(raw, dtype="<f4", count=W * H, offset=off).reshape(H, W).copy()
    off += 4 * W * H
    gt = None
    if has_corr:
        corr = np.frombuffer(raw, dtype="<f4", count=W * H * 2, offset=off).reshape(H, W, 2).copy()
        off += 8 * W * H
        mask = np.frombuffer(raw, dtype=np.uint8, count=W * H, offset=off).reshape(H, W).astype(bool)
        gt = GroundTruth(theta, corr, mask)
    cam = Camera(fx, fy, cx, cy, W, H, u @ vt, ext[9:])
    return DepthFrame(depth, cam, gt)


def save_scene(scene: Scene, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_rigged_mesh(scene.mesh, out / "mesh.obj", out / "rig.json")
    scene.embedding.save(out / "emb.json")
    views = []
    for i, frame in enumerate(scene.frames):
        name = f"view{i}.dgnd"
        write_depth_frame(out / name, frame)
        views.append(name)
    doc = {
        "theta": scene.theta.to_dict(),
        "cameras": [c.to_dict() for c in scene.cameras],
        "views": views,
        "mesh": "mesh.obj", "rig": "rig.json", "embedding": "emb.json",
        "meta": scene.meta,
    }
    (out / "scene.json").write_text(json.dumps(doc, indent=1))
    return out


def load_scene(scene_dir: str | Path) -> Scene:
    d = Path(scene_dir)
    doc = json.loads((d / "scene.json").read_text())
    mesh = load_rigged_mesh(d / doc["mesh"], d / doc["rig"])
    emb = MeshEmbedding.load(d / doc["embedding"])
    theta = PoseParams.from_dict(doc["theta"])
    cams = [Camera.from_dict(c) for c in doc["cameras"]]
    frames = []
    for cam, name in zip(cams, doc["views"]):
        fr = read_depth_frame(d / name)
        # full-precision camera from the JSON document
        frames.append(DepthFrame(fr.depth, cam, None if fr.gt is None else
                                 GroundTruth(pose_in_camera(theta, cam), fr.gt.corr, fr.gt.mask)))
    return Scene(mesh, emb, theta, frames, doc.get("meta", {}))


def copy_assets(mesh_path, rig_path, emb_path, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(mesh_path, out / "mesh.obj")
    shutil.copyfile(rig_path, out / "rig.json")
    shutil.copyfile(emb_path, out / "emb.json")
