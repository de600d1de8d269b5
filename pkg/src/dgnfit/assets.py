"""Procedural stand-in hand: a closed tube surface with a 16-joint skeleton.

The palm is a flattened tube whose distal ring is split into five finger
tubes (thumb first); the gaps between fingers are closed by small web
quads, the wrist end by a strip of quads and every fingertip by an apex
vertex. Vertex count is 10 * 60 + (17 + 4 * 19) * 12 + 5 = 1721.

Run ``python -m dgnfit.assets`` to regenerate the packaged files.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .mesh_core import Joint, RiggedMesh, load_rigged_mesh, save_rigged_mesh

COLS_PER_FINGER = 6
N_FINGERS = 5
PALM_RINGS = 10
COL_SPACING = 3.0
PALM_HALF_THICKNESS = 11.0
BLEND_HALF_WIDTH = 3.0

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
# per finger: palm length at its columns, direction, phalanx lengths, radius, rings
FINGERS = (
    dict(y_end=40.0, direction=(-0.5, 0.85, -0.15), lengths=(32.0, 28.0, 24.0), radius=9.5, rings=17),
    dict(y_end=90.0, direction=(-0.10, 1.0, 0.0), lengths=(40.0, 25.0, 20.0), radius=8.5, rings=19),
    dict(y_end=90.0, direction=(-0.02, 1.0, 0.0), lengths=(44.0, 28.0, 21.0), radius=8.5, rings=19),
    dict(y_end=90.0, direction=(0.07, 1.0, 0.0), lengths=(41.0, 27.0, 20.0), radius=8.0, rings=19),
    dict(y_end=90.0, direction=(0.16, 1.0, 0.0), lengths=(32.0, 20.0, 18.0), radius=7.0, rings=19),
)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _frame_towards(z_dir: np.ndarray) -> np.ndarray:
    z = _unit(z_dir)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = _unit(np.cross(up, z))
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _blend(s: float, bounds: list[float]) -> tuple[list[int], list[float]]:
    """Chain-segment weights for axial coordinate s (segments split at ``bounds``)."""
    seg = int(np.searchsorted(bounds, s, side="right"))
    for b_idx, b in enumerate(bounds):
        if abs(s - b) < BLEND_HALF_WIDTH:
            lam = (s - b) / (2 * BLEND_HALF_WIDTH) + 0.5
            return [b_idx, b_idx + 1], [1.0 - lam, lam]
    return [seg], [1.0]


def _orient(faces: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Make face windings consistent by propagation, then outward by signed volume."""
    faces = faces.copy()
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, f in enumerate(faces):
        for k in range(3):
            a, b = int(f[k]), int(f[(k + 1) % 3])
            edge_faces.setdefault((min(a, b), max(a, b)), []).append(fi)
    bad = [e for e, fs in edge_faces.items() if len(fs) != 2]
    if bad:
        raise RuntimeError(f"hand surface is not a closed manifold (edge {bad[0]})")
    seen = np.zeros(len(faces), dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        fi = stack.pop()
        f = faces[fi]
        for k in range(3):
            a, b = int(f[k]), int(f[(k + 1) % 3])
            for gj in edge_faces[(min(a, b), max(a, b))]:
                if gj == fi or seen[gj]:
                    continue
                g = faces[gj]
                # a consistent neighbour traverses the shared edge as b -> a
                for m in range(3):
                    if int(g[m]) == a and int(g[(m + 1) % 3]) == b:
                        faces[gj] = g[::-1]
                        break
                seen[gj] = True
                stack.append(gj)
    if not seen.all():
        raise RuntimeError("hand surface is not connected")
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    if np.einsum("ij,ij->i", a, np.cross(b, c)).sum() < 0:
        faces = faces[:, ::-1]
    return faces


def build_hand() -> RiggedMesh:
    n_cols = COLS_PER_FINGER * N_FINGERS
    ring_len = 2 * n_cols
    xs = (np.arange(n_cols) - (n_cols - 1) / 2.0) * COL_SPACING
    y_end = np.repeat([f["y_end"] for f in FINGERS], COLS_PER_FINGER)
    half = PALM_HALF_THICKNESS * np.sqrt(1.0 - (xs / (xs.max() + 8.0)) ** 2)

    verts: list[np.ndarray] = []
    # (parts, weights) per vertex
    skin: list[tuple[list[int], list[float]]] = []
    joint_pos = [np.zeros(3)]
    parents = [-1]
    names = ["wrist"]
    finger_joint_ids = []
    for fi, finger in enumerate(FINGERS):
        cols = np.arange(fi * COLS_PER_FINGER, (fi + 1) * COLS_PER_FINGER)
        base = np.array([xs[cols].mean(), finger["y_end"], 0.0])
        d = _unit(finger["direction"])
        ids = []
        pos = base.copy()
        for seg, length in enumerate(finger["lengths"]):
            ids.append(len(joint_pos))
            joint_pos.append(pos.copy())
            parents.append(0 if seg == 0 else ids[-2])
            names.append(f"{FINGER_NAMES[fi]}_{('mcp', 'pip', 'dip')[seg]}")
            pos = pos + length * d
        finger_joint_ids.append(ids)

    def palm_vertex(r, k):
        c = k if k < n_cols else ring_len - 1 - k
        z = half[c] if k < n_cols else -half[c]
        y = y_end[c] * r / (PALM_RINGS - 1)
        f = c // COLS_PER_FINGER
        parts, w = _blend(y - y_end[c], [0.0])
        return np.array([xs[c], y, z]), ([0, finger_joint_ids[f][0]][p] for p in parts), w

    for r in range(PALM_RINGS):
        for k in range(ring_len):
            p, parts, w = palm_vertex(r, k)
            verts.append(p)
            skin.append((list(parts), w))

    faces: list[list[int]] = []

    def quad(a, b, c, d):
        faces.append([a, b, c])
        faces.append([a, c, d])

    def pid(r, k):
        return r * ring_len + (k % ring_len)

    for r in range(PALM_RINGS - 1):
        for k in range(ring_len):
            quad(pid(r, k), pid(r, k + 1), pid(r + 1, k + 1), pid(r + 1, k))
    # wrist end: strip between dorsal and palmar rows
    for c in range(n_cols - 1):
        quad(pid(0, c), pid(0, ring_len - 1 - c), pid(0, ring_len - 2 - c), pid(0, c + 1))
    last = PALM_RINGS - 1
    # webs between neighbouring fingers
    for fi in range(N_FINGERS - 1):
        c = (fi + 1) * COLS_PER_FINGER - 1
        quad(pid(last, c), pid(last, c + 1), pid(last, ring_len - 2 - c), pid(last, ring_len - 1 - c))

    n_ring = 2 * COLS_PER_FINGER
    angles = np.deg2rad(165.0 - 30.0 * np.arange(n_ring))
    for fi, finger in enumerate(FINGERS):
        cols = list(range(fi * COLS_PER_FINGER, (fi + 1) * COLS_PER_FINGER))
        base_ring = [pid(last, c) for c in cols] + [pid(last, ring_len - 1 - c) for c in reversed(cols)]
        d = _unit(finger["direction"])
        e1 = _unit(np.cross(d, [0.0, 0.0, 1.0]))
        e2 = np.cross(e1, d)
        base = np.array([xs[cols].mean(), finger["y_end"], 0.0])
        lengths = finger["lengths"]
        total = float(sum(lengths))
        bounds = [0.0, lengths[0], lengths[0] + lengths[1]]
        ids = [0] + finger_joint_ids[fi]
        n = finger["rings"]
        r0 = finger["radius"]
        cap = 0.8 * r0
        prev = base_ring
        for i in range(1, n + 1):
            s = total * i / (n + 1)
            rad = r0 * (1.0 - 0.2 * s / total)
            if s > total - cap:
                rad *= np.sqrt(max(0.0, 1.0 - ((s - (total - cap)) / cap) ** 2))
            center = base + s * d
            ring = []
            parts, w = _blend(s, bounds)
            for a in angles:
                ring.append(len(verts))
                verts.append(center + rad * (np.cos(a) * e1 + 0.85 * np.sin(a) * e2))
                skin.append(([ids[p] for p in parts], w))
            for k in range(n_ring):
                quad(prev[k], prev[(k + 1) % n_ring], ring[(k + 1) % n_ring], ring[k])
            prev = ring
        apex = len(verts)
        verts.append(base + total * d)
        skin.append(([ids[3]], [1.0]))
        for k in range(n_ring):
            faces.append([prev[k], prev[(k + 1) % n_ring], apex])

    V = np.array(verts)
    F = _orient(np.array(faces, dtype=np.int64), V - V.mean(axis=0))
    W = np.zeros((len(V), len(joint_pos)))
    for vi, (parts, w) in enumerate(skin):
        for p, x in zip(parts, w):
            W[vi, p] += x
    joints = []
    for j, (name, parent, pos) in enumerate(zip(names, parents, joint_pos)):
        rot = np.eye(3) if parent < 0 else _frame_towards(joint_pos[parent] - pos)
        joints.append(Joint(name, parent, pos, rot, pos.copy()))
    return RiggedMesh(V, F, tuple(joints), W)


def build_toy_rig(radius: float = 4.0, n_around: int = 12) -> RiggedMesh:
    """Capped three-part tube along +y with 50 vertices (for fast tests)."""
    ring_y = (5.0, 15.0, 25.0, 35.0)
    # (parts, weights) per ring
    ring_skin = (([0], [1.0]), ([0, 1], [0.7, 0.3]), ([1], [1.0]), ([2], [1.0]))
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts = []
    skin = []
    for y, sk in zip(ring_y, ring_skin):
        for a in ang:
            verts.append([radius * np.cos(a), y, radius * np.sin(a)])
            skin.append(sk)
    bottom, top = len(verts), len(verts) + 1
    verts += [[0.0, 0.0, 0.0], [0.0, 40.0, 0.0]]
    skin += [([0], [1.0]), ([2], [1.0])]
    faces = []
    for r in range(len(ring_y) - 1):
        for k in range(n_around):
            a, b = r * n_around + k, r * n_around + (k + 1) % n_around
            faces += [[a, b, b + n_around], [a, b + n_around, a + n_around]]
    last = (len(ring_y) - 1) * n_around
    for k in range(n_around):
        faces.append([bottom, (k + 1) % n_around, k])
        faces.append([top, last + k, last + (k + 1) % n_around])
    V = np.array(verts)
    F = _orient(np.array(faces, dtype=np.int64), V - V.mean(axis=0))
    W = np.zeros((len(V), 3))
    for vi, (parts, w) in enumerate(skin):
        W[vi, parts] = w
    pos = [np.zeros(3), np.array([0.0, 20.0, 0.0]), np.array([0.0, 30.0, 0.0])]
    joints = [Joint("base", -1, pos[0], np.eye(3), pos[0].copy())]
    for j, parent in ((1, 0), (2, 1)):
        joints.append(Joint(f"seg{j}", parent, pos[j], _frame_towards(pos[parent] - pos[j]), pos[j].copy()))
    return RiggedMesh(V, F, tuple(joints), W)


def _data_dir() -> Path:
    return Path(str(resources.files("dgnfit") / "data"))


def hand_paths() -> tuple[Path, Path, Path]:
    d = _data_dir()
    return d / "hand.obj", d / "hand.rig.json", d / "hand.emb.json"


def load_hand() -> RiggedMesh:
    mesh_path, rig_path, _ = hand_paths()
    return load_rigged_mesh(mesh_path, rig_path)


def load_hand_embedding():
    from .embedding import MeshEmbedding

    return MeshEmbedding.load(hand_paths()[2])


def main() -> None:
    import logging

    from .embedding import embed_mesh

    logging.basicConfig(level=logging.INFO)
    mesh = build_hand()
    mesh_path, rig_path, emb_path = hand_paths()
    save_rigged_mesh(mesh, mesh_path, rig_path)
    emb, _ = embed_mesh(load_rigged_mesh(mesh_path, rig_path), grid_size=16)
    emb.save(emb_path)


if __name__ == "__main__":
    main()
