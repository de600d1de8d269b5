"""Rigged triangle meshes: containers, OBJ/rig I/O, normals and geodesics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Joint:
    """A skeleton joint.

    ``bone_frame`` is the pose of the bone frame in rest-model coordinates,
    i.e. the map from bone-local to model coordinates. Its origin is the joint
    and, for non-root joints, its z-axis points toward the parent joint.
    """

    name: str
    parent: int
    rest_position: np.ndarray
    frame_rotation: np.ndarray
    frame_translation: np.ndarray

    @property
    def frame_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.frame_rotation
        m[:3, 3] = self.frame_translation
        return m


@dataclass(frozen=True, eq=False)
class RiggedMesh:
    vertices: np.ndarray  # (n, 3) rest pose, mm
    faces: np.ndarray  # (f, 3) int
    joints: tuple[Joint, ...]
    weights: np.ndarray  # (n, parts) dense skinning matrix
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        for a in (v, f, w):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "weights", w)
        validate(self)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def parents(self) -> np.ndarray:
        return np.array([j.parent for j in self.joints], dtype=np.int64)

    @property
    def rest_joints(self) -> np.ndarray:
        return np.array([j.rest_position for j in self.joints], dtype=np.float64)

    @property
    def part_of_vertex(self) -> np.ndarray:
        """Part membership: argmax of the skinning weights."""
        if "part" not in self._cache:
            self._cache["part"] = np.argmax(self.weights, axis=1)
        return self._cache["part"]

    def topological_order(self) -> list[int]:
        if "order" not in self._cache:
            self._cache["order"] = _topological_order(self.parents)
        return self._cache["order"]

    def surface_graph(self) -> SurfaceGraph:
        if "graph" not in self._cache:
            self._cache["graph"] = SurfaceGraph.from_mesh(self.vertices, self.faces)
        return self._cache["graph"]


def _topological_order(parents: np.ndarray) -> list[int]:
    n = len(parents)
    roots = [i for i in range(n) if parents[i] == -1]
    if len(roots) != 1:
        raise MeshError(f"skeleton not a tree: expected one root, found {len(roots)}")
    children: list[list[int]] = [[] for _ in range(n)]
    for i, p in enumerate(parents):
        if p == i:
            raise MeshError(f"skeleton not a tree: joint {i} is its own parent")
        if p != -1:
            if not 0 <= p < n:
                raise MeshError(f"joint {i} has invalid parent {p}")
            children[p].append(i)
    order, stack = [], [roots[0]]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise MeshError("skeleton not a tree: some joints unreachable from the root")
    return order


def validate(mesh: RiggedMesh) -> None:
    v, f, w = mesh.vertices, mesh.faces, mesh.weights
    if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
        raise MeshError("vertices must be a finite (n, 3) array")
    if f.ndim != 2 or f.shape[1] != 3:
        raise MeshError("faces must be an (f, 3) array")
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise MeshError("face index out of range")
    used = np.zeros(len(v), dtype=bool)
    used[f.ravel()] = True
    if not used.all():
        raise MeshError(f"vertex {int(np.argmin(used))} is not referenced by any face")
    _topological_order(np.array([j.parent for j in mesh.joints]))
    if w.shape != (len(v), len(mesh.joints)):
        raise MeshError(f"skin weights shape {w.shape} != ({len(v)}, {len(mesh.joints)})")
    if np.any(w < 0):
        raise MeshError("negative skinning weight")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
        raise MeshError("skinning weights must sum to 1")
    for i, j in enumerate(mesh.joints):
        r = j.frame_rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) <= 0:
            raise MeshError(f"bone frame of joint {i} is not a rotation")
        if np.abs(j.frame_translation - j.rest_position).max() > 1e-9:
            raise MeshError(f"bone frame origin of joint {i} is not at the joint")
        if j.parent >= 0:
            d = mesh.joints[j.parent].rest_position - j.rest_position
            d = d / np.linalg.norm(d)
            if np.linalg.norm(np.cross(r[:, 2], d)) > 1e-6:
                raise MeshError(f"bone frame z-axis of joint {i} not aligned with parent bone")


def normalize_weights(raw: np.ndarray) -> np.ndarray:
    total = raw.sum(axis=1)
    bad = np.flatnonzero(total < 1e-9)
    if bad.size:
        raise MeshError(f"weights not normalizable at vertex {int(bad[0])}")
    return raw / total[:, None]


# --- I/O -------------------------------------------------------------------


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    skipped: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"{path}:{lineno}: only triangles are supported")
                    faces.append([i - 1 for i in idx])
                else:
                    skipped.add(parts[0])
            except MeshError:
                raise
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    if skipped:
        log.warning("ignored OBJ records: %s", ", ".join(sorted(skipped)))
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return v, f


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    # repr() round-trips float64 exactly
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=float).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def rig_to_dict(mesh: RiggedMesh) -> dict:
    joints = []
    for j in mesh.joints:
        joints.append({
            "name": j.name,
            "parent": int(j.parent),
            "rest_position": j.rest_position.tolist(),
            "bone_frame": {
                "rotation": j.frame_rotation.ravel().tolist(),
                "translation": j.frame_translation.tolist(),
            },
        })
    skin = []
    for row in mesh.weights:
        nz = np.flatnonzero(row)
        skin.append([[int(k), float(row[k])] for k in nz])
    return {"joints": joints, "skin_weights": skin}


def joints_from_dicts(items: list[dict]) -> tuple[Joint, ...]:
    joints = []
    for item in items:
        frame = item["bone_frame"]
        joints.append(Joint(
            name=str(item["name"]),
            parent=int(item["parent"]),
            rest_position=np.asarray(item["rest_position"], dtype=np.float64),
            frame_rotation=np.asarray(frame["rotation"], dtype=np.float64).reshape(3, 3),
            frame_translation=np.asarray(frame["translation"], dtype=np.float64),
        ))
    return tuple(joints)


def load_rigged_mesh(mesh_path: str | Path, rig_path: str | Path) -> RiggedMesh:
    vertices, faces = read_obj(mesh_path)
    try:
        rig = json.loads(Path(rig_path).read_text())
        joints = joints_from_dicts(rig["joints"])
        skin = rig["skin_weights"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"{rig_path}: invalid rig document: {exc}") from exc
    _topological_order(np.array([j.parent for j in joints]))
    if len(skin) != len(vertices):
        raise MeshError(f"rig has weights for {len(skin)} vertices, mesh has {len(vertices)}")
    raw = np.zeros((len(vertices), len(joints)))
    for i, entries in enumerate(skin):
        for k, wt in entries:
            if not 0 <= int(k) < len(joints):
                raise MeshError(f"vertex {i}: part index {k} out of range")
            raw[i, int(k)] += float(wt)
    mesh = RiggedMesh(vertices, faces, joints, normalize_weights(raw))
    log.info("loaded mesh with %d vertices, %d joints", mesh.n_vertices, mesh.n_joints)
    return mesh


def save_rigged_mesh(mesh: RiggedMesh, mesh_path: str | Path, rig_path: str | Path) -> None:
    write_obj(mesh_path, mesh.vertices, mesh.faces)
    Path(rig_path).write_text(json.dumps(rig_to_dict(mesh)))


# --- geometry --------------------------------------------------------------


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (length = twice the face area)."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return np.cross(b - a, c - a)


def vertex_normals(mesh: RiggedMesh, posed_vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals.

    Returns ``(normals, valid)``. Vertices touching only zero-area faces get a
    zero normal and ``valid=False``.
    """
    posed = np.asarray(posed_vertices, dtype=np.float64)
    if posed.shape != mesh.vertices.shape:
        raise MeshError(f"expected {mesh.vertices.shape} posed vertices, got {posed.shape}")
    fn = face_normals(posed, mesh.faces)
    n = np.zeros_like(posed)
    for k in range(3):
        np.add.at(n, mesh.faces[:, k], fn)
    length = np.linalg.norm(n, axis=1)
    valid = length > 1e-12
    n[valid] /= length[valid, None]
    n[~valid] = 0.0
    return n, valid


@dataclass(frozen=True, eq=False)
class SurfaceGraph:
    n_vertices: int
    edges: np.ndarray  # (e, 2), i < j
    lengths: np.ndarray  # (e,)

    @classmethod
    def from_mesh(cls, vertices: np.ndarray, faces: np.ndarray) -> SurfaceGraph:
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        lengths = np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)
        if np.any(lengths <= 0):
            raise MeshError("zero-length edge")
        return cls(len(vertices), e, lengths)

    def adjacency(self):
        i, j = self.edges[:, 0], self.edges[:, 1]
        return coo_matrix(
            (np.r_[self.lengths, self.lengths], (np.r_[i, j], np.r_[j, i])),
            shape=(self.n_vertices, self.n_vertices),
        ).tocsr()

    def neighbors(self) -> list[np.ndarray]:
        adj = self.adjacency()
        return [adj.indices[adj.indptr[k]:adj.indptr[k + 1]] for k in range(self.n_vertices)]


def geodesic_distances(graph: SurfaceGraph, sources=None) -> np.ndarray:
    """Shortest-path distances along mesh edges.

    ``sources`` defaults to all vertices, giving a symmetric (n, n) matrix.
    """
    adj = graph.adjacency()
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        stray = int(np.flatnonzero(labels != labels[0])[0])
        raise MeshError(f"surface graph is disconnected: vertex {stray} unreachable from vertex 0")
    idx = np.arange(graph.n_vertices) if sources is None else np.atleast_1d(sources)
    d = dijkstra(adj, directed=False, indices=idx)
    if sources is None:
        d = 0.5 * (d + d.T)  # exact already; guards against summation-order asymmetry
    return d
