"""2D mesh coordinates by metric MDS of surface geodesics, and the mesh grid."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .mesh_core import RiggedMesh, geodesic_distances

log = logging.getLogger(__name__)

MARGIN = 0.05
ROW_BLOCK = 128


class EmbeddingError(ValueError):
    pass


def _pdist(X: np.ndarray, rows=None) -> np.ndarray:
    return cdist(X if rows is None else X[rows], X)


def raw_stress(D: np.ndarray, X: np.ndarray) -> float:
    """sum_{i<j} (D_ij - |x_i - x_j|)^2"""
    r = D - _pdist(X)
    return float(np.triu(r * r, 1).sum())


def _check_distances(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise EmbeddingError("distance matrix must be square")
    if np.abs(D - D.T).max(initial=0.0) > 1e-6:
        raise EmbeddingError("distance matrix is not symmetric")
    if np.any(D < 0) or np.abs(np.diag(D)).max(initial=0.0) > 0:
        raise EmbeddingError("distances must be non-negative with a zero diagonal")
    return D


def canonicalize_signs(X: np.ndarray) -> np.ndarray:
    X = X.copy()
    for axis in range(X.shape[1]):
        if X[0, axis] < 0:
            X[:, axis] = -X[:, axis]
    return X


def classical_mds_init(D: np.ndarray, dim: int = 2) -> np.ndarray:
    """Top principal coordinates of the double-centred squared distances."""
    D = _check_distances(D)
    n = len(D)
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D * D) @ J
    vals, vecs = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(vals)[::-1][:dim]
    X = vecs[:, order] * np.sqrt(np.clip(vals[order], 0.0, None))
    if X.shape[1] < dim:
        X = np.pad(X, ((0, 0), (0, dim - X.shape[1])))
    return canonicalize_signs(X)


@dataclass
class SmacofResult:
    coords: np.ndarray
    stress: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    stagnated: bool = False


def _guttman_rows(D, X, rows):
    d = _pdist(X, rows)
    ratio = np.zeros_like(d)
    nz = d > 0
    ratio[nz] = D[rows][nz] / d[nz]
    # (B X)_i = sum_j ratio_ij (x_i - x_j)
    return ratio.sum(axis=1)[:, None] * X[rows] - ratio @ X


def smacof_refine(D: np.ndarray, init: np.ndarray, max_iters: int = 300, tol: float = 1e-9,
                  workers: int = 1) -> SmacofResult:
    """Majorization of raw stress from ``init`` (Guttman transform iterations).

    Stops when the relative stress decrease drops below ``tol``. ``history``
    holds the stress before the first update and after every update. Row
    blocks may be split across ``workers`` threads; each row is computed
    independently so the result does not depend on the thread count.
    """
    D = _check_distances(D)
    X = np.array(init, dtype=np.float64)
    if not np.all(np.isfinite(X)) or X.shape[0] != len(D):
        raise EmbeddingError("init must be finite with one row per point")
    if max_iters < 1:
        raise EmbeddingError("max_iters must be >= 1")
    n = len(D)
    centroid = X.mean(axis=0)  # the Guttman transform centres; keep the init's placement
    # fixed row blocks, so the floating-point work is the same for any thread count
    blocks = [np.arange(i, min(i + ROW_BLOCK, n)) for i in range(0, n, ROW_BLOCK)]
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    stress = raw_stress(D, X)
    history = [stress]
    it = 0
    try:
        for it in range(1, max_iters + 1):
            if pool is None:
                bx = np.concatenate([_guttman_rows(D, X, r) for r in blocks])
            else:
                bx = np.concatenate(list(pool.map(lambda r: _guttman_rows(D, X, r), blocks)))
            X_new = bx / n + centroid
            new = raw_stress(D, X_new)
            history.append(new)
            X = X_new
            done = stress - new <= tol * max(stress, 1e-300)
            stress = new
            if done:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    stagnated = it == 1 and len(history) > 1 and history[1] >= history[0] and history[0] > 0
    if stagnated:
        log.warning("SMACOF stress did not decrease at the first iteration")
    return SmacofResult(X, stress, history, it, stagnated)


@dataclass(frozen=True)
class MeshEmbedding:
    coords: np.ndarray  # (n, 2)
    bbox: np.ndarray  # [minx, miny, maxx, maxy]
    grid_size: int = 16

    @classmethod
    def from_coords(cls, coords: np.ndarray, grid_size: int = 16) -> MeshEmbedding:
        coords = np.asarray(coords, dtype=np.float64)
        if grid_size < 2:
            raise EmbeddingError("grid_size must be >= 2")
        if not np.all(np.isfinite(coords)):
            raise EmbeddingError("embedding coordinates must be finite")
        bbox = np.r_[coords.min(axis=0), coords.max(axis=0)]
        return cls(coords, bbox, grid_size)

    def _frame(self):
        lo, hi = self.bbox[:2], self.bbox[2:]
        span = hi - lo
        if np.any(span <= 0):
            raise EmbeddingError("degenerate embedding bounding box")
        return lo - MARGIN * span, span * (1.0 + 2.0 * MARGIN)

    def to_grid(self, m: np.ndarray) -> np.ndarray:
        origin, extent = self._frame()
        return (np.asarray(m, dtype=np.float64) - origin) / extent * (self.grid_size - 1)

    def from_grid(self, g: np.ndarray) -> np.ndarray:
        origin, extent = self._frame()
        return np.asarray(g, dtype=np.float64) / (self.grid_size - 1) * extent + origin

    @property
    def grid_coords(self) -> np.ndarray:
        return self.to_grid(self.coords)

    def with_grid_size(self, grid_size: int) -> MeshEmbedding:
        return MeshEmbedding(self.coords, self.bbox, grid_size)

    def to_dict(self) -> dict:
        return {"grid_size": int(self.grid_size), "bbox": self.bbox.tolist(),
                "coords": self.coords.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> MeshEmbedding:
        return cls(np.asarray(d["coords"], float), np.asarray(d["bbox"], float), int(d["grid_size"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> MeshEmbedding:
        return cls.from_dict(json.loads(Path(path).read_text()))


def embed_mesh(mesh: RiggedMesh, grid_size: int = 16, max_iters: int = 2000, tol: float = 1e-9,
               workers: int = 1) -> tuple[MeshEmbedding, SmacofResult]:
    D = geodesic_distances(mesh.surface_graph())
    init = classical_mds_init(D)
    res = smacof_refine(D, init, max_iters=max_iters, tol=tol, workers=workers)
    log.info("SMACOF: %d iterations, stress %.6g -> %.6g", res.iterations, res.history[0], res.stress)
    return MeshEmbedding.from_coords(canonicalize_signs(res.coords), grid_size), res
