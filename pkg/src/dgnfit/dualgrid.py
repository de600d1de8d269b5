"""Extension (scatter) and sampling (gather) between points and a 2D grid.

A point at continuous grid coordinate ``m`` interacts with the ``kernel x
kernel`` nodes nearest to it (the window is clamped inside the grid), with
weights given by a softmax of ``-SIGMA * |n - m|^2`` over the window. Grid
arrays are indexed ``data[x, y, channel]``.

The weights factor into per-axis softmaxes, which is what the kernels below
exploit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIGMA = 0.5
DEFAULT_KERNEL = 8


class GridBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class GridFeatureMap:
    data: np.ndarray  # (G, G, d)

    @property
    def grid_size(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _check(m: np.ndarray, grid_size: int, kernel: int) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if kernel < 1 or kernel > grid_size:
        raise ValueError(f"kernel must be in [1, {grid_size}], got {kernel}")
    if m.shape[1] != 2:
        raise ValueError("coordinates must have shape (n, 2)")
    bad = ~np.all((m >= 0) & (m <= grid_size - 1), axis=1)
    if np.any(bad):
        raise GridBoundsError(f"coordinate {m[np.argmax(bad)].tolist()} outside [0, {grid_size - 1}]^2")
    return m


def _axis_weights(x: np.ndarray, grid_size: int, kernel: int):
    """Window node indices (n, K), softmax weights (n, K) and d weight/dx (n, K)."""
    start = np.clip(np.ceil(x - kernel / 2.0), 0, grid_size - kernel).astype(np.int64)
    nodes = start[:, None] + np.arange(kernel)
    off = nodes - x[:, None]
    logits = -SIGMA * off * off
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    a = e / e.sum(axis=1, keepdims=True)
    mean_off = (a * off).sum(axis=1, keepdims=True)
    da = 2.0 * SIGMA * a * (off - mean_off)
    return nodes, a, da


def window_weights(m: np.ndarray, grid_size: int, kernel: int = DEFAULT_KERNEL):
    """Flat node indices (n, K*K) and weights (n, K*K) for each coordinate."""
    m = _check(m, grid_size, kernel)
    nx, ax, _ = _axis_weights(m[:, 0], grid_size, kernel)
    ny, ay, _ = _axis_weights(m[:, 1], grid_size, kernel)
    idx = (nx[:, :, None] * grid_size + ny[:, None, :]).reshape(len(m), -1)
    w = (ax[:, :, None] * ay[:, None, :]).reshape(len(m), -1)
    return idx, w


def _window(m, grid_size, kernel):
    nx, ax, dax = _axis_weights(m[:, 0], grid_size, kernel)
    ny, ay, day = _axis_weights(m[:, 1], grid_size, kernel)
    n = len(m)
    idx = (nx[:, :, None] * grid_size + ny[:, None, :]).reshape(n, -1)
    w = (ax[:, :, None] * ay[:, None, :]).reshape(n, -1)
    dwx = (dax[:, :, None] * ay[:, None, :]).reshape(n, -1)
    dwy = (ax[:, :, None] * day[:, None, :]).reshape(n, -1)
    return idx, w, dwx, dwy


def _scatter(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    # bincount accumulates in input order: deterministic
    flat = idx.ravel()
    out = np.empty((size, vals.shape[-1]))
    for c in range(vals.shape[-1]):
        out[:, c] = np.bincount(flat, weights=vals[..., c].ravel(), minlength=size)
    return out


def extension(m: np.ndarray, f: np.ndarray, grid_size: int, kernel: int = DEFAULT_KERNEL) -> np.ndarray:
    """Scatter features ``f`` (n, d) at coordinates ``m`` (n, 2) onto a (G, G, d) grid."""
    m = _check(m, grid_size, kernel)
    f = np.asarray(f, dtype=np.float64).reshape(len(m), -1)
    idx, w = window_weights(m, grid_size, kernel)
    out = _scatter(idx, w[:, :, None] * f[:, None, :], grid_size * grid_size)
    return out.reshape(grid_size, grid_size, -1)


def sampling(grid: np.ndarray, m: np.ndarray, kernel: int = DEFAULT_KERNEL) -> np.ndarray:
    """Gather (n, d) features from a (G, G, d) grid at coordinates ``m``."""
    grid = np.asarray(grid, dtype=np.float64)
    G = grid.shape[0]
    m = _check(m, G, kernel)
    idx, w = window_weights(m, G, kernel)
    flat = grid.reshape(G * G, -1)
    return np.einsum("nk,nkd->nd", w, flat[idx])


def extension_vjp(m, f, grid_size: int, kernel: int, upstream: np.ndarray):
    """Cotangents (df (n, d), dm (n, 2)) of <upstream, extension(m, f)>."""
    m = _check(m, grid_size, kernel)
    f = np.asarray(f, dtype=np.float64).reshape(len(m), -1)
    idx, w, dwx, dwy = _window(m, grid_size, kernel)
    u = np.asarray(upstream, dtype=np.float64).reshape(grid_size * grid_size, -1)[idx]  # (n, K2, d)
    df = np.einsum("nk,nkd->nd", w, u)
    uf = np.einsum("nkd,nd->nk", u, f)
    dm = np.stack([(dwx * uf).sum(axis=1), (dwy * uf).sum(axis=1)], axis=1)
    return df, dm


def sampling_vjp(grid: np.ndarray, m, kernel: int, upstream: np.ndarray):
    """Cotangents (dgrid (G, G, d), dm (n, 2)) of <upstream, sampling(grid, m)>."""
    grid = np.asarray(grid, dtype=np.float64)
    G = grid.shape[0]
    m = _check(m, G, kernel)
    up = np.asarray(upstream, dtype=np.float64).reshape(len(m), -1)
    idx, w, dwx, dwy = _window(m, G, kernel)
    dgrid = _scatter(idx, w[:, :, None] * up[:, None, :], G * G).reshape(grid.shape)
    gv = np.einsum("nkd,nd->nk", grid.reshape(G * G, -1)[idx], up)
    dm = np.stack([(dwx * gv).sum(axis=1), (dwy * gv).sum(axis=1)], axis=1)
    return dgrid, dm


# --- binary format -----------------------------------------------------------

_MAGIC = b"DGNF"


def write_feature_map(path: str | Path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    G, G2, d = grid.shape
    if G != G2:
        raise ValueError("feature map must be square")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", G, d, 0))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_feature_map(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    G, d, _ = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != G * G * d:
        raise ValueError(f"{path}: truncated feature map")
    return data.reshape(G, G, d).astype(np.float64)
