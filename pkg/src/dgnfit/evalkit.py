"""Pose-estimation metrics, report files and shaded previews."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import PoseParams, fk_compose, lbs
from .mesh_core import RiggedMesh
from .synth import Camera, look_at, rasterize

DEFAULT_THRESHOLDS = tuple(float(t) for t in range(5, 85, 5))


def joint_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"joint count mismatch: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def success_frames(max_errors, thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float]]:
    """Fraction of frames whose maximum joint error is <= each threshold."""
    e = np.asarray(max_errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("no frames to evaluate")
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    s = np.sort(e)
    frac = np.searchsorted(s, t, side="right") / e.size
    return [(float(a), float(b)) for a, b in zip(t, frac)]


def mean_vertex_error(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(joint_error(pred, gt).mean())


def posed(mesh: RiggedMesh, theta: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    return lbs(mesh, fk_compose(mesh, theta))


@dataclass
class Metrics:
    mean_joint_err: float
    success_curve: list
    mean_vertex_err: float
    per_frame: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"frames": len(self.per_frame), "mean_joint_err": self.mean_joint_err,
                "mean_vertex_err": self.mean_vertex_err,
                "success_curve": [{"threshold_mm": t, "fraction": f} for t, f in self.success_curve]}


def evaluate(results: dict, truth: dict, mesh: RiggedMesh, thresholds=DEFAULT_THRESHOLDS) -> Metrics:
    """Compare predicted world-frame poses with ground truth, both keyed by frame id."""
    if not results:
        raise ValueError("empty result batch")
    if set(results) != set(truth):
        missing = sorted(set(truth) ^ set(results))
        raise ValueError(f"result and ground-truth frame ids differ: {missing[:5]}")
    rows = []
    for fid in sorted(results):
        pv, pj = posed(mesh, results[fid])
        gv, gj = posed(mesh, truth[fid])
        je = joint_error(pj, gj)
        rows.append({"frame": fid, "mean_joint_err": float(je.mean()), "max_joint_err": float(je.max()),
                     "mean_vertex_err": mean_vertex_error(pv, gv), "joint_err": je.tolist()})
    all_j = np.concatenate([r["joint_err"] for r in rows])
    curve = success_frames([r["max_joint_err"] for r in rows], thresholds)
    return Metrics(float(all_j.mean()), curve, float(np.mean([r["mean_vertex_err"] for r in rows])), rows)


def shade(mesh: RiggedMesh, vertices: np.ndarray, camera: Camera, light=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Lambertian grey image (uint8) of the posed mesh; background is black."""
    vc = camera.to_camera(vertices)
    depth, face_id, _ = rasterize(vc, mesh.faces, camera)
    tri = vc[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    lam = np.clip(-(n @ np.asarray(light, dtype=np.float64)), 0.0, 1.0)
    img = np.zeros(depth.shape)
    hit = face_id >= 0
    img[hit] = 0.15 + 0.85 * lam[face_id[hit]]
    return np.round(img * 255).astype(np.uint8)


def preview_camera(vertices: np.ndarray, resolution: int = 128) -> Camera:
    c = vertices.mean(axis=0)
    return look_at(c + np.array([0.0, 0.0, -400.0]), target=c, focal=100.0 * resolution / 64,
                   resolution=resolution)


def save_preview(path: str | Path, mesh: RiggedMesh, vertices: np.ndarray, camera: Camera | None = None) -> None:
    from PIL import Image

    cam = preview_camera(vertices) if camera is None else camera
    Image.fromarray(shade(mesh, vertices, cam), mode="L").save(path, optimize=False)


def report(results: dict, truth: dict, mesh: RiggedMesh, out_dir: str | Path, previews: bool = True,
           inits: dict | None = None, thresholds=DEFAULT_THRESHOLDS) -> Metrics:
    """Write metrics.json, success.csv, frames.jsonl and optional preview PNGs."""
    metrics = evaluate(results, truth, mesh, thresholds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1))
    with open(out / "success.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "fraction"])
        for t, f in metrics.success_curve:
            w.writerow([f"{t:g}", f"{f:.6f}"])
    with open(out / "frames.jsonl", "w") as fh:
        for row in metrics.per_frame:
            fh.write(json.dumps(row) + "\n")
    if previews:
        for fid in sorted(results):
            gt_v, _ = posed(mesh, truth[fid])
            cam = preview_camera(gt_v)
            save_preview(out / f"{fid}_fit.png", mesh, posed(mesh, results[fid])[0], cam)
            save_preview(out / f"{fid}_gt.png", mesh, gt_v, cam)
            if inits and fid in inits:
                save_preview(out / f"{fid}_init.png", mesh, posed(mesh, inits[fid])[0], cam)
    return metrics
