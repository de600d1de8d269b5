"""Command-line front door: embed, synth, fit, eval and gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger("dgnfit")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _write_json(path, doc) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def _mesh_args(args):
    from .assets import hand_paths

    mesh_path, rig_path, emb_path = hand_paths()
    return (Path(args.mesh or mesh_path), Path(args.rig or rig_path),
            Path(getattr(args, "emb", None) or emb_path))


def cmd_embed(args) -> int:
    from .embedding import embed_mesh
    from .mesh_core import load_rigged_mesh

    mesh_path, rig_path, _ = _mesh_args(args)
    mesh = load_rigged_mesh(mesh_path, rig_path)
    emb, res = embed_mesh(mesh, grid_size=args.grid, max_iters=args.max_iters, tol=args.tol, workers=args.workers)
    emb.save(args.out)
    print(json.dumps({"out": str(args.out), "iterations": res.iterations,
                      "initial_stress": res.history[0], "final_stress": res.stress}))
    return 0


def load_cameras(path: str | None, n_views: int, resolution: int):
    from .synth import Camera, default_rig

    if path is None:
        return default_rig(n_views, resolution=resolution)
    doc = _read_json(path)
    items = doc["cameras"] if isinstance(doc, dict) else doc
    return [Camera.from_dict(c) for c in items]


def cmd_synth(args) -> int:
    from .embedding import MeshEmbedding
    from .kinematics import PoseParams
    from .mesh_core import load_rigged_mesh
    from .synth import make_scene, save_scene

    mesh_path, rig_path, emb_path = _mesh_args(args)
    mesh = load_rigged_mesh(mesh_path, rig_path)
    emb = MeshEmbedding.load(emb_path)
    if args.pose:
        theta = PoseParams.from_dict(_read_json(args.pose))
    else:
        theta = PoseParams.rest(mesh.n_joints, -mesh.vertices.mean(axis=0))
    cams = load_cameras(args.cams, args.views, args.resolution)
    scene = make_scene(mesh, emb, theta, cams, noise=args.noise, holes=args.holes, seed=args.seed,
                       workers=args.workers)
    out = save_scene(scene, args.out)
    valid = [int(f.valid.sum()) for f in scene.frames]
    print(json.dumps({"out": str(out), "views": len(cams), "valid_pixels": valid}))
    return 0


def parse_init(init_arg: str, gt, seed: int, n_joints: int):
    from .fitter import perturb_pose
    from .kinematics import PoseParams

    if init_arg == "gt":
        return gt
    if init_arg == "rest":
        return PoseParams.rest(n_joints, gt.translation)
    if init_arg.startswith("perturb:"):
        try:
            rot, trans = (float(v) for v in init_arg.split(":", 1)[1].split(","))
        except ValueError:
            raise SystemExit(f"bad --init {init_arg!r}; expected perturb:ROT_DEG,TRANS_MM") from None
        return perturb_pose(gt, rot, trans, seed)
    path = Path(init_arg)
    if path.exists():
        return PoseParams.from_dict(_read_json(path))
    raise SystemExit(f"bad --init {init_arg!r}; expected rest, gt, perturb:R,T or a pose JSON file")


def cmd_fit(args) -> int:
    from .energy import EnergyWeights
    from .fitter import FitConfig, fit
    from .synth import load_scene

    scene = load_scene(args.scene)
    weights = EnergyWeights.from_dict(_read_json(args.weights)) if args.weights else EnergyWeights()
    init = parse_init(args.init, scene.theta, args.seed, scene.mesh.n_joints)
    cfg = FitConfig(max_iters=args.iters, tol=args.tol, mode=args.mode, rematch_period=args.rematch,
                    weights=weights, seed=args.seed, icp_target=args.icp_target)
    views = None if args.views is None else [int(v) for v in args.views.split(",")]
    res = fit(scene, init, cfg, views)
    if args.log:
        with open(args.log, "w") as fh:
            for row in res.trace:
                fh.write(json.dumps(row) + "\n")
    _write_json(args.out, res.theta.to_dict())
    from .evalkit import mean_vertex_error, posed

    err = mean_vertex_error(posed(scene.mesh, res.theta)[0], posed(scene.mesh, scene.theta)[0])
    print(json.dumps({"out": str(args.out), "iterations": len(res.trace) - 1, "converged": res.converged,
                      "reason": res.reason, "final_energy": res.trace[-1]["total"],
                      "mean_vertex_err_mm": err, "wall_time_s": res.wall_time}))
    return 0


def _scene_dirs(gt: Path) -> dict[str, Path]:
    if (gt / "scene.json").exists():
        return {gt.resolve().name: gt}
    found = {p.parent.name: p.parent for p in sorted(gt.glob("*/scene.json"))}
    if not found:
        raise SystemExit(f"{gt}: no scene.json found")
    return found


def _result_files(results: Path, ids: list[str]) -> dict[str, Path]:
    if results.is_file():
        if len(ids) != 1:
            raise SystemExit("a single result file needs a single ground-truth scene")
        return {ids[0]: results}
    files = {p.stem: p for p in sorted(results.glob("*.json"))}
    if len(ids) == 1 and len(files) == 1:
        return {ids[0]: next(iter(files.values()))}
    return files


def cmd_eval(args) -> int:
    from .evalkit import report
    from .kinematics import PoseParams
    from .synth import load_scene

    scenes = _scene_dirs(Path(args.gt))
    truth = {}
    mesh = None
    for fid, d in scenes.items():
        sc = load_scene(d)
        truth[fid] = sc.theta
        mesh = mesh or sc.mesh
    results = {fid: PoseParams.from_dict(_read_json(p)) for fid, p in _result_files(Path(args.results),
                                                                                     list(truth)).items()}
    metrics = report(results, truth, mesh, args.out, previews=not args.no_previews)
    print(json.dumps(metrics.to_dict()))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, summarize

    checks, seconds = run_suite(args.configs, args.seed)
    rows = summarize(checks)
    for r in rows:
        status = "ok" if r["failed"] == 0 else "FAIL"
        print(f"{status:4s} {r['name']:26s} configs={r['configs']:3d} max_rel_err={r['max_error']:.3e} "
              f"tol={r['tol']:.0e}")
    print(f"{len(checks)} checks in {seconds:.1f}s")
    return 0 if all(r["failed"] == 0 for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgnfit", description="Hand-mesh embedding, synthesis and model fitting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("embed", help="MDS embedding of a rigged mesh onto the mesh grid")
    e.add_argument("--mesh")
    e.add_argument("--rig")
    e.add_argument("--grid", type=int, default=16)
    e.add_argument("--out", required=True)
    e.add_argument("--max-iters", type=int, default=2000)
    e.add_argument("--tol", type=float, default=1e-9)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_embed)

    s = sub.add_parser("synth", help="render a synthetic multi-view depth scene")
    s.add_argument("--mesh")
    s.add_argument("--rig")
    s.add_argument("--emb")
    s.add_argument("--pose", help="pose JSON (world frame); default is the rest pose centred at the origin")
    s.add_argument("--cams", help="camera list JSON; default is an arc rig around the origin")
    s.add_argument("--views", type=int, default=3, help="views in the default rig")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--holes", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit the rig to a scene")
    f.add_argument("--scene", required=True)
    f.add_argument("--init", default="perturb:15,20", help="rest | gt | perturb:ROT_DEG,TRANS_MM | pose.json")
    f.add_argument("--mode", default="icp", choices=["fixed-gt", "icp", "free"])
    f.add_argument("--iters", type=int, default=500)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--rematch", type=int, default=1)
    f.add_argument("--icp-target", default="surface", choices=["surface", "vertex"])
    f.add_argument("--weights")
    f.add_argument("--views", help="comma-separated view indices; default all")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--log")
    f.add_argument("--out", default="theta.json")
    f.set_defaults(func=cmd_fit)

    v = sub.add_parser("eval", help="score fitted poses against ground truth")
    v.add_argument("--results", required=True, help="pose JSON file or directory of <frame>.json")
    v.add_argument("--gt", required=True, help="scene directory or directory of scene directories")
    v.add_argument("--out", required=True)
    v.add_argument("--no-previews", action="store_true")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    g.add_argument("--configs", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
