from __future__ import annotations

import numpy as np
import pytest

from dgnfit.energy import closest_point_on_triangles
from dgnfit.synth import (Camera, DepthFrame, backproject, corrupt, default_rig, load_scene, look_at, make_scene,
                          posed_world, rasterize, read_depth_frame, render_depth, save_scene, write_depth_frame)

from conftest import hand_scene, random_pose


def cam64(f=100.0):
    return Camera(f, f, 31.5, 31.5, 64, 64)


def ray_plane_depth(cam, u, v, tri):
    d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    return float(n @ tri[0] / (n @ d))


def ccw_facing(tri):
    # front faces have normals pointing back at the camera
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    return tri if n @ tri.mean(axis=0) < 0 else tri[[0, 2, 1]]


def test_camera_basics():
    cam = Camera(120.0, 110.0, 20.0, 30.0, 40, 60)
    frame = DepthFrame(np.zeros((60, 40), np.float32), cam)
    frame.depth[30, 20] = 400.0
    pts, pix = backproject(frame)
    np.testing.assert_allclose(pts, [[0.0, 0.0, 400.0]])
    rng = np.random.default_rng(0)
    frame.depth[:] = rng.uniform(100, 500, size=(60, 40)).astype(np.float32)
    pts, pix = backproject(frame)
    np.testing.assert_allclose(cam.project(pts), pix, atol=1e-6)
    c = look_at((100.0, 50.0, -300.0))
    np.testing.assert_allclose(c.R @ c.R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(c.to_camera(np.zeros(3)), [0, 0, np.linalg.norm([100, 50, 300])], atol=1e-9)
    np.testing.assert_allclose(c.to_world(c.to_camera(np.ones(3))), np.ones(3), atol=1e-12)
    np.testing.assert_array_equal(Camera.from_dict(c.to_dict()).R, c.R)
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 0, 0, 4, 4, np.diag([1.0, 1.0, -1.0]))
    assert len(default_rig(3)) == 3


def test_fronto_parallel_triangle():
    cam = cam64()
    tri = ccw_facing(np.array([[-50.0, -50.0, 500.0], [50.0, -50.0, 500.0], [0.0, 60.0, 500.0]]))
    depth, face, _ = rasterize(tri, np.array([[0, 1, 2]]), cam)
    # (cx, cy) sits between pixels here; both neighbours see the plane
    assert abs(depth[31, 31] - 500.0) < 1e-3 and abs(depth[32, 32] - 500.0) < 1e-3
    cam2 = Camera(100.0, 100.0, 32.0, 32.0, 64, 64)
    depth, _, _ = rasterize(tri, np.array([[0, 1, 2]]), cam2)
    assert abs(depth[32, 32] - 500.0) < 1e-3


def test_slanted_triangles_match_ray_plane():
    cam = cam64()
    rng = np.random.default_rng(1)
    for _ in range(20):
        tri = ccw_facing(np.c_[rng.uniform(-120, 120, (3, 2)), rng.uniform(300, 700, 3)])
        depth, face, _ = rasterize(tri, np.array([[0, 1, 2]]), cam)
        v, u = np.nonzero(face == 0)
        for uu, vv in zip(u, v):
            ref = ray_plane_depth(cam, uu, vv, tri)
            assert abs(depth[vv, uu] - ref) <= 1e-6 * ref


def test_nearer_triangle_wins_and_backfaces_culled():
    cam = cam64()
    far = ccw_facing(np.array([[-80.0, -80.0, 600.0], [80.0, -80.0, 600.0], [0.0, 80.0, 600.0]]))
    near = ccw_facing(np.array([[-40.0, -40.0, 400.0], [40.0, -40.0, 400.0], [0.0, 40.0, 400.0]]))
    V = np.concatenate([far, near])
    depth, face, _ = rasterize(V, np.array([[0, 1, 2], [3, 4, 5]]), cam)
    assert face[31, 31] == 1 and abs(depth[31, 31] - 400.0) < 1e-9
    assert (face == 0).any()
    depth, face, _ = rasterize(near[[0, 2, 1]], np.array([[0, 1, 2]]), cam)
    assert (face == -1).all() and (depth == 0).all()


def test_corrupt_contract():
    rng = np.random.default_rng(2)
    depth = rng.uniform(300, 400, size=(256, 256)).astype(np.float32)
    depth[:20] = 0.0
    frame = DepthFrame(depth, cam64())
    same = corrupt(frame, 0.0, 0.0, seed=3)
    assert same.depth.tobytes() == frame.depth.tobytes()
    assert not corrupt(frame, 0.0, 1.0, seed=3).valid.any()
    noisy = corrupt(frame, 5.0, 0.0, seed=4)
    diff = (noisy.depth.astype(np.float64) - depth)[depth > 0]
    assert abs(diff.std() - 5.0) < 0.2
    holed = corrupt(frame, 0.0, 0.3, seed=5)
    n_valid = int((depth > 0).sum())
    assert n_valid - int(holed.valid.sum()) == round(0.3 * n_valid)
    again = corrupt(frame, 5.0, 0.3, seed=6)
    assert again.depth.tobytes() == corrupt(frame, 5.0, 0.3, seed=6).depth.tobytes()
    assert again.depth.tobytes() != corrupt(frame, 5.0, 0.3, seed=7).depth.tobytes()
    with pytest.raises(ValueError):
        corrupt(frame, 0.0, 1.5)
    with pytest.raises(ValueError):
        corrupt(frame, -1.0, 0.0)


def test_backprojected_points_on_surface(hand):
    sc = hand_scene(0)
    fr = sc.frames[0]
    cam = fr.camera
    V = cam.to_camera(posed_world(hand, sc.theta)[0])
    pts, pix = backproject(fr)
    assert len(pts) > 500
    fid = fr.gt.face_id[pix[:, 1], pix[:, 0]]
    tri = V[hand.faces[fid]]
    bary = closest_point_on_triangles(pts, tri[:, 0], tri[:, 1], tri[:, 2])
    dist = np.linalg.norm(np.einsum("nk,nkc->nc", bary, tri) - pts, axis=1)
    half_pixel = 0.5 * pts[:, 2] / cam.fx
    assert np.all(dist <= half_pixel)


def test_gt_corr_is_interpolated_grid_coords(hand, hand_emb):
    fr = hand_scene(1).frames[0]
    gt = fr.gt
    assert np.array_equal(gt.mask, fr.valid)
    v, u = np.nonzero(gt.mask)
    g = hand_emb.grid_coords[hand.faces[gt.face_id[v, u]]]
    ref = np.einsum("nk,nkc->nc", gt.bary[v, u], g)
    np.testing.assert_allclose(gt.corr[v, u], ref, atol=1e-5)
    np.testing.assert_allclose(gt.bary[v, u].sum(axis=1), 1.0, atol=1e-12)


def test_depth_frame_io(tmp_path):
    fr = hand_scene(2).frames[0]
    write_depth_frame(tmp_path / "f.dgnd", fr)
    back = read_depth_frame(tmp_path / "f.dgnd")
    assert back.depth.tobytes() == fr.depth.tobytes()
    np.testing.assert_array_equal(back.gt.corr, fr.gt.corr)
    np.testing.assert_array_equal(back.gt.mask, fr.gt.mask)
    np.testing.assert_allclose(back.camera.R, fr.camera.R, atol=1e-6)
    (tmp_path / "bad.dgnd").write_bytes(b"NOPE" + bytes(80))
    with pytest.raises(ValueError):
        read_depth_frame(tmp_path / "bad.dgnd")


def test_scene_round_trip_and_determinism(hand, hand_emb, tmp_path):
    theta = random_pose(hand, 3)
    cams = default_rig(3)
    a = make_scene(hand, hand_emb, theta, cams, noise=2.0, holes=0.2, seed=11)
    b = make_scene(hand, hand_emb, theta, cams, noise=2.0, holes=0.2, seed=11, workers=4)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.depth.tobytes() == fb.depth.tobytes()
        assert fa.gt.corr.tobytes() == fb.gt.corr.tobytes()
    save_scene(a, tmp_path / "sc")
    back = load_scene(tmp_path / "sc")
    np.testing.assert_array_equal(back.theta.to_vector(), theta.to_vector())
    for fa, fb in zip(a.frames, back.frames):
        assert fa.depth.tobytes() == fb.depth.tobytes()
        np.testing.assert_array_equal(fa.camera.R, fb.camera.R)
    assert back.meta["seed"] == 11
    with pytest.raises(ValueError):
        make_scene(hand, hand_emb, theta, [])


def test_render_workers_identical(hand):
    sc = hand_scene(4)
    V = posed_world(hand, sc.theta)[0]
    cam = sc.frames[0].camera
    one = render_depth(hand, V, cam)
    many = render_depth(hand, V, cam, workers=5)
    assert one.depth.tobytes() == many.depth.tobytes()
    assert one.gt.face_id.tobytes() == many.gt.face_id.tobytes()
