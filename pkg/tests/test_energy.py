from __future__ import annotations

import numpy as np
import pytest

from dgnfit import energy
from dgnfit.embedding import MeshEmbedding
from dgnfit.energy import (EnergyProblem, EnergyWeights, LiftOperator, Matches, ViewData, arap_term,
                           closest_point_on_triangles, collision_term, combine, frontal_faces, frontal_vertices,
                           icp_term, lift_points, lifting_term, match_surface, match_vertices, mv_vertex_term,
                           offset_from_transforms, offset_term, smooth_l1, to_canonical, total_energy,
                           total_energy_pose)
from dgnfit.fitter import gt_corr, problem_from_scene
from dgnfit.gradcheck import central_difference, rel_error
from dgnfit.kinematics import fk_compose, fk_decompose, lbs
from dgnfit.synth import pose_in_camera

from conftest import hand_scene, random_pose


def test_smooth_l1_values():
    assert smooth_l1(np.zeros(3)) == 0.0
    for beta in (0.5, 1.0, 3.0):
        x = np.array([beta, 0.0, 0.0])
        assert smooth_l1(x * (1 - 1e-12), beta) == pytest.approx(beta / 2)
        assert smooth_l1(x, beta) == pytest.approx(beta / 2)
    assert smooth_l1(np.array([0.0, 4.0, 0.0]), 1.0) == 3.5
    with pytest.raises(ValueError):
        smooth_l1(np.zeros(3), 0.0)


def test_weights_dict():
    w = EnergyWeights(alpha=0.5)
    assert EnergyWeights.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError, match="unknown"):
        EnergyWeights.from_dict({"gamma": 1})
    with pytest.raises(ValueError):
        EnergyWeights(kappa1=-1)
    d = EnergyWeights()
    assert (d.t_col, d.beta) == (5.0, 1.0)


def _posed_cam(hand, seed):
    sc = hand_scene(seed)
    cam = sc.frames[0].camera
    return sc, cam, energy.pose_vertices(hand, pose_in_camera(sc.theta, cam))


def test_icp_zero_and_offset(hand):
    _, _, P = _posed_cam(hand, 0)
    front = np.flatnonzero(frontal_vertices(P, hand.faces))
    pts = P[front[::7]]
    m = match_vertices(pts, P, hand.faces)
    val, g = icp_term(pts, P, m)
    assert val == 0.0 and not g.any()
    one = P[front[:1]] + np.array([[0.0, 0.0, 0.0]])
    m1 = Matches(np.repeat(front[:1, None], 3, axis=1), np.array([[1.0, 0.0, 0.0]]))
    shifted = one + 2.0 * np.array([[0.0, 0.0, -1.0]])
    assert icp_term(shifted, P, m1, 1.0)[0] == pytest.approx(1.5)
    with pytest.warns(RuntimeWarning):
        assert icp_term(np.zeros((0, 3)), P, m1)[0] == 0.0


def test_vertex_matching_brute_force(hand):
    _, _, P = _posed_cam(hand, 1)
    rng = np.random.default_rng(0)
    pts = P[rng.choice(len(P), 200)] + rng.normal(scale=4.0, size=(200, 3))
    m = match_vertices(pts, P, hand.faces)
    front = frontal_vertices(P, hand.faces)
    d = np.linalg.norm(pts[:, None] - P[None], axis=2)
    d[:, ~front] = np.inf
    np.testing.assert_array_equal(m.vidx[:, 0], d.argmin(axis=1))
    # per-vertex frontal test agrees with its definition
    n = np.cross(P[hand.faces[:, 1]] - P[hand.faces[:, 0]], P[hand.faces[:, 2]] - P[hand.faces[:, 0]])
    vn = np.zeros_like(P)
    for k in range(3):
        np.add.at(vn, hand.faces[:, k], n)
    np.testing.assert_array_equal(front, (vn * P).sum(axis=1) < 0)


def _dense_triangle_distance(p, a, b, c, steps=200):
    u, v = np.meshgrid(np.linspace(0, 1, steps + 1), np.linspace(0, 1, steps + 1))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    q = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return np.linalg.norm(q - p, axis=1).min()


def test_closest_point_on_triangle_oracle():
    rng = np.random.default_rng(1)
    for _ in range(40):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(scale=2.0, size=3)
        bary = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
        assert np.all(bary >= -1e-12) and abs(bary.sum() - 1) < 1e-12
        q = bary @ np.stack([a, b, c])
        dense = _dense_triangle_distance(p, a, b, c)
        edge = max(np.linalg.norm(b - a), np.linalg.norm(c - a))
        assert np.linalg.norm(p - q) <= dense + 1e-12
        assert np.linalg.norm(p - q) >= dense - edge / 200


def test_surface_matching_brute_force(hand):
    _, _, P = _posed_cam(hand, 2)
    rng = np.random.default_rng(2)
    pts = P[rng.choice(len(P), 150)] + rng.normal(scale=3.0, size=(150, 3))
    m = match_surface(pts, P, hand.faces)
    got = np.linalg.norm(pts - m.targets(P), axis=1)
    fid = np.flatnonzero(frontal_faces(P, hand.faces))
    assert np.all(np.isin(m.face, fid))
    tri = P[hand.faces[fid]]
    ref = np.empty(len(pts))
    for i, p in enumerate(pts):
        bary = closest_point_on_triangles(np.tile(p, (len(fid), 1)), tri[:, 0], tri[:, 1], tri[:, 2])
        ref[i] = np.linalg.norm(np.einsum("nk,nkc->nc", bary, tri) - p, axis=1).min()
    np.testing.assert_allclose(got, ref, atol=1e-9)


def test_lifting_isolated_vertex(toy):
    coords = np.full((toy.n_vertices, 2), 100.0) + np.random.default_rng(3).normal(size=(toy.n_vertices, 2))
    coords[0] = [0.0, 0.0]
    emb = MeshEmbedding.from_coords(coords, grid_size=32)
    op = LiftOperator(emb, 8)
    P = toy.vertices + 7.0
    corr = emb.grid_coords[:1]
    res = lifting_term(P[:1], corr, op, P)
    assert res.value < 1e-9 and res.skipped == 0


def test_lifting_zero_at_lift_and_corr_gradient(hand, hand_emb):
    op = LiftOperator(hand_emb, 8)
    rng = np.random.default_rng(4)
    P = energy.pose_vertices(hand, random_pose(hand, 4))
    corr = rng.uniform(2, 13, size=(30, 2))
    pts = lift_points(corr, op, P)
    assert lifting_term(pts, corr, op, P).value == 0.0
    noisy = pts + rng.normal(scale=3.0, size=pts.shape)
    res = lifting_term(noisy, corr, op, P)
    num = central_difference(lambda c: lifting_term(noisy, c, op, P).value, corr, h=1e-5)
    assert rel_error(res.grad_corr, num) < 1e-3


def test_lift_operator_reproduces_constants(hand_emb):
    op = LiftOperator(hand_emb, 8)
    J = op.coord_map(np.tile([1.0, -2.0, 3.0], (len(hand_emb.coords), 1)))
    has_mass = op.mass[:, :, 0] >= energy.EMPTY_MASS
    np.testing.assert_allclose(J[has_mass], np.tile([1.0, -2.0, 3.0], (int(has_mass.sum()), 1)), atol=1e-12)


def test_collision_examples(hand):
    parents = np.array([-1, 0, 0])
    joints = np.array([[0.0, 0, 0], [10.0, 0, 0], [10.0, 2.0, 0]])
    val, _ = collision_term(joints, parents, 5.0)
    assert val == pytest.approx(3.0)
    far = joints * np.array([1.0, 10.0, 1.0])
    assert collision_term(far, parents, 5.0)[0] == 0.0
    # parent-child pairs never collide
    chain = np.array([-1, 0, 1])
    assert collision_term(np.array([[0.0, 0, 0], [1.0, 0, 0], [30.0, 0, 0]]), chain, 5.0)[0] == 0.0


def test_arap_and_offset_zero_on_model(hand):
    T = fk_compose(hand, random_pose(hand, 5, spread=0.5))
    P, _ = lbs(hand, T)
    assert arap_term(hand, P)[0] < 1e-9
    assert offset_from_transforms(hand, T)[0] < 1e-12
    L, _ = fk_decompose(hand, T)
    L[5, :3, 3] = [3.0, 0.0, 0.0]
    assert offset_term(L)[0] == pytest.approx(9.0)


def test_multiview_vertex_median():
    views = [np.zeros((1, 3)), np.zeros((1, 3)), np.array([[0.0, 0.0, 9.0]])]
    val, grads, med = mv_vertex_term(views, 1.0)
    np.testing.assert_array_equal(med, np.zeros((1, 3)))
    assert val == pytest.approx(8.5 / 3)
    assert not grads[0].any() and not grads[1].any() and grads[2][0, 2] > 0
    same = [np.ones((4, 3))] * 3
    assert mv_vertex_term(same)[0] == 0.0
    with pytest.raises(ValueError):
        mv_vertex_term(same[:1])


def test_consistent_scene_terms(hand):
    sc = hand_scene(6, n_views=2)
    prob = problem_from_scene(sc, weights=EnergyWeights(alpha=0.0))
    thetas = [pose_in_camera(sc.theta, f.camera) for f in sc.frames]
    verts = [energy.pose_vertices(hand, t) for t in thetas]
    matches = prob.match(verts)
    rep = total_energy(prob, verts, [None, None], matches)
    for name in ("data_icp", "mv_icp", "mv_vertex", "arap", "offset", "collision"):
        assert rep.terms[name] < 1e-6, name
    assert rep.total == pytest.approx(combine(rep.terms, prob.weights))
    # identical extrinsics give identical canonical vertices
    canon = [to_canonical(verts[0], sc.frames[0].camera)] * 3
    assert mv_vertex_term(canon)[0] == 0.0


def test_icp_only_perfect_fit(hand):
    sc = hand_scene(7)
    w = EnergyWeights(alpha=0.0, lambda1=0.0, lambda2=0.0)
    prob = problem_from_scene(sc, weights=w)
    th = [pose_in_camera(sc.theta, sc.frames[0].camera)]
    rep = total_energy_pose(prob, th, [None], prob.match([energy.pose_vertices(hand, th[0])]))
    assert rep.total < 1e-9


def test_report_bookkeeping(hand):
    sc = hand_scene(8, n_views=2)
    prob = problem_from_scene(sc)
    th = [pose_in_camera(random_pose(hand, 9), f.camera) for f in sc.frames]
    corr = gt_corr(sc, [0, 1], prob)
    rep = total_energy_pose(prob, th, corr, prob.match([energy.pose_vertices(hand, t) for t in th]))
    assert set(rep.terms) == set(energy.TERMS)
    assert rep.total == pytest.approx(combine(rep.terms, prob.weights), rel=1e-12)
    assert rep.gradient.size == 2 * th[0].size + sum(c.size for c in corr)
    d = rep.to_dict()
    assert d["total"] == rep.total and d["grad_norm"] > 0


def test_problem_validation(hand, hand_emb):
    with pytest.raises(ValueError):
        EnergyProblem(hand, hand_emb, [])
    with pytest.raises(ValueError):
        energy.match_points(np.zeros((1, 3)), hand.vertices, hand.faces, target="plane")
    v = ViewData(hand_scene(0).frames[0].camera, np.zeros((0, 3)))
    prob = EnergyProblem(hand, hand_emb, [v])
    assert prob.match([hand.vertices])[(0, 0)] is None
