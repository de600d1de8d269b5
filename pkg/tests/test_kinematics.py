from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgnfit import so3
from dgnfit.gradcheck import central_difference, rel_error
from dgnfit.kinematics import (DegenerateFitError, PoseParams, SimilarityTransform, fit_sets, fit_similarity,
                               fit_similarity_vjp, fk_compose, fk_decompose, lbs, recompose, refine)
from dgnfit.mesh_core import RiggedMesh

from conftest import random_pose


def random_similarity(rng):
    return SimilarityTransform(rng.uniform(0.5, 2.0), so3.random_rotation(rng), rng.normal(scale=50.0, size=3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_so3_round_trip(w):
    w = np.array(w)
    if np.linalg.norm(w) >= np.pi - 1e-6:
        w = w / np.linalg.norm(w) * (np.pi - 1e-3)
    R = so3.exp(w)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(so3.log(R), w, atol=1e-9)


def test_exp_jacobian():
    rng = np.random.default_rng(0)
    for w in [rng.normal(size=3), np.array([1e-9, 0.0, 0.0]), np.zeros(3)]:
        J = so3.exp_jacobian(w)
        for a in range(3):
            for b in range(3):
                num = central_difference(lambda x: float(so3.exp(x)[a, b]), w, h=1e-6)
                np.testing.assert_allclose(J[a, b], num, atol=1e-8)


def test_fit_identity():
    q = np.random.default_rng(1).normal(size=(20, 3))
    T = fit_similarity(q, q)
    assert abs(T.s - 1) < 1e-12
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0.0, atol=1e-12)


def test_fit_recovers_transform():
    rng = np.random.default_rng(2)
    for _ in range(50):
        T = random_similarity(rng)
        q = rng.normal(scale=30.0, size=(int(rng.integers(10, 200)), 3))
        F = fit_similarity(T.apply(q), q)
        assert abs(F.s - T.s) < 1e-9
        assert np.abs(F.R - T.R).max() < 1e-9
        assert np.abs(F.t - T.t).max() < 1e-9


def test_fit_is_optimal_under_noise():
    rng = np.random.default_rng(3)
    T = random_similarity(rng)
    q = rng.normal(scale=30.0, size=(40, 3))
    p = T.apply(q) + rng.normal(scale=3.0, size=q.shape)
    F = fit_similarity(p, q)
    best = ((p - F.apply(q)) ** 2).sum()
    for _ in range(1000):
        G = SimilarityTransform(F.s * np.exp(rng.normal(scale=0.01)), so3.exp(rng.normal(scale=0.01, size=3)) @ F.R,
                                F.t + rng.normal(scale=0.5, size=3))
        assert ((p - G.apply(q)) ** 2).sum() >= best - 1e-9


def test_planar_never_reflects():
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = np.c_[rng.normal(size=(15, 2)) * 20, np.zeros(15)]
        mirror = q * np.array([1.0, 1.0, -1.0])
        for src in (random_similarity(rng).apply(q), mirror):
            assert np.linalg.det(fit_similarity(src, q).R) > 0


def test_fit_degenerate():
    q = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateFitError):
        fit_similarity(q, q)
    with pytest.raises(DegenerateFitError):
        fit_similarity(np.eye(3)[:2], np.eye(3)[:2])


def test_fit_vjp():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(12, 3))
    q -= q.mean(axis=0)
    p = random_similarity(rng).apply(q) + rng.normal(scale=0.1, size=q.shape)
    g = fit_similarity_vjp(p, q, 0.0, np.zeros((3, 3)), np.zeros(3))
    assert not g.any()
    # centred template: t is the source centroid, so d(g.t)/dp_i = g / n
    gt = rng.normal(size=3)
    np.testing.assert_allclose(fit_similarity_vjp(p, q, 0.0, np.zeros((3, 3)), gt), np.tile(gt / 12, (12, 1)),
                               atol=1e-12)
    g_r = rng.normal(size=(3, 3))

    def f(x):
        return float((g_r * fit_similarity(x, q).R).sum()) + 0.3 * fit_similarity(x, q).s

    assert rel_error(fit_similarity_vjp(p, q, 0.3, g_r, np.zeros(3)), central_difference(f, p)) < 1e-3


def test_lbs_identity_and_shared_transform(hand):
    I = np.tile(np.eye(4), (hand.n_joints, 1, 1))
    v, j = lbs(hand, I)
    np.testing.assert_array_equal(v, hand.vertices)
    T = random_similarity(np.random.default_rng(6))
    v, _ = lbs(hand, np.tile(T.matrix, (hand.n_joints, 1, 1)))
    np.testing.assert_allclose(v, T.apply(hand.vertices), atol=1e-9)


def test_lbs_blend_midpoint(toy):
    w = toy.weights.copy()
    mid = np.flatnonzero((w[:, 0] > 0) & (w[:, 1] > 0))
    w[mid, 0] = w[mid, 1] = 0.5
    mesh = RiggedMesh(toy.vertices, toy.faces, toy.joints, w)
    T = np.tile(np.eye(4), (3, 1, 1))
    T[1, :3, :3] = so3.exp(np.array([0.0, 0.0, np.pi / 2]))
    v, _ = lbs(mesh, T)
    rot = toy.vertices[mid] @ T[1, :3, :3].T
    np.testing.assert_allclose(v[mid], 0.5 * (toy.vertices[mid] + rot), atol=1e-12)


def test_fk_rest_is_identity(hand):
    T = fk_compose(hand, PoseParams.rest(hand.n_joints))
    np.testing.assert_allclose(T, np.tile(np.eye(4), (hand.n_joints, 1, 1)), atol=1e-12)


def test_fk_chain_hand_product(toy):
    locals_ = np.zeros((2, 3))
    locals_[0] = [np.pi / 2, 0.0, 0.0]
    T = fk_compose(toy, PoseParams(1.0, np.zeros(3), np.zeros(3), locals_))
    F1 = toy.joints[1].frame_matrix
    Rx = np.eye(4)
    Rx[:3, :3] = so3.exp(np.array([np.pi / 2, 0.0, 0.0]))
    np.testing.assert_allclose(T[1], np.eye(4) @ F1 @ Rx @ np.linalg.inv(F1), atol=1e-12)
    # geometric reading: a quarter turn about the bone-frame x axis through the joint
    j1 = toy.joints[1].rest_position
    np.testing.assert_allclose(T[1, :3, :3] @ j1 + T[1, :3, 3], j1, atol=1e-12)
    np.testing.assert_allclose(so3.log(T[1, :3, :3]), np.pi / 2 * toy.joints[1].frame_rotation[:, 0], atol=1e-12)
    np.testing.assert_allclose(T[2], T[1], atol=1e-12)


def test_fk_global_scale(hand):
    T = fk_compose(hand, PoseParams(2.0, np.zeros(3), np.zeros(3), np.zeros((hand.n_joints - 1, 3))))
    for m in T:
        np.testing.assert_allclose(m[:3, :3], 2 * np.eye(3), atol=1e-12)
    _, j = lbs(hand, T)
    np.testing.assert_allclose(j, 2 * hand.rest_joints, atol=1e-12)


def test_decompose_round_trip(hand):
    for seed in range(20):
        theta = random_pose(hand, seed, spread=0.8)
        L, sims = fk_decompose(hand, fk_compose(hand, theta))
        for j in range(1, hand.n_joints):
            assert np.linalg.norm(L[j, :3, 3]) < 1e-9
            np.testing.assert_allclose(L[j, :3, :3], so3.exp(theta.locals[j - 1]), atol=1e-9)
    L, _ = fk_decompose(hand, np.tile(np.eye(4), (hand.n_joints, 1, 1)))
    np.testing.assert_allclose(L, np.tile(np.eye(4), (hand.n_joints, 1, 1)), atol=1e-12)


def test_decompose_recompose_noisy_fits(hand):
    rng = np.random.default_rng(7)
    P = lbs(hand, fk_compose(hand, random_pose(hand, 1)))[0] + rng.normal(scale=3.0, size=hand.vertices.shape)
    T = refine(hand, P).transforms
    L, _ = fk_decompose(hand, T)
    np.testing.assert_allclose(recompose(hand, L), T, atol=1e-9)


def test_refine_rest_and_rigid(hand):
    r = refine(hand, hand.vertices)
    np.testing.assert_allclose(r.vertices, hand.vertices, atol=1e-9)
    np.testing.assert_allclose(r.transforms, np.tile(np.eye(4), (hand.n_joints, 1, 1)), atol=1e-9)
    rng = np.random.default_rng(8)
    T = np.stack([random_similarity(rng).matrix for _ in range(hand.n_joints)])
    P, _ = lbs(hand, T)
    r = refine(hand, P)
    np.testing.assert_allclose(r.transforms, T, atol=1e-6 * np.abs(T).max())
    for idx in fit_sets(hand):
        np.testing.assert_allclose(r.vertices[idx], P[idx], atol=1e-6)


def test_refine_denoises(hand):
    clean = lbs(hand, fk_compose(hand, random_pose(hand, 2)))[0]
    noisy = clean + np.random.default_rng(9).normal(scale=5.0, size=clean.shape)
    r = refine(hand, noisy)
    assert np.linalg.norm(r.vertices - clean, axis=1).mean() < np.linalg.norm(noisy - clean, axis=1).mean()


def test_pose_params():
    rng = np.random.default_rng(10)
    th = PoseParams(1.2, rng.normal(size=3), rng.normal(size=3), rng.uniform(-1, 1, size=(15, 3)))
    back = PoseParams.from_dict(th.to_dict())
    np.testing.assert_array_equal(back.to_vector(), th.to_vector())
    np.testing.assert_array_equal(PoseParams.from_vector(th.to_vector()).locals, th.locals)
    with pytest.raises(ValueError):
        PoseParams(-1.0, np.zeros(3), np.zeros(3), np.zeros((15, 3))).validate()
    with pytest.raises(ValueError):
        PoseParams(1.0, np.zeros(3), np.zeros(3), np.full((15, 3), 2.0)).validate()
    with pytest.raises(ValueError):
        PoseParams(1.0, np.zeros(3), np.array([np.nan, 0, 0]), np.zeros((15, 3))).validate()
