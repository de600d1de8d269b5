from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from dgnfit.embedding import (EmbeddingError, MeshEmbedding, classical_mds_init, embed_mesh, raw_stress,
                              smacof_refine)


def test_equilateral_triangle_init():
    D = np.ones((3, 3)) - np.eye(3)
    X = classical_mds_init(D)
    np.testing.assert_allclose(cdist(X, X), D, atol=1e-9)


def test_two_points():
    X = classical_mds_init(np.array([[0.0, 5.0], [5.0, 0.0]]))
    assert abs(np.linalg.norm(X[0] - X[1]) - 5.0) < 1e-9


def test_exact_init_is_fixed_point():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 2))
    D = cdist(X, X)
    res = smacof_refine(D, X, max_iters=5)
    np.testing.assert_allclose(res.coords, X, atol=1e-12)
    assert res.stress <= res.history[0] + 1e-12


def test_equilateral_from_perturbed_init():
    D = np.ones((3, 3)) - np.eye(3)
    init = np.array([[0.0, 0.0], [1.3, 0.1], [0.2, 0.7]])
    res = smacof_refine(D, init, max_iters=2000, tol=1e-14)
    assert res.stress < 1e-10


def test_random_metric_monotone():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(10, 5))
    D = cdist(P, P)
    res = smacof_refine(D, rng.normal(size=(10, 2)), max_iters=300, tol=0.0 + 1e-15)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-12 * h[:-1])


def test_flat_metric_converges_to_zero_stress():
    # Euclidean distances of a planar point grid: the solver reaches the isometry
    xs, ys = np.meshgrid(np.arange(4.0), np.arange(4.0))
    P = np.stack([xs.ravel(), ys.ravel()], axis=1)
    D = cdist(P, P)
    init = np.random.default_rng(2).normal(size=P.shape)
    res = smacof_refine(D, init, max_iters=5000, tol=1e-15)
    assert res.stress < 1e-6 * res.history[0]


def test_distance_validation():
    with pytest.raises(EmbeddingError):
        classical_mds_init(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(EmbeddingError):
        classical_mds_init(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(EmbeddingError):
        smacof_refine(np.zeros((2, 2)), np.full((2, 2), np.nan))


def test_grid_mapping():
    rng = np.random.default_rng(3)
    emb = MeshEmbedding.from_coords(rng.normal(size=(30, 2)), grid_size=16)
    lo, hi = emb.bbox[:2], emb.bbox[2:]
    np.testing.assert_allclose(emb.to_grid((lo + hi) / 2), [7.5, 7.5], atol=1e-12)
    span = hi - lo
    np.testing.assert_allclose(emb.to_grid(lo - 0.05 * span), [0.0, 0.0], atol=1e-12)
    m = rng.normal(size=(20, 2))
    np.testing.assert_allclose(emb.from_grid(emb.to_grid(m)), m, atol=1e-12)
    g = emb.grid_coords
    assert g.min() > 0 and g.max() < 15
    with pytest.raises(EmbeddingError):
        MeshEmbedding.from_coords(np.zeros((3, 2)), grid_size=1)


def test_hand_embedding(hand, hand_emb, tmp_path):
    assert hand_emb.coords.shape == (hand.n_vertices, 2)
    assert np.all(np.isfinite(hand_emb.coords))
    hand_emb.save(tmp_path / "e.json")
    back = MeshEmbedding.load(tmp_path / "e.json")
    np.testing.assert_array_equal(back.coords, hand_emb.coords)
    assert back.grid_size == 16


def test_embedding_deterministic_across_workers(hand):
    a, ra = embed_mesh(hand, max_iters=3, workers=1)
    b, rb = embed_mesh(hand, max_iters=3, workers=3)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert ra.history == rb.history
    assert raw_stress(np.zeros((1, 1)), np.zeros((1, 2))) == 0.0
