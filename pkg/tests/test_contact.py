import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bigrasp import contact as ct

unit_vectors = st.lists(st.floats(-1, 1), min_size=3, max_size=3).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: v / np.linalg.norm(v))


def assert_orthonormal(f):
    for v in (f.n, f.d, f.e):
        assert abs(np.linalg.norm(v) - 1) < 1e-8
    assert abs(f.n @ f.d) < 1e-8 and abs(f.n @ f.e) < 1e-8 and abs(f.d @ f.e) < 1e-8
    assert np.allclose(np.cross(f.d, f.e), f.n, atol=1e-8)


def test_frame_z_normal():
    f = ct.build_frame([0, 0, 0], [0, 0, 1])
    assert np.allclose(f.d, [0, 1, 0])
    assert_orthonormal(f)


def test_frame_fallback_axis():
    f = ct.build_frame([0, 0, 0], [1, 0, 0])
    assert_orthonormal(f)


@settings(max_examples=300, deadline=None)
@given(unit_vectors, st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_frame_orthonormal_property(n, p):
    f = ct.build_frame(p, n)
    assert_orthonormal(f)
    g = ct.build_frame(p, n)
    assert np.array_equal(f.d, g.d) and np.array_equal(f.e, g.e)


def test_frame_rejects_zero_normal():
    with pytest.raises(ValueError):
        ct.build_frame([0, 0, 0], [0, 0, 0])


def test_grasp_matrix_examples(rng):
    f = ct.build_frame([0, 0, 0], [0, 0, 1])
    assert np.all(ct.grasp_matrix(f).G[3:] == 0)
    f = ct.build_frame([0, 0, 1], [0, 0, -1])
    G = ct.grasp_matrix(f).G
    assert np.allclose(np.cross(f.p, f.n), 0) and np.allclose(G[3:, 0], 0)


def test_grasp_matrix_columns_match_cross_products(rng):
    for _ in range(100):
        n = rng.normal(size=3)
        f = ct.build_frame(rng.normal(size=3), n / np.linalg.norm(n))
        G = ct.grasp_matrix(f).G
        for j, v in enumerate((f.n, f.d, f.e)):
            assert np.allclose(G[:3, j], v)
            assert np.allclose(G[3:, j], np.cross(f.p, v), atol=1e-12)
        force = rng.normal(size=3)
        local = np.array([force @ f.n, force @ f.d, force @ f.e])
        assert np.allclose(G @ local, np.concatenate([force, np.cross(f.p, force)]))


def test_pyramid_edge_zero():
    f = ct.build_frame([0, 0, 0], [0, 0, 1])
    cone = ct.pyramid_edges(f, 0.6)
    assert np.allclose(cone.edges[0], f.n + 0.6 * f.d)
    tang = cone.edges - np.outer(cone.edges @ f.n, f.n)
    assert np.allclose(np.linalg.norm(tang, axis=1), 0.6)
    assert np.allclose(cone.edges @ f.n, 1.0)


def test_pyramid_small_mu_limit():
    f = ct.build_frame([0, 0, 0], [0, 1, 0])
    assert np.allclose(ct.pyramid_edges(f, 1e-12).edges, f.n, atol=1e-11)


def test_pyramid_inner_approximation(rng):
    for _ in range(50):
        n = rng.normal(size=3)
        f = ct.build_frame([0, 0, 0], n / np.linalg.norm(n))
        mu = rng.uniform(0.01, 2.0)
        cone = ct.pyramid_edges(f, mu)
        lam = rng.exponential(size=(200, 8)) * (rng.random((200, 8)) < 0.7)
        F = lam @ cone.edges
        f1, f2, f3 = F @ f.n, F @ f.d, F @ f.e
        assert np.all(f2 ** 2 + f3 ** 2 <= mu ** 2 * f1 ** 2 * (1 + 1e-12) + 1e-15)


def test_force_from_weights():
    f = ct.build_frame([0, 0, 0], [0, 0, 1])
    cone = ct.pyramid_edges(f, 0.6)
    force, f1 = ct.force_from_weights(cone, np.eye(8)[0])
    assert np.allclose(force, cone.edges[0]) and f1 == 1.0
    force, f1 = ct.force_from_weights(cone, np.full(8, 1 / 8))
    assert np.allclose(force, f.n) and f1 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ct.force_from_weights(cone, -np.eye(8)[0])


def test_wrench_matrices_match_oracle(rng):
    P = rng.normal(size=(4, 3))
    N = rng.normal(size=(4, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    ref = oracles.edge_wrenches(P, N, 0.6)
    frames = [ct.build_frame(p, n) for p, n in zip(P, N)]
    assert np.allclose(ct.contact_wrench_matrix(frames, 0.6), ref, atol=1e-12)
    W, _, _ = ct.wrench_edges_batch(P[None], N[None], 0.6)
    assert np.allclose(W[0], ref, atol=1e-12)
