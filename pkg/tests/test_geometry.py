import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bigrasp import geometry as geo


def cube(center=(0.0, 0.0, 0.0), half=0.5):
    return geo.box([half] * 3, center)


def random_polytope(rng, n=None, scale=1.0, center=None):
    n = rng.integers(8, 33) if n is None else n
    pts = rng.normal(size=(n, 3)) * rng.uniform(0.3, 1.0, size=3) * scale
    c = rng.normal(size=3) * 2 if center is None else np.asarray(center)
    return geo.ConvexPart.from_points(pts + c)


def random_rigid(rng):
    R = oracles.random_rotations(1, rng)[0]
    return R, rng.normal(size=3)


# --- ConvexPart ------------------------------------------------------------


def test_hull_invariants(rng):
    for _ in range(20):
        p = random_polytope(rng)
        again = geo.ConvexPart.from_points(p.vertices)
        assert len(again.vertices) == len(p.vertices)
        assert np.all(p.obb.contains(p.vertices, tol=1e-9))
        assert np.all(p.obb.half_extents > 0)


def test_degenerate_hull_rejected():
    with pytest.raises(geo.GeometryError):
        geo.ConvexPart.from_points([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    with pytest.raises(geo.GeometryError):
        geo.ConvexPart.from_points([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.2, 0]])


def test_close_vertices_merged():
    pts = np.vstack([cube().vertices, cube().vertices + 1e-11])
    assert len(geo.ConvexPart.from_points(pts).vertices) == 8


def test_sphere_proxy_radius_positive():
    with pytest.raises(geo.GeometryError):
        geo.SphereProxy(np.zeros(3), 0.0, 0)


# --- GJK -------------------------------------------------------------------


def test_gjk_cube_gap():
    r = geo.gjk_distance(cube(), cube((3, 0, 0)))
    assert r.distance == pytest.approx(2.0, abs=1e-12)
    # witnesses lie on the facing faces (the face pair is not unique in y, z)
    assert r.point_a[0] == pytest.approx(0.5)
    assert r.point_b[0] == pytest.approx(2.5)
    assert np.linalg.norm(r.point_a - r.point_b) == pytest.approx(2.0)
    assert np.allclose(r.normal, [-1, 0, 0])


def test_gjk_coincident():
    assert geo.gjk_distance(cube(), cube()).distance == 0.0


def test_gjk_matches_convex_combination_oracle(rng):
    worst = 0.0
    for _ in range(60):
        a = random_polytope(rng, center=np.zeros(3))
        b = random_polytope(rng, center=rng.normal(size=3) * 0.5 + [3.0, 0, 0])
        r = geo.gjk_distance(a, b)
        ref = oracles.convex_distance(a.vertices, b.vertices)
        worst = max(worst, abs(r.distance - ref))
        assert abs(np.linalg.norm(r.point_a - r.point_b) - r.distance) < 1e-6
        assert abs(np.linalg.norm(r.normal) - 1) < 1e-6
    assert worst < 1e-6


def test_gjk_symmetry_and_rigid_invariance(rng):
    for _ in range(200):
        a = random_polytope(rng)
        b = random_polytope(rng)
        d = geo.gjk_distance(a, b).distance
        assert abs(d - geo.gjk_distance(b, a).distance) < 1e-9
        R, t = random_rigid(rng)
        assert abs(d - geo.gjk_distance(a.transformed(R, t), b.transformed(R, t)).distance) < 1e-7


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_gjk_box_translation_property(x, y, z):
    # axis-aligned unit cubes: distance is the norm of the per-axis gaps
    gap = np.maximum(np.abs([x, y, z]) - 1.0, 0.0)
    assert geo.gjk_distance(cube(), cube((x, y, z))).distance == pytest.approx(np.linalg.norm(gap), abs=1e-9)


# --- EPA -------------------------------------------------------------------


def test_epa_axis_overlap():
    depth, d = geo.epa_depth(cube(), cube((0.8, 0, 0)))
    assert depth == pytest.approx(0.2, abs=1e-12)
    assert abs(abs(d[0]) - 1) < 1e-12 and abs(d[1]) < 1e-12 and abs(d[2]) < 1e-12


def test_epa_nested_boxes():
    outer = geo.box([1.0, 1.0, 1.0])
    inner = geo.box([0.2, 0.2, 0.2], center=(0.5, 0.1, -0.2))
    depth, _ = geo.epa_depth(inner, outer)
    # the inner box leaves through the nearest outer face: per axis, travel
    # until its trailing face clears that outer face
    c = np.array([0.5, 0.1, -0.2])
    expect = min(np.min(1.0 - (c - 0.2)), np.min(1.0 + (c + 0.2)))
    assert expect == pytest.approx(0.7)
    assert depth == pytest.approx(expect, abs=1e-9)


def test_epa_rejects_disjoint():
    with pytest.raises(geo.GeometryError):
        geo.epa_depth(cube(), cube((3, 0, 0)))


def test_epa_matches_direction_scan(rng):
    n = 0
    while n < 60:
        a = random_polytope(rng, center=np.zeros(3))
        b = random_polytope(rng, center=rng.normal(size=3) * 0.3)
        if geo.gjk_distance(a, b).distance > 0:
            continue
        n += 1
        depth, d = geo.epa_depth(a, b)
        ref = oracles.scan_depth(a.vertices, b.vertices)
        assert abs(depth - ref) <= 0.05 * ref
        assert depth == pytest.approx(oracles.minkowski_depth(a.vertices, b.vertices), abs=1e-9)
        # the reported direction separates the parts by exactly that depth
        assert geo.gjk_distance(a.translated(d * depth * 1.001 + d * 1e-6), b).distance > 0
        if depth > 1e-3:
            assert geo.gjk_distance(a.translated(d * depth * 0.99), b).distance == 0


def test_signed_distance_sign():
    assert geo.signed_distance(cube(), cube((3, 0, 0))).distance == pytest.approx(2.0)
    assert geo.signed_distance(cube(), cube((0.8, 0, 0))).distance == pytest.approx(-0.2)


# --- point queries ---------------------------------------------------------


def test_point_to_sphere():
    r = geo.point_to_mesh([0, 0, 2], [geo.icosphere(1.0, 3)])
    assert r.distance == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(r.point_b, [0, 0, 1])
    assert np.allclose(r.normal, [0, 0, 1])


def test_point_inside_cube():
    assert geo.point_to_mesh([0, 0, 0], [cube()]).distance == pytest.approx(-0.5)


def test_point_to_mesh_matches_surface_samples(rng):
    for _ in range(30):
        part = random_polytope(rng, center=np.zeros(3))
        p = rng.normal(size=3) * 1.5
        r = geo.point_to_mesh(p, [part])
        assert r.distance == pytest.approx(oracles.exact_point_distance(p, part.vertices), abs=1e-6)
        # surface samples can only overestimate |d|; the gap closes to 1e-4
        # once the sample spacing is small relative to the distance
        ref = oracles.sampled_point_distance(p, part.vertices, part.faces, rng)
        assert abs(r.distance) <= abs(ref) + 1e-12
        if abs(ref) > 0.1:
            assert abs(r.distance - ref) < 1e-4
        assert abs(np.linalg.norm(r.normal) - 1) < 1e-6


def test_point_to_mesh_multi_part_ties_smallest_index():
    a = cube((-1, 0, 0))
    b = cube((1, 0, 0))
    r = geo.point_to_mesh([0, 0, 0], [a, b])
    assert r.distance == pytest.approx(0.5)
    assert r.part_index == 0


def test_point_queries_batched_equals_single(rng):
    parts = [random_polytope(rng) for _ in range(3)]
    table = geo.PartTable.build(parts)
    pts = rng.normal(size=(50, 3)) * 2
    W, SD, NR, PI = geo.point_queries(pts, table)
    for i in range(0, 50, 7):
        r = geo.point_to_mesh(pts[i], parts)
        assert SD[i] == r.distance and np.array_equal(W[i], r.point_b)


# --- OBB and broad phase ----------------------------------------------------


def test_obb_sphere_distance_examples():
    box = geo.box([0.5, 0.5, 0.5])
    assert geo.obb_sphere_distance(box.obb, [2, 0, 0], 0.5) == pytest.approx(1.0)
    assert geo.obb_sphere_distance(box.obb, [0.1, 0, 0], 0.05) <= 0


def test_obb_sphere_distance_is_lower_bound(rng):
    for _ in range(300):
        part = random_polytope(rng)
        R, t = random_rigid(rng)
        part = part.transformed(R, t)
        c = rng.normal(size=3) * 3
        r = rng.uniform(0.01, 0.5)
        true = geo.point_to_mesh(c, [part]).distance - r
        assert geo.obb_sphere_distance(part.obb, c, r) <= true + 1e-9


def test_broadphase_examples():
    one = [geo.box([0.5, 0.5, 0.5])]
    assert geo.broadphase_cull([2, 0, 0], 0.1, one, 1.4) == [0]
    two = [geo.box([0.5, 0.5, 0.5]), geo.box([0.5, 0.5, 0.5], center=(10, 0, 0))]
    ref = geo.point_to_mesh([2, 0, 0], two).distance - 0.1
    assert geo.broadphase_cull([2, 0, 0], 0.1, two, ref) == [0]


def test_broadphase_never_culls_nearest(rng):
    for _ in range(500):
        parts = [random_polytope(rng, scale=0.5, center=rng.normal(size=3) * 3) for _ in range(4)]
        c = rng.normal(size=3) * 4
        r = 0.1
        full = geo.point_to_mesh(c, parts).distance
        keep = geo.broadphase_cull(c, r, parts, full - r)
        assert keep
        kept = geo.point_to_mesh(c, [parts[i] for i in keep]).distance
        assert kept == pytest.approx(full, abs=1e-12)
