import copy

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bigrasp import hand as hd


@pytest.fixture(scope="module")
def spec():
    return yaml.safe_load((hd.DATA_DIR / "tripod_hand.yaml").read_text())


def two_link_spec(angle_axis=(0, 0, 1)):
    return {
        "format_version": 1,
        "links": [
            {"name": "base", "parent": None, "spheres": [[0, 0, 0, 0.01]]},
            {"name": "arm", "parent": "base", "spheres": [[0, 0, 0.5, 0.01]]},
            {"name": "tip", "parent": "arm", "xyz": [1, 0, 0], "spheres": [[0, 0, 0, 0.01]]},
        ],
        "joints": [{"name": "j", "child": "arm", "axis": list(angle_axis), "limits": [-2, 2]}],
        "fingertips": [{"link": "tip", "point": [0, 0, 0], "radius": 0.01},
                       {"link": "arm", "point": [0, 0, 0], "radius": 0.01}],
        "adjacency": [["base", "arm"], ["arm", "tip"]],
    }


def random_pose(model, rng, n=1):
    R = oracles.random_rotations(n, rng)
    t = rng.normal(size=(n, 3)) * 0.1
    lo, hi = model.joint_limits.T
    q = rng.uniform(lo, hi, size=(n, model.n_joints))
    return np.concatenate([R.reshape(n, 9), t, q], axis=1)


# --- forward kinematics ----------------------------------------------------


def test_fk_identity_root(hand):
    poses = hd.forward_kinematics(hand, hand.identity_config(np.zeros(hand.n_joints)))
    assert np.allclose(poses[0].rotation, np.eye(3)) and np.allclose(poses[0].translation, 0)


def test_fk_two_link_chain():
    model = hd.hand_from_spec(two_link_spec())
    x = hd.GraspConfig(np.eye(3), np.zeros(3), np.array([np.pi / 2]))
    poses = hd.forward_kinematics(model, x)
    assert np.allclose(poses[2].translation, [0, 1, 0], atol=1e-12)


def test_fk_matches_chain_oracle(hand, spec, rng):
    X = random_pose(hand, rng, 50)
    fk = hd.fk_batch(hand, X)
    for b in range(len(X)):
        H = oracles.chain_fk(spec, X[b, :9].reshape(3, 3), X[b, 9:12], X[b, 12:])
        for l, name in enumerate(hand.link_names):
            assert np.allclose(fk.R[b, l], H[name][:3, :3], atol=1e-9)
            assert np.allclose(fk.T[b, l], H[name][:3, 3], atol=1e-9)
        tips = hd.fingertip_contacts(hand, hd.GraspConfig.from_vector(X[b]))
        for (c, _), l, p in zip(tips, hand.tip_links, hand.tip_points):
            ref = H[hand.link_names[l]] @ np.append(p, 1.0)
            assert np.allclose(c, ref[:3], atol=1e-9)


def test_fk_link_rotations_orthonormal(hand, rng):
    fk = hd.fk_batch(hand, random_pose(hand, rng, 20))
    RtR = np.swapaxes(fk.R, -1, -2) @ fk.R
    assert np.allclose(RtR, np.eye(3), atol=1e-6)


def test_fk_dimension_mismatch(hand):
    with pytest.raises(ValueError):
        hd.forward_kinematics(hand, np.zeros(hand.dim + 1))


def test_fk_backward_matches_finite_differences(hand, rng):
    X = random_pose(hand, rng, 1)
    X[0, :9] += rng.normal(size=9) * 0.1  # off the rotation manifold
    w = rng.normal(size=(hand.n_tips, 3))

    def f(x):
        fk = hd.fk_batch(hand, x.reshape(1, -1))
        return float(np.sum(w * hd.points_world(fk, hand.tip_links, hand.tip_points)[0]))

    fk = hd.fk_batch(hand, X)
    gR, gT = np.zeros_like(fk.R), np.zeros_like(fk.T)
    hd.accumulate_point_grads(gR, gT, hand.tip_links, hand.tip_points, w[None])
    g = hd.fk_backward(hand, X, fk, gR, gT)[0]
    ref = oracles.central_difference(f, X[0].copy(), 1e-6)
    assert np.allclose(g, ref, rtol=1e-4, atol=1e-7)


# --- rotations -------------------------------------------------------------


def test_project_rotation_examples(rng):
    assert np.allclose(hd.project_rotation(np.eye(3).ravel()), np.eye(3))
    R = oracles.random_rotations(1, rng)[0]
    assert np.allclose(hd.project_rotation((2 * R).ravel()), R, atol=1e-12)


def test_project_rotation_is_nearest(rng):
    samples = oracles.random_rotations(10000, rng)
    for _ in range(10):
        M = rng.normal(size=(3, 3))
        R = hd.project_rotation(M.ravel())
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert np.linalg.det(R) == pytest.approx(1.0)
        best = np.min(np.linalg.norm(samples - M, axis=(1, 2)))
        assert np.linalg.norm(R - M) <= best + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_project_rotation_idempotent(v):
    v = np.array(v)
    if np.linalg.matrix_rank(v.reshape(3, 3), tol=1e-6) < 3:
        return
    R = hd.project_rotation(v)
    assert np.allclose(hd.project_rotation(R.ravel()), R, atol=1e-9)


def test_project_rotation_rank_deficient_flagged():
    R, flag = hd.project_rotation([1, 0, 0, 0, 0, 0, 0, 0, 0], return_flag=True)
    assert flag
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and np.linalg.det(R) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        hd.project_rotation(np.zeros(9))


# --- penalty energies ------------------------------------------------------


def test_limit_energy_examples(hand):
    assert hd.limit_energy(hand, hand.identity_config())[0] == 0.0
    q = hand.joint_mid()
    q[2] = hand.joint_limits[2, 1] + 0.1
    assert hd.limit_energy(hand, hand.identity_config(q))[0] == pytest.approx(0.01)


def test_limit_energy_gradient(hand, rng):
    for _ in range(20):
        x = random_pose(hand, rng)[0]
        x[12:] += rng.normal(size=hand.n_joints) * 0.5
        v, g = hd.limit_energy(hand, x)
        ref = oracles.central_difference(lambda y: hd.limit_energy(hand, y)[0], x, 1e-6)
        assert np.allclose(g, ref, rtol=1e-4, atol=1e-8)


def test_self_penetration_open_hand_is_zero(hand):
    # straight fingers
    assert hd.self_penetration_energy(hand, hand.identity_config(np.zeros(hand.n_joints)))[0] == 0


def test_self_penetration_arithmetic():
    s = two_link_spec()
    s["links"][2]["spheres"] = [[0, 0, 0, 0.01]]
    s["links"][0]["spheres"] = [[1.0, 0.015, 0, 0.01]]  # base sphere 1.5 cm from the tip sphere
    s["adjacency"] = [["base", "arm"], ["arm", "tip"]]
    model = hd.hand_from_spec(s)
    v, _ = hd.self_penetration_energy(model, model.identity_config(np.zeros(1)))
    assert v == pytest.approx(0.005 ** 2)


def test_self_penetration_gradient(hand, rng):
    checked = 0
    while checked < 10:
        x = random_pose(hand, rng)[0]
        x[12:] = rng.uniform(0.5, 1.4, size=hand.n_joints)  # curled fingers collide
        v, g = hd.self_penetration_energy(hand, x)
        if v == 0:
            continue
        checked += 1
        ref = oracles.central_difference(lambda y: hd.self_penetration_energy(hand, y)[0], x, 1e-7)
        assert np.allclose(g, ref, rtol=1e-4, atol=1e-4 * np.abs(ref).max())


def test_hinge_energies_are_c1_at_boundary(hand):
    hi = hand.joint_limits[0, 1]
    for eps in (1e-3, 1e-5, 1e-7):
        q = hand.joint_mid()
        q[0] = hi + eps
        v, g = hd.limit_energy(hand, hand.identity_config(q))
        assert v == pytest.approx(eps ** 2) and g[12] == pytest.approx(2 * eps)


# --- hand spec loading -----------------------------------------------------


def test_builtin_hand_shape(hand):
    assert hand.n_tips == 3 and hand.n_joints == 6 and hand.dim == 18
    assert np.all(hand.joint_limits[:, 0] < hand.joint_limits[:, 1])
    assert len(hand.sphere_pairs) > 0


@pytest.mark.parametrize("mutate, msg", [
    (lambda s: s.update(format_version=2), "format_version"),
    (lambda s: s["links"][1].update(parent="tip"), "unreachable"),
    (lambda s: s["joints"][0].update(limits=[1, -1]), "lower limit"),
    (lambda s: s.update(fingertips=s["fingertips"][:1]), "two fingertip"),
    (lambda s: s["joints"][0].update(type="prismatic"), "revolute"),
])
def test_hand_spec_errors(mutate, msg):
    s = copy.deepcopy(two_link_spec())
    mutate(s)
    with pytest.raises(hd.HandSpecError, match=msg):
        hd.hand_from_spec(s)


def test_load_hand_from_file(tmp_path, spec, hand):
    p = tmp_path / "h.yaml"
    p.write_text(yaml.safe_dump(spec))
    other = hd.load_hand(p)
    assert other.link_names == hand.link_names
    assert np.array_equal(other.sphere_centers, hand.sphere_centers)
