import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from travmem.geometry import (
    CalibrationChain,
    CameraIntrinsics,
    OdometrySample,
    RigidTransform,
    compose,
    load_odometry,
    project_footprints,
    save_odometry,
    select_valid_odometry,
)


def random_transform(rng, t_scale=1.0):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return RigidTransform(r, rng.standard_normal(3) * t_scale)


def rot_z(deg, t=(0, 0, 0)):
    return RigidTransform.from_rpy(0, 0, np.deg2rad(deg), t)


def test_compose_identity():
    t = random_transform(np.random.default_rng(0))
    out = compose(RigidTransform.identity(), t)
    np.testing.assert_allclose(out.matrix(), t.matrix(), atol=1e-12)


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = random_transform(rng)
        np.testing.assert_allclose(compose(t, t.inverse()).matrix(), np.eye(4), atol=1e-9)


def test_compose_matches_matrix_product():
    a = rot_z(90, (1, 0, 0))
    b = rot_z(90)
    out = compose(a, b)
    oracle = a.matrix() @ b.matrix()
    np.testing.assert_allclose(out.matrix(), oracle, atol=1e-12)
    np.testing.assert_allclose(out.matrix(), rot_z(180, (1, 0, 0)).matrix(), atol=1e-12)


def test_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, 1.01]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def _samples_at(dists, t0=0.0):
    return [OdometrySample(t0 + i, RigidTransform(np.eye(3), (d, 0, 0))) for i, d in enumerate(dists)]


def test_select_valid_threshold():
    s = _samples_at([0.5, 2.0, 9.9, 10.1])
    out = select_valid_odometry(s, RigidTransform.identity(), 10.0, frame_time=0.0)
    assert [o.pose.translation[0] for o in out] == [0.5, 2.0, 9.9]


def test_select_valid_rejects_zero_dmax():
    with pytest.raises(ValueError):
        select_valid_odometry(_samples_at([1.0]), RigidTransform.identity(), 0.0)


def test_select_valid_future_only():
    s = _samples_at([1.0, 1.0, 1.0])
    out = select_valid_odometry(s, RigidTransform.identity(), 5.0, frame_time=1.0)
    assert [o.timestamp for o in out] == [1.0, 2.0]
    both = select_valid_odometry(s, RigidTransform.identity(), 5.0, frame_time=1.0, future_only=False)
    assert len(both) == 3


def test_select_valid_matches_brute_force():
    rng = np.random.default_rng(2)
    samples = [OdometrySample(float(i), RigidTransform(np.eye(3), rng.uniform(-15, 15, 3)))
               for i in range(100)]
    frame = RigidTransform(np.eye(3), rng.uniform(-3, 3, 3))
    got = select_valid_odometry(samples, frame, 10.0, frame_time=30.0)
    expected = []
    for s in samples:
        d = sum((a - b) ** 2 for a, b in zip(s.pose.translation, frame.translation)) ** 0.5
        if d <= 10.0 and s.timestamp >= 30.0:
            expected.append(s)
    assert got == expected


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(30))), st.integers(0, 1000))
def test_select_valid_permutation_invariant(perm, seed):
    rng = np.random.default_rng(seed)
    samples = [OdometrySample(float(i), RigidTransform(np.eye(3), rng.uniform(-12, 12, 3)))
               for i in range(30)]
    frame = RigidTransform.identity()
    a = select_valid_odometry(samples, frame, 10.0, frame_time=5.0)
    b = select_valid_odometry([samples[i] for i in perm], frame, 10.0, frame_time=5.0)
    assert sorted(s.timestamp for s in a) == sorted(s.timestamp for s in b)


INTR = CameraIntrinsics(100, 100, 50, 50, 100, 100)


def test_principal_point():
    s = OdometrySample(0.0, RigidTransform(np.eye(3), (0, 0, 1)))
    res = project_footprints([s], CalibrationChain(), INTR)
    assert [(p.u, p.v) for p in res.prompts] == [(50.0, 50.0)]


def test_behind_camera_dropped():
    s = OdometrySample(0.0, RigidTransform(np.eye(3), (0, 0, -1)))
    res = project_footprints([s], CalibrationChain(), INTR)
    assert res.prompts == [] and res.dropped_behind == 1


def _homogeneous_oracle(point, mats, intr):
    p = np.append(point, 1.0)
    for m in reversed(mats):
        p = m @ p
    x, y, z = p[:3]
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, z


def test_projection_matches_homogeneous_oracle():
    rng = np.random.default_rng(3)
    intr = CameraIntrinsics(400, 380, 320, 240, 640, 480)
    checked = 0
    for _ in range(20):
        chain = CalibrationChain(random_transform(rng, 0.3), random_transform(rng, 0.3),
                                 random_transform(rng, 0.3))
        odom = random_transform(rng, 0.3)
        pts = [OdometrySample(float(i), RigidTransform(np.eye(3), rng.uniform(-3, 3, 3)))
               for i in range(20)]
        res = project_footprints(pts, chain, intr, odom_to_lidar=odom)
        mats = [chain.fc_to_cam.matrix(), chain.base_to_fc.matrix(),
                chain.lidar_to_base.matrix(), odom.matrix()]
        expected = []
        for s in pts:
            u, v, z = _homogeneous_oracle(s.pose.translation, mats, intr)
            if z > 0.05 and 0 <= u < intr.width and 0 <= v < intr.height:
                expected.append((s.timestamp, u, v))
        assert len(res.prompts) == len(expected)
        assert len(res.prompts) + res.dropped == len(pts)
        for p, (ts, u, v) in zip(res.prompts, expected):
            assert p.source_timestamp == ts
            assert abs(p.u - u) < 1e-6 and abs(p.v - v) < 1e-6
            checked += 1
    assert checked > 20


def test_projection_invariant_to_inserted_identity_pair():
    rng = np.random.default_rng(4)
    intr = CameraIntrinsics(300, 300, 160, 120, 320, 240)
    small = [RigidTransform.from_rpy(*rng.uniform(-0.1, 0.1, 3), rng.uniform(-0.2, 0.2, 3)) for _ in range(3)]
    base = CalibrationChain(*small)
    pts = [OdometrySample(float(i), RigidTransform(np.eye(3), rng.uniform(-2, 2, 3) + (0, 0, 4)))
           for i in range(50)]
    t = random_transform(rng)
    padded = CalibrationChain(compose(base.fc_to_cam, compose(t, t.inverse())), base.base_to_fc,
                              base.lidar_to_base)
    a = project_footprints(pts, base, intr)
    b = project_footprints(pts, padded, intr)
    assert len(a.prompts) == len(b.prompts) > 0
    for p, q in zip(a.prompts, b.prompts):
        assert abs(p.u - q.u) < 1e-6 and abs(p.v - q.v) < 1e-6


def test_prompts_always_inside_image():
    rng = np.random.default_rng(5)
    intr = CameraIntrinsics(50, 50, 31.5, 23.5, 64, 48)
    pts = [OdometrySample(float(i), RigidTransform(np.eye(3), rng.uniform(-5, 5, 3))) for i in range(500)]
    res = project_footprints(pts, CalibrationChain(), intr)
    for p in res.prompts:
        assert 0 <= p.u < 64 and 0 <= p.v < 48


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 4, 1, 4, 4)


def test_odometry_file_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    samples = [OdometrySample(0.1 * i, random_transform(rng)) for i in range(5)]
    path = tmp_path / "odom.txt"
    save_odometry(path, samples)
    back = load_odometry(path)
    assert len(back) == 5
    for a, b in zip(samples, back):
        assert a.timestamp == b.timestamp
        np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())


def test_odometry_file_rejects_bad_lines(tmp_path):
    path = tmp_path / "odom.txt"
    path.write_text("0.0 1 0 0 0 1 0 0 0 1 0 0\n")
    with pytest.raises(ValueError, match="13 fields"):
        load_odometry(path)
    path.write_text("1.0 1 0 0 0 1 0 0 0 1 0 0 0\n0.5 1 0 0 0 1 0 0 0 1 0 0 0\n")
    with pytest.raises(ValueError, match="increasing"):
        load_odometry(path)
