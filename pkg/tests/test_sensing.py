import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vflprecode.geometry import DegenerateGeometryError
from vflprecode.scene import CameraIntrinsics, Detection, PointCloud
from vflprecode.sensing import (
    BevGrid,
    SensingBundle,
    bs_angles,
    bundle_from_bytes,
    bundle_to_bytes,
    dead_reckon,
    detection_to_azimuth,
    gps_feature,
    indicator_vector,
    lidar_to_bev,
    posenc,
    rgb_feature,
)

CAM = CameraIntrinsics()


def test_dead_reckon_examples():
    assert np.array_equal(dead_reckon((1, 2, 3), (4, 5), 0.0), [1, 2, 3])
    assert np.array_equal(dead_reckon((0, 0, 0), (1, 2), 3.0), [3, 6, 0])
    with pytest.raises(ValueError):
        dead_reckon((0, 0, 0), (1, 1), -1)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 5))
def test_dead_reckon_chains(vx, vy, dt):
    once = dead_reckon((1, 2, 0), (vx, vy), 2 * dt)
    twice = dead_reckon(dead_reckon((1, 2, 0), (vx, vy), dt), (vx, vy), dt)
    assert np.allclose(once, twice)


def test_bs_angles_examples():
    theta, phi = bs_angles((10, 10, 0), (0, 0, 9))
    assert np.isclose(theta, np.pi / 4)
    assert np.isclose(phi, np.arccos(9 / np.sqrt(281)))
    assert bs_angles((0, 0, 0), (0, 0, 9))[1] == 0.0
    # quadrant-aware azimuth
    assert np.isclose(bs_angles((-10, -10, 0), (0, 0, 9))[0], -3 * np.pi / 4)
    with pytest.raises(DegenerateGeometryError):
        bs_angles((0, 0, 9), (0, 0, 9))


def test_posenc_examples():
    assert np.allclose(posenc(0.0, 5), [0, 1] * 5)
    assert np.allclose(posenc(0.5, 2), [1, 0, 0, -1], atol=1e-15)
    with pytest.raises(ValueError):
        posenc(0.1, 0)


@given(st.floats(-1, 1), st.integers(1, 10))
def test_posenc_shape_and_period(p, levels):
    e = posenc(p, levels)
    assert e.shape == (2 * levels,)
    assert np.all(np.abs(e) <= 1)
    assert np.allclose(e, posenc(p + 2, levels), atol=1e-9)


def test_gps_feature_below_bs():
    f = gps_feature((0, 0, 0), (0, 0, 9))
    assert f.shape == (20,)
    assert np.allclose(f[10:], posenc(0.0, 5))


@given(st.floats(1, 80), st.floats(1, 60))
def test_gps_feature_mirror(dx, dy):
    bs = np.array([95.0, 67.5, 9.0])
    a = gps_feature(bs + [dx, dy, -7.5], bs)
    b = gps_feature(bs + [dx, -dy, -7.5], bs)
    assert np.allclose(a[10:], b[10:])
    assert not np.allclose(a[:10], b[:10])
    assert np.all(np.abs(a) <= 1)


def det(u, s=0.9):
    return Detection(u, 0.5, 0.1, 0.1, s)


def test_azimuth_center_and_edge():
    assert detection_to_azimuth(det(0.5), CAM) == 0.0
    assert abs(abs(np.rad2deg(detection_to_azimuth(det(1.0), CAM))) - 45) < 0.5
    assert abs(abs(np.rad2deg(detection_to_azimuth(det(0.0), CAM))) - 45) < 0.5


def test_azimuth_monotone():
    w = [detection_to_azimuth(det(u), CAM) for u in np.arange(0.1, 1.0, 0.1)]
    assert np.all(np.diff(w) > 0)


def test_azimuth_singular_intrinsics():
    with pytest.raises(ValueError):
        detection_to_azimuth(det(0.5), np.zeros((3, 3)), 640, 480)


def test_indicator_examples():
    assert np.array_equal(indicator_vector({}, CAM), np.zeros(16))
    # right camera is the first block; u = 0.6 falls into bin index 2
    r = indicator_vector({"right": [det(0.6, 0.7)]}, CAM)
    assert np.array_equal(r, np.eye(16)[2])
    twice = indicator_vector({"right": [det(0.6, 0.7), det(0.62, 0.8)]}, CAM)
    assert np.array_equal(r, twice)
    assert not indicator_vector({"front": [det(0.5, 0.5)]}, CAM).any()


def brute_force_indicator(dets, intr):
    """Product form: r_j = 1 - prod_i (1 - q_ji) with q_ji = [s_i > 0.5 and omega_i in bin j]."""
    fov = np.deg2rad(intr.fov_deg)
    lo, dw = -fov / 2, fov / 4
    out = []
    for face in ("right", "left", "back", "front"):
        for j in range(4):
            prod = 1
            for d in dets.get(face, []):
                f = intr.focal
                omega = np.arctan((d.u * intr.width - intr.width / 2) / f)
                q = int(d.s > 0.5 and lo + dw * j <= omega < lo + dw * (j + 1))
                prod *= 1 - q
            out.append(1 - prod)
    return np.array(out, dtype=float)


detections = st.builds(Detection, st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
det_sets = st.fixed_dictionaries({f: st.lists(detections, max_size=4) for f in ("front", "back", "left", "right")})


@given(det_sets)
def test_indicator_matches_product_form(dets):
    assert np.array_equal(indicator_vector(dets, CAM), brute_force_indicator(dets, CAM))


@given(st.lists(st.integers(0, 1), min_size=16, max_size=16), st.floats(-10, 10))
def test_rgb_feature_contract(bits, beta):
    f = rgb_feature(np.array(bits, dtype=float), beta)
    assert f.shape == (36,)
    assert set(np.unique(f[:16])) <= {0.0, 1.0}
    assert np.all(np.abs(f[16:]) <= 1)


def test_bev_examples():
    g = BevGrid()
    assert not lidar_to_bev(PointCloud(np.zeros((0, 3))), g).any()
    five = np.tile([[1.0, 1.0, 1.0]], (5, 1))
    bev = lidar_to_bev(PointCloud(five), g)
    assert bev.sum() == 1 and bev.max() == 1
    two = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 20.0]])
    assert lidar_to_bev(PointCloud(two), g).max() == 2
    outside = np.array([[100.0, 0.0, 0.0]])
    assert not lidar_to_bev(PointCloud(outside), g).any()


@given(st.integers(0, 400), st.integers(0, 2**32 - 1))
def test_bev_bounded(n, seed):
    g = BevGrid()
    pts = np.random.default_rng(seed).uniform(-50, 50, size=(n, 3))
    bev = lidar_to_bev(PointCloud(pts), g)
    assert bev.shape == (g.l_x, g.l_y)
    assert bev.min() >= 0 and bev.max() <= g.l_z
    assert bev.sum() <= n


def test_bev_grid_validation():
    with pytest.raises(ValueError):
        BevGrid(l_x=0)
    with pytest.raises(ValueError):
        BevGrid(bounds=((1, 0), (0, 1), (0, 1)))


def test_bundle_roundtrip_and_mask():
    rng = np.random.default_rng(0)
    b = SensingBundle(
        rng.standard_normal(4) + 1j * rng.standard_normal(4),
        gps=np.linspace(-1, 1, 20),
        rgb=np.r_[np.ones(16), np.zeros(20)],
        lidar=rng.integers(0, 9, size=(32, 32)),
    )
    assert b.mask == {"gps", "rgb", "lidar"}
    back = bundle_from_bytes(bundle_to_bytes(b))
    assert back.mask == b.mask
    assert np.allclose(back.pilot, b.pilot, atol=1e-6)
    assert np.array_equal(back.lidar, b.lidar)
    b.check_mask({"gps", "rgb", "lidar"})
    with pytest.raises(ValueError):
        b.check_mask({"gps"})
    uni = SensingBundle(np.ones(4, dtype=complex))
    assert len(bundle_to_bytes(uni)) < len(bundle_to_bytes(b))
    with pytest.raises(ValueError):
        SensingBundle(np.ones(4, dtype=complex), gps=np.zeros(19))
