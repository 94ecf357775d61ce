import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polstereo.geometry import (
    CameraIntrinsics,
    ScalarMap,
    StereoRig,
    VectorMap,
    backproject,
    normalize,
    project,
    ray_direction,
    unnormalised_normal,
    view_vector,
)
from polstereo.synth import sphere_depth

CAM = CameraIntrinsics(fx=300.0, fy=320.0, x0=31.5, y0=23.5, width=64, height=48)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4, 1, 4, 4)
    with pytest.raises(ValueError):
        StereoRig(CAM, CAM, 0.0)
    assert CameraIntrinsics.from_dict(CAM.to_dict()) == CAM
    rig = StereoRig(CAM, CAM, 0.05)
    assert StereoRig.from_dict(rig.to_dict()) == rig


def test_map_invariants():
    with pytest.raises(ValueError):
        ScalarMap(np.array([[np.nan]]), np.array([[True]]))
    ScalarMap(np.array([[np.nan]]), np.array([[False]]))
    with pytest.raises(ValueError):
        VectorMap(np.array([[[2.0, 0, 0]]]), np.array([[True]]), unit=True)


def test_backproject_examples():
    cam = CameraIntrinsics(100.0, 100.0, 10.0, 10.0, 300, 21)
    Z = np.zeros(cam.shape)
    Z[10, 10] = 1.0
    Z[10, 110] = 2.0
    P = backproject(Z, cam)
    np.testing.assert_allclose(P[10, 10], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(P[10, 110], [2.0, 0.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 63.0), st.floats(0.0, 47.0), st.floats(0.01, 100.0))
def test_backproject_project_roundtrip(x, y, z):
    P = np.array(
        [(x - CAM.x0) * z / CAM.fx, (y - CAM.y0) * z / CAM.fy, z],
    )
    u, v = project(P, CAM)
    assert abs(u - x) < 1e-9 and abs(v - y) < 1e-9


def test_backproject_masks_pixels():
    Z = np.ones(CAM.shape)
    m = np.zeros(CAM.shape, dtype=bool)
    m[3, 4] = True
    P = backproject(Z, CAM, m)
    assert np.isnan(P[0, 0]).all() and np.isfinite(P[3, 4]).all()


def test_view_vector_examples():
    cam = CameraIntrinsics(100.0, 100.0, 10.0, 10.0, 300, 21)
    np.testing.assert_allclose(view_vector(cam, 10.0, 10.0), [0, 0, -1], atol=0)
    np.testing.assert_allclose(view_vector(cam, 110.0, 10.0), -np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)
    v = view_vector(CAM)
    np.testing.assert_allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-15)
    np.testing.assert_array_equal(v, -ray_direction(CAM))


def test_normal_of_constant_depth():
    Z = np.full(CAM.shape, 2.5)
    n = unnormalised_normal(Z, np.zeros_like(Z), np.zeros_like(Z), CAM)
    np.testing.assert_array_equal(n[..., :2], 0.0)
    np.testing.assert_array_equal(n[..., 2], 2.5)


def _tangent_normal(Z, Zx, Zy, cam):
    """Cross product of the backprojected tangents dP/dx x dP/dy."""
    x, y = cam.pixel_grid()
    Px = np.stack([(Z + (x - cam.x0) * Zx) / cam.fx, (y - cam.y0) * Zx / cam.fy, Zx], axis=-1)
    Py = np.stack([(x - cam.x0) * Zy / cam.fx, (Z + (y - cam.y0) * Zy) / cam.fy, Zy], axis=-1)
    return np.cross(Px, Py)


@settings(max_examples=25, deadline=None)
@given(
    st.floats(0.05, 5.0),
    st.floats(-2.0, 2.0),
    st.floats(-2.0, 2.0),
    st.floats(-1.0, 1.0),
)
def test_normal_matches_tangent_cross_product(c, a, b, q):
    # smooth analytic surface with exact derivatives
    x, y = CAM.pixel_grid()
    u, v = (x - CAM.x0) / CAM.fx, (y - CAM.y0) / CAM.fy
    Z = c * (1.0 + 0.1 * a * u + 0.1 * b * v + 0.05 * q * u * v)
    Zx = c * (0.1 * a + 0.05 * q * v) / CAM.fx
    Zy = c * (0.1 * b + 0.05 * q * u) / CAM.fy
    n1 = normalize(unnormalised_normal(Z, Zx, Zy, CAM))
    n2 = normalize(_tangent_normal(Z, Zx, Zy, CAM))
    gap = np.arccos(np.clip(np.sum(n1 * n2, axis=-1), -1, 1))
    assert gap.max() < 1e-6


def test_slanted_plane_tilts_toward_minus_x():
    x, _ = CAM.pixel_grid()
    c, m = 1.0, 0.2
    Z = c + m * (x - CAM.x0) / CAM.fx * c
    Zx = np.full_like(Z, m * c / CAM.fx)
    n = normalize(unnormalised_normal(Z, Zx, np.zeros_like(Z), CAM))
    assert np.all(n[..., 0] < 0)
    ref = normalize(_tangent_normal(Z, Zx, np.zeros_like(Z), CAM))
    assert np.degrees(np.arccos(np.clip(np.sum(n * ref, -1), -1, 1))).max() < 0.5


def test_sphere_normals_from_finite_differences():
    cam = CameraIntrinsics(300.0, 300.0, 127.5, 127.5, 256, 256)
    Z, n_true, hit = sphere_depth(cam, (0.0, 0.0, 0.1), 0.02)
    Zc = np.where(hit, Z, 0.0)
    Zx = np.gradient(Zc, axis=1)
    Zy = np.gradient(Zc, axis=0)
    interior = hit.copy()
    for ax in (0, 1):
        for s in (1, -1):
            interior &= np.roll(hit, s, axis=ax)
    n = normalize(unnormalised_normal(Zc, Zx, Zy, cam))
    err = np.degrees(np.arccos(np.clip(np.sum(n * n_true, -1), -1, 1)))[interior]
    assert err.mean() < 1.0
