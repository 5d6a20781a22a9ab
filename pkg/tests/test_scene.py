import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import front_camera, random_cloud, single
from splatattn.render import render
from splatattn.scene import (
    Camera,
    Gaussian3D,
    GaussianCloud,
    InvalidParameterError,
    ViewSet,
    build_view_ring,
    clone_gaussian,
    covariance_from_rs,
    prune_gaussians,
    quat_to_rotmat,
    split_gaussian,
)


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


class TestCovariance:
    def test_identity(self):
        np.testing.assert_array_equal(covariance_from_rs([1, 0, 0, 0], [1, 1, 1]), np.eye(3))

    def test_diagonal_scale(self):
        np.testing.assert_allclose(covariance_from_rs([1, 0, 0, 0], [2, 3, 4]), np.diag([4.0, 9.0, 16.0]))

    def test_quarter_turn_about_z(self):
        q = axis_angle_quat([0, 0, 1], math.pi / 2)
        # explicit rotation matrix for +90 deg about z
        R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        S = np.diag([2.0, 1.0, 1.0])
        expected = R @ S @ S.T @ R.T
        got = covariance_from_rs(q, [2, 1, 1])
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(got, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_rotmat_matches_rodrigues(self, rng):
        for _ in range(20):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = rng.uniform(-math.pi, math.pi)
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            R = np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * K @ K
            np.testing.assert_allclose(quat_to_rotmat(axis_angle_quat(axis, ang)), R, atol=1e-12)

    @pytest.mark.parametrize("scale", [[0, 1, 1], [1, -2, 1]])
    def test_rejects_nonpositive_scale(self, scale):
        with pytest.raises(InvalidParameterError):
            covariance_from_rs([1, 0, 0, 0], scale)

    def test_gaussian_rejects_non_unit_quaternion(self):
        with pytest.raises(InvalidParameterError, match="unit"):
            Gaussian3D(position=(0, 0, 0), rotation=(1.0, 0.1, 0, 0))

    @settings(max_examples=60, deadline=None)
    @given(
        q=st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1),
        s=st.lists(st.floats(0.01, 5.0), min_size=3, max_size=3),
    )
    def test_eigenvalues_are_squared_scales(self, q, s):
        q = np.asarray(q) / np.linalg.norm(q)
        ev = np.sort(np.linalg.eigvalsh(covariance_from_rs(q, s)))
        np.testing.assert_allclose(ev, np.sort(np.square(s)), atol=1e-9)


class TestViewRing:
    def test_single_camera(self):
        vs = build_view_ring(1)
        assert len(vs) == 1 and vs[0].azimuth == 0.0

    def test_four_views(self):
        vs = build_view_ring(4, elevation=0.0)
        np.testing.assert_allclose([c.azimuth for c in vs], [0, math.pi / 2, math.pi, 3 * math.pi / 2])

    def test_radius(self):
        vs = build_view_ring(8, radius=3.0, elevation=0.3)
        np.testing.assert_allclose([np.linalg.norm(c.eye) for c in vs], 3.0)

    def test_validation(self):
        with pytest.raises(InvalidParameterError):
            build_view_ring(0)
        with pytest.raises(InvalidParameterError):
            build_view_ring(3, radius=-1)
        cams = list(build_view_ring(3))
        with pytest.raises(InvalidParameterError):
            ViewSet(cams[::-1])

    def test_origin_projects_to_center(self):
        for cam in build_view_ring(6, elevation=0.5):
            t = cam.world_to_camera(np.zeros((1, 3)))[0]
            assert t[0] == pytest.approx(0, abs=1e-12) and t[1] == pytest.approx(0, abs=1e-12)
            assert t[2] == pytest.approx(4.0)

    def test_camera_round_trip(self, rng):
        cam = build_view_ring(5, elevation=0.2)[3]
        p = rng.normal(size=(10, 3))
        np.testing.assert_allclose(cam.camera_to_world(cam.world_to_camera(p)), p, atol=1e-12)

    def test_camera_validation(self):
        with pytest.raises(InvalidParameterError):
            Camera(eye=[0, 0, 1], look_at=[0, 0, 1])
        with pytest.raises(InvalidParameterError):
            Camera(eye=[0, 0, 1], look_at=[0, 0, 0], resolution=(2, 2))


class TestLifecycle:
    def test_clone_copies_weight(self):
        c = single(attn=0.7)
        out = clone_gaussian(c, 0)
        assert len(out) == 2
        np.testing.assert_array_equal(out.attn_weights, [0.7, 0.7])

    def test_clone_out_of_range(self):
        with pytest.raises(IndexError):
            clone_gaussian(single(), 3)

    def test_clone_adds_bounded_composite_mass(self, camera):
        c = single(opacity=0.4)
        before = render(c, camera, "all")
        after = render(clone_gaussian(c, 0), camera, "all")
        diff = after.alpha_image - before.alpha_image
        assert np.all(diff >= -1e-15)
        # the duplicate adds alpha_i * T at most
        alpha = before.alpha_image
        assert np.all(diff <= alpha * (1 - alpha) + 1e-12)
        assert diff.max() > 0

    def test_split_halves_scale(self):
        c = single(scale=1.0, attn=0.3)
        out = split_gaussian(c, 0)
        assert len(out) == 2
        np.testing.assert_array_equal(out.scales, np.full((2, 3), 0.5))
        np.testing.assert_array_equal(out.attn_weights, [0.3, 0.3])
        np.testing.assert_allclose(out.positions.mean(axis=0), c.positions[0], atol=1e-15)

    def test_split_places_along_largest_axis(self):
        q = axis_angle_quat([0, 0, 1], math.pi / 2)
        c = GaussianCloud([[1, 2, 3]], [q], [[0.1, 0.4, 0.2]], [0.5], [[0.1, 0.1, 0.1]])
        out = split_gaussian(c, 0)
        d = out.positions[0] - out.positions[1]
        # local y axis rotated by +90 deg about z is world -x
        np.testing.assert_allclose(d, [-0.4, 0, 0], atol=1e-12)

    def test_prune(self):
        c = GaussianCloud(np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.full((2, 3), 0.1),
                          [0.9, 0.01], np.zeros((2, 3)), attn_weights=[0.25, 0.5])
        assert len(prune_gaussians(c, 0.0)) == 2
        out = prune_gaussians(c, 0.05)
        assert len(out) == 1 and out.attn_weights[0] == 0.25
        low = c.copy()
        low.opacities[:] = 0.01
        assert len(prune_gaussians(low, 0.05)) == 0

    def test_prune_bad_threshold(self):
        with pytest.raises(InvalidParameterError):
            prune_gaussians(single(), 1.5)

    def test_split_keeps_image_center_of_mass(self):
        cam = front_camera(res=64, focal=64.0)
        shifts = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            c = random_cloud(rng, 1, spread=0.3, scale=(0.1, 0.35), opacity=(0.3, 0.6))
            c.colors[:] = 1.0

            def com(cl):
                a = render(cl, cam, "all").alpha_image
                ys, xs = np.mgrid[: a.shape[0], : a.shape[1]]
                return np.array([(a * xs).sum(), (a * ys).sum()]) / a.sum()

            shifts.append(np.linalg.norm(com(split_gaussian(c, 0)) - com(c)))
        assert np.mean(shifts) < 1.0

    def test_from_gaussians_round_trip(self):
        g = Gaussian3D(position=(1.0, 2.0, 3.0), attn_weight=0.4)
        c = GaussianCloud.from_gaussians([g, g])
        assert len(c) == 2 and c[1] == g
        assert len(GaussianCloud.from_gaussians([])) == 0
