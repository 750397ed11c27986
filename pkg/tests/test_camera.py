import json
import math

import numpy as np
import pytest

from mprender.camera import (CameraView, FrustumPartition, back_project, fit_partition,
                             load_camera, locate, locate_points, make_camera, project,
                             project_points, save_camera)
from mprender.errors import ContractViolation, EmptyViewError, FormatError


def rotation_about_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


class TestProject:
    def test_principal_point(self, simple_view):
        u, v, z = project((0.0, 0.0, 2.0), simple_view)
        assert (u, v, z) == pytest.approx((simple_view.cx, simple_view.cy, 2.0))

    def test_analytic_offset(self):
        view = make_camera(100, 100, focal=100.0)
        u, v, z = project((0.5, 0.0, 1.0), view)
        assert (u, v, z) == pytest.approx((100.0, 50.0, 1.0))

    def test_behind_camera(self, simple_view):
        assert project((0.0, 0.0, -1.0), simple_view) is None
        assert project((0.0, 0.0, 0.0), simple_view) is None

    def test_round_trip(self, rng):
        view = make_camera(80, 60, focal=65.0, position=(0.4, -0.2, 0.1),
                           rotation=rotation_about_y(0.3))
        pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200),
                               rng.uniform(1.0, 6.0, 200)])
        u, v, z, ok = project_points(pts, view)
        for i in np.nonzero(ok)[0]:
            rec = back_project(u[i], v[i], z[i], view)
            np.testing.assert_allclose(rec, pts[i], atol=1e-9)

    def test_scalar_matches_vectorized(self, rng, simple_view):
        pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50),
                               rng.uniform(0.5, 5.0, 50)])
        u, v, z, ok = project_points(pts, simple_view)
        for i in range(50):
            got = project(pts[i], simple_view)
            assert ok[i] == (got is not None)
            if got:
                assert got == pytest.approx((u[i], v[i], z[i]))


class TestCameraView:
    def test_camera_center(self):
        view = make_camera(64, 64, focal=50.0, position=(1.0, 2.0, 3.0),
                           rotation=rotation_about_y(0.7))
        np.testing.assert_allclose(view.camera_center, [1.0, 2.0, 3.0], atol=1e-12)

    def test_bad_rotation_rejected(self):
        w2c = np.eye(4)
        w2c[0, 1] = 1e-6
        with pytest.raises(ContractViolation):
            CameraView(intrinsics=np.diag([50.0, 50.0, 1.0]) + 0, world_to_camera=w2c,
                       width=64, height=64)

    def test_negative_focal_rejected(self):
        k = np.array([[-50.0, 0, 32], [0, 50.0, 32], [0, 0, 1]])
        with pytest.raises(ContractViolation):
            CameraView(intrinsics=k, world_to_camera=np.eye(4), width=64, height=64)

    def test_json_round_trip(self, tmp_path, simple_view):
        path = tmp_path / "cam.json"
        save_camera(simple_view, path)
        loaded = load_camera(path)
        np.testing.assert_array_equal(loaded.intrinsics, simple_view.intrinsics)
        np.testing.assert_array_equal(loaded.world_to_camera, simple_view.world_to_camera)
        assert (loaded.width, loaded.height) == (64, 64)

    @pytest.mark.parametrize("missing", ["intrinsics", "world_to_camera", "width", "height"])
    def test_missing_field_rejected(self, tmp_path, simple_view, missing):
        doc = simple_view.to_dict()
        del doc[missing]
        path = tmp_path / "cam.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError, match=missing):
            load_camera(path)


class TestFitPartition:
    def test_two_depths(self):
        part = fit_partition([1.0, 5.0], planes=4, padding=0.0)
        assert (part.near, part.far) == (1.0, 5.0)
        assert part.slab_depth == pytest.approx(1.0)

    def test_single_depth_with_padding(self):
        part = fit_partition([2.0], planes=2, padding=1e-3)
        assert part.near == pytest.approx(1.998)
        assert part.far == pytest.approx(2.002)
        assert part.slab_depth == pytest.approx(0.002)

    def test_degenerate_range_clamped(self):
        part = fit_partition([2.0, 2.0], planes=3, padding=0.0)
        assert part.far - part.near >= 1e-6

    def test_empty_raises(self):
        with pytest.raises(EmptyViewError):
            fit_partition([], planes=4)

    def test_invalid_partition_rejected(self):
        with pytest.raises(ContractViolation):
            FrustumPartition(near=2.0, far=1.0, planes=4)
        with pytest.raises(ContractViolation):
            FrustumPartition(near=1.0, far=2.0, planes=0)


class TestLocate:
    def test_plane_binning(self, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        coord = locate(10.5, 20.5, 2.5, part, simple_view)
        assert coord.p == 1

    def test_pixel_center_distance_zero(self, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        coord = locate(10.5, 20.5, 2.0, part, simple_view)
        assert (coord.w, coord.h) == (10, 20)
        assert coord.d1 == pytest.approx(0.0)

    def test_pixel_corner_max_distance(self, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        coord = locate(10.0, 20.0, 2.0, part, simple_view)
        assert (coord.w, coord.h) == (10, 20)
        assert coord.d1 == pytest.approx(math.sqrt(2) / 2)

    def test_far_plane_clamped(self, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        assert locate(5.0, 5.0, 5.0, part, simple_view).p == 3
        assert locate(5.0, 5.0, 5.0001, part, simple_view) is None
        assert locate(5.0, 5.0, 0.9999, part, simple_view) is None

    def test_outside_image(self, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        assert locate(-0.1, 5.0, 2.0, part, simple_view) is None
        assert locate(64.0, 5.0, 2.0, part, simple_view) is None
        assert locate(5.0, 64.0, 2.0, part, simple_view) is None

    def test_d1_bounds_and_plane_range(self, rng, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=6)
        u = rng.uniform(0, 64, 500)
        v = rng.uniform(0, 64, 500)
        z = rng.uniform(1.0, 5.0, 500)
        p, h, w, d1, inside = locate_points(u, v, z, part, simple_view)
        assert inside.all()
        assert (d1 >= 0).all() and (d1 <= math.sqrt(2) / 2 + 1e-12).all()
        assert (p >= 0).all() and (p < 6).all()

    def test_subpixel_perturbation_keeps_cell(self, rng, simple_view):
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        for _ in range(50):
            w = rng.integers(0, 64)
            h = rng.integers(0, 64)
            base = locate(w + 0.5, h + 0.5, 2.0, part, simple_view)
            du, dv = rng.uniform(-0.499, 0.499, 2)
            moved = locate(w + 0.5 + du, h + 0.5 + dv, 2.0, part, simple_view)
            assert (moved.h, moved.w) == (base.h, base.w)

    def test_partition_is_total(self, rng, simple_view):
        # every in-frustum point maps to exactly one voxel
        part = FrustumPartition(near=1.0, far=5.0, planes=4)
        u = rng.uniform(0, 64, 300)
        v = rng.uniform(0, 64, 300)
        z = rng.uniform(1.0, 5.0, 300)
        p, h, w, _, inside = locate_points(u, v, z, part, simple_view)
        assert inside.all()
        for arr, hi in ((p, 4), (h, 64), (w, 64)):
            assert (arr >= 0).all() and (arr < hi).all()
