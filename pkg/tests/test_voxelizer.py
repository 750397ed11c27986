import numpy as np
import pytest

from mprender.autodiff import Tape, Tensor
from mprender.camera import FrustumPartition, project_points
from mprender.errors import ContractViolation, EmptyViewError
from mprender.pointcloud import PointCloudStore
from mprender.voxelizer import (AggregationParams, aggregate, aggregate_backward,
                                build_volume, load_volume_dump, point_weights,
                                save_volume_dump)
from mprender.camera import VoxelCoord

from conftest import random_store
from reference import assert_close_rel, central_difference, direct_aggregate


def random_coords(rng, n, grid):
    p = rng.integers(0, grid[0], n)
    h = rng.integers(0, grid[1], n)
    w = rng.integers(0, grid[2], n)
    d1 = rng.uniform(0, np.sqrt(2) / 2, n)
    d2 = rng.uniform(0, 2.0, n)
    # min-depth point in the shared voxel must sit at offset zero
    flat = (p * grid[1] + h) * grid[2] + w
    for cell in np.unique(flat):
        members = np.nonzero(flat == cell)[0]
        d2[members[rng.integers(0, members.size)]] = 0.0
    return [VoxelCoord(p=int(p[i]), h=int(h[i]), w=int(w[i]),
                       d1=float(d1[i]), d2=float(d2[i])) for i in range(n)], (p, h, w, d1, d2)


class TestAggregate:
    def test_single_point_any_exponents(self, rng):
        part = FrustumPartition(near=1.0, far=3.0, planes=2)
        feat = rng.uniform(0, 1, (1, 11))
        coord = [VoxelCoord(p=1, h=2, w=3, d1=0.4, d2=0.0)]
        for a, b in [(0, 0), (1, 1), (2.5, 0.7)]:
            vol = aggregate(feat, coord, part, 4, 5, AggregationParams(a=a, b=b))
            np.testing.assert_allclose(vol.values.data[:, 1, 2, 3], feat[0], atol=1e-12)

    def test_two_point_blend(self):
        # weights {1, 0.5} at a=b=1, d1={0,0}, d2={0,1}
        part = FrustumPartition(near=1.0, far=3.0, planes=1)
        f1 = np.full(4, 1.0)
        f2 = np.full(4, 4.0)
        coords = [VoxelCoord(p=0, h=0, w=0, d1=0.0, d2=0.0),
                  VoxelCoord(p=0, h=0, w=0, d1=0.0, d2=1.0)]
        vol = aggregate(np.stack([f1, f2]), coords, part, 1, 1, AggregationParams())
        expected = (f1 * 1.0 + f2 * 0.5) / 1.5
        np.testing.assert_allclose(vol.values.data[:, 0, 0, 0], expected, rtol=1e-12)

    def test_zbuffer_limit(self):
        part = FrustumPartition(near=1.0, far=3.0, planes=1)
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        coords = [VoxelCoord(p=0, h=0, w=0, d1=0.3, d2=0.0),
                  VoxelCoord(p=0, h=0, w=0, d1=0.1, d2=0.5)]
        vol = aggregate(feats, coords, part, 1, 1, AggregationParams(a=1.0, b=1e6))
        assert np.abs(vol.values.data[:, 0, 0, 0] - feats[0]).max() < 1e-3

    def test_matches_direct_oracle(self, rng):
        # randomized configurations against the independent formula
        grid = (3, 4, 4)
        part = FrustumPartition(near=1.0, far=4.0, planes=grid[0])
        for trial in range(50):
            n = int(rng.integers(1, 100))
            a, b = rng.uniform(0, 3, 2)
            coords, (p, h, w, d1, d2) = random_coords(rng, n, grid)
            feats = rng.uniform(-1, 1, (n, 5))
            vol = aggregate(feats, coords, part, grid[1], grid[2],
                            AggregationParams(a=a, b=b))
            want = direct_aggregate(feats, d1, d2, np.stack([p, h, w], axis=1),
                                    grid, a, b)
            np.testing.assert_allclose(vol.values.data, want, rtol=1e-12, atol=1e-12)

    def test_unweighted_mean_at_zero_exponents(self, rng):
        part = FrustumPartition(near=1.0, far=3.0, planes=1)
        feats = rng.uniform(0, 1, (5, 3))
        coords = [VoxelCoord(p=0, h=0, w=0, d1=float(rng.uniform(0, 0.7)),
                             d2=float(abs(rng.normal()))) for _ in range(5)]
        coords[0].d2 = 0.0
        vol = aggregate(feats, coords, part, 1, 1, AggregationParams(a=0.0, b=0.0))
        np.testing.assert_allclose(vol.values.data[:, 0, 0, 0], feats.mean(axis=0),
                                   rtol=1e-12)

    def test_convexity(self, rng):
        grid = (2, 3, 3)
        part = FrustumPartition(near=1.0, far=3.0, planes=2)
        coords, keys = random_coords(rng, 40, grid)
        feats = rng.uniform(-2, 2, (40, 4))
        vol = aggregate(feats, coords, part, 3, 3, AggregationParams(a=1.3, b=0.8))
        p, h, w = keys[0], keys[1], keys[2]
        for cell in set(zip(p.tolist(), h.tolist(), w.tolist())):
            members = [i for i in range(40) if (p[i], h[i], w[i]) == cell]
            got = vol.values.data[(slice(None),) + cell]
            lo = feats[members].min(axis=0) - 1e-12
            hi = feats[members].max(axis=0) + 1e-12
            assert ((got >= lo) & (got <= hi)).all()

    def test_empty_voxels_exact_zero(self, rng):
        part = FrustumPartition(near=1.0, far=3.0, planes=2)
        vol = aggregate(rng.uniform(0, 1, (1, 3)),
                        [VoxelCoord(p=0, h=0, w=0, d1=0.1, d2=0.0)],
                        part, 4, 4, AggregationParams())
        values = vol.values.data.copy()
        values[:, 0, 0, 0] = 0.0
        assert (values == 0.0).all()

    def test_coordinate_out_of_range(self, rng):
        part = FrustumPartition(near=1.0, far=3.0, planes=2)
        with pytest.raises(ContractViolation):
            aggregate(rng.uniform(0, 1, (1, 3)),
                      [VoxelCoord(p=2, h=0, w=0, d1=0.1, d2=0.0)],
                      part, 4, 4, AggregationParams())


class TestWeights:
    def test_monotonic_in_d1_and_d2(self):
        params = AggregationParams(a=1.5, b=2.0)
        d1 = np.linspace(0, 0.7, 10)
        w = point_weights(d1, np.zeros(10), params)
        assert (np.diff(w) < 0).all()
        d2 = np.linspace(0, 3.0, 10)
        w = point_weights(np.zeros(10), d2, params)
        assert (np.diff(w) < 0).all()
        assert (w > 0).all() and (w <= 1.0).all()

    def test_invalid_params(self):
        with pytest.raises(ContractViolation):
            AggregationParams(a=-1.0)
        with pytest.raises(ContractViolation):
            AggregationParams(b=float("nan"))


class TestAggregateBackward:
    def test_single_point_passthrough(self, rng):
        part = FrustumPartition(near=1.0, far=3.0, planes=2)
        vol = aggregate(rng.uniform(0, 1, (1, 11)),
                        [VoxelCoord(p=1, h=1, w=2, d1=0.2, d2=0.0)],
                        part, 3, 3, AggregationParams())
        g = rng.standard_normal((11, 2, 3, 3))
        book = vol.bookkeeping
        book.learn_dim = 8
        grads = aggregate_backward(g, book)
        np.testing.assert_allclose(grads[0], g[:8, 1, 1, 2], rtol=1e-12)

    def test_equal_weights_split_evenly(self, rng):
        part = FrustumPartition(near=1.0, far=3.0, planes=1)
        coords = [VoxelCoord(p=0, h=0, w=0, d1=0.2, d2=0.0),
                  VoxelCoord(p=0, h=0, w=0, d1=0.2, d2=0.0)]
        vol = aggregate(rng.uniform(0, 1, (2, 4)), coords, part, 1, 1,
                        AggregationParams())
        g = rng.standard_normal((4, 1, 1, 1))
        grads = aggregate_backward(g, vol.bookkeeping)
        np.testing.assert_allclose(grads[0], grads[1], rtol=1e-12)
        np.testing.assert_allclose(grads[0], g[:, 0, 0, 0] / 2.0, rtol=1e-12)

    def test_matches_finite_differences(self, rng):
        grid = (2, 3, 3)
        part = FrustumPartition(near=1.0, far=3.0, planes=2)
        n = 15
        coords, _ = random_coords(rng, n, grid)
        feats = rng.uniform(-1, 1, (n, 4))
        probe = rng.standard_normal((4,) + grid)  # fixed downstream weights

        def scalar():
            vol = aggregate(feats, coords, part, grid[1], grid[2],
                            AggregationParams(a=1.2, b=0.6))
            return float((vol.values.data * probe).sum())

        vol = aggregate(feats, coords, part, grid[1], grid[2],
                        AggregationParams(a=1.2, b=0.6))
        analytic = aggregate_backward(probe, vol.bookkeeping)
        numeric = central_difference(scalar, [feats], step=1e-4)[0]
        assert_close_rel(analytic, numeric, rtol=1e-5)


class TestBuildVolume:
    def test_one_point_per_pixel_single_plane(self):
        from mprender.camera import back_project, make_camera
        view = make_camera(8, 8, focal=10.0)
        pts = np.array([back_project(w + 0.5, h + 0.5, 2.0, view)
                        for h in range(8) for w in range(8)])
        store = PointCloudStore(positions=pts, rgb=np.full((64, 3), 0.5))
        vol = build_volume(store, view, AggregationParams(), planes=4)
        nonzero_planes = {p for p in range(4) if vol.weight_sum[p].any()}
        assert len(nonzero_planes) == 1
        plane = nonzero_planes.pop()
        assert (vol.weight_sum[plane] > 0).all()

    def test_inclusion_count_matches_brute_force(self, rng, simple_view):
        store = random_store(rng, n=300, spread=3.0)  # some points miss the image
        part = FrustumPartition(near=1.5, far=4.0, planes=4)
        vol = build_volume(store, simple_view, AggregationParams(), partition=part)
        count = 0
        for pos in store.positions:  # brute-force visibility
            u, v, z, ok = project_points(pos[None], simple_view)
            if ok[0] and 0 <= u[0] < 64 and 0 <= v[0] < 64 and part.near <= z[0] <= part.far:
                count += 1
        assert vol.n_contributing == count

    def test_empty_view_error(self, rng):
        store = random_store(rng, n=10, z_range=(-5.0, -1.0))
        with pytest.raises(EmptyViewError):
            from mprender.camera import make_camera
            build_volume(store, make_camera(16, 16, 10.0), AggregationParams())

    def test_permutation_tolerance_and_deterministic_mode(self, rng, simple_view):
        store = random_store(rng, n=200)
        perm = rng.permutation(200)
        shuffled = PointCloudStore(positions=store.positions[perm],
                                   rgb=store.rgb[perm],
                                   features=store.features[perm])
        kw = dict(params=AggregationParams(), planes=4)
        a = build_volume(store, simple_view, kw["params"], planes=4)
        b = build_volume(shuffled, simple_view, kw["params"], planes=4)
        assert np.abs(a.values.data - b.values.data).max() < 1e-6
        det_a = build_volume(store, simple_view, kw["params"], planes=4,
                             deterministic=True)
        det_b = build_volume(shuffled, simple_view, kw["params"], planes=4,
                             deterministic=True)
        np.testing.assert_array_equal(det_a.values.data, det_b.values.data)

    def test_gradient_reaches_only_learnable_slots(self, rng, simple_view):
        store = random_store(rng, n=40)
        tape = Tape()
        feats = Tensor(store.features, tape=tape)
        vol = build_volume(store, simple_view, AggregationParams(), planes=4,
                           features=feats)
        from mprender import autodiff as ad
        tape.backward(ad.tsum(vol.values))
        assert feats.grad.shape == (40, 8)
        assert np.abs(feats.grad).max() > 0

    def test_min_depth_point_has_unit_depth_term(self, rng, simple_view):
        # per-voxel nearest point must carry d2 == 0, i.e. weight (1-d1)^a
        store = random_store(rng, n=500)
        vol = build_volume(store, simple_view, AggregationParams(a=0.0, b=7.0),
                           planes=2)
        book = vol.bookkeeping
        for cell in np.unique(book.voxel_idx):
            w_cell = book.weights[book.voxel_idx == cell]
            assert w_cell.max() == pytest.approx(1.0, abs=1e-12)

    def test_dump_round_trip(self, rng, simple_view, tmp_path):
        store = random_store(rng, n=60)
        vol = build_volume(store, simple_view, AggregationParams(), planes=4)
        path = tmp_path / "vol.fvol"
        save_volume_dump(vol, path)
        loaded = load_volume_dump(path)
        assert loaded.shape == (11, 4, 64, 64)
        np.testing.assert_allclose(loaded, vol.values.data.astype(np.float32),
                                   rtol=1e-6)

    def test_dump_truncated(self, rng, simple_view, tmp_path):
        store = random_store(rng, n=10)
        vol = build_volume(store, simple_view, AggregationParams(), planes=2)
        path = tmp_path / "vol.fvol"
        save_volume_dump(vol, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ContractViolation, match="truncated"):
            load_volume_dump(path)
