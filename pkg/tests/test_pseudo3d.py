from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oabev.camera import Camera, CameraPose
from oabev.errors import ConfigurationError, ShapeError
from oabev.foreground import ForegroundMask
from oabev.pseudo3d import (
    COUNT_CAP,
    POINT_RECORD,
    PseudoPointCloud,
    SparseVoxelGrid,
    VoxelGridSpec,
    generate_pseudo_points,
    read_point_records,
    voxelize,
)

SMALL = VoxelGridSpec((0.0, 4.0), (-2.0, 2.0), (-1.0, 1.0), 1.0, 0.5)


def cloud_of(points) -> PseudoPointCloud:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    return PseudoPointCloud(pts, np.zeros(n, dtype=np.int64), np.zeros((n, 2)), np.zeros(n, dtype=np.int64),
                            np.ones(n, dtype=bool))


def one_pixel_mask(H, W, v, u, owner=0) -> ForegroundMask:
    flags = np.zeros((H, W), dtype=bool)
    flags[v, u] = True
    return ForegroundMask(flags, np.where(flags, owner, -1))


class TestGeneratePoints:
    def test_empty_mask(self, cam):
        mask = ForegroundMask(np.zeros((48, 64), dtype=bool), np.full((48, 64), -1))
        assert len(generate_pseudo_points(np.full((48, 64), 5.0), mask, cam)) == 0

    def test_principal_point(self, cam):
        cloud = generate_pseudo_points(np.full((48, 64), 10.0), one_pixel_mask(48, 64, 24, 32), cam)
        np.testing.assert_array_equal(cloud.points, [[0.0, 0.0, 10.0]])
        np.testing.assert_array_equal(cloud.pixels, [[32.0, 24.0]])

    def test_ego_frame_and_metadata(self, forward_cam):
        depth = np.full((48, 64), 8.0)
        cloud = generate_pseudo_points(depth, one_pixel_mask(48, 64, 24, 32, owner=5), forward_cam, camera_index=3)
        np.testing.assert_allclose(cloud.points, [[8.0, 0.0, 1.0]], atol=1e-12)
        assert cloud.camera_index.tolist() == [3] and cloud.object_id.tolist() == [5]

    def test_one_point_per_foreground_pixel(self, cam, rng):
        flags = rng.uniform(size=(48, 64)) < 0.3
        mask = ForegroundMask(flags, np.where(flags, 1, -1))
        cloud = generate_pseudo_points(rng.uniform(1, 50, (48, 64)), mask, cam)
        assert len(cloud) == mask.n_foreground

    def test_pixels_without_depth_are_skipped(self, cam):
        flags = np.ones((48, 64), dtype=bool)
        depth = np.full((48, 64), 4.0)
        depth[0, :] = 0.0
        depth[1, :] = math.nan
        cloud = generate_pseudo_points(depth, ForegroundMask(flags, np.zeros((48, 64), dtype=np.int64)), cam)
        assert len(cloud) == 46 * 64

    def test_shape_mismatch(self, cam):
        mask = ForegroundMask(np.zeros((4, 4), dtype=bool), np.full((4, 4), -1))
        with pytest.raises(ShapeError):
            generate_pseudo_points(np.ones((4, 4)), mask, cam)

    def test_in_range_flag(self, cam):
        spec = VoxelGridSpec((-1.0, 1.0), (-1.0, 1.0), (0.0, 5.0), 0.5, 0.5)
        flags = np.zeros((48, 64), dtype=bool)
        flags[24, 32] = flags[24, 33] = True
        depth = np.full((48, 64), 3.0)
        depth[24, 33] = 9.0
        cloud = generate_pseudo_points(depth, ForegroundMask(flags, np.zeros((48, 64), dtype=np.int64)), cam, spec=spec)
        assert cloud.in_range.tolist() == [True, False]


class TestGridSpec:
    def test_shape(self):
        assert SMALL.shape == (4, 4, 4)
        assert VoxelGridSpec(cell_size_xy=0.4, cell_size_z=0.4).shape == (256, 256, 20)

    def test_non_divisible_range(self):
        with pytest.raises(ConfigurationError):
            VoxelGridSpec((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0.3, 0.5)

    def test_scaled_and_downsampled(self):
        spec = VoxelGridSpec(cell_size_xy=0.4, cell_size_z=0.4).scaled(0.5)
        assert spec.shape == (128, 128, 20)
        assert spec.downsampled(8).shape == (16, 16, 3)

    def test_voxel_index_brute_force(self, rng):
        pts = rng.uniform([-0.5, -2.5, -1.2], [4.5, 2.5, 1.2], size=(500, 3))
        idx, inside = SMALL.voxel_index(pts)
        for p, i, ok in zip(pts, idx, inside):
            want = [math.floor((p[a] - SMALL.origin[a]) / SMALL.cell[a]) for a in range(3)]
            assert list(i) == want
            assert ok == all(0 <= want[a] < SMALL.shape[a] for a in range(3))

    def test_range_max_is_outside(self):
        _, inside = SMALL.voxel_index(np.array([[4.0, 0.0, 0.0], [0.0, 0.0, 0.0], [3.9999, 1.9999, 0.9999]]))
        assert inside.tolist() == [False, True, True]


class TestVoxelize:
    def test_point_at_voxel_center(self):
        grid = voxelize(cloud_of([0.5, -1.5, -0.75]), SMALL)
        assert len(grid) == 1
        np.testing.assert_array_equal(grid.coords, [[0, 0, 0]])
        np.testing.assert_allclose(grid.features, [[1.0 / COUNT_CAP, 0.5, 0.5, 0.5]], atol=1e-12)

    def test_empty(self):
        grid = voxelize(PseudoPointCloud(), SMALL)
        assert len(grid) == 0 and grid.channels == 4

    def test_symmetric_pair(self):
        grid = voxelize(cloud_of([[1.2, 0.3, 0.1], [1.8, 0.7, 0.4]]), SMALL)
        np.testing.assert_allclose(grid.features, [[2.0 / COUNT_CAP, 0.5, 0.5, 0.5]], atol=1e-12)

    def test_count_saturates(self):
        grid = voxelize(cloud_of(np.tile([0.5, 0.5, 0.25], (100, 1))), SMALL)
        assert grid.features[0, 0] == 1.0

    def test_out_of_range_dropped_and_counted(self):
        grid = voxelize(cloud_of([[0.5, 0.5, 0.25], [10.0, 0.0, 0.0], [4.0, 0.0, 0.0]]), SMALL)
        assert len(grid) == 1 and grid.dropped_points == 2

    def test_all_points_out_of_range(self):
        grid = voxelize(cloud_of([[10.0, 0.0, 0.0]]), SMALL)
        assert len(grid) == 0 and grid.dropped_points == 1

    def test_coordinates_sorted_and_unique(self, rng):
        grid = voxelize(cloud_of(rng.uniform([0, -2, -1], [4, 2, 1], (300, 3))), SMALL)
        keys = [tuple(c) for c in grid.coords]
        assert keys == sorted(set(keys))


@settings(max_examples=100, deadline=None)
@given(
    pts=hnp.arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=st.floats(-3.0, 5.0)),
    seed=st.integers(0, 1000),
)
def test_voxelize_permutation_invariant(pts, seed):
    perm = np.random.default_rng(seed).permutation(len(pts))
    a = voxelize(cloud_of(pts), SMALL)
    b = voxelize(cloud_of(pts[perm]), SMALL)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.features, b.features)
    _, inside = SMALL.voxel_index(pts)
    assert len(a) <= int(inside.sum())
    assert a.dropped_points == int((~inside).sum())


class TestSparseGrid:
    def test_dense_round_trip(self, rng):
        active = rng.uniform(size=(4, 5, 3)) < 0.3
        dense = rng.normal(size=(4, 5, 3, 2)) * active[..., None]
        grid = SparseVoxelGrid.from_dense(dense, active)
        d2, a2 = grid.to_dense()
        np.testing.assert_array_equal(d2, dense)
        np.testing.assert_array_equal(a2, active)

    def test_unsorted_input_is_sorted(self):
        grid = SparseVoxelGrid((3, 3, 3), [[2, 0, 0], [0, 1, 2]], [[1.0], [2.0]])
        np.testing.assert_array_equal(grid.coords, [[0, 1, 2], [2, 0, 0]])
        np.testing.assert_array_equal(grid.features, [[2.0], [1.0]])

    def test_rejects_duplicates_and_out_of_bounds(self):
        with pytest.raises(ShapeError):
            SparseVoxelGrid((3, 3, 3), [[1, 1, 1], [1, 1, 1]], [[1.0], [2.0]])
        with pytest.raises(ShapeError):
            SparseVoxelGrid((3, 3, 3), [[3, 0, 0]], [[1.0]])


class TestPointRecords:
    def test_round_trip(self, tmp_path, cam, rng):
        flags = rng.uniform(size=(48, 64)) < 0.05
        cloud = generate_pseudo_points(rng.uniform(1, 20, (48, 64)), ForegroundMask(flags, np.where(flags, 4, -1)), cam, 2)
        path = tmp_path / "points.bin"
        cloud.write(path)
        rec = read_point_records(path)
        assert path.stat().st_size == len(cloud) * POINT_RECORD.itemsize == len(cloud) * 26
        np.testing.assert_array_equal(rec["camera_index"], 2)
        np.testing.assert_array_equal(rec["object_id"], 4)
        np.testing.assert_allclose(np.stack([rec["x"], rec["y"], rec["z"]], axis=1), cloud.points, rtol=1e-6)
        np.testing.assert_array_equal(np.stack([rec["u"], rec["v"]], axis=1), cloud.pixels)


class TestContainment:
    def test_oracle_scene_points_inside_owner_boxes(self, oracle_run):
        assert oracle_run.n_points > 1000
        assert oracle_run.containment >= 0.95

    def test_points_on_owner_surface(self, oracle_run):
        scene, cloud = oracle_run.scene, oracle_run.cloud
        on_owner = 0
        for box in scene.boxes:
            sel = cloud.object_id == box.object_id
            on_owner += int(np.count_nonzero(box.surface_distance(cloud.points[sel]) <= 1e-6))
        assert on_owner / len(cloud) >= 0.95
