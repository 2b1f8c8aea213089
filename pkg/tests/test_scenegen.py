from __future__ import annotations

import math

import numpy as np
import pytest

from oabev.camera import CameraRig, surround_rig, to_ego, unproject_many
from oabev.errors import BoundsError, ConfigurationError, GenerationError
from oabev.pseudo3d import VoxelGridSpec
from oabev.scenegen import (
    NO_DEPTH,
    Box3D,
    SceneSpec,
    SyntheticScene,
    bev_ground_truth,
    format_boxes_3d,
    generate_scene,
    oracle_boxes_2d,
    parse_boxes_3d,
    pixel_rays,
    ray_box_depth,
    rects_overlap,
    render_depth,
    render_depth_with_ids,
)

GRID = VoxelGridSpec((-8.0, 8.0), (-8.0, 8.0), (-2.0, 4.0), 1.0, 1.0)


def scene_of(rig: CameraRig, *boxes: Box3D) -> SyntheticScene:
    return SyntheticScene(rig=rig, boxes=list(boxes), grid=GRID)


def brute_force_depth(origin, direction, box: Box3D) -> float:
    """Nearest positive hit over the six face planes, checked one face at a time."""
    o = box.to_local(origin)
    d = direction @ box.rotation
    best = math.inf
    for axis in range(3):
        if d[axis] == 0:
            continue
        for sign in (-1.0, 1.0):
            t = (sign * box.half[axis] - o[axis]) / d[axis]
            if t <= 0:
                continue
            p = o + t * d
            others = [a for a in range(3) if a != axis]
            if all(abs(p[a]) <= box.half[a] + 1e-12 for a in others):
                best = min(best, t)
    return best


class TestRender:
    def test_no_boxes_is_all_background(self, forward_rig):
        depth, ids = render_depth_with_ids(scene_of(forward_rig), 0)
        assert np.all(depth == NO_DEPTH) and np.all(ids == -1)

    def test_frontal_face_has_constant_depth(self, forward_rig):
        box = Box3D((10.5, 0.0, 1.0), (1.0, 2.0, 2.0), 0.0, 0)
        depth, ids = render_depth_with_ids(scene_of(forward_rig, box), 0)
        hit = ids == 0
        assert hit.sum() > 100
        np.testing.assert_allclose(depth[hit], 10.0, rtol=0, atol=1e-12)
        assert depth[24, 32] == pytest.approx(10.0, abs=1e-12)

    def test_nearer_box_wins(self, forward_rig):
        near = Box3D((6.0, 0.0, 1.0), (1.0, 1.0, 1.0), 0.0, 1)
        far = Box3D((12.0, 0.0, 1.0), (1.0, 6.0, 4.0), 0.0, 2)
        depth, ids = render_depth_with_ids(scene_of(forward_rig, far, near), 0)
        assert ids[24, 32] == 1 and depth[24, 32] == pytest.approx(5.5, abs=1e-12)
        assert ids[24, 12] == 2 and depth[24, 12] == pytest.approx(11.5, abs=1e-12)

    def test_box_behind_camera_is_invisible(self, forward_rig):
        depth = render_depth(scene_of(forward_rig, Box3D((-10.0, 0.0, 1.0), (2.0, 2.0, 2.0), 0.0, 0)), 0)
        assert np.all(depth == NO_DEPTH)

    def test_matches_brute_force(self, forward_rig, rng):
        cam = forward_rig[0]
        box = Box3D((9.0, 0.7, 0.9), (3.0, 2.0, 1.5), 0.6, 0)
        depth, ids = render_depth_with_ids(scene_of(forward_rig, box), 0)
        dirs = pixel_rays(cam) @ cam.pose.rotation.T
        for v, u in zip(rng.integers(0, 48, 400), rng.integers(0, 64, 400)):
            want = brute_force_depth(cam.pose.translation, dirs[v, u], box)
            if math.isinf(want):
                assert ids[v, u] == -1
            else:
                assert depth[v, u] == pytest.approx(want, abs=1e-9)

    def test_points_lie_on_owner_surface(self):
        rig = surround_rig(width=96, height=48)
        scene = generate_scene(SceneSpec(box_count=6), 3, rig)
        for i, cam in enumerate(rig):
            depth, ids = render_depth_with_ids(scene, i)
            v, u = np.nonzero(ids >= 0)
            pts = to_ego(unproject_many(u.astype(float), v.astype(float), depth[v, u], cam.intrinsics), cam.pose)
            for oid in np.unique(ids[v, u]):
                sel = ids[v, u] == oid
                assert np.all(scene.box_by_id()[oid].surface_distance(pts[sel]) <= 1e-6)

    def test_ray_box_parallel_ray(self):
        box = Box3D((5.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0, 0)
        t = ray_box_depth(np.zeros(3), np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), box)
        np.testing.assert_array_equal(t, [4.0, 4.0])
        assert np.isinf(ray_box_depth(np.array([0.0, 3.0, 0.0]), np.array([1.0, 0.0, 0.0]), box))

    def test_camera_index_bounds(self, forward_rig):
        with pytest.raises(BoundsError):
            render_depth(scene_of(forward_rig), 1)
        with pytest.raises(BoundsError):
            oracle_boxes_2d(scene_of(forward_rig), -1)


class TestBoxes2D:
    def test_axis_aligned_hull_by_hand(self, forward_rig):
        box = Box3D((10.0, 0.0, 1.0), (2.0, 2.0, 2.0), 0.0, 4)
        (b,) = oracle_boxes_2d(scene_of(forward_rig, box), 0)
        assert b.object_id == 4 and b.object_center_depth == pytest.approx(10.0)
        assert (b.x_min, b.y_min, b.x_max, b.y_max) == pytest.approx((32 - 100 / 9, 24 - 10.0, 32 + 100 / 9, 24 + 10.0))

    def test_hull_contains_rendered_pixels(self, forward_rig):
        box = Box3D((8.0, -1.0, 0.8), (3.0, 1.8, 1.6), 0.9, 0)
        scene = scene_of(forward_rig, box)
        (b,) = oracle_boxes_2d(scene, 0)
        _, ids = render_depth_with_ids(scene, 0)
        v, u = np.nonzero(ids == 0)
        assert np.all((u >= b.x_min - 1e-9) & (u <= b.x_max + 1e-9))
        assert np.all((v >= b.y_min - 1e-9) & (v <= b.y_max + 1e-9))

    def test_clipped_to_image(self, forward_rig):
        box = Box3D((3.0, 0.0, 1.0), (1.0, 8.0, 4.0), 0.0, 0)
        (b,) = oracle_boxes_2d(scene_of(forward_rig, box), 0)
        assert (b.x_min, b.y_min, b.x_max, b.y_max) == (0.0, 0.0, 64.0, 48.0)

    def test_behind_and_outside_are_skipped(self, forward_rig):
        behind = Box3D((-5.0, 0.0, 1.0), (1.0, 1.0, 1.0), 0.0, 0)
        aside = Box3D((2.0, 20.0, 1.0), (1.0, 1.0, 1.0), 0.0, 1)
        assert oracle_boxes_2d(scene_of(forward_rig, behind, aside), 0) == []


class TestBevGroundTruth:
    def test_box_inside_one_cell(self):
        occ, cents = bev_ground_truth(scene_of(surround_rig(), Box3D((0.5, 0.5, 0.5), (0.5, 0.5, 1.0), 0.0, 0)), GRID)
        assert occ.sum() == 1 and occ[8, 8]
        np.testing.assert_array_equal(cents[0], [0.5, 0.5])

    def test_aligned_box_covers_n_by_m(self):
        box = Box3D((1.0, -0.5, 0.5), (4.0, 3.0, 1.0), 0.0, 0)  # x in [-1, 3], y in [-2, 1]
        occ, _ = bev_ground_truth(scene_of(surround_rig(), box), GRID)
        assert occ.sum() == 4 * 3
        assert occ[7:11, 6:9].all()

    def test_quarter_turn_of_square_is_unchanged(self):
        a = Box3D((2.3, -1.7, 0.5), (2.6, 2.6, 1.0), 0.0, 0)
        b = Box3D((2.3, -1.7, 0.5), (2.6, 2.6, 1.0), math.pi / 2, 0)
        occ_a, _ = bev_ground_truth(scene_of(surround_rig(), a), GRID)
        occ_b, _ = bev_ground_truth(scene_of(surround_rig(), b), GRID)
        np.testing.assert_array_equal(occ_a, occ_b)

    def test_rotated_box_cells_overlap_footprint(self):
        box = Box3D((1.1, 0.4, 0.5), (4.0, 1.5, 1.0), 0.7, 0)
        occ, _ = bev_ground_truth(scene_of(surround_rig(), box), GRID)
        # sample the footprint densely: every sample's cell must be occupied
        local = np.stack(np.meshgrid(np.linspace(-2, 2, 81), np.linspace(-0.75, 0.75, 31)), -1).reshape(-1, 2)
        pts = local @ box.rotation[:2, :2].T + np.array(box.center[:2])
        ix = np.floor(pts[:, 0] + 8.0).astype(int)
        iy = np.floor(pts[:, 1] + 8.0).astype(int)
        assert occ[ix, iy].all()

    def test_empty_scene(self):
        occ, cents = bev_ground_truth(scene_of(surround_rig()), GRID)
        assert not occ.any() and cents == {}


class TestGenerate:
    def test_zero_boxes(self):
        scene = generate_scene(SceneSpec(box_count=0), 1, surround_rig(width=48, height=32))
        assert scene.boxes == []
        assert all(np.all(d == NO_DEPTH) for d in scene.depth_maps)
        assert all(b == [] for b in scene.boxes_2d)

    def test_deterministic(self):
        rig = surround_rig()
        a = generate_scene(SceneSpec(), 42, rig)
        b = generate_scene(SceneSpec(), 42, rig)
        assert a.boxes == b.boxes
        assert generate_scene(SceneSpec(), 43, rig).boxes != a.boxes

    def test_constraints(self):
        spec = SceneSpec(box_count=8)
        scene = generate_scene(spec, 5, surround_rig())
        grid = scene.grid
        assert len(scene.boxes) == 8
        for box in scene.boxes:
            assert grid.x_range[0] <= box.footprint()[:, 0].min() and box.footprint()[:, 0].max() <= grid.x_range[1]
            assert grid.y_range[0] <= box.footprint()[:, 1].min() and box.footprint()[:, 1].max() <= grid.y_range[1]
            assert box.center[2] == pytest.approx(box.size[2] / 2)
            assert math.hypot(*box.center[:2]) >= spec.min_distance
        for i, a in enumerate(scene.boxes):
            for b in scene.boxes[i + 1 :]:
                assert not rects_overlap(a.footprint(), b.footprint())

    def test_impossible_layout_raises(self):
        with pytest.raises(GenerationError):
            generate_scene(SceneSpec(box_count=200, max_retries=300), 0, surround_rig())

    @pytest.mark.parametrize(
        "kwargs", [dict(box_count=-1), dict(length_range=(2.0, 1.0)), dict(width_range=(0.0, 1.0)), dict(range_scale=0.0)]
    )
    def test_spec_validation(self, kwargs):
        with pytest.raises(ConfigurationError):
            SceneSpec(**kwargs)


class TestBox3D:
    def test_invalid_size(self):
        with pytest.raises(ConfigurationError):
            Box3D((0, 0, 0), (1.0, 0.0, 1.0), 0.0, 0)

    def test_yaw_wrapped(self):
        assert Box3D((0, 0, 0), (1, 1, 1), 3 * math.pi / 2, 0).yaw == pytest.approx(-math.pi / 2)

    def test_contains_and_margin(self):
        box = Box3D((0, 0, 1), (2, 2, 2), 0.0, 0)
        assert box.contains(np.array([[1.0, 1.0, 2.0]])).all()
        assert not box.contains(np.array([[1.1, 0.0, 1.0]])).any()
        assert box.contains(np.array([[1.1, 0.0, 1.0]]), margin=0.2).all()

    def test_surface_distance(self):
        box = Box3D((0, 0, 0), (2, 2, 2), 0.0, 0)
        np.testing.assert_allclose(box.surface_distance(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]])), [1, 0, 2])

    def test_file_round_trip(self):
        boxes = generate_scene(SceneSpec(), 11, surround_rig()).boxes
        assert parse_boxes_3d(format_boxes_3d(boxes)) == boxes

    @pytest.mark.parametrize("text", ["0 1 2 3 4 5 6", "x 0 0 0 1 1 1 0", "0 0 0 0 1 1 nan 0", "0 0 0 0 1 -1 1 0"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigurationError):
            parse_boxes_3d(text)
