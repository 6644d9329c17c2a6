"""Local occupancy map tests.

The log-odds ledger is checked against an independent fold of the scripted
hit/miss event sequence (bit-exact) and against the closed-form count
formula (to float re-association error).  Voxel extraction is checked
against a scalar-arithmetic rasterizer that shares no code with the
vectorized implementation.
"""

import math

import numpy as np
import pytest

from safl.dataset import PointCloud, Pose, rotation_z
from safl.mapping import (
    LocalOctree,
    OctreeConfig,
    extract_voxel_grid,
    mapper_throughput,
    project_top_view,
)

L_HIT = math.log(0.7 / 0.3)
L_MISS = math.log(0.4 / 0.6)


def cloud_of(*sensor_points):
    pts = np.array(
        [[x, y, z, 0.5] for x, y, z in sensor_points], dtype=np.float32
    )
    return PointCloud(pts.reshape(-1, 4))


def identity_pose(x=0.0, y=0.0, z=0.0, yaw=0.0):
    return Pose(rotation_z(yaw), np.array([x, y, z], dtype=np.float64))


class SingleLeafScript:
    """Drive hits and misses onto one chosen leaf with single-point scans.

    The sensor sits at a cell center on the +x axis of the target leaf
    (center (2.2, 0.2, 0.2) at 0.4 m resolution).  A scan ending exactly at
    the target center scores a hit there; a scan ending two cells beyond
    traverses the target and scores a miss there.
    """

    target = np.array([2.2, 0.2, 0.2])

    def __init__(self, config=None):
        self.config = config or OctreeConfig()
        self.tree = LocalOctree(self.config)
        self.pose = identity_pose(0.2, 0.2, 0.2)

    def hit(self):
        self.tree.update_with_scan(cloud_of((2.0, 0.0, 0.0)), self.pose)

    def miss(self):
        self.tree.update_with_scan(cloud_of((2.8, 0.0, 0.0)), self.pose)

    def read(self):
        return self.tree.log_odds_at(self.target)


class TestLogOddsLedger:
    def test_single_hit_equals_ln_7_over_3(self):
        script = SingleLeafScript()
        script.hit()
        assert script.read() == L_HIT
        assert script.tree.occupancy_probability_at(
            script.target
        ) == pytest.approx(0.7, abs=1e-12)

    def test_hit_then_miss_hand_arithmetic(self):
        script = SingleLeafScript()
        script.hit()
        script.miss()
        assert script.read() == pytest.approx(0.4418327522790392, abs=1e-12)
        assert script.tree.occupancy_probability_at(
            script.target
        ) == pytest.approx(0.6086956521739131, abs=1e-9)

    def test_scripted_sequences_match_event_fold(self):
        """Any hit/miss interleaving equals the float64 fold of its events."""
        rng = np.random.default_rng(0)
        for _ in range(25):
            script = SingleLeafScript()
            expected = 0.0
            for event in rng.integers(0, 2, size=rng.integers(1, 25)):
                if event:
                    script.hit()
                    expected += L_HIT
                else:
                    script.miss()
                    expected += L_MISS
            clamped = min(max(expected, script.config.l_min),
                          script.config.l_max)
            assert script.read() == clamped

    def test_counts_formula_within_float_reassociation(self):
        """k hits + m misses ~ k*l_hit + m*l_miss up to summation order."""
        rng = np.random.default_rng(1)
        for _ in range(10):
            script = SingleLeafScript()
            k, m = rng.integers(0, 10, size=2)
            order = [1] * int(k) + [0] * int(m)
            rng.shuffle(order)
            for event in order:
                script.hit() if event else script.miss()
            if k + m == 0:
                assert script.read() is None
            else:
                formula = min(
                    max(k * L_HIT + m * L_MISS, script.config.l_min),
                    script.config.l_max,
                )
                assert script.read() == pytest.approx(formula, abs=1e-12)

    def test_clamps_saturate_exactly(self):
        script = SingleLeafScript()
        for _ in range(20):
            script.hit()
        assert script.read() == script.config.l_max
        script = SingleLeafScript()
        for _ in range(20):
            script.miss()
        assert script.read() == script.config.l_min

    def test_clamp_is_a_read_bound_not_a_forgetting_rule(self):
        """Raw evidence keeps accumulating while the reading saturates."""
        script = SingleLeafScript()
        for _ in range(12):
            script.hit()  # raw ~10.2, read clamps to 3.5
        assert script.read() == script.config.l_max
        for _ in range(8):
            script.miss()  # raw back down to ~7.0, still above the clamp
        assert script.read() == script.config.l_max
        remaining = 12 * L_HIT + 8 * L_MISS
        for _ in range(9):
            script.miss()
            remaining += L_MISS
        assert script.read() == pytest.approx(remaining, abs=1e-12)

    def test_unknown_leaf_reads_none(self):
        tree = LocalOctree()
        assert tree.log_odds_at([1.0, 1.0, 1.0]) is None
        assert tree.occupancy_probability_at([1.0, 1.0, 1.0]) is None


class TestCulling:
    def test_no_leaf_survives_beyond_cull_radius(self):
        """After 1000 random frames every leaf center is within 30 m."""
        config = OctreeConfig()
        tree = LocalOctree(config)
        rng = np.random.default_rng(42)
        position = np.zeros(3)
        for frame in range(1000):
            position = position + rng.uniform(-1.5, 1.5, size=3)
            position[2] = 0.0
            pts = rng.uniform(-45.0, 45.0, size=(80, 3))
            cloud = PointCloud(
                np.hstack([pts, np.full((80, 1), 0.5)]).astype(np.float32)
            )
            pose = Pose(rotation_z(rng.uniform(-3, 3)), position.copy())
            tree.update_with_scan(cloud, pose)
            if frame % 100 == 99:
                centers, _ = tree.leaf_arrays()
                d = np.linalg.norm(centers - position, axis=1)
                assert d.max() <= config.cull_radius + 1e-9
        centers, log_odds = tree.leaf_arrays()
        assert len(centers) > 0
        d = np.linalg.norm(centers - position, axis=1)
        assert d.max() <= config.cull_radius + 1e-9
        assert log_odds.min() >= config.l_min
        assert log_odds.max() <= config.l_max

    def test_revisiting_restores_forgotten_space(self):
        """Leaves culled after moving away can be re-observed on return."""
        config = OctreeConfig(cull_radius=10.0)
        tree = LocalOctree(config)
        home = identity_pose(0.2, 0.2, 0.2)
        target = np.array([2.2, 0.2, 0.2])
        tree.update_with_scan(cloud_of((2.0, 0.0, 0.0)), home)
        assert tree.log_odds_at(target) == L_HIT
        far = identity_pose(100.0, 0.2, 0.2)
        tree.update_with_scan(cloud_of((2.0, 0.0, 0.0)), far)
        assert tree.log_odds_at(target) is None
        tree.update_with_scan(cloud_of((2.0, 0.0, 0.0)), home)
        assert tree.log_odds_at(target) == L_HIT


def scalar_rasterize(centers, pose, radius, grid_size, frame):
    """Scalar-arithmetic reference for extract_voxel_grid."""
    cell = 2.0 * radius / grid_size
    grid = np.zeros((grid_size, grid_size, grid_size), dtype=np.uint8)
    yaw = pose.yaw()
    c, s = math.cos(yaw), math.sin(yaw)
    for cx, cy, cz in centers:
        dx = cx - pose.translation[0]
        dy = cy - pose.translation[1]
        dz = cz - pose.translation[2]
        if frame == "yaw":
            dx, dy = c * dx + s * dy, -s * dx + c * dy
        ix = math.floor((dx + radius) / cell)
        iy = math.floor((dy + radius) / cell)
        iz = math.floor((dz + radius) / cell)
        if 0 <= ix < grid_size and 0 <= iy < grid_size and 0 <= iz < grid_size:
            grid[ix, iy, iz] = 1
    return grid


def random_tree(seed, n_frames=4):
    rng = np.random.default_rng(seed)
    tree = LocalOctree(OctreeConfig())
    pose = identity_pose(0.0, 0.0, 0.0, yaw=rng.uniform(-3, 3))
    for _ in range(n_frames):
        pts = rng.uniform(-25.0, 25.0, size=(60, 3))
        cloud = PointCloud(
            np.hstack([pts, np.full((60, 1), 0.5)]).astype(np.float32)
        )
        pose = Pose(
            rotation_z(rng.uniform(-3, 3)), rng.uniform(-2, 2, size=3)
        )
        tree.update_with_scan(cloud, pose)
    return tree, pose


class TestVoxelExtraction:
    def test_single_leaf_lands_in_hand_computed_cell(self):
        script = SingleLeafScript()
        for _ in range(3):
            script.hit()
        grid = extract_voxel_grid(script.tree, grid_size=30)
        assert grid.cell_size == 2.0
        # leaf center (2.2, .2, .2) relative to sensor (0.2, .2, .2): (2, 0, 0)
        assert grid.occupancy.sum() == 1
        assert grid.occupancy[16, 15, 15] == 1

    def test_yaw_frame_rotates_into_heading(self):
        script = SingleLeafScript()
        for _ in range(3):
            script.hit()
        turned = identity_pose(0.2, 0.2, 0.2, yaw=math.pi / 2)
        grid = extract_voxel_grid(script.tree, grid_size=30, pose=turned)
        # relative (2, 0, 0) lands at (~0, -2) once rotated into the heading
        assert grid.occupancy.sum() == 1
        assert grid.occupancy[15, 14, 15] == 1

    def test_world_frame_ignores_heading(self):
        script = SingleLeafScript()
        for _ in range(3):
            script.hit()
        turned = identity_pose(0.2, 0.2, 0.2, yaw=math.pi / 2)
        grid = extract_voxel_grid(
            script.tree, grid_size=30, frame="world", pose=turned
        )
        assert grid.occupancy[16, 15, 15] == 1

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    @pytest.mark.parametrize("frame", ["yaw", "world"])
    def test_matches_scalar_rasterizer(self, seed, frame):
        tree, pose = random_tree(seed)
        for grid_size in (16, 32):
            grid = extract_voxel_grid(tree, grid_size=grid_size, frame=frame)
            expected = scalar_rasterize(
                tree.occupied_centers(), pose, tree.config.cull_radius,
                grid_size, frame,
            )
            np.testing.assert_array_equal(grid.occupancy, expected)

    def test_empty_tree_gives_zero_grid(self):
        grid = extract_voxel_grid(LocalOctree(), grid_size=8)
        assert grid.occupancy.sum() == 0

    def test_unknown_frame_rejected(self):
        with pytest.raises(ValueError, match="frame"):
            extract_voxel_grid(LocalOctree(), frame="pitch")

    def test_grid_spans_cull_cube(self):
        tree, _ = random_tree(7)
        for grid_size in (32, 64):
            grid = extract_voxel_grid(tree, grid_size=grid_size)
            assert grid.cell_size == pytest.approx(
                2 * tree.config.cull_radius / grid_size
            )


class TestTopView:
    def test_binary_projection_is_column_max(self):
        rng = np.random.default_rng(3)
        tree, _ = random_tree(5)
        grid = extract_voxel_grid(tree, grid_size=32)
        view = project_top_view(grid)
        expected = grid.occupancy.max(axis=2).astype(np.float32)
        np.testing.assert_array_equal(view.pixels, expected)
        assert view.pixels.shape == (32, 32)
        assert view.cell_size == grid.cell_size

    def test_height_mode_encodes_topmost_layer(self):
        from safl.mapping import VoxelGrid3D

        occ = np.zeros((8, 8, 8), dtype=np.uint8)
        occ[1, 2, 0] = 1
        occ[1, 2, 5] = 1  # top layer 5 -> (5+1)/8
        occ[4, 4, 7] = 1
        grid = VoxelGrid3D(occ, np.zeros(3), 1.0)
        view = project_top_view(grid, mode="height")
        assert view.pixels[1, 2] == pytest.approx(6 / 8)
        assert view.pixels[4, 4] == pytest.approx(1.0)
        assert view.pixels[0, 0] == 0.0

    def test_pooling_matches_block_loops(self):
        from safl.mapping import VoxelGrid3D

        rng = np.random.default_rng(9)
        occ = (rng.random((16, 16, 16)) < 0.1).astype(np.uint8)
        grid = VoxelGrid3D(occ, np.zeros(3), 60.0 / 16)
        view = project_top_view(grid, out_shape=(8, 8))
        native = occ.max(axis=2)
        for i in range(8):
            for j in range(8):
                block = native[2 * i:2 * i + 2, 2 * j:2 * j + 2]
                assert view.pixels[i, j] == block.max()
        assert view.cell_size == pytest.approx(2 * 60.0 / 16)

    def test_padding_centers_native_image(self):
        from safl.mapping import VoxelGrid3D

        occ = np.ones((4, 4, 4), dtype=np.uint8)
        grid = VoxelGrid3D(occ, np.zeros(3), 1.0)
        view = project_top_view(grid, out_shape=(8, 8))
        assert view.pixels.shape == (8, 8)
        assert view.pixels[2:6, 2:6].min() == 1.0
        assert view.pixels.sum() == 16.0

    def test_bad_shapes_rejected(self):
        from safl.mapping import VoxelGrid3D

        grid = VoxelGrid3D(np.zeros((6, 6, 6), np.uint8), np.zeros(3), 1.0)
        with pytest.raises(ValueError):
            project_top_view(grid, out_shape=(4, 4))  # 6 % 4 != 0
        with pytest.raises(ValueError):
            project_top_view(grid, out_shape=(4, 8))
        with pytest.raises(ValueError):
            project_top_view(grid, mode="slice")


class TestConfigValidation:
    def test_rejects_nonpositive_geometry(self):
        with pytest.raises(ValueError):
            OctreeConfig(leaf_resolution=0.0)
        with pytest.raises(ValueError):
            OctreeConfig(cull_radius=-1.0)

    def test_rejects_sign_errors(self):
        with pytest.raises(ValueError):
            OctreeConfig(l_hit=-0.5)
        with pytest.raises(ValueError):
            OctreeConfig(l_miss=0.5)
        with pytest.raises(ValueError):
            OctreeConfig(l_min=1.0)
        with pytest.raises(ValueError):
            OctreeConfig(occ_threshold=1.5)

    def test_occupancy_threshold_log_odds(self):
        assert OctreeConfig().occ_log_odds == 0.0
        assert OctreeConfig(occ_threshold=0.7).occ_log_odds == pytest.approx(
            L_HIT
        )


def test_throughput_smoke():
    """The timing harness runs; the 7 Hz gate lives in the acceptance suite."""
    rng = np.random.default_rng(0)
    clouds, poses = [], []
    for i in range(10):
        pts = rng.uniform(-25, 25, size=(500, 3))
        clouds.append(
            PointCloud(np.hstack([pts, np.full((500, 1), 0.5)]).astype(
                np.float32))
        )
        poses.append(identity_pose(0.5 * i))
    hz = mapper_throughput(clouds, poses)
    assert hz > 0
    with pytest.raises(ValueError, match="10"):
        mapper_throughput(clouds[:5], poses[:5])
