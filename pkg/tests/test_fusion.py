"""
Tests for multi-scale fusion, cascade connections and BEV compression.
"""

import logging
from dataclasses import replace

import numpy as np
import pytest

from src.fusion import (
    FusionPipeline,
    ScaleConfig,
    ScaleFixtures,
    bev_extent,
    build_scales,
    cascade,
    flatten_to_bev,
    make_fixtures,
    prepare_camera,
    run_mdu,
    run_scale,
    scale_voxel_size,
)
from src.geometry import InstanceMask
from src.gma import GmaParams
from src.mdu import FeatureMap, LinearParams
from src.sparseconv import ConvKernel
from src.validation import ValidationError
from src.voxelgrid import Modality, SparseVoxelTensor, add, downsample, scale, voxelize
from tests.conftest import make_tensor, random_tensor

ORIGIN = (-10.0, -10.0, 0.0)
BOUNDS = (-10.0, -10.0, 0.0, 10.0, 10.0, 20.0)
CHANNELS = 4


def identity_fixtures(channels=CHANNELS):
    depth_aware = np.hstack([np.eye(channels), np.zeros((channels, 1))])
    return ScaleFixtures(
        depth_aware=LinearParams(depth_aware, np.zeros(channels)),
        depth_gate=LinearParams(np.zeros((1, channels + 1)), np.zeros(1)),
        gma=GmaParams.identity(channels),
        lidar_kernel=ConvKernel.identity(channels),
    )


def frustum_cloud(rng, n=200):
    """Points at depth 5-6 that land inside pixels [41, 59) x [31, 49) of desk_camera."""
    z = rng.uniform(5.0, 6.0, n)
    x = z * rng.uniform(-0.09, 0.09, n)
    y = z * rng.uniform(-0.09, 0.09, n)
    return np.stack([x, y, z], axis=1)


@pytest.mark.unit
class TestCascade:
    """Test cases for cascade connections."""

    def test_first_scale_passes_through(self, rng):
        """Test the finest scale is unchanged."""
        f0 = random_tensor(rng, 20)
        assert cascade([f0])[0] is f0
        assert cascade([]) == []

    def test_telescopes_down_empty_scales(self, rng):
        """Test empty coarser scales receive D^i(F_0)."""
        f0 = random_tensor(rng, 40, extent=8)
        f1 = SparseVoxelTensor.empty(3, (2.0, 2.0, 2.0))
        f2 = SparseVoxelTensor.empty(3, (4.0, 4.0, 4.0))
        result = cascade([f0, f1, f2])
        expected = downsample(downsample(f0))
        assert np.array_equal(result[2].keys, expected.keys)
        assert np.array_equal(result[2].features, expected.features)

    def test_matches_recurrence(self, rng):
        """Test F^_2 = F_2 + D(F_1 + D(F_0))."""
        f0 = random_tensor(rng, 40, extent=8)
        f1 = random_tensor(rng, 20, extent=4, voxel_size=(2.0, 2.0, 2.0))
        f2 = random_tensor(rng, 5, extent=2, voxel_size=(4.0, 4.0, 4.0))
        result = cascade([f0, f1, f2])
        expected = add(f2, downsample(add(f1, downsample(f0))))
        assert np.array_equal(result[2].keys, expected.keys)
        assert np.allclose(result[2].features, expected.features)

    def test_linear_in_features(self, rng):
        """Test cascade(2 F) == 2 cascade(F) with fixed counts."""
        f0 = random_tensor(rng, 30, extent=8)
        f1 = random_tensor(rng, 15, extent=4, voxel_size=(2.0, 2.0, 2.0))
        once = cascade([f0, f1])
        twice = cascade([scale(f0, 2.0), scale(f1, 2.0)])
        assert np.allclose(twice[1].features, 2.0 * once[1].features)

    def test_geometry_mismatch(self, rng):
        """Test a scale that does not double the previous voxel size is rejected."""
        with pytest.raises(ValidationError, match="does not continue"):
            cascade([random_tensor(rng, 5), random_tensor(rng, 5)])


@pytest.mark.unit
class TestFlattenToBev:
    """Test cases for BEV height compression."""

    def test_single_voxel(self):
        """Test one voxel fills one cell."""
        bev = flatten_to_bev(make_tensor([[2, 3, 5]], [[1.0, -1.0]]))
        assert bev.data.tolist() == [[[1.0, -1.0]]]
        assert (bev.ix0, bev.iy0) == (2, 3)

    def test_column_maximum(self):
        """Test features 2 and 4 stacked in one column give 4."""
        bev = flatten_to_bev(make_tensor([[0, 0, 0], [0, 0, 4]], [[2.0], [4.0]]))
        assert bev.data[0, 0, 0] == 4.0

    def test_negative_columns_keep_maximum(self):
        """Test an all-negative column keeps its maximum, not zero."""
        bev = flatten_to_bev(make_tensor([[0, 0, 0], [0, 0, 1]], [[-3.0], [-1.0]]))
        assert bev.data[0, 0, 0] == -1.0

    def test_per_channel_maximum(self):
        """Test channels are maximized independently."""
        bev = flatten_to_bev(make_tensor([[0, 0, 0], [0, 0, 1]], [[1.0, 5.0], [3.0, 2.0]]))
        assert bev.data[0, 0].tolist() == [3.0, 5.0]

    def test_occupancy_matches_columns(self, rng):
        """Test occupied cells are exactly the occupied (ix, iy) columns."""
        t = random_tensor(rng, 60, extent=6)
        bev = flatten_to_bev(t, (0, 0, 6, 6))
        assert bev.occupied_cells() == {(ix, iy) for ix, iy, _ in t.keys.tolist()}

    def test_extent_crops(self):
        """Test voxels outside an explicit extent are ignored."""
        t = make_tensor([[0, 0, 0], [9, 9, 0]], [[1.0], [2.0]])
        bev = flatten_to_bev(t, (0, 0, 4, 4))
        assert bev.data.shape == (4, 4, 1)
        assert bev.occupied_cells() == {(0, 0)}

    def test_empty(self):
        """Test an empty tensor gives an empty map, or zeros for an explicit extent."""
        empty = SparseVoxelTensor.empty(2, (1.0, 1.0, 1.0))
        assert flatten_to_bev(empty).data.shape == (0, 0, 2)
        assert not np.any(flatten_to_bev(empty, (0, 0, 3, 2)).data)

    def test_bev_extent(self):
        """Test the grid covers the horizontal bounds."""
        assert bev_extent((0.5, 0.5, 0.5), (-2.0, -2.0, 0.0), (-2.0, -2.0, 0.0, 2.0, 2.0, 1.0)) == (0, 0, 8, 8)
        assert bev_extent((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), (-2.0, -3.0, 0.0, 2.0, 3.0, 1.0)) == (-2, -3, 4, 6)


@pytest.mark.unit
class TestFixtures:
    """Test cases for fixture and scale construction."""

    def test_make_fixtures_deterministic(self):
        """Test fixtures depend only on the seed."""
        a = make_fixtures(4, 3, 11)
        b = make_fixtures(4, 3, 11)
        c = make_fixtures(4, 3, 12)
        assert np.array_equal(a.scales[2].gma.fuse_kernel.weights, b.scales[2].gma.fuse_kernel.weights)
        assert not np.array_equal(a.lidar_embed.weight, c.lidar_embed.weight)
        assert a.channels == 4
        assert len(a.scales) == 3

    def test_fixture_shapes(self):
        """Test every fixture satisfies the GMA shape checks."""
        fixtures = make_fixtures(3, 2, 0)
        for s in fixtures.scales:
            s.gma.check(3)
            s.depth_aware.expect_shape(3, 4, "depth-aware")
            s.depth_gate.expect_shape(1, 4, "depth gate")

    def test_scale_voxel_size_doubles(self):
        """Test voxel sizes double per scale on every axis."""
        assert scale_voxel_size((0.075, 0.075, 0.2), 0) == (0.075, 0.075, 0.2)
        assert scale_voxel_size((0.075, 0.075, 0.2), 3) == (0.6, 0.6, 1.6)

    def test_build_scales(self):
        """Test per-scale retrieval settings are applied."""
        fixtures = make_fixtures(2, 2, 0)
        scales = build_scales((0.5, 0.5, 0.5), 2, 2, fixtures, [64, 16], [4.0, 2.0])
        assert [s.voxel_size for s in scales] == [(0.5, 0.5, 0.5), (1.0, 1.0, 1.0)]
        assert [(s.l, s.radius) for s in scales] == [(64, 4.0), (16, 2.0)]
        assert [s.name for s in scales] == ["C2", "C3"]

    def test_build_scales_without_depth_aware_features(self):
        """Test the MDU* switch reaches every scale."""
        fixtures = make_fixtures(2, 2, 0)
        scales = build_scales((0.5, 0.5, 0.5), 2, 2, fixtures, [8, 8], [4.0, 4.0], depth_aware_features=False)
        assert [s.depth_aware_features for s in scales] == [False, False]
        assert all(s.depth_aware_features for s in build_scales((0.5, 0.5, 0.5), 2, 2, fixtures, [8, 8], [4.0, 4.0]))


@pytest.mark.unit
class TestPrepareCamera:
    """Test cases for per-camera MDU inputs."""

    def test_seeds_and_depths(self, desk_camera, rng):
        """Test N seeds per instance each get K depths from that instance's refs."""
        points = frustum_cloud(rng)
        mask = InstanceMask.from_rects(1, [[40, 30, 60, 50]])
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        inputs = prepare_camera(desk_camera, [mask], points, [fmap], 10, 3, [0, 0])
        assert inputs.instances == 1
        assert len(inputs.seeds) == 10
        assert all(len(d) == 3 for d in inputs.depths)
        assert all(5.0 <= depth <= 6.0 for entries in inputs.depths for depth, _ in entries)
        assert len(inputs.references) == 200

    def test_instance_without_refs_skipped(self, desk_camera, rng, caplog):
        """Test an empty instance is skipped with a warning."""
        points = frustum_cloud(rng)
        masks = [InstanceMask.from_rects(1, [[40, 30, 60, 50]]), InstanceMask.from_rects(2, [[0, 0, 5, 5]])]
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        with caplog.at_level(logging.WARNING, logger="src.fusion"):
            inputs = prepare_camera(desk_camera, masks, points, [fmap], 4, 2, [0, 0])
        assert inputs.instances == 1
        assert len(inputs.seeds) == 4
        assert "Instance 2 has no reference points" in caplog.text

    def test_overlapping_masks_dedup_references(self, desk_camera, rng):
        """Test a ref inside two masks is counted once as a reference."""
        points = frustum_cloud(rng, 50)
        masks = [InstanceMask.from_rects(1, [[40, 30, 60, 50]]), InstanceMask.from_rects(2, [[40, 30, 60, 50]])]
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        inputs = prepare_camera(desk_camera, masks, points, [fmap], 3, 1, [0, 0])
        assert inputs.instances == 2
        assert len(inputs.references) == 50

    def test_negative_instance_ids(self, desk_camera, rng):
        """Test negative instance ids seed their own reproducible draws."""
        points = frustum_cloud(rng)
        masks = [InstanceMask.from_rects(-7, [[40, 30, 50, 50]]), InstanceMask.from_rects(7, [[50, 30, 60, 50]])]
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        inputs = prepare_camera(desk_camera, masks, points, [fmap], 5, 2, [0, 0])
        assert inputs.instances == 2
        assert [s.instance_id for s in inputs.seeds] == [-7] * 5 + [7] * 5
        again = prepare_camera(desk_camera, masks, points, [fmap], 5, 2, [0, 0])
        assert again.seeds == inputs.seeds


@pytest.mark.unit
class TestRunScale:
    """Test cases for one-scale MDU plus GMA-Conv."""

    def setup_method(self):
        self.scale = ScaleConfig(
            scale_id=0,
            voxel_size=(0.5, 0.5, 0.5),
            channels=CHANNELS,
            l=16,
            radius=4.0,
            fixtures=identity_fixtures(),
        )

    def test_no_camera(self, rng):
        """Test LiDAR-only input passes through identity fixtures."""
        points = rng.uniform(-5, 5, size=(100, 3)) + [0.0, 0.0, 10.0]
        lidar = voxelize(points, rng.normal(size=(100, CHANNELS)), (0.5, 0.5, 0.5), ORIGIN)
        result = run_scale(self.scale, lidar, [], BOUNDS)
        assert result.virtual_points == 0
        assert len(result.camera) == 0
        assert np.array_equal(result.fused.keys, lidar.keys)
        assert np.allclose(result.fused.features, lidar.features)

    def test_no_lidar(self, desk_camera, rng):
        """Test camera-only input stays ungated and tagged CAMERA."""
        mask = InstanceMask.from_rects(1, [[40, 30, 60, 50]])
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        inputs = prepare_camera(desk_camera, [mask], frustum_cloud(rng), [fmap], 10, 3, [0, 0])
        lidar = SparseVoxelTensor.empty(CHANNELS, (0.5, 0.5, 0.5), ORIGIN)
        result = run_scale(self.scale, lidar, [inputs], BOUNDS)
        assert result.virtual_points == 30
        assert np.all(result.fused.modality == int(Modality.CAMERA))
        assert np.array_equal(result.fused.keys, result.camera.keys)
        assert np.allclose(result.fused.features, result.camera.features)
        assert result.trace is not None
        assert np.all(result.trace.camera_lidar_rows == -1)

    def test_depth_aware_switch(self, desk_camera, rng):
        """Test MDU* decorates virtual points with the plain camera features."""
        mask = InstanceMask.from_rects(1, [[40, 30, 60, 50]])
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        inputs = prepare_camera(desk_camera, [mask], frustum_cloud(rng), [fmap], 10, 3, [0, 0])
        # a depth-aware map that only sees the sparse depth
        depth_only = np.hstack([np.zeros((CHANNELS, CHANNELS)), np.ones((CHANNELS, 1))])
        fixtures = replace(identity_fixtures(), depth_aware=LinearParams(depth_only, np.zeros(CHANNELS)))
        with_depth = replace(self.scale, fixtures=fixtures)
        without_depth = replace(with_depth, depth_aware_features=False)
        _, plain = run_mdu(inputs, self.scale)
        _, starred = run_mdu(inputs, without_depth)
        _, depth = run_mdu(inputs, with_depth)
        assert np.allclose(starred, plain, rtol=1e-12, atol=0.0)
        assert not np.allclose(depth, plain)

    def test_voxel_size_mismatch(self, rng):
        """Test LiDAR voxels must be at the scale resolution."""
        lidar = SparseVoxelTensor.empty(CHANNELS, (1.0, 1.0, 1.0), ORIGIN)
        with pytest.raises(ValidationError, match="do not match scale"):
            run_scale(self.scale, lidar, [], BOUNDS)


@pytest.mark.integration
class TestFusionPipeline:
    """Test cases for the end-to-end pipeline."""

    def setup_method(self):
        self.fixtures = make_fixtures(CHANNELS, 2, 0)
        self.scales = build_scales((0.5, 0.5, 0.5), 2, CHANNELS, self.fixtures, [8, 8], [4.0, 4.0])
        self.mask = InstanceMask.from_rects(1, [[40, 30, 60, 50]])

    def run(self, rng_seed, camera, k=3, seeds=10):
        rng = np.random.default_rng(rng_seed)
        points = frustum_cloud(rng)
        fmap = FeatureMap(rng.normal(size=(20, 25, CHANNELS)))
        pipeline = FusionPipeline(self.scales, self.fixtures, seeds, k, 0, origin=ORIGIN, bounds=BOUNDS)
        return pipeline.run(points, [camera], [[self.mask]], [[fmap]])

    def test_nvpf(self, desk_camera):
        """Test nvpf = instances x seeds x K."""
        result = self.run(1, desk_camera)
        assert result.metrics["nvpf"] == 30
        assert result.metrics["instances"] == 1
        assert result.metrics["reference_points"] == 200
        assert result.metrics["lidar_dropped"] == 0

    def test_k_scales_nvpf(self, desk_camera):
        """Test K=6 produces six times the virtual points of K=1."""
        one = self.run(1, desk_camera, k=1).metrics["nvpf"]
        six = self.run(1, desk_camera, k=6).metrics["nvpf"]
        assert six == 6 * one

    def test_outputs(self, desk_camera):
        """Test per-scale results, cascade and BEV shapes."""
        result = self.run(2, desk_camera)
        assert len(result.scales) == 2
        assert len(result.cascaded) == 2
        assert result.cascaded[1].voxel_size == (1.0, 1.0, 1.0)
        fused_keys = {tuple(k) for k in result.scales[1].fused.keys.tolist()}
        assert fused_keys <= {tuple(k) for k in result.cascaded[1].keys.tolist()}
        assert result.fused_bev.data.shape == (20, 20, CHANNELS)
        assert result.lidar_bev.data.shape == (20, 20, CHANNELS)
        assert set(result.timings) == {"prepare_cameras", "lidar_pyramid", "scale_0", "scale_1", "cascade", "bev"}
        per_scale = result.metrics["scales"]
        assert [s["name"] for s in per_scale] == ["C2", "C3"]
        assert per_scale[0]["camera_dropped"] == 0

    def test_deterministic(self, desk_camera):
        """Test two runs with the same inputs are identical."""
        a = self.run(3, desk_camera)
        b = self.run(3, desk_camera)
        assert a.metrics == b.metrics
        for x, y in zip(a.cascaded, b.cascaded):
            assert np.array_equal(x.keys, y.keys)
            assert np.array_equal(x.features, y.features)
        assert np.array_equal(a.fused_bev.data, b.fused_bev.data)

    def test_rejects_non_increasing_scales(self):
        """Test voxel sizes must grow with the scale index."""
        reversed_scales = list(reversed(self.scales))
        with pytest.raises(ValidationError, match="strictly increase"):
            FusionPipeline(reversed_scales, self.fixtures, 10, 3, 0)

    def test_rejects_fixture_count(self):
        """Test one fixture set per scale."""
        with pytest.raises(ValidationError, match="fixtures for 2 scales"):
            FusionPipeline(self.scales[:1], self.fixtures, 10, 3, 0)
