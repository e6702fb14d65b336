"""
Tests for multi-depth unprojection.
"""

import math

import numpy as np
import pytest

from src.geometry import InstanceMask, ReferencePoint, unproject
from src.mdu import (
    FeatureMap,
    LinearParams,
    Seed,
    build_depth_aware_features,
    count_nvpf,
    depth_gate,
    knn_depths,
    knn_indices,
    modulate_and_unproject,
    sample_seeds,
    seed_words,
    sparse_depth_map,
    virtual_point_arrays,
)
from src.validation import ValidationError


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.mark.unit
class TestLinearParams:
    """Test cases for LinearParams."""

    def test_apply_batch(self):
        """Test x @ W.T + b over a batch."""
        params = LinearParams(np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([0.5, 0.0]))
        out = params.apply(np.array([[1.0, 1.0], [2.0, 0.0]]))
        assert out.tolist() == [[3.5, -1.0], [2.5, 0.0]]

    def test_shape_errors(self):
        """Test mismatched bias and input widths."""
        with pytest.raises(ValidationError):
            LinearParams(np.zeros((2, 3)), np.zeros(3))
        params = LinearParams(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ValidationError, match="does not match"):
            params.apply(np.zeros(2))
        with pytest.raises(ValidationError, match=r"shape \(1, 3\)"):
            params.expect_shape(1, 3, "gate")

    def test_dict_round_trip(self):
        """Test JSON-ready dict form."""
        params = LinearParams(np.array([[0.25, -1.5]]), np.array([2.0]))
        restored = LinearParams.from_dict(params.to_dict())
        assert np.array_equal(restored.weight, params.weight)
        assert np.array_equal(restored.bias, params.bias)
        with pytest.raises(ValidationError, match="missing field"):
            LinearParams.from_dict({"weight": [[1.0]]})


@pytest.mark.unit
class TestSampleSeeds:
    """Test cases for sample_seeds."""

    def test_single_cell_with_replacement(self):
        """Test a 1-cell mask gives n identical seeds."""
        seeds = sample_seeds(InstanceMask(4, frozenset({(7, 2)})), 3, 0)
        assert seeds == [Seed(7.0, 2.0, 4)] * 3

    def test_deterministic_without_replacement(self):
        """Test n=50 on a 100-cell mask is reproducible and distinct."""
        mask = InstanceMask.from_rects(1, [[0, 0, 10, 10]])
        first = sample_seeds(mask, 50, 42)
        assert first == sample_seeds(mask, 50, 42)
        assert len({(s.u, s.v) for s in first}) == 50
        assert all(mask.contains(s.u, s.v) for s in first)

    def test_composite_seed(self):
        """Test sequence seeds are accepted and change the draw."""
        mask = InstanceMask.from_rects(1, [[0, 0, 10, 10]])
        assert sample_seeds(mask, 5, [1, 2]) != sample_seeds(mask, 5, [1, 3])

    def test_negative_seed_words(self):
        """Test negative ids in the seed sequence wrap to distinct unsigned words."""
        mask = InstanceMask.from_rects(-3, [[0, 0, 10, 10]])
        negative = sample_seeds(mask, 5, [0, -3])
        assert negative == sample_seeds(mask, 5, [0, -3])
        assert negative != sample_seeds(mask, 5, [0, 3])
        assert all(s.instance_id == -3 for s in negative)
        assert seed_words([0, -3]) == [0, 2 ** 64 - 3]
        assert seed_words(-1) == 2 ** 64 - 1
        assert seed_words(42) == 42

    def test_rejects_bad_count(self, rect_mask):
        """Test n < 1 is an invalid argument."""
        with pytest.raises(ValidationError):
            sample_seeds(rect_mask, 0, 0)

    @pytest.mark.slow
    def test_uniform_frequencies(self):
        """Test empirical cell frequencies over 1e5 draws stay within 3 sigma of uniform."""
        mask = InstanceMask.from_rects(1, [[0, 0, 5, 2]])
        trials = 100000
        counts = {}
        for seed in range(trials):
            for s in sample_seeds(mask, 3, seed):
                counts[(s.u, s.v)] = counts.get((s.u, s.v), 0) + 1
        # each cell lands in a draw of 3 out of 10 with probability 0.3
        p = 0.3
        sigma = math.sqrt(trials * p * (1 - p))
        assert len(counts) == 10
        assert all(abs(c - trials * p) <= 3 * sigma for c in counts.values())


@pytest.mark.unit
class TestKnn:
    """Test cases for K-nearest reference retrieval."""

    def test_example_ties_by_index(self):
        """Test seed (5,5) against refs at distance 1, 1 and ~134."""
        refs = [
            ReferencePoint(4.0, 5.0, 2.0, 0),
            ReferencePoint(6.0, 5.0, 4.0, 1),
            ReferencePoint(100.0, 100.0, 9.0, 2),
        ]
        assert [d for d, _ in knn_depths(Seed(5.0, 5.0, 0), refs, 2)] == [2.0, 4.0]
        assert knn_depths(Seed(5.0, 5.0, 0), refs, 1) == [(2.0, 0)]

    def test_k_clipped_to_refs(self):
        """Test fewer refs than k returns them all."""
        refs = [ReferencePoint(1.0, 1.0, 3.0, 0)]
        assert knn_depths(Seed(0.0, 0.0, 0), refs, 6) == [(3.0, 0)]

    def test_empty_refs(self):
        """Test an empty reference set is an invalid argument."""
        with pytest.raises(ValidationError, match="empty"):
            knn_depths(Seed(0.0, 0.0, 0), [], 1)

    def test_matches_exhaustive_sort(self, rng):
        """Test 200 seeds x 500 refs, k=6 against a per-seed sort."""
        seeds = rng.uniform(0, 50, size=(200, 2))
        refs = np.floor(rng.uniform(0, 50, size=(500, 2)))
        result = knn_indices(seeds, refs, 6)
        for i, seed in enumerate(seeds):
            dist = [((seed[0] - r[0]) ** 2 + (seed[1] - r[1]) ** 2, j) for j, r in enumerate(refs)]
            expected = [j for _, j in sorted(dist)[:6]]
            assert result[i].tolist() == expected

    def test_nested_prefixes(self, rng):
        """Test the k-nearest list is a prefix of the (k+1)-nearest list."""
        seeds = rng.uniform(0, 20, size=(30, 2))
        refs = np.floor(rng.uniform(0, 20, size=(40, 2)))
        for k in range(1, 10):
            assert np.array_equal(knn_indices(seeds, refs, k), knn_indices(seeds, refs, k + 1)[:, :k])


@pytest.mark.unit
class TestDepthAwareFeatures:
    """Test cases for the sparse depth map and depth-aware features."""

    def setup_method(self):
        self.refs = [
            ReferencePoint(1.2, 0.5, 5.0, 0),
            ReferencePoint(1.7, 0.9, 3.0, 1),
            ReferencePoint(3.5, 2.5, 7.0, 2),
        ]

    def test_sparse_depth_keeps_nearest(self):
        """Test colliding refs keep the smallest depth; empty cells are 0."""
        depth = sparse_depth_map(self.refs, 4, 4)
        assert depth[0, 1] == 3.0
        assert depth[2, 3] == 7.0
        assert np.count_nonzero(depth) == 2

    def test_sparse_depth_scaled_to_map(self):
        """Test image coordinates are scaled to a coarser map."""
        depth = sparse_depth_map(self.refs, 2, 2, image_size=(4, 4))
        assert depth[0, 0] == 3.0
        assert depth[1, 1] == 7.0

    def test_identity_weight(self, rng):
        """Test weight [I | 0] reproduces the feature map."""
        data = rng.normal(size=(4, 4, 3))
        weight = np.hstack([np.eye(3), np.zeros((3, 1))])
        out = build_depth_aware_features(FeatureMap(data), self.refs, LinearParams(weight, np.zeros(3)))
        assert np.array_equal(out.data, data)

    def test_depth_column(self, rng):
        """Test weight [0 | 1] reproduces the sparse depth map on every channel."""
        data = rng.normal(size=(4, 4, 2))
        weight = np.hstack([np.zeros((2, 2)), np.ones((2, 1))])
        out = build_depth_aware_features(FeatureMap(data), self.refs, LinearParams(weight, np.zeros(2)))
        expected = sparse_depth_map(self.refs, 4, 4)
        assert np.array_equal(out.data[:, :, 0], expected)
        assert np.array_equal(out.data[:, :, 1], expected)

    def test_matches_scalar_oracle(self, rng):
        """Test random params on an 8x8 map against a per-pixel loop."""
        data = rng.normal(size=(8, 8, 3))
        refs = [ReferencePoint(float(u), float(v), float(d), i) for i, (u, v, d) in enumerate(rng.uniform(0.5, 7.9, size=(20, 3)))]
        params = LinearParams(rng.normal(size=(3, 4)), rng.normal(size=3))
        out = build_depth_aware_features(FeatureMap(data), refs, params)
        depth = sparse_depth_map(refs, 8, 8)
        for r in range(8):
            for c in range(8):
                x = list(data[r, c]) + [depth[r, c]]
                for o in range(3):
                    expected = sum(params.weight[o, i] * x[i] for i in range(4)) + params.bias[o]
                    assert out.data[r, c, o] == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_disabled_passes_camera_map(self, rng):
        """Test enabled=False returns the camera map and ignores the params' shape."""
        data = rng.normal(size=(4, 4, 3))
        wrong = LinearParams(np.eye(3), np.zeros(3))
        out = build_depth_aware_features(FeatureMap(data), self.refs, wrong, enabled=False)
        assert np.array_equal(out.data, data)

    def test_shape_mismatch(self, rng):
        """Test a (C, C) weight is rejected."""
        with pytest.raises(ValidationError, match="depth-aware"):
            build_depth_aware_features(FeatureMap(rng.normal(size=(2, 2, 3))), [], LinearParams(np.eye(3), np.zeros(3)))


@pytest.mark.unit
class TestModulateAndUnproject:
    """Test cases for per-depth gating and virtual point generation."""

    def setup_method(self):
        self.data = np.arange(100 * 80 * 2, dtype=np.float64).reshape(80, 100, 2) / 1000.0
        self.cdmap = FeatureMap(self.data)
        self.seeds = [Seed(10.0, 20.0, 0), Seed(30.0, 5.0, 0)]
        self.depths = [[(2.0, 0), (5.0, 3)], [(4.0, 1)]]

    def test_zero_gate_halves_features(self, desk_camera):
        """Test gate weight 0, bias 0 gives s = 0.5."""
        gate = LinearParams(np.zeros((1, 3)), np.zeros(1))
        points = modulate_and_unproject(self.seeds, self.depths, self.cdmap, gate, desk_camera)
        assert len(points) == 3
        assert np.array_equal(points[0].feature, 0.5 * self.data[20, 10])
        assert np.array_equal(points[2].feature, 0.5 * self.data[5, 30])

    def test_saturated_gate(self, desk_camera):
        """Test bias +20 gives s within 1e-8 of 1."""
        gate = LinearParams(np.zeros((1, 3)), np.array([20.0]))
        points = modulate_and_unproject(self.seeds, self.depths, self.cdmap, gate, desk_camera)
        for p, (row, col) in zip(points, [(20, 10), (20, 10), (5, 30)]):
            assert np.allclose(p.feature, self.data[row, col], rtol=1e-8, atol=0)

    def test_positions_and_provenance(self, desk_camera):
        """Test virtual points sit at unproject(u, v, d) in seed then rank order."""
        gate = LinearParams(np.zeros((1, 3)), np.zeros(1))
        points = modulate_and_unproject(self.seeds, self.depths, self.cdmap, gate, desk_camera)
        assert [(p.seed_index, p.depth_rank) for p in points] == [(0, 0), (0, 1), (1, 0)]
        expected = unproject(10.0, 20.0, 5.0, desk_camera).as_array()
        assert np.allclose(points[1].position.as_array(), expected, atol=1e-12)
        positions, features = virtual_point_arrays(points, 2)
        assert positions.shape == (3, 3) and features.shape == (3, 2)

    def test_matches_scalar_oracle(self, rng):
        """Test 1000 random (feature, depth) gates against the scalar sigmoid."""
        gate = LinearParams(rng.normal(size=(1, 3)), rng.normal(size=1))
        features = rng.normal(size=(1000, 2))
        depths = rng.uniform(0.5, 30.0, size=1000)
        scale = depth_gate(features, depths, gate)
        for f, d, s in zip(features, depths, scale):
            z = gate.weight[0, 0] * f[0] + gate.weight[0, 1] * f[1] + gate.weight[0, 2] * d + gate.bias[0]
            assert s == pytest.approx(sigmoid(z), rel=1e-6)
            assert 0.0 < s < 1.0 or z > 30 or z < -30

    def test_gate_shape_checked(self, desk_camera):
        """Test a gate that is not 1 x (C + 1) is rejected."""
        with pytest.raises(ValidationError, match="depth gate"):
            modulate_and_unproject(self.seeds, self.depths, self.cdmap, LinearParams(np.zeros((1, 2)), np.zeros(1)), desk_camera)

    def test_mismatched_lengths(self, desk_camera):
        """Test seeds and depth lists must align."""
        gate = LinearParams(np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(ValidationError, match="depth lists"):
            modulate_and_unproject(self.seeds, self.depths[:1], self.cdmap, gate, desk_camera)


@pytest.mark.unit
class TestCountNvpf:
    """Test cases for count_nvpf."""

    def test_counts(self):
        """Test the pre-deduplication count formula."""
        assert count_nvpf(1, 1, 1) == 1
        assert count_nvpf(4, 50, 6) == 1200

    def test_rejects_zero(self):
        """Test every factor must be >= 1."""
        with pytest.raises(ValidationError, match="k must be >= 1"):
            count_nvpf(4, 50, 0)
