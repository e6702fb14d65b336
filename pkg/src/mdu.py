"""
Multi-depth unprojection: seed sampling, K-nearest reference depth retrieval,
depth-aware feature construction, per-depth gating and virtual point generation.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.geometry import (
    Camera,
    InstanceMask,
    Point3,
    ReferencePoint,
    refs_to_arrays,
    unproject_batch,
)
from src.validation import ValidationError, require_finite

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int]]

_SEED_WORD = 1 << 64


@dataclass(frozen=True)
class Seed:
    """A pixel sampled from an instance mask, to be lifted to 3D."""

    u: float
    v: float
    instance_id: int


@dataclass(frozen=True, eq=False)
class LinearParams:
    """Explicit weight (out x in) and bias (out) of a linear map."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = require_finite(self.weight, "weight")
        if weight.ndim != 2:
            raise ValidationError(f"weight must be a matrix, got shape {weight.shape}")
        bias = require_finite(self.bias, "bias", (weight.shape[0],))
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def expect_shape(self, out_features: int, in_features: int, name: str) -> None:
        if self.weight.shape != (out_features, in_features):
            raise ValidationError(
                f"{name} weight must have shape ({out_features}, {in_features}), "
                f"got {self.weight.shape}"
            )

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply to a vector (in,) or a batch (..., in)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise ValidationError(
                f"Input width {x.shape[-1]} does not match linear input {self.in_features}"
            )
        return x @ self.weight.T + self.bias

    def to_dict(self) -> dict:
        return {
            "weight": [[float(v) for v in row] for row in self.weight],
            "bias": [float(v) for v in self.bias],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearParams":
        try:
            return cls(weight=np.asarray(data["weight"], dtype=np.float64), bias=np.asarray(data["bias"], dtype=np.float64))
        except KeyError as e:
            raise ValidationError(f"Linear parameters missing field {e}")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense per-pixel features, ``data`` shaped (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        data = require_finite(self.data, "feature map")
        if data.ndim != 3 or data.shape[2] < 1 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"Feature map must be (height, width, channels>=1), got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def cell_indices(
        self, u: np.ndarray, v: np.ndarray, image_size: Optional[Tuple[int, int]] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Map image pixel coordinates to map cells.

        With ``image_size=(width, height)`` coordinates are rescaled to the map
        resolution; otherwise the map is assumed to share the image resolution.
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if image_size is not None:
            u = u * self.width / image_size[0]
            v = v * self.height / image_size[1]
        cols = np.clip(np.floor(u).astype(np.int64), 0, self.width - 1)
        rows = np.clip(np.floor(v).astype(np.int64), 0, self.height - 1)
        return rows, cols

    def sample(
        self, u: np.ndarray, v: np.ndarray, image_size: Optional[Tuple[int, int]] = None
    ) -> np.ndarray:
        rows, cols = self.cell_indices(u, v, image_size)
        return self.data[rows, cols]


class DepthAwareFeatureMap(FeatureMap):
    """Feature map fused with the sparse reference depth map (or the plain camera map for MDU*)."""


@dataclass(frozen=True, eq=False)
class VirtualPoint:
    """A seed lifted to 3D with one of its retrieved depths."""

    position: Point3
    feature: np.ndarray
    seed_index: int
    depth_rank: int


def seed_words(rng_seed: SeedLike) -> SeedLike:
    """
    Seed material for ``np.random.default_rng``. Negative entries (such as negative
    instance ids) wrap to their unsigned 64-bit value; others are unchanged.
    """
    if isinstance(rng_seed, (int, np.integer)):
        return int(rng_seed) % _SEED_WORD
    return [int(word) % _SEED_WORD for word in rng_seed]


def sample_seeds(mask: InstanceMask, n: int, rng_seed: SeedLike) -> List[Seed]:
    """
    Uniformly sample n seed cells from a mask.

    Sampling is without replacement unless the mask holds fewer than n cells.
    Deterministic for a fixed rng_seed (an int or a sequence of ints, see ``seed_words``).
    """
    if n < 1:
        raise ValidationError(f"Seed count must be >= 1, got {n}")
    cells = mask.sorted_cells()
    if len(cells) == 0:
        raise ValidationError(f"Cannot sample seeds from empty mask {mask.instance_id}")
    rng = np.random.default_rng(seed_words(rng_seed))
    replace = len(cells) < n
    chosen = rng.choice(len(cells), size=n, replace=replace)
    return [
        Seed(u=float(cells[i, 0]), v=float(cells[i, 1]), instance_id=mask.instance_id)
        for i in chosen
    ]


def knn_indices(seed_uv: np.ndarray, ref_uv: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the k nearest references per seed in pixel space.

    Args:
        seed_uv: (s, 2) seed pixels
        ref_uv: (r, 2) reference pixels, r >= 1
        k: neighbours per seed; clipped to r

    Returns:
        np.ndarray: (s, min(k, r)) reference indices, ascending distance, ties by index
    """
    seed_uv = np.asarray(seed_uv, dtype=np.float64).reshape(-1, 2)
    ref_uv = np.asarray(ref_uv, dtype=np.float64).reshape(-1, 2)
    if len(ref_uv) == 0:
        raise ValidationError("Reference set is empty")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    k = min(k, len(ref_uv))
    du = seed_uv[:, 0:1] - ref_uv[None, :, 0]
    dv = seed_uv[:, 1:2] - ref_uv[None, :, 1]
    dist2 = du * du + dv * dv
    # stable sort keeps ascending ref index among equal distances
    order = np.argsort(dist2, axis=1, kind="stable")
    return order[:, :k]


def knn_depths(seed: Seed, refs: Sequence[ReferencePoint], k: int) -> List[Tuple[float, int]]:
    """
    Retrieve the depths of the k nearest reference points to a seed.

    Returns:
        List of (depth, ref_index) ascending by pixel distance, ties by ref_index.
        k = 1 is the single nearest-reference rule.
    """
    if not refs:
        raise ValidationError("Reference set is empty")
    ref_uv, depth, _ = refs_to_arrays(refs)
    nearest = knn_indices(np.array([[seed.u, seed.v]]), ref_uv, k)[0]
    return [(float(depth[i]), int(i)) for i in nearest]


def sparse_depth_map(
    refs: Sequence[ReferencePoint],
    height: int,
    width: int,
    image_size: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """Rasterize reference depths; the nearest-to-camera depth wins per cell, empty cells are 0."""
    depth_map = np.full((height, width), np.inf)
    if refs:
        uv, depth, _ = refs_to_arrays(refs)
        u, v = uv[:, 0], uv[:, 1]
        if image_size is not None:
            u = u * width / image_size[0]
            v = v * height / image_size[1]
        cols = np.floor(u).astype(np.int64)
        rows = np.floor(v).astype(np.int64)
        inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
        np.minimum.at(depth_map, (rows[inside], cols[inside]), depth[inside])
    depth_map[np.isinf(depth_map)] = 0.0
    return depth_map


def build_depth_aware_features(
    cmap: FeatureMap,
    refs: Sequence[ReferencePoint],
    params: LinearParams,
    image_size: Optional[Tuple[int, int]] = None,
    enabled: bool = True,
) -> DepthAwareFeatureMap:
    """
    Fuse the camera feature map with the sparse reference depth map.

    Per pixel: ``weight @ [feature; sparse_depth] + bias`` (a 1x1 linear map).
    With ``enabled=False`` (MDU*) the camera map is passed through unchanged and
    params are not used.

    Raises:
        ValidationError: If params is not (channels) x (channels + 1)
    """
    if not enabled:
        return DepthAwareFeatureMap(data=cmap.data)
    channels = cmap.channels
    params.expect_shape(channels, channels + 1, "depth-aware")
    depth = sparse_depth_map(refs, cmap.height, cmap.width, image_size)
    stacked = np.concatenate([cmap.data, depth[:, :, None]], axis=2)
    return DepthAwareFeatureMap(data=params.apply(stacked))


def depth_gate(features: np.ndarray, depths: np.ndarray, gate_params: LinearParams) -> np.ndarray:
    """Per-depth scale factor s = sigmoid(Linear([feature; depth])), shape (n,)."""
    stacked = np.concatenate([features, np.asarray(depths, dtype=np.float64)[:, None]], axis=1)
    return expit(gate_params.apply(stacked)[:, 0])


def modulate_and_unproject(
    seeds: Sequence[Seed],
    depths_per_seed: Sequence[Sequence[Tuple[float, int]]],
    cdmap: DepthAwareFeatureMap,
    gate_params: LinearParams,
    cam: Camera,
) -> List[VirtualPoint]:
    """
    Lift every (seed, depth) pair to a virtual point decorated with a gated feature.

    For seed i and its k-th depth d: s = sigmoid(gate([C^d[u, v]; d])), feature
    = C^d[u, v] * s, position = unproject(u, v, d). Output order is seed order,
    then depth rank; the count is the total number of retrieved depths.
    """
    if len(seeds) != len(depths_per_seed):
        raise ValidationError(
            f"Got {len(seeds)} seeds but {len(depths_per_seed)} depth lists"
        )
    gate_params.expect_shape(1, cdmap.channels + 1, "depth gate")

    seed_index = []
    depth_rank = []
    depths = []
    for i, entries in enumerate(depths_per_seed):
        for rank, (depth, _) in enumerate(entries):
            seed_index.append(i)
            depth_rank.append(rank)
            depths.append(depth)
    if not depths:
        return []

    seed_index = np.asarray(seed_index, dtype=np.int64)
    depths = np.asarray(depths, dtype=np.float64)
    seed_u = np.array([s.u for s in seeds], dtype=np.float64)[seed_index]
    seed_v = np.array([s.v for s in seeds], dtype=np.float64)[seed_index]

    base = cdmap.sample(seed_u, seed_v, (cam.width, cam.height))
    scale = depth_gate(base, depths, gate_params)
    features = base * scale[:, None]
    positions = unproject_batch(seed_u, seed_v, depths, cam)

    return [
        VirtualPoint(
            position=Point3.from_array(positions[j]),
            feature=features[j],
            seed_index=int(seed_index[j]),
            depth_rank=int(depth_rank[j]),
        )
        for j in range(len(depths))
    ]


def count_nvpf(instances: int, seeds_per_instance: int, k: int) -> int:
    """Number of virtual points per frame before deduplication."""
    for name, value in (("instances", instances), ("seeds_per_instance", seeds_per_instance), ("k", k)):
        if value < 1:
            raise ValidationError(f"{name} must be >= 1, got {value}")
    return instances * seeds_per_instance * k


def virtual_point_arrays(points: Sequence[VirtualPoint], channels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack virtual points into (positions (n, 3), features (n, channels))."""
    if not points:
        return np.zeros((0, 3)), np.zeros((0, channels))
    positions = np.array([p.position.as_array() for p in points])
    features = np.stack([p.feature for p in points])
    return positions, features
