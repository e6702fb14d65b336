"""
Sparse voxel tensors: voxelization, modality tagging, voxel addition and
stride-2 downsampling.

Entries are stored as parallel arrays sorted by key (ix, iy, iz)
lexicographically, which is the canonical order for every operation.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence, Tuple

import numpy as np

from src.validation import ParameterValidator, ValidationError

logger = logging.getLogger(__name__)

# Keys are packed into int64 codes; each axis gets KEY_BITS bits.
KEY_BITS = 20
KEY_BIAS = 1 << (KEY_BITS - 1)
KEY_LIMIT = KEY_BIAS - 1

DEFAULT_VOXEL_SIZE = (0.075, 0.075, 0.2)
DEFAULT_BOUNDS = (-54.0, -54.0, -5.0, 54.0, 54.0, 3.0)


class Modality(IntEnum):
    """Voxel modality tag; BOTH is the bitwise union of LIDAR and CAMERA."""

    LIDAR = 1
    CAMERA = 2
    BOTH = 3


def encode_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (n, 3) integer keys into int64 codes preserving lexicographic order."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if len(keys) and (keys.min() < -KEY_BIAS or keys.max() > KEY_LIMIT):
        raise ValidationError(
            f"Voxel keys must lie within [{-KEY_BIAS}, {KEY_LIMIT}] on every axis"
        )
    shifted = keys + KEY_BIAS
    return (shifted[:, 0] << (2 * KEY_BITS)) | (shifted[:, 1] << KEY_BITS) | shifted[:, 2]


def decode_keys(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    mask = (1 << KEY_BITS) - 1
    keys = np.stack(
        [(codes >> (2 * KEY_BITS)) & mask, (codes >> KEY_BITS) & mask, codes & mask], axis=1
    )
    return keys - KEY_BIAS


@dataclass(frozen=True)
class VoxelKey:
    """Integer voxel index."""

    ix: int
    iy: int
    iz: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.ix, self.iy, self.iz)


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    """
    Hash-indexed voxel features.

    Attributes:
        voxel_size: (sx, sy, sz) meters
        origin: world position of the corner of voxel (0, 0, 0)
        keys: (n, 3) int64, unique, sorted lexicographically
        features: (n, channels) float64; for BOTH entries of a merged tensor this
            is the LiDAR part
        modality: (n,) int8 Modality values
        counts: (n,) int64 contributing points, >= 1
        camera_part: (n, channels) camera features of BOTH entries (zeros
            elsewhere), or None when the tensor carries no modality pairs
        dropped: points rejected as out of bounds while building this tensor
    """

    voxel_size: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    keys: np.ndarray
    features: np.ndarray
    modality: np.ndarray
    counts: np.ndarray
    camera_part: Optional[np.ndarray] = None
    dropped: int = 0

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(keys):
            raise ValidationError(
                f"features must be ({len(keys)}, channels), got {features.shape}"
            )
        modality = np.asarray(self.modality, dtype=np.int8).reshape(-1)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if len(modality) != len(keys) or len(counts) != len(keys):
            raise ValidationError("modality and counts must have one entry per key")
        if len(counts) and counts.min() < 1:
            raise ValidationError("voxel counts must be >= 1")
        codes = encode_keys(keys)
        if len(codes) > 1 and not np.all(codes[1:] > codes[:-1]):
            raise ValidationError("voxel keys must be unique and sorted")
        camera_part = self.camera_part
        if camera_part is not None:
            camera_part = np.asarray(camera_part, dtype=np.float64)
            if camera_part.shape != features.shape:
                raise ValidationError("camera_part must match the features shape")
            camera_part.setflags(write=False)
        for array in (keys, features, modality, counts, codes):
            array.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "modality", modality)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "camera_part", camera_part)
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "_codes", codes)

    @classmethod
    def empty(
        cls,
        channels: int,
        voxel_size: Sequence[float] = DEFAULT_VOXEL_SIZE,
        origin: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "SparseVoxelTensor":
        return cls(
            voxel_size=tuple(voxel_size),
            origin=tuple(origin),
            keys=np.zeros((0, 3), dtype=np.int64),
            features=np.zeros((0, channels)),
            modality=np.zeros(0, dtype=np.int8),
            counts=np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def from_codes(
        cls,
        like: "SparseVoxelTensor",
        codes: np.ndarray,
        features: np.ndarray,
        modality: np.ndarray,
        counts: np.ndarray,
        voxel_size: Optional[Sequence[float]] = None,
        camera_part: Optional[np.ndarray] = None,
    ) -> "SparseVoxelTensor":
        """Build a tensor with ``like``'s origin from sorted unique codes."""
        return cls(
            voxel_size=tuple(voxel_size) if voxel_size is not None else like.voxel_size,
            origin=like.origin,
            keys=decode_keys(codes),
            features=features,
            modality=modality,
            counts=counts,
            camera_part=camera_part,
        )

    @property
    def codes(self) -> np.ndarray:
        return self._codes  # type: ignore[attr-defined]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def same_geometry(self, other: "SparseVoxelTensor") -> bool:
        return self.voxel_size == other.voxel_size and self.origin == other.origin

    def require_compatible(self, other: "SparseVoxelTensor", what: str) -> None:
        if not self.same_geometry(other):
            raise ValidationError(
                f"{what}: geometry mismatch (voxel_size {self.voxel_size} vs {other.voxel_size}, "
                f"origin {self.origin} vs {other.origin})"
            )
        if self.channels != other.channels:
            raise ValidationError(
                f"{what}: channel mismatch ({self.channels} vs {other.channels})"
            )

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Row index of each query key, or -1 when the key is inactive."""
        query = encode_keys(keys)
        codes = self.codes
        if len(codes) == 0:
            return np.full(len(query), -1, dtype=np.int64)
        pos = np.searchsorted(codes, query)
        pos_clipped = np.minimum(pos, len(codes) - 1)
        found = codes[pos_clipped] == query
        return np.where(found, pos_clipped, -1)

    def subset(self, rows: np.ndarray) -> "SparseVoxelTensor":
        """Entries at the given ascending row indices."""
        rows = np.asarray(rows, dtype=np.int64)
        return SparseVoxelTensor(
            voxel_size=self.voxel_size,
            origin=self.origin,
            keys=self.keys[rows],
            features=self.features[rows],
            modality=self.modality[rows],
            counts=self.counts[rows],
            camera_part=None if self.camera_part is None else self.camera_part[rows],
        )

    def with_features(self, features: np.ndarray) -> "SparseVoxelTensor":
        """Same active set and tags, new features, modality pairs dropped."""
        return SparseVoxelTensor(
            voxel_size=self.voxel_size,
            origin=self.origin,
            keys=self.keys,
            features=features,
            modality=self.modality,
            counts=self.counts,
        )

    def select_modality(self, modality: Modality) -> "SparseVoxelTensor":
        return self.subset(np.flatnonzero(self.modality == int(modality)))

    def centers(self) -> np.ndarray:
        """World coordinates of voxel centers, (n, 3)."""
        return np.asarray(self.origin) + (self.keys + 0.5) * np.asarray(self.voxel_size)

    def modality_counts(self) -> dict:
        return {m.name.lower(): int(np.sum(self.modality == int(m))) for m in Modality}


def _group_sum(codes: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sum rows of values per unique code; returns (unique codes, sums, inverse)."""
    unique, inverse = np.unique(codes, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(unique),) + values.shape[1:], dtype=np.float64)
    np.add.at(sums, inverse, values)
    return unique, sums, inverse


def group_modality(inverse: np.ndarray, n_groups: int, modality: np.ndarray) -> np.ndarray:
    merged = np.zeros(n_groups, dtype=np.int8)
    np.bitwise_or.at(merged, inverse, modality.astype(np.int8))
    return merged


def voxelize(
    points: np.ndarray,
    features: np.ndarray,
    voxel_size: Sequence[float] = DEFAULT_VOXEL_SIZE,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    modality: Modality = Modality.LIDAR,
    bounds: Optional[Sequence[float]] = None,
) -> SparseVoxelTensor:
    """
    Group points into voxels and average their features.

    Args:
        points: (n, 3) world coordinates
        features: (n, channels) per-point features
        voxel_size: (sx, sy, sz) meters, all > 0
        origin: world position of voxel (0, 0, 0)'s corner
        modality: tag applied to every produced voxel
        bounds: optional (xmin, ymin, zmin, xmax, ymax, zmax); points outside the
            half-open box are dropped and counted in ``dropped``

    Returns:
        SparseVoxelTensor with key = floor((p - origin) / voxel_size)
    """
    validator = ParameterValidator()
    voxel_size = validator.validate_triple(voxel_size, "voxel_size")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != len(points):
        raise ValidationError(
            f"features must be ({len(points)}, channels), got {features.shape}"
        )

    keep = np.all(np.isfinite(points), axis=1)
    if bounds is not None:
        lo = np.asarray(bounds[:3], dtype=np.float64)
        hi = np.asarray(bounds[3:], dtype=np.float64)
        keep &= np.all((points >= lo) & (points < hi), axis=1)
    dropped = int(len(points) - np.count_nonzero(keep))
    if dropped:
        logger.debug("voxelize dropped %d of %d points", dropped, len(points))

    kept_points = points[keep]
    kept_features = features[keep]
    keys = np.floor((kept_points - np.asarray(origin)) / np.asarray(voxel_size)).astype(np.int64)
    codes = encode_keys(keys)
    unique, sums, inverse = _group_sum(codes, kept_features)
    counts = np.bincount(inverse, minlength=len(unique)).astype(np.int64)
    means = sums / np.maximum(counts, 1)[:, None]

    return SparseVoxelTensor(
        voxel_size=voxel_size,
        origin=tuple(origin),
        keys=decode_keys(unique),
        features=means.reshape(len(unique), features.shape[1]),
        modality=np.full(len(unique), int(modality), dtype=np.int8),
        counts=counts,
        dropped=dropped,
    )


def merge_modalities(lidar: SparseVoxelTensor, camera: SparseVoxelTensor) -> SparseVoxelTensor:
    """
    Union a LiDAR tensor and a camera tensor.

    Keys present in both become BOTH entries whose ``features`` hold the LiDAR
    part and ``camera_part`` holds the camera part.
    """
    lidar.require_compatible(camera, "merge_modalities")
    channels = lidar.channels
    all_codes = np.union1d(lidar.codes, camera.codes)
    n = len(all_codes)
    features = np.zeros((n, channels))
    camera_part = np.zeros((n, channels))
    modality = np.zeros(n, dtype=np.int8)
    counts = np.zeros(n, dtype=np.int64)

    lidar_rows = np.searchsorted(all_codes, lidar.codes)
    camera_rows = np.searchsorted(all_codes, camera.codes)
    features[lidar_rows] = lidar.features
    modality[lidar_rows] |= int(Modality.LIDAR)
    counts[lidar_rows] += lidar.counts
    modality[camera_rows] |= int(Modality.CAMERA)
    counts[camera_rows] += camera.counts

    both = np.isin(camera_rows, lidar_rows)
    camera_part[camera_rows[both]] = camera.features[both]
    camera_only = camera_rows[~both]
    features[camera_only] = camera.features[~both]

    merged = SparseVoxelTensor.from_codes(
        lidar, all_codes, features, modality, counts, camera_part=camera_part
    )
    logger.debug("merge_modalities: %s", merged.modality_counts())
    return merged


def downsample(t: SparseVoxelTensor) -> SparseVoxelTensor:
    """
    Stride-2 voxel downsampling: key -> floor(key / 2), voxel size doubled.

    Features are count-weighted means of the children, counts are summed, and
    the modality is BOTH when children disagree (otherwise inherited). Modality
    pairs of merged tensors are not carried over.
    """
    coarse_size = tuple(2.0 * s for s in t.voxel_size)
    if len(t) == 0:
        return SparseVoxelTensor.empty(t.channels, coarse_size, t.origin)
    coarse_codes = encode_keys(np.floor_divide(t.keys, 2))
    unique, sums, inverse = _group_sum(coarse_codes, t.features * t.counts[:, None])
    counts = np.zeros(len(unique), dtype=np.int64)
    np.add.at(counts, inverse, t.counts)
    modality = group_modality(inverse, len(unique), t.modality)
    return SparseVoxelTensor.from_codes(
        t, unique, sums / counts[:, None], modality, counts, voxel_size=coarse_size
    )


def add(a: SparseVoxelTensor, b: SparseVoxelTensor) -> SparseVoxelTensor:
    """Voxel addition: union of keys, features summed where keys coincide."""
    a.require_compatible(b, "add")
    all_codes = np.union1d(a.codes, b.codes)
    features = np.zeros((len(all_codes), a.channels))
    modality = np.zeros(len(all_codes), dtype=np.int8)
    counts = np.zeros(len(all_codes), dtype=np.int64)
    for t in (a, b):
        rows = np.searchsorted(all_codes, t.codes)
        features[rows] += t.features
        modality[rows] |= t.modality
        counts[rows] += t.counts
    return SparseVoxelTensor.from_codes(a, all_codes, features, modality, counts)


def scale(t: SparseVoxelTensor, factor: float) -> SparseVoxelTensor:
    """Multiply every feature by a scalar."""
    return t.with_features(t.features * float(factor))
