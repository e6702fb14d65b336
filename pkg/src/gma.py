"""
Gated modality-aware convolution.

Voxels are grouped by modality. Camera information is selected by a ReLU
gate conditioned on a LiDAR reference voxel; the groups are then aggregated
by group-specific submanifold convolutions, combined by voxel addition and
fused by a final submanifold convolution.

Reference retrieval runs in O(L(M + N)) for M camera and N LiDAR voxels:
farthest point sampling picks L camera voxels, each sample finds its exact
nearest LiDAR voxel, and every camera voxel within ``radius`` of a sample
inherits that sample's reference.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.mdu import LinearParams
from src.sparseconv import ConvKernel, submanifold_conv
from src.validation import ValidationError
from src.voxelgrid import Modality, SparseVoxelTensor, VoxelKey, add

logger = logging.getLogger(__name__)

DEFAULT_L = 2048
DEFAULT_RADIUS = 4.0

# distance blocks are at most _CHUNK_ROWS x _CHUNK_ROWS (or x L)
_CHUNK_ROWS = 2048


@dataclass(frozen=True)
class ReferenceAssignment:
    """The LiDAR reference chosen for one camera voxel."""

    camera_key: VoxelKey
    lidar_key: Optional[VoxelKey]
    via_sample: Optional[int]


@dataclass(frozen=True, eq=False)
class GmaParams:
    """
    Fixture parameters of one GMA-Conv block.

    Attributes:
        gate: LiDAR channels -> camera channels, used as ReLU(gate(f_L)) * f_C
        pair_projection: (C x 2C) map of [LiDAR part; gated camera part] of BOTH voxels
        lidar_kernel, camera_kernel, both_kernel: group-specific joint-space convolutions
        fuse_kernel: convolution over the combined groups
    """

    gate: LinearParams
    pair_projection: LinearParams
    lidar_kernel: ConvKernel
    camera_kernel: ConvKernel
    both_kernel: ConvKernel
    fuse_kernel: ConvKernel

    @property
    def joint_kernels(self) -> Tuple[ConvKernel, ConvKernel, ConvKernel]:
        return (self.lidar_kernel, self.camera_kernel, self.both_kernel)

    def check(self, channels: int) -> None:
        self.gate.expect_shape(channels, channels, "gate")
        self.pair_projection.expect_shape(channels, 2 * channels, "pair projection")
        for name, kernel in (
            ("lidar", self.lidar_kernel),
            ("camera", self.camera_kernel),
            ("both", self.both_kernel),
        ):
            if kernel.in_channels != channels:
                raise ValidationError(
                    f"{name} kernel expects {kernel.in_channels} channels, got {channels}"
                )
        widths = {k.out_channels for k in self.joint_kernels}
        if len(widths) != 1:
            raise ValidationError(f"Joint kernels disagree on output width: {sorted(widths)}")
        if self.fuse_kernel.in_channels != widths.pop():
            raise ValidationError("Fuse kernel input width must match the joint kernels")

    @classmethod
    def identity(cls, channels: int) -> "GmaParams":
        """Pass-through parameters: unit gate, LiDAR part kept for pairs, identity kernels."""
        pair = np.zeros((channels, 2 * channels))
        pair[:, :channels] = np.eye(channels)
        return cls(
            gate=LinearParams(np.zeros((channels, channels)), np.ones(channels)),
            pair_projection=LinearParams(pair, np.zeros(channels)),
            lidar_kernel=ConvKernel.identity(channels),
            camera_kernel=ConvKernel.identity(channels),
            both_kernel=ConvKernel.identity(channels),
            fuse_kernel=ConvKernel.identity(channels),
        )


def _as_keys(keys) -> np.ndarray:
    if isinstance(keys, np.ndarray):
        return np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    return np.asarray(
        [k.as_tuple() if isinstance(k, VoxelKey) else tuple(k) for k in keys], dtype=np.int64
    ).reshape(-1, 3)


def fps(keys, l: int, start_index: int = 0) -> List[int]:
    """
    Farthest point sampling in voxel-index Euclidean space.

    Args:
        keys: (M, 3) voxel keys (array, VoxelKeys or tuples)
        l: number of samples
        start_index: first selected index

    Returns:
        min(l, M) distinct indices in selection order; ties go to the smallest
        index, so duplicate keys are taken in index order once the others are used
    """
    points = _as_keys(keys)
    if len(points) == 0:
        raise ValidationError("Cannot sample from an empty key set")
    if l < 1:
        raise ValidationError(f"l must be >= 1, got {l}")
    if not 0 <= start_index < len(points):
        raise ValidationError(f"start_index {start_index} out of range for {len(points)} keys")

    n_samples = min(l, len(points))
    selected = [int(start_index)]
    diff = points - points[start_index]
    min_dist = np.einsum("ij,ij->i", diff, diff)
    # selected rows sit below every distance
    min_dist[start_index] = -1
    for _ in range(1, n_samples):
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        diff = points - points[nxt]
        np.minimum(min_dist, np.einsum("ij,ij->i", diff, diff), out=min_dist)
        min_dist[nxt] = -1
    return selected


def nearest_keys(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Exhaustive nearest target row for each query (squared integer distances).

    Targets must be sorted lexicographically so that ties resolve to the
    smallest key.
    """
    queries = _as_keys(queries)
    targets = _as_keys(targets)
    result = np.empty(len(queries), dtype=np.int64)
    for q_start in range(0, len(queries), _CHUNK_ROWS):
        block = queries[q_start : q_start + _CHUNK_ROWS]
        q_norm = np.einsum("ij,ij->i", block, block)
        best_dist = np.full(len(block), np.iinfo(np.int64).max)
        best_row = np.zeros(len(block), dtype=np.int64)
        rows = np.arange(len(block))
        for t_start in range(0, len(targets), _CHUNK_ROWS):
            t_block = targets[t_start : t_start + _CHUNK_ROWS]
            t_norm = np.einsum("ij,ij->i", t_block, t_block)
            dist2 = q_norm[:, None] + t_norm[None, :] - 2 * (block @ t_block.T)
            local = np.argmin(dist2, axis=1)
            local_dist = dist2[rows, local]
            # strict comparison keeps the earlier (smaller) key on ties
            better = local_dist < best_dist
            best_dist[better] = local_dist[better]
            best_row[better] = local[better] + t_start
        result[q_start : q_start + len(block)] = best_row
    return result


def assign_reference_rows(
    camera_keys: np.ndarray, lidar_keys: np.ndarray, l: int, radius: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Array form of the reference retrieval.

    Returns:
        (lidar_row, via_sample) per camera voxel; -1 where no reference exists.
        ``via_sample`` is the position of the distributing sample in FPS order.
    """
    camera_keys = _as_keys(camera_keys)
    lidar_keys = _as_keys(lidar_keys)
    if l < 1:
        raise ValidationError(f"l must be >= 1, got {l}")
    if not radius >= 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")

    m = len(camera_keys)
    lidar_row = np.full(m, -1, dtype=np.int64)
    via_sample = np.full(m, -1, dtype=np.int64)
    if m == 0 or len(lidar_keys) == 0:
        return lidar_row, via_sample

    start = int(np.lexsort((camera_keys[:, 2], camera_keys[:, 1], camera_keys[:, 0]))[0])
    samples = np.asarray(fps(camera_keys, l, start_index=start), dtype=np.int64)
    sample_keys = camera_keys[samples]
    sample_ref = nearest_keys(sample_keys, lidar_keys)

    radius2 = float(radius) * float(radius)
    s_norm = np.einsum("ij,ij->i", sample_keys, sample_keys)
    for start in range(0, m, _CHUNK_ROWS):
        block = camera_keys[start : start + _CHUNK_ROWS]
        b_norm = np.einsum("ij,ij->i", block, block)
        dist2 = (b_norm[:, None] + s_norm[None, :] - 2 * (block @ sample_keys.T)).astype(np.float64)
        dist2[dist2 > radius2] = np.inf
        best = np.argmin(dist2, axis=1)
        covered = np.isfinite(dist2[np.arange(len(block)), best])
        rows = np.arange(start, start + len(block))[covered]
        via_sample[rows] = best[covered]
        lidar_row[rows] = sample_ref[best[covered]]
    return lidar_row, via_sample


def assign_references(
    camera: SparseVoxelTensor, lidar: SparseVoxelTensor, l: int, radius: float
) -> List[ReferenceAssignment]:
    """
    Assign a LiDAR reference voxel to every camera voxel.

    1. FPS-select L camera keys starting from the smallest key.
    2. Each sample takes its exact nearest LiDAR key (ties: smallest key).
    3. Every camera key within ``radius`` of a sample inherits its reference; the
       nearest sample wins, ties by smaller sample position. Uncovered keys and
       all keys of an empty LiDAR tensor get no reference.
    """
    lidar_row, via_sample = assign_reference_rows(camera.keys, lidar.keys, l, radius)
    assignments = []
    for i, key in enumerate(camera.keys):
        row = lidar_row[i]
        assignments.append(
            ReferenceAssignment(
                camera_key=VoxelKey(*(int(c) for c in key)),
                lidar_key=None if row < 0 else VoxelKey(*(int(c) for c in lidar.keys[row])),
                via_sample=None if row < 0 else int(via_sample[i]),
            )
        )
    logger.debug(
        "assign_references: %d camera voxels, %d covered",
        len(assignments),
        int(np.count_nonzero(lidar_row >= 0)),
    )
    return assignments


def gate_features(
    camera_features: np.ndarray, lidar_references: np.ndarray, params: LinearParams
) -> np.ndarray:
    """Batched ReLU(params(lidar_reference)) * camera_feature, rows aligned."""
    camera_features = np.asarray(camera_features, dtype=np.float64)
    gate = np.maximum(params.apply(lidar_references), 0.0)
    if gate.shape != camera_features.shape:
        raise ValidationError(
            f"Gate width {gate.shape[-1]} does not match camera width {camera_features.shape[-1]}"
        )
    return gate * camera_features


def gate_camera(
    camera_feature: np.ndarray,
    lidar_reference: Optional[np.ndarray],
    params: LinearParams,
) -> np.ndarray:
    """
    Gate one camera feature with its LiDAR reference.

    Returns ReLU(weight @ lidar_reference + bias) * camera_feature, or the camera
    feature unchanged when there is no reference.
    """
    camera_feature = np.asarray(camera_feature, dtype=np.float64)
    if params.out_features != camera_feature.shape[-1]:
        raise ValidationError(
            f"Gate produces {params.out_features} channels, camera feature has "
            f"{camera_feature.shape[-1]}"
        )
    if lidar_reference is None:
        return camera_feature.copy()
    return gate_features(camera_feature[None, :], np.asarray(lidar_reference)[None, :], params)[0]


@dataclass(frozen=True)
class GmaTrace:
    """Intermediate group tensors of one gma_conv call."""

    lidar_group: SparseVoxelTensor
    camera_group: SparseVoxelTensor
    both_group: SparseVoxelTensor
    joint: SparseVoxelTensor
    camera_lidar_rows: np.ndarray
    camera_via_sample: np.ndarray


def gma_conv(
    merged: SparseVoxelTensor,
    lidar: SparseVoxelTensor,
    params: GmaParams,
    l: int = DEFAULT_L,
    radius: float = DEFAULT_RADIUS,
    trace: Optional[list] = None,
) -> SparseVoxelTensor:
    """
    Select-then-aggregate fusion of a merged LiDAR/camera tensor.

    Camera-only voxels are gated by their retrieved LiDAR reference (ungated
    when uncovered). BOTH voxels gate their camera part with their own LiDAR
    part, then [LiDAR part; gated camera part] is projected to the common width.
    Each group passes through its own submanifold convolution, the groups are
    added on the union active set and the fuse kernel is applied.

    Args:
        merged: output of merge_modalities
        lidar: LiDAR tensor at the same scale (reference pool)
        params: gate, projection and kernels
        l, radius: retrieval settings
        trace: optional list that receives a GmaTrace

    Returns:
        SparseVoxelTensor: the multi-modal tensor F^M
    """
    merged.require_compatible(lidar, "gma_conv")
    params.check(merged.channels)

    lidar_group = merged.select_modality(Modality.LIDAR)

    camera_group = merged.select_modality(Modality.CAMERA)
    lidar_rows, via = assign_reference_rows(camera_group.keys, lidar.keys, l, radius)
    gated = camera_group.features.copy()
    covered = lidar_rows >= 0
    if np.any(covered):
        gated[covered] = gate_features(
            camera_group.features[covered], lidar.features[lidar_rows[covered]], params.gate
        )
    camera_group = camera_group.with_features(gated)

    both_rows = np.flatnonzero(merged.modality == int(Modality.BOTH))
    both_group = merged.subset(both_rows)
    if len(both_group):
        lidar_part = both_group.features
        camera_part = both_group.camera_part
        if camera_part is None:
            raise ValidationError("BOTH voxels require a camera part (use merge_modalities)")
        gated_camera = gate_features(camera_part, lidar_part, params.gate)
        pair = np.concatenate([lidar_part, gated_camera], axis=1)
        both_group = both_group.with_features(params.pair_projection.apply(pair))
    else:
        both_group = both_group.with_features(np.zeros((0, merged.channels)))

    joint = add(
        add(
            submanifold_conv(lidar_group, params.lidar_kernel),
            submanifold_conv(camera_group, params.camera_kernel),
        ),
        submanifold_conv(both_group, params.both_kernel),
    )
    fused = submanifold_conv(joint, params.fuse_kernel)
    logger.debug(
        "gma_conv: lidar=%d camera=%d both=%d covered=%d",
        len(lidar_group),
        len(camera_group),
        len(both_group),
        int(np.count_nonzero(covered)),
    )
    if trace is not None:
        trace.append(
            GmaTrace(lidar_group, camera_group, both_group, joint, lidar_rows, via)
        )
    return fused


def exhaustive_references(camera_keys: np.ndarray, lidar_keys: np.ndarray) -> np.ndarray:
    """Nearest LiDAR row for every camera key by exhaustive search (reference oracle)."""
    if len(_as_keys(lidar_keys)) == 0:
        return np.full(len(_as_keys(camera_keys)), -1, dtype=np.int64)
    return nearest_keys(camera_keys, lidar_keys)


def assignment_rows(assignments: Sequence[ReferenceAssignment]) -> List[Tuple[str, str, str]]:
    """Assignments as CSV-ready (camera_key, lidar_key, via_sample) strings."""
    def fmt(key: Optional[VoxelKey]) -> str:
        return "" if key is None else f"{key.ix} {key.iy} {key.iz}"

    return [
        (fmt(a.camera_key), fmt(a.lidar_key), "" if a.via_sample is None else str(a.via_sample))
        for a in assignments
    ]


def trace_assignments(trace: GmaTrace, lidar: SparseVoxelTensor) -> List[ReferenceAssignment]:
    """Rebuild the camera-only reference assignments recorded by a gma_conv trace."""
    assignments = []
    for key, row, via in zip(trace.camera_group.keys, trace.camera_lidar_rows, trace.camera_via_sample):
        assignments.append(
            ReferenceAssignment(
                camera_key=VoxelKey(*(int(c) for c in key)),
                lidar_key=None if row < 0 else VoxelKey(*(int(c) for c in lidar.keys[row])),
                via_sample=None if row < 0 else int(via),
            )
        )
    return assignments
