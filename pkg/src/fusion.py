"""
Multi-scale fusion: per-scale multi-depth unprojection and GMA-Conv, cascade
connections across scales and BEV height compression.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.geometry import (
    Camera,
    InstanceMask,
    ReferencePoint,
    filter_by_masks,
    group_by_instance,
    project,
    refs_to_arrays,
)
from src.gma import GmaParams, GmaTrace, gma_conv
from src.mdu import (
    FeatureMap,
    LinearParams,
    Seed,
    build_depth_aware_features,
    knn_indices,
    modulate_and_unproject,
    sample_seeds,
    virtual_point_arrays,
)
from src.sparseconv import ConvKernel, strided_conv, submanifold_conv
from src.validation import ValidationError
from src.voxelgrid import (
    DEFAULT_BOUNDS,
    DEFAULT_VOXEL_SIZE,
    Modality,
    SparseVoxelTensor,
    add,
    downsample,
    merge_modalities,
    voxelize,
)

logger = logging.getLogger(__name__)

SCALE_NAMES = ("C2", "C3", "C4", "C5")


@dataclass(frozen=True, eq=False)
class ScaleFixtures:
    """Explicit parameters used at one scale."""

    depth_aware: LinearParams
    depth_gate: LinearParams
    gma: GmaParams
    lidar_kernel: ConvKernel


@dataclass(frozen=True, eq=False)
class PipelineFixtures:
    """All fixture parameters of the pipeline."""

    lidar_embed: LinearParams
    scales: Tuple[ScaleFixtures, ...]

    @property
    def channels(self) -> int:
        return self.lidar_embed.out_features


@dataclass(frozen=True, eq=False)
class ScaleConfig:
    """Resolution, retrieval settings and fixtures of one scale."""

    scale_id: int
    voxel_size: Tuple[float, float, float]
    channels: int
    l: int
    radius: float
    fixtures: ScaleFixtures
    depth_aware_features: bool = True

    @property
    def name(self) -> str:
        return SCALE_NAMES[self.scale_id] if self.scale_id < len(SCALE_NAMES) else f"S{self.scale_id}"


@dataclass(frozen=True, eq=False)
class BevMap:
    """
    Dense top-down grid, ``data`` shaped (height, width, channels).

    Cell (row, col) holds the column ix = ix0 + col, iy = iy0 + row.
    """

    data: np.ndarray
    ix0: int = 0
    iy0: int = 0

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def occupied_cells(self) -> set:
        rows, cols = np.nonzero(np.any(self.data != 0, axis=2))
        return {(int(c) + self.ix0, int(r) + self.iy0) for r, c in zip(rows, cols)}


@dataclass(frozen=True, eq=False)
class CameraInputs:
    """One camera's MDU inputs: seeds with their retrieved depths and per-scale maps."""

    camera: Camera
    feature_maps: Tuple[FeatureMap, ...]
    references: Tuple[ReferencePoint, ...]
    seeds: Tuple[Seed, ...]
    depths: Tuple[Tuple[Tuple[float, int], ...], ...]
    instances: int

    def feature_map(self, scale_id: int) -> FeatureMap:
        return self.feature_maps[min(scale_id, len(self.feature_maps) - 1)]


@dataclass(frozen=True)
class ScaleResult:
    """Outputs of one scale."""

    lidar: SparseVoxelTensor
    camera: SparseVoxelTensor
    merged: SparseVoxelTensor
    fused: SparseVoxelTensor
    virtual_points: int
    trace: Optional[GmaTrace] = None


@dataclass
class PipelineResult:
    """Everything the pipeline produces for one scene."""

    lidar_pyramid: List[SparseVoxelTensor]
    scales: List[ScaleResult]
    cascaded: List[SparseVoxelTensor]
    lidar_bev: BevMap
    fused_bev: BevMap
    metrics: Dict = field(default_factory=dict)
    timings: Dict = field(default_factory=dict)


def scale_voxel_size(base: Sequence[float], scale_id: int) -> Tuple[float, float, float]:
    """Voxel size at a scale: the base size doubled once per scale on every axis."""
    factor = float(2 ** scale_id)
    return tuple(float(s) * factor for s in base)  # type: ignore[return-value]


def prepare_camera(
    camera: Camera,
    masks: Sequence[InstanceMask],
    points: np.ndarray,
    feature_maps: Sequence[FeatureMap],
    seeds_per_instance: int,
    k: int,
    rng_seed: Sequence[int],
) -> CameraInputs:
    """
    Project LiDAR points, keep those inside instance masks as references, sample
    seeds per instance and retrieve their K nearest reference depths.

    Instances whose mask holds no reference point are skipped.
    """
    refs = project(points, camera)
    pairs = filter_by_masks(refs, masks)
    groups = group_by_instance(pairs)

    seeds: List[Seed] = []
    depths: List[Tuple[Tuple[float, int], ...]] = []
    instances = 0
    for mask in masks:
        group = groups.get(mask.instance_id, [])
        if not group:
            logger.warning(
                "Instance %d has no reference points in this camera; skipping", mask.instance_id
            )
            continue
        instances += 1
        ref_uv, ref_depth, ref_source = refs_to_arrays(group)
        instance_seeds = sample_seeds(mask, seeds_per_instance, list(rng_seed) + [mask.instance_id])
        seed_uv = np.array([[s.u, s.v] for s in instance_seeds])
        nearest = knn_indices(seed_uv, ref_uv, k)
        for seed, row in zip(instance_seeds, nearest):
            seeds.append(seed)
            depths.append(tuple((float(ref_depth[i]), int(ref_source[i])) for i in row))

    seen = set()
    references = []
    for _, ref in pairs:
        if ref.source_index not in seen:
            seen.add(ref.source_index)
            references.append(ref)

    return CameraInputs(
        camera=camera,
        feature_maps=tuple(feature_maps),
        references=tuple(references),
        seeds=tuple(seeds),
        depths=tuple(depths),
        instances=instances,
    )


def run_mdu(inputs: CameraInputs, scale: ScaleConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Virtual point positions and decorated features of one camera at one scale."""
    cmap = inputs.feature_map(scale.scale_id)
    if cmap.channels != scale.channels:
        raise ValidationError(
            f"Feature map has {cmap.channels} channels, scale {scale.name} expects {scale.channels}"
        )
    cam = inputs.camera
    cdmap = build_depth_aware_features(
        cmap,
        inputs.references,
        scale.fixtures.depth_aware,
        (cam.width, cam.height),
        enabled=scale.depth_aware_features,
    )
    virtual = modulate_and_unproject(
        inputs.seeds, inputs.depths, cdmap, scale.fixtures.depth_gate, cam
    )
    return virtual_point_arrays(virtual, scale.channels)


def run_scale(
    scale: ScaleConfig,
    lidar_voxels: SparseVoxelTensor,
    camera_inputs: Sequence[CameraInputs],
    bounds: Optional[Sequence[float]] = DEFAULT_BOUNDS,
) -> ScaleResult:
    """
    Run MDU and GMA-Conv at one scale.

    Virtual points of every camera are voxelized at this scale's resolution,
    merged with the LiDAR voxels and fused by gma_conv.
    """
    if lidar_voxels.voxel_size != tuple(scale.voxel_size):
        raise ValidationError(
            f"LiDAR voxels at {lidar_voxels.voxel_size} do not match scale {scale.name} "
            f"voxel size {scale.voxel_size}"
        )
    positions = [np.zeros((0, 3))]
    features = [np.zeros((0, scale.channels))]
    for inputs in camera_inputs:
        pos, feat = run_mdu(inputs, scale)
        positions.append(pos)
        features.append(feat)
    positions_all = np.concatenate(positions)
    features_all = np.concatenate(features)

    camera_voxels = voxelize(
        positions_all,
        features_all,
        scale.voxel_size,
        lidar_voxels.origin,
        Modality.CAMERA,
        bounds,
    )
    merged = merge_modalities(lidar_voxels, camera_voxels)
    trace: List[GmaTrace] = []
    fused = gma_conv(merged, lidar_voxels, scale.fixtures.gma, scale.l, scale.radius, trace)
    logger.info(
        "Scale %s: %d virtual points, %d camera voxels, %d fused voxels",
        scale.name,
        len(positions_all),
        len(camera_voxels),
        len(fused),
    )
    return ScaleResult(
        lidar=lidar_voxels,
        camera=camera_voxels,
        merged=merged,
        fused=fused,
        virtual_points=len(positions_all),
        trace=trace[0],
    )


def cascade(per_scale: Sequence[SparseVoxelTensor]) -> List[SparseVoxelTensor]:
    """
    Cascade connections: F^_0 = F_0, F^_{i+1} = F_{i+1} + DownSample(F^_i).

    Scales are ordered fine to coarse and each must match the downsampled
    geometry of the previous one.
    """
    if not per_scale:
        return []
    result = [per_scale[0]]
    for i in range(1, len(per_scale)):
        carried = downsample(result[-1])
        current = per_scale[i]
        if not carried.same_geometry(current) or carried.channels != current.channels:
            raise ValidationError(
                f"Scale {i} geometry {current.voxel_size} does not continue scale {i - 1} "
                f"(expected {carried.voxel_size}, {carried.channels} channels)"
            )
        result.append(add(current, carried))
    return result


def bev_extent(
    voxel_size: Sequence[float], origin: Sequence[float], bounds: Sequence[float]
) -> Tuple[int, int, int, int]:
    """(ix0, iy0, width, height) of the BEV grid covering the horizontal bounds."""
    ix0 = int(math.floor((bounds[0] - origin[0]) / voxel_size[0]))
    iy0 = int(math.floor((bounds[1] - origin[1]) / voxel_size[1]))
    ix1 = int(math.ceil((bounds[3] - origin[0]) / voxel_size[0]))
    iy1 = int(math.ceil((bounds[4] - origin[1]) / voxel_size[1]))
    return ix0, iy0, ix1 - ix0, iy1 - iy0


def flatten_to_bev(
    t: SparseVoxelTensor, extent: Optional[Tuple[int, int, int, int]] = None
) -> BevMap:
    """
    Compress the height axis: per (ix, iy) column, the per-channel maximum over
    occupied iz. Unoccupied columns are zero.

    Args:
        t: voxel tensor
        extent: (ix0, iy0, width, height); defaults to the tensor's key range
    """
    if extent is None:
        if len(t) == 0:
            return BevMap(data=np.zeros((0, 0, t.channels)))
        ix0, iy0 = (int(v) for v in t.keys[:, :2].min(axis=0))
        ix1, iy1 = (int(v) for v in t.keys[:, :2].max(axis=0))
        extent = (ix0, iy0, ix1 - ix0 + 1, iy1 - iy0 + 1)
    ix0, iy0, width, height = extent
    grid = np.full((height, width, t.channels), -np.inf)
    if len(t):
        cols = t.keys[:, 0] - ix0
        rows = t.keys[:, 1] - iy0
        inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
        np.maximum.at(grid, (rows[inside], cols[inside]), t.features[inside])
    grid[np.isneginf(grid)] = 0.0
    return BevMap(data=grid, ix0=ix0, iy0=iy0)


def build_lidar_pyramid(
    points: np.ndarray,
    fixtures: PipelineFixtures,
    base_voxel_size: Sequence[float],
    origin: Sequence[float],
    bounds: Optional[Sequence[float]],
) -> List[SparseVoxelTensor]:
    """
    Toy LiDAR branch: embed (x, y, z), voxelize at the finest scale, apply a
    submanifold convolution, then one stride-2 convolution per coarser scale.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    features = fixtures.lidar_embed.apply(points) if len(points) else np.zeros((0, fixtures.channels))
    level = voxelize(points, features, base_voxel_size, origin, Modality.LIDAR, bounds)
    pyramid = [submanifold_conv(level, fixtures.scales[0].lidar_kernel)]
    for scale_fixtures in fixtures.scales[1:]:
        pyramid.append(strided_conv(pyramid[-1], scale_fixtures.lidar_kernel))
    logger.debug("LiDAR pyramid sizes: %s (dropped %d)", [len(p) for p in pyramid], level.dropped)
    return pyramid


class FusionPipeline:
    """
    End-to-end multi-scale fusion for one scene.

    The pipeline is immutable once configured; ``run`` is deterministic.
    """

    def __init__(
        self,
        scales: Sequence[ScaleConfig],
        fixtures: PipelineFixtures,
        seeds_per_instance: int,
        k: int,
        rng_seed: int,
        origin: Sequence[float] = DEFAULT_BOUNDS[:3],
        bounds: Sequence[float] = DEFAULT_BOUNDS,
    ):
        if not scales:
            raise ValidationError("At least one scale is required")
        sizes = [s.voxel_size for s in scales]
        for finer, coarser in zip(sizes, sizes[1:]):
            if not all(c > f for f, c in zip(finer, coarser)):
                raise ValidationError("Voxel sizes must strictly increase with scale_id")
        if len(fixtures.scales) != len(scales):
            raise ValidationError(
                f"Got fixtures for {len(fixtures.scales)} scales, configured {len(scales)}"
            )
        self._scales = tuple(scales)
        self._fixtures = fixtures
        self._seeds_per_instance = int(seeds_per_instance)
        self._k = int(k)
        self._rng_seed = int(rng_seed)
        self._origin = tuple(float(o) for o in origin)
        self._bounds = tuple(float(b) for b in bounds)

    @property
    def scales(self) -> Tuple[ScaleConfig, ...]:
        return self._scales

    def run(
        self,
        points: np.ndarray,
        cameras: Sequence[Camera],
        masks: Sequence[Sequence[InstanceMask]],
        feature_maps: Sequence[Sequence[FeatureMap]],
    ) -> PipelineResult:
        """
        Args:
            points: (N, 3) LiDAR points
            cameras: one Camera per view
            masks: instance masks per view
            feature_maps: per view, one feature map per scale (or a single map for all)
        """
        timings: Dict[str, float] = {}
        clock = time.perf_counter()

        camera_inputs = [
            prepare_camera(
                cam,
                cam_masks,
                points,
                maps,
                self._seeds_per_instance,
                self._k,
                [self._rng_seed, index],
            )
            for index, (cam, cam_masks, maps) in enumerate(zip(cameras, masks, feature_maps))
        ]
        timings["prepare_cameras"] = time.perf_counter() - clock

        clock = time.perf_counter()
        pyramid = build_lidar_pyramid(
            points, self._fixtures, self._scales[0].voxel_size, self._origin, self._bounds
        )
        timings["lidar_pyramid"] = time.perf_counter() - clock

        results = []
        for scale, lidar_voxels in zip(self._scales, pyramid):
            clock = time.perf_counter()
            results.append(run_scale(scale, lidar_voxels, camera_inputs, self._bounds))
            timings[f"scale_{scale.scale_id}"] = time.perf_counter() - clock

        clock = time.perf_counter()
        cascaded = cascade([r.fused for r in results])
        timings["cascade"] = time.perf_counter() - clock

        clock = time.perf_counter()
        coarse = self._scales[-1]
        extent = bev_extent(coarse.voxel_size, self._origin, self._bounds)
        lidar_bev = flatten_to_bev(pyramid[-1], extent)
        fused_bev = flatten_to_bev(cascaded[-1], extent)
        timings["bev"] = time.perf_counter() - clock

        instances = sum(c.instances for c in camera_inputs)
        metrics = {
            "nvpf": results[0].virtual_points,
            "instances": instances,
            "seeds_per_instance": self._seeds_per_instance,
            "k": self._k,
            "reference_points": sum(len(c.references) for c in camera_inputs),
            "lidar_points": int(len(np.asarray(points).reshape(-1, 3))),
            "lidar_dropped": int(len(np.asarray(points).reshape(-1, 3)) - int(pyramid[0].counts.sum())),
            "scales": [
                {
                    "scale_id": scale.scale_id,
                    "name": scale.name,
                    "voxel_size": list(scale.voxel_size),
                    "virtual_points": result.virtual_points,
                    "lidar_voxels": len(result.lidar),
                    "camera_voxels": len(result.camera),
                    "camera_dropped": result.camera.dropped,
                    "modalities": result.merged.modality_counts(),
                    "fused_voxels": len(result.fused),
                    "cascaded_voxels": len(cascaded[i]),
                }
                for i, (scale, result) in enumerate(zip(self._scales, results))
            ],
        }
        return PipelineResult(
            lidar_pyramid=pyramid,
            scales=results,
            cascaded=cascaded,
            lidar_bev=lidar_bev,
            fused_bev=fused_bev,
            metrics=metrics,
            timings=timings,
        )


def _random_linear(rng: np.random.Generator, out_features: int, in_features: int, scale: float) -> LinearParams:
    return LinearParams(
        weight=rng.normal(0.0, scale, size=(out_features, in_features)),
        bias=rng.normal(0.0, scale, size=out_features),
    )


def _random_kernel(rng: np.random.Generator, channels: int, scale: float, extent: int = 3) -> ConvKernel:
    weights = rng.normal(0.0, scale, size=(extent ** 3, channels, channels))
    weights[(extent ** 3) // 2] += np.eye(channels)
    return ConvKernel(extent=extent, weights=weights, bias=np.zeros(channels))


def make_fixtures(channels: int, n_scales: int, rng_seed: int) -> PipelineFixtures:
    """
    Deterministic fixture parameters for every linear map and kernel.

    Kernels are identity-centred with small random perturbations so features
    stay on the input scale; kernel biases are zero.
    """
    rng = np.random.default_rng([int(rng_seed), 7919])
    small = 0.05
    scales = []
    for _ in range(n_scales):
        depth_aware = np.zeros((channels, channels + 1))
        depth_aware[:, :channels] = np.eye(channels)
        depth_aware += rng.normal(0.0, small, size=depth_aware.shape)
        pair = np.zeros((channels, 2 * channels))
        pair[:, :channels] = 0.5 * np.eye(channels)
        pair[:, channels:] = 0.5 * np.eye(channels)
        scales.append(
            ScaleFixtures(
                depth_aware=LinearParams(depth_aware, np.zeros(channels)),
                depth_gate=_random_linear(rng, 1, channels + 1, 0.1),
                gma=GmaParams(
                    gate=LinearParams(
                        rng.normal(0.0, small, size=(channels, channels)), np.ones(channels)
                    ),
                    pair_projection=LinearParams(pair, np.zeros(channels)),
                    lidar_kernel=_random_kernel(rng, channels, small),
                    camera_kernel=_random_kernel(rng, channels, small),
                    both_kernel=_random_kernel(rng, channels, small),
                    fuse_kernel=_random_kernel(rng, channels, small),
                ),
                lidar_kernel=_random_kernel(rng, channels, small),
            )
        )
    return PipelineFixtures(
        lidar_embed=_random_linear(rng, channels, 3, 0.1),
        scales=tuple(scales),
    )


def build_scales(
    base_voxel_size: Sequence[float],
    n_scales: int,
    channels: int,
    fixtures: PipelineFixtures,
    l_per_scale: Sequence[int],
    radius_per_scale: Sequence[float],
    depth_aware_features: bool = True,
) -> List[ScaleConfig]:
    """Scale configurations with voxel sizes doubling per scale."""
    return [
        ScaleConfig(
            scale_id=i,
            voxel_size=scale_voxel_size(base_voxel_size, i),
            channels=channels,
            l=int(l_per_scale[i]),
            radius=float(radius_per_scale[i]),
            fixtures=fixtures.scales[i],
            depth_aware_features=depth_aware_features,
        )
        for i in range(n_scales)
    ]
