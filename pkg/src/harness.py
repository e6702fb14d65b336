"""
Synthetic scenes, hold-out evaluation of multi-depth unprojection and the
retrieval complexity benchmark.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.spatial import Delaunay, cKDTree

from src.geometry import (
    Camera,
    InstanceMask,
    filter_by_masks,
    group_by_instance,
    project,
    project_array,
    refs_to_arrays,
    unproject_batch,
)
from src.gma import assign_reference_rows
from src.mdu import FeatureMap, knn_indices
from src.scene_io import Scene
from src.validation import ParameterValidator, SceneGenerationError, ValidationError
from src.voxelgrid import DEFAULT_BOUNDS, DEFAULT_VOXEL_SIZE

logger = logging.getLogger(__name__)

IMAGE_WIDTH = 400
IMAGE_HEIGHT = 225
FOCAL = 300.0
RECALL_RADIUS = 0.23
DEPTH_RANGE = (8.0, 20.0)
HEIGHT_RANGE = (-1.0, 1.0)
AZIMUTH_LIMIT = 0.2
# planar windows fill this share of their image cell, keeping a pixel margin to the next cell
CELL_FILL = 0.8
CELL_MARGIN = 3.0
LAYOUTS = ("ellipsoid", "planar")

# world x forward, z up -> camera z forward, y down
_BASE_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True, eq=False)
class SyntheticScene(Scene):
    """A generated scene; bit-identical for a fixed ``rng_seed``."""

    rng_seed: int = 0


@dataclass(frozen=True)
class MduReport:
    """Hold-out evaluation result for one K."""

    k: int
    mean_error: float
    recall: float
    nvpf: int
    held_out: int

    def as_row(self) -> List:
        return [self.k, self.mean_error, self.recall, self.nvpf, self.held_out]


REPORT_HEADER = ("k", "mean_error", "recall", "nvpf", "held_out")


@dataclass(frozen=True)
class BenchRow:
    """Median retrieval time for one (M, N) size."""

    m: int
    n: int
    l: int
    radius: float
    repeats: int
    median_seconds: float
    ratio: Optional[float]

    def as_row(self) -> List:
        return [
            self.m,
            self.n,
            self.l,
            self.radius,
            self.repeats,
            self.median_seconds,
            "" if self.ratio is None else self.ratio,
        ]


BENCH_HEADER = ("m", "n", "l", "radius", "repeats", "median_seconds", "ratio")


def make_camera(yaw: float, width: int = IMAGE_WIDTH, height: int = IMAGE_HEIGHT) -> Camera:
    """A camera at the world origin looking along yaw in the ground plane."""
    c, s = math.cos(yaw), math.sin(yaw)
    # rotate the world by -yaw about z before the base axis swap
    rz = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return Camera(
        fx=FOCAL,
        fy=FOCAL,
        cx=width / 2.0,
        cy=height / 2.0,
        rotation=_BASE_ROTATION @ rz,
        translation=np.zeros(3),
        width=width,
        height=height,
    )


def planar_band(camera: Camera, far_depth: float, bounds: Sequence[float] = DEFAULT_BOUNDS) -> Tuple[float, float]:
    """
    Image rows (v0, v1) whose rays stay inside the vertical bounds out to far_depth,
    for a camera built by ``make_camera``.
    """
    v0 = camera.cy - camera.fy * bounds[5] / far_depth
    v1 = camera.cy - camera.fy * bounds[2] / far_depth
    return max(0.0, v0), min(float(camera.height), v1)


def image_cell(
    slot: int, per_camera: int, camera: Camera, band: Tuple[float, float]
) -> Tuple[float, float, float, float]:
    """
    Pixel rectangle (u0, v0, u1, v1) of cell ``slot`` when ``per_camera`` instances
    share one image band. Cells tile the band in a near-square grid, row by row.
    """
    height = band[1] - band[0]
    rows = min(per_camera, max(1, round(math.sqrt(per_camera * height / camera.width))))
    cols = math.ceil(per_camera / rows)
    w = camera.width / cols
    h = height / rows
    col, row = slot % cols, slot // cols
    return col * w, band[0] + row * h, (col + 1) * w, band[0] + (row + 1) * h


def _window(rng: np.random.Generator, lo: float, hi: float) -> Tuple[float, float]:
    size = CELL_FILL * (hi - lo)
    slack = max(0.0, hi - lo - size - 2.0 * CELL_MARGIN)
    start = lo + min(CELL_MARGIN, (hi - lo - size) / 2.0) + rng.uniform(0.0, slack)
    return start, start + size


def _instance_points(
    rng: np.random.Generator,
    camera: Camera,
    n_points: int,
    spread: float,
    layout: str,
    layers: int,
    cell: Tuple[float, float, float, float],
) -> np.ndarray:
    depth = rng.uniform(*DEPTH_RANGE)
    azimuth = rng.uniform(-AZIMUTH_LIMIT, AZIMUTH_LIMIT)
    elevation = rng.uniform(*HEIGHT_RANGE)
    if layout == "ellipsoid":
        # camera-frame center; x right, y down
        center = np.array([math.tan(azimuth) * depth, -elevation, depth])
        offsets = np.clip(rng.normal(0.0, 1.0, size=(n_points, 3)), -2.0, 2.0)
        offsets *= spread * np.array([1.0, 0.5, 0.7])
        cam_xyz = center + offsets
    else:
        # fronto-parallel sheets at depth + j * spread behind one pixel window in the cell
        u0, u1 = _window(rng, cell[0], cell[2])
        v0, v1 = _window(rng, cell[1], cell[3])
        u = rng.uniform(u0, u1, size=n_points)
        v = rng.uniform(v0, v1, size=n_points)
        z = depth + (np.arange(n_points) % layers) * spread
        cam_xyz = np.stack([(u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z], axis=1)
    return (cam_xyz - camera.translation) @ camera.rotation


def instance_mask(uv: np.ndarray, instance_id: int, width: int, height: int) -> Optional[InstanceMask]:
    """
    Convex pixel hull of projected points, united with every point's own cell and
    dilated by one cell, clipped to the image. None when no point is given.
    """
    if len(uv) == 0:
        return None
    cells = np.floor(uv).astype(np.int64)
    u0, v0 = cells.min(axis=0) - 1
    u1, v1 = cells.max(axis=0) + 2
    grid = np.zeros((v1 - v0, u1 - u0), dtype=bool)
    grid[cells[:, 1] - v0, cells[:, 0] - u0] = True

    unique = np.unique(uv, axis=0)
    if len(unique) >= 3 and np.linalg.matrix_rank(unique - unique.mean(axis=0), tol=1e-9) == 2:
        hull = Delaunay(unique)
        vv, uu = np.mgrid[v0:v1, u0:u1]
        centers = np.stack([uu.ravel() + 0.5, vv.ravel() + 0.5], axis=1)
        inside = hull.find_simplex(centers) >= 0
        grid |= inside.reshape(grid.shape)

    grid = binary_dilation(grid, structure=np.ones((3, 3), dtype=bool))
    rows, cols = np.nonzero(grid)
    us = cols + u0
    vs = rows + v0
    keep = (us >= 0) & (us < width) & (vs >= 0) & (vs < height)
    if not np.any(keep):
        return None
    return InstanceMask(instance_id, frozenset(zip(us[keep].tolist(), vs[keep].tolist())))


def generate_scene(
    instances: int,
    points_per_instance: int,
    spread: float,
    rng_seed: int,
    layout: str = "ellipsoid",
    n_cameras: int = 1,
    layers: int = 3,
    max_retries: int = 10,
    bounds: Sequence[float] = DEFAULT_BOUNDS,
) -> SyntheticScene:
    """
    Generate clustered instances in front of evenly spaced cameras.

    Instance i is placed in the view of camera i mod n_cameras. Planar instances
    sharing a camera take separate image cells (``image_cell``) inside the band of
    rows that stays within the vertical bounds (``planar_band``), so their masks do
    not overlap. A placement whose points leave the bounds or do not all project
    into the image is redrawn with a perturbed pose, at most ``max_retries`` times.

    Raises:
        ValidationError: On non-positive counts or an unknown layout
        SceneGenerationError: If a placement keeps failing
    """
    validator = ParameterValidator()
    validator.validate_positive_int(instances, "instances")
    validator.validate_positive_int(points_per_instance, "points_per_instance")
    validator.validate_positive_float(spread, "spread")
    validator.validate_positive_int(n_cameras, "n_cameras")
    validator.validate_positive_int(layers, "layers")
    if layout not in LAYOUTS:
        raise ValidationError(f"Unknown layout {layout!r}, expected one of {LAYOUTS}")

    cameras = [make_camera(2.0 * math.pi * c / n_cameras) for c in range(n_cameras)]
    lo = np.asarray(bounds[:3])
    hi = np.asarray(bounds[3:])

    per_camera = math.ceil(instances / n_cameras)
    band = planar_band(cameras[0], DEPTH_RANGE[1] + (layers - 1) * spread, bounds)
    all_points, all_labels = [], []
    for instance_id in range(instances):
        camera = cameras[instance_id % n_cameras]
        cell = image_cell(instance_id // n_cameras, per_camera, camera, band)
        for attempt in range(max_retries + 1):
            rng = np.random.default_rng([int(rng_seed), instance_id, attempt])
            points = _instance_points(rng, camera, points_per_instance, spread, layout, layers, cell)
            visible, _, _ = project_array(points, camera)
            in_bounds = np.all((points >= lo) & (points < hi))
            if in_bounds and len(visible) == len(points):
                break
            logger.warning(
                "Instance %d placement %d is degenerate; retrying with a perturbed pose",
                instance_id,
                attempt,
            )
        else:
            raise SceneGenerationError(
                f"Could not place instance {instance_id} after {max_retries} retries"
            )
        all_points.append(points)
        all_labels.append(np.full(points_per_instance, instance_id, dtype=np.int64))

    points = np.concatenate(all_points)
    labels = np.concatenate(all_labels)

    masks = []
    for camera in cameras:
        camera_masks = []
        indices, uv, _ = project_array(points, camera)
        for instance_id in range(instances):
            own = labels[indices] == instance_id
            mask = instance_mask(uv[own], instance_id, camera.width, camera.height)
            if mask is not None:
                camera_masks.append(mask)
        masks.append(tuple(camera_masks))

    logger.debug("Generated scene: %d points, %d cameras", len(points), n_cameras)
    return SyntheticScene(
        points=points,
        labels=labels,
        cameras=tuple(cameras),
        masks=tuple(masks),
        camera_ids=tuple(str(c) for c in range(n_cameras)),
        rng_seed=int(rng_seed),
    )


def synthesize_feature_maps(
    scene: Scene, channels: int, n_scales: int, rng_seed: int
) -> List[Tuple[FeatureMap, ...]]:
    """Per-camera feature maps at strides 4 * 2**i, deterministic in rng_seed."""
    maps = []
    for index, camera in enumerate(scene.cameras):
        per_scale = []
        for scale_id in range(n_scales):
            stride = 4 * 2 ** scale_id
            rng = np.random.default_rng([int(rng_seed), 31337, index, scale_id])
            shape = (
                max(1, math.ceil(camera.height / stride)),
                max(1, math.ceil(camera.width / stride)),
                channels,
            )
            per_scale.append(FeatureMap(rng.normal(0.0, 1.0, size=shape)))
        maps.append(tuple(per_scale))
    return maps


def _split_references(scene: Scene, holdout_fraction: float, rng_seed: int):
    """Per (camera, instance) group: held-out seed refs and remaining depth providers."""
    rng = np.random.default_rng([int(rng_seed), 104729])
    groups = []
    for camera, masks in zip(scene.cameras, scene.masks):
        by_instance = group_by_instance(filter_by_masks(project(scene.points, camera), masks))
        for mask in masks:
            refs = by_instance.get(mask.instance_id, [])
            if len(refs) < 2:
                logger.warning(
                    "Instance %d has %d reference point(s); too few to split",
                    mask.instance_id,
                    len(refs),
                )
                continue
            n_held = min(max(int(round(holdout_fraction * len(refs))), 1), len(refs) - 1)
            held = np.sort(rng.choice(len(refs), size=n_held, replace=False))
            rest = np.setdiff1d(np.arange(len(refs)), held)
            groups.append(
                (camera, [refs[i] for i in held], [refs[i] for i in rest])
            )
    return groups


def holdout_eval(
    scene: Scene,
    holdout_fraction: float = 0.5,
    k: int = 6,
    pairing: str = "own",
    rng_seed: Optional[int] = None,
    recall_radius: float = RECALL_RADIUS,
) -> MduReport:
    """
    Hold out a fraction of each instance's reference points, use their pixels as
    seeds, lift every seed with the K nearest remaining reference depths, and
    compare the virtual points with the held-out true points.

    mean_error: per held-out point, distance to the nearest virtual point of its
        own seed (``pairing="own"``) or of all seeds (``pairing="global"``).
    recall: fraction of held-out points with a virtual point within recall_radius.

    Raises:
        ValidationError: On an invalid fraction or K, or when nothing can be held out
    """
    validator = ParameterValidator()
    holdout_fraction = validator.validate_fraction(holdout_fraction, "holdout_fraction")
    k = validator.validate_positive_int(k, "k")
    if pairing not in ("own", "global"):
        raise ValidationError(f"pairing must be 'own' or 'global', got {pairing!r}")
    if rng_seed is None:
        rng_seed = getattr(scene, "rng_seed", 0)

    truths, own_errors, virtual_all = [], [], []
    for camera, held, rest in _split_references(scene, holdout_fraction, rng_seed):
        held_uv, held_depth, _ = refs_to_arrays(held)
        rest_uv, rest_depth, _ = refs_to_arrays(rest)
        truth = unproject_batch(held_uv[:, 0], held_uv[:, 1], held_depth, camera)
        nearest = knn_indices(held_uv, rest_uv, k)
        kk = nearest.shape[1]
        seed_u = np.repeat(held_uv[:, 0], kk)
        seed_v = np.repeat(held_uv[:, 1], kk)
        virtual = unproject_batch(seed_u, seed_v, rest_depth[nearest].reshape(-1), camera)
        virtual = virtual.reshape(len(held), kk, 3)
        own_errors.append(np.linalg.norm(virtual - truth[:, None, :], axis=2).min(axis=1))
        truths.append(truth)
        virtual_all.append(virtual.reshape(-1, 3))

    if not truths:
        raise ValidationError("Hold-out split is empty: no instance has two or more reference points")

    truth = np.concatenate(truths)
    virtual = np.concatenate(virtual_all)
    tree = cKDTree(virtual)
    global_dist, _ = tree.query(truth, k=1)
    errors = np.concatenate(own_errors) if pairing == "own" else global_dist
    hits = tree.query_ball_point(truth, r=recall_radius, return_length=True)

    report = MduReport(
        k=k,
        mean_error=float(np.mean(errors)),
        recall=float(np.count_nonzero(hits > 0) / len(truth)),
        nvpf=int(len(virtual)),
        held_out=int(len(truth)),
    )
    logger.info(
        "holdout_eval K=%d: mean_error=%.4f recall=%.4f nvpf=%d",
        report.k,
        report.mean_error,
        report.recall,
        report.nvpf,
    )
    return report


def sweep_k(
    scene: Scene,
    ks: Sequence[int],
    holdout_fraction: float = 0.5,
    pairing: str = "own",
    rng_seed: Optional[int] = None,
    recall_radius: float = RECALL_RADIUS,
) -> List[MduReport]:
    """One MduReport per K; every K sees the same hold-out split."""
    ks = ParameterValidator().validate_k_list(ks)
    return [
        holdout_eval(scene, holdout_fraction, k, pairing, rng_seed, recall_radius) for k in ks
    ]


def random_keys(rng: np.random.Generator, count: int, side: int) -> np.ndarray:
    """Distinct random keys in a side^3 cube, sorted lexicographically."""
    codes = np.sort(rng.choice(side ** 3, size=count, replace=False))
    return np.stack([codes // (side * side), (codes // side) % side, codes % side], axis=1)


def bench_retrieval(
    sizes: Sequence[Tuple[int, int]],
    l: int = 256,
    radius: float = 4.0,
    repeats: int = 5,
    rng_seed: int = 0,
    density: float = 0.1,
) -> List[BenchRow]:
    """
    Time reference retrieval for each (M camera, N LiDAR) size.

    Keys are drawn at constant occupancy ``density`` so that neighbourhood sizes
    stay comparable across rows. ``ratio`` is the median time relative to the
    previous row.
    """
    validator = ParameterValidator()
    sizes = validator.validate_sizes(sizes)
    l = validator.validate_positive_int(l, "l")
    repeats = validator.validate_positive_int(repeats, "repeats")

    rows: List[BenchRow] = []
    for index, (m, n) in enumerate(sizes):
        rng = np.random.default_rng([int(rng_seed), index])
        side = max(2, math.ceil(((m + n) / density) ** (1.0 / 3.0)))
        keys = random_keys(rng, m + n, side)
        order = rng.permutation(m + n)
        camera_keys = keys[np.sort(order[:m])]
        lidar_keys = keys[np.sort(order[m:])]

        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            assign_reference_rows(camera_keys, lidar_keys, l, radius)
            times.append(time.perf_counter() - start)
        median = float(np.median(times))
        ratio = median / rows[-1].median_seconds if rows and rows[-1].median_seconds > 0 else None
        rows.append(BenchRow(m, n, l, float(radius), repeats, median, ratio))
        logger.info("bench M=%d N=%d: median %.4fs", m, n, median)
    return rows


def smallest_voxel_diagonal(voxel_size: Sequence[float] = DEFAULT_VOXEL_SIZE) -> float:
    """Diagonal of the finest voxel; the recall radius is this rounded to centimeters."""
    return float(np.linalg.norm(np.asarray(voxel_size, dtype=np.float64)))
