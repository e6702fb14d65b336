"""
File formats: scene directories, binary feature/BEV maps, fixture parameters
and the CSV/JSON outputs of the subcommands.

Scene directory layout:
    points.csv              x,y,z[,instance]
    camera_<id>.json        intrinsics, row-major rotation, translation, image size
    masks_<id>.json         {"instances": [{"id": 3, "rects": [[u0, v0, u1, v1], ...]}]}
    features_<id>_s<i>.bin  per-scale feature map (falls back to features_<id>.bin)

Binary maps start with three little-endian int32 (width, height, channels)
followed by row-major float32 values shaped (height, width, channels).
"""

import csv
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.fusion import BevMap, PipelineFixtures, ScaleFixtures
from src.geometry import Camera, InstanceMask
from src.gma import GmaParams, ReferenceAssignment, assignment_rows
from src.mdu import FeatureMap, LinearParams
from src.sparseconv import ConvKernel
from src.validation import ConfigError, ValidationError
from src.voxelgrid import SparseVoxelTensor

logger = logging.getLogger(__name__)

HEADER_DTYPE = np.dtype("<i4")
VALUE_DTYPE = np.dtype("<f4")

_CAMERA_FILE = re.compile(r"^camera_(.+)\.json$")


@dataclass(frozen=True, eq=False)
class Scene:
    """
    LiDAR points, cameras and per-camera instance masks.

    ``labels`` holds the instance id of every point, -1 for background.
    """

    points: np.ndarray
    labels: np.ndarray
    cameras: Tuple[Camera, ...]
    masks: Tuple[Tuple[InstanceMask, ...], ...]
    camera_ids: Tuple[str, ...]

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(points):
            raise ValidationError("Scene needs one label per point")
        if not (len(self.cameras) == len(self.masks) == len(self.camera_ids)):
            raise ValidationError("Scene needs one mask list and one id per camera")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    @property
    def instance_ids(self) -> List[int]:
        return sorted({int(i) for i in self.labels if i >= 0})


def _sort_ids(ids):
    return sorted(ids, key=lambda s: (0, int(s), "") if s.isdigit() else (1, 0, s))


def _read_json(path: Path) -> Any:
    if not path.is_file():
        raise ConfigError(f"Missing file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read {path}: {e}")


def write_json(data: Any, path) -> None:
    """Write JSON with sorted keys so equal data gives equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_points_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read ``x,y,z[,instance]`` rows; missing instance column means background."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Missing file: {path}")
    points, labels = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["x", "y", "z"]:
            raise ConfigError(f"{path}: expected header x,y,z[,instance]")
        has_labels = len(header) > 3
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                points.append([float(row[0]), float(row[1]), float(row[2])])
                labels.append(int(row[3]) if has_labels else -1)
            except (ValueError, IndexError):
                raise ConfigError(f"{path}:{line_no}: malformed point row {row!r}")
    return np.asarray(points, dtype=np.float64).reshape(-1, 3), np.asarray(labels, dtype=np.int64)


def write_points_csv(points: np.ndarray, labels: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y", "z", "instance"])
        for p, label in zip(np.asarray(points), np.asarray(labels)):
            writer.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(label)])


def read_masks(path) -> Tuple[InstanceMask, ...]:
    data = _read_json(Path(path))
    try:
        return tuple(
            InstanceMask.from_rects(int(item["id"]), item["rects"]) for item in data["instances"]
        )
    except (KeyError, TypeError, ValidationError) as e:
        raise ConfigError(f"{path}: invalid mask description: {e}")


def write_masks(masks: Sequence[InstanceMask], path) -> None:
    write_json(
        {"instances": [{"id": m.instance_id, "rects": m.to_rects()} for m in masks]}, path
    )


def read_camera(path) -> Camera:
    data = _read_json(Path(path))
    try:
        return Camera.from_dict(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}")


def read_map(path) -> np.ndarray:
    """Read a binary map as a float64 (height, width, channels) array."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Missing file: {path}")
    raw = path.read_bytes()
    if len(raw) < 3 * HEADER_DTYPE.itemsize:
        raise ConfigError(f"{path}: truncated header")
    width, height, channels = (int(v) for v in np.frombuffer(raw[:12], dtype=HEADER_DTYPE))
    expected = width * height * channels
    body = raw[12:]
    if len(body) % VALUE_DTYPE.itemsize:
        raise ConfigError(f"{path}: truncated values")
    values = np.frombuffer(body, dtype=VALUE_DTYPE)
    if width < 0 or height < 0 or channels < 0 or len(values) != expected:
        raise ConfigError(
            f"{path}: header says {width}x{height}x{channels} but holds {len(values)} values"
        )
    return values.astype(np.float64).reshape(height, width, channels)


def write_map(data: np.ndarray, path) -> None:
    """Write a (height, width, channels) array as a binary map."""
    data = np.asarray(data)
    height, width, channels = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.array([width, height, channels], dtype=HEADER_DTYPE).tobytes())
        f.write(np.ascontiguousarray(data, dtype=VALUE_DTYPE).tobytes())


def read_feature_maps(directory, camera_id: str, n_scales: int) -> Tuple[FeatureMap, ...]:
    """
    Per-scale feature maps of one camera.

    Raises:
        ConfigError: If neither the per-scale file nor the shared fallback exists
    """
    directory = Path(directory)
    maps = []
    for scale_id in range(n_scales):
        path = directory / f"features_{camera_id}_s{scale_id}.bin"
        if not path.is_file():
            path = directory / f"features_{camera_id}.bin"
        try:
            maps.append(FeatureMap(read_map(path)))
        except ValidationError as e:
            raise ConfigError(f"{path}: {e}")
    return tuple(maps)


def write_feature_maps(maps: Sequence[FeatureMap], directory, camera_id: str) -> None:
    for scale_id, fmap in enumerate(maps):
        write_map(fmap.data, Path(directory) / f"features_{camera_id}_s{scale_id}.bin")


def read_scene(directory) -> Scene:
    """
    Load a scene directory.

    Raises:
        ConfigError: If the directory, points.csv, or a camera's masks are missing
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"Scene directory not found: {directory}")
    points, labels = read_points_csv(directory / "points.csv")
    ids = _sort_ids(
        [m.group(1) for p in directory.iterdir() if (m := _CAMERA_FILE.match(p.name))]
    )
    if not ids:
        raise ConfigError(f"{directory}: no camera_<id>.json files")
    cameras, masks = [], []
    for camera_id in ids:
        camera = read_camera(directory / f"camera_{camera_id}.json")
        camera_masks = read_masks(directory / f"masks_{camera_id}.json")
        for mask in camera_masks:
            try:
                mask.validate_within(camera.width, camera.height)
            except ValidationError as e:
                raise ConfigError(f"{directory / f'masks_{camera_id}.json'}: {e}")
        cameras.append(camera)
        masks.append(camera_masks)
    logger.info("Read scene %s: %d points, %d cameras", directory, len(points), len(cameras))
    return Scene(
        points=points,
        labels=labels,
        cameras=tuple(cameras),
        masks=tuple(masks),
        camera_ids=tuple(ids),
    )


def write_scene(
    scene: Scene, directory, feature_maps: Optional[Sequence[Sequence[FeatureMap]]] = None
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_points_csv(scene.points, scene.labels, directory / "points.csv")
    for index, (camera_id, camera, masks) in enumerate(
        zip(scene.camera_ids, scene.cameras, scene.masks)
    ):
        write_json(camera.to_dict(), directory / f"camera_{camera_id}.json")
        write_masks(masks, directory / f"masks_{camera_id}.json")
        if feature_maps is not None:
            write_feature_maps(feature_maps[index], directory, camera_id)


def _fixture_files(n_scales: int) -> Dict[str, str]:
    files = {"lidar_embed": "params_lidar_embed.json"}
    for i in range(n_scales):
        for name in ("depth_aware", "depth_gate", "gate", "pair"):
            files[f"s{i}_{name}"] = f"params_s{i}_{name}.json"
        for name in ("lidar", "camera", "both", "fuse", "backbone"):
            files[f"s{i}_kernel_{name}"] = f"kernel_s{i}_{name}.json"
    return files


def write_fixtures(fixtures: PipelineFixtures, directory) -> None:
    directory = Path(directory)
    files = _fixture_files(len(fixtures.scales))
    write_json(fixtures.lidar_embed.to_dict(), directory / files["lidar_embed"])
    for i, scale in enumerate(fixtures.scales):
        items = {
            "depth_aware": scale.depth_aware,
            "depth_gate": scale.depth_gate,
            "gate": scale.gma.gate,
            "pair": scale.gma.pair_projection,
            "kernel_lidar": scale.gma.lidar_kernel,
            "kernel_camera": scale.gma.camera_kernel,
            "kernel_both": scale.gma.both_kernel,
            "kernel_fuse": scale.gma.fuse_kernel,
            "kernel_backbone": scale.lidar_kernel,
        }
        for name, value in items.items():
            write_json(value.to_dict(), directory / files[f"s{i}_{name}"])


def read_fixtures(directory, n_scales: int) -> PipelineFixtures:
    """
    Load every fixture parameter file.

    Raises:
        ConfigError: Naming the first missing or malformed file
    """
    directory = Path(directory)
    files = _fixture_files(n_scales)

    def linear(key: str) -> LinearParams:
        path = directory / files[key]
        try:
            return LinearParams.from_dict(_read_json(path))
        except ValidationError as e:
            raise ConfigError(f"{path}: {e}")

    def kernel(key: str) -> ConvKernel:
        path = directory / files[key]
        try:
            return ConvKernel.from_dict(_read_json(path))
        except ValidationError as e:
            raise ConfigError(f"{path}: {e}")

    scales = []
    for i in range(n_scales):
        scales.append(
            ScaleFixtures(
                depth_aware=linear(f"s{i}_depth_aware"),
                depth_gate=linear(f"s{i}_depth_gate"),
                gma=GmaParams(
                    gate=linear(f"s{i}_gate"),
                    pair_projection=linear(f"s{i}_pair"),
                    lidar_kernel=kernel(f"s{i}_kernel_lidar"),
                    camera_kernel=kernel(f"s{i}_kernel_camera"),
                    both_kernel=kernel(f"s{i}_kernel_both"),
                    fuse_kernel=kernel(f"s{i}_kernel_fuse"),
                ),
                lidar_kernel=kernel(f"s{i}_kernel_backbone"),
            )
        )
    return PipelineFixtures(lidar_embed=linear("lidar_embed"), scales=tuple(scales))


def write_tensor_csv(t: SparseVoxelTensor, path) -> None:
    """Write ``ix,iy,iz,modality,count,f0..`` rows in key order."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["ix", "iy", "iz", "modality", "count"] + [f"f{c}" for c in range(t.channels)])
        for key, modality, count, feature in zip(t.keys, t.modality, t.counts, t.features):
            writer.writerow(
                [int(key[0]), int(key[1]), int(key[2]), int(modality), int(count)]
                + [repr(float(v)) for v in feature]
            )


def write_bev(bev: BevMap, path) -> None:
    write_map(bev.data, path)


def write_assignments(assignments: Sequence[ReferenceAssignment], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["camera_key", "lidar_key", "via_sample"])
        writer.writerows(assignment_rows(assignments))


def write_rows_csv(header: Sequence[str], rows: Sequence[Sequence[Any]], path) -> None:
    """Write a header row then data rows; floats use their shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
