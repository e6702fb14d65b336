"""
Pinhole camera model: projection of LiDAR points to pixels, unprojection of
pixels with depth back to 3D, and instance-mask membership.

Frames:
    world  - LiDAR/ego frame, meters
    camera - x right, y down, z forward (optical axis), meters
    image  - u right, v down, pixels; cell (iu, iv) covers [iu, iu+1) x [iv, iv+1)
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Sequence, Tuple, Union

import numpy as np

from src.validation import ValidationError, require_finite

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Point3:
    """A world-frame point in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(np.isfinite([self.x, self.y, self.z])):
            raise ValidationError(f"Point3 coordinates must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Point3":
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True, eq=False)
class Camera:
    """
    Pinhole camera with world->camera extrinsics.

    A world point p maps to camera frame as ``rotation @ p + translation``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rotation = require_finite(self.rotation, "rotation", (3, 3))
        translation = require_finite(self.translation, "translation", (3,))
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"Focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValidationError(
                f"Image size must be > 0, got {self.width}x{self.height}"
            )
        deviation = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        if deviation > ORTHONORMAL_TOLERANCE:
            raise ValidationError(
                f"Rotation must be orthonormal (max |R^T R - I| = {deviation:.3e})"
            )
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            rotation = np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3)
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                rotation=rotation,
                translation=np.asarray(data["translation"], dtype=np.float64),
                width=int(data["width"]),
                height=int(data["height"]),
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"Invalid camera description: {e}")
        except ValueError as e:
            if isinstance(e, ValidationError):
                raise
            raise ValidationError(f"Invalid camera description: {e}")


@dataclass(frozen=True)
class ReferencePoint:
    """A LiDAR point projected into an image, carrying its real depth."""

    u: float
    v: float
    d: float
    source_index: int


@dataclass(frozen=True)
class InstanceMask:
    """A 2D foreground instance region as a set of integer pixel cells (u, v)."""

    instance_id: int
    pixels: FrozenSet[Tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.pixels:
            raise ValidationError(f"Instance mask {self.instance_id} is empty")
        object.__setattr__(
            self, "pixels", frozenset((int(u), int(v)) for u, v in self.pixels)
        )

    @classmethod
    def from_rects(cls, instance_id: int, rects: Iterable[Sequence[int]]) -> "InstanceMask":
        """
        Build a mask from half-open rectangles [u0, v0, u1, v1): u0 <= u < u1, v0 <= v < v1.
        """
        pixels = set()
        for rect in rects:
            if len(rect) != 4:
                raise ValidationError(f"Mask rectangle must have 4 values, got {rect!r}")
            u0, v0, u1, v1 = (int(c) for c in rect)
            for v in range(v0, v1):
                for u in range(u0, u1):
                    pixels.add((u, v))
        return cls(instance_id=int(instance_id), pixels=frozenset(pixels))

    def to_rects(self) -> List[List[int]]:
        """Run-length encode the mask into half-open rectangles, one per row run."""
        rects = []
        rows = {}
        for u, v in self.pixels:
            rows.setdefault(v, []).append(u)
        for v in sorted(rows):
            us = sorted(rows[v])
            start = prev = us[0]
            for u in us[1:]:
                if u != prev + 1:
                    rects.append([start, v, prev + 1, v + 1])
                    start = u
                prev = u
            rects.append([start, v, prev + 1, v + 1])
        return rects

    def sorted_cells(self) -> np.ndarray:
        """Mask cells as an (n, 2) int array sorted by (v, u)."""
        cells = sorted(self.pixels, key=lambda c: (c[1], c[0]))
        return np.asarray(cells, dtype=np.int64).reshape(-1, 2)

    def contains(self, u: float, v: float) -> bool:
        return (int(np.floor(u)), int(np.floor(v))) in self.pixels

    def validate_within(self, width: int, height: int) -> None:
        for u, v in self.pixels:
            if not (0 <= u < width and 0 <= v < height):
                raise ValidationError(
                    f"Instance mask {self.instance_id} has cell ({u}, {v}) outside "
                    f"{width}x{height} image"
                )


PointsLike = Union[Sequence[Point3], np.ndarray]


def as_points_array(points: PointsLike) -> np.ndarray:
    """Convert a list of Point3 or an (N, 3) array to an (N, 3) float64 array."""
    if isinstance(points, np.ndarray):
        array = np.asarray(points, dtype=np.float64)
    else:
        array = np.asarray([p.as_array() for p in points], dtype=np.float64)
    return array.reshape(-1, 3)


def project_array(points: PointsLike, cam: Camera) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project points into the image.

    Returns:
        (indices, uv, depth): source indices of kept points (ascending), their
        pixel coordinates (n, 2) and camera-frame depths (n,)
    """
    xyz = as_points_array(points)
    cam_xyz = xyz @ cam.rotation.T + cam.translation
    z = cam_xyz[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = cam.fx * cam_xyz[:, 0] / safe_z + cam.cx
    v = cam.fy * cam_xyz[:, 1] / safe_z + cam.cy
    keep = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    indices = np.flatnonzero(keep)
    uv = np.stack([u[indices], v[indices]], axis=1)
    return indices, uv, z[indices]


def project(points: PointsLike, cam: Camera) -> List[ReferencePoint]:
    """
    Project world points onto the image plane.

    Points behind the camera or outside the image are dropped. The result is
    ordered by ascending source index.
    """
    indices, uv, depth = project_array(points, cam)
    logger.debug("Projected %d of %d points", len(indices), len(as_points_array(points)))
    return [
        ReferencePoint(u=float(uv[i, 0]), v=float(uv[i, 1]), d=float(depth[i]), source_index=int(idx))
        for i, idx in enumerate(indices)
    ]


def unproject_batch(u: np.ndarray, v: np.ndarray, d: np.ndarray, cam: Camera) -> np.ndarray:
    """
    Unproject pixels with camera depths to world points.

    Args:
        u, v: pixel coordinates, shape (n,)
        d: camera-frame depths (> 0), shape (n,)

    Returns:
        np.ndarray: (n, 3) world points

    Raises:
        ValidationError: If any depth is not positive
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if np.any(~(d > 0)):
        raise ValidationError("Depth must be > 0 for unprojection")
    cam_xyz = np.stack(
        [(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1
    )
    return (cam_xyz - cam.translation) @ cam.rotation


def unproject(u: float, v: float, d: float, cam: Camera) -> Point3:
    """Unproject one pixel at camera depth d to a world point."""
    if not d > 0:
        raise ValidationError(f"Depth must be > 0, got {d}")
    return Point3.from_array(unproject_batch(np.array([u]), np.array([v]), np.array([d]), cam)[0])


def filter_by_masks(
    refs: Sequence[ReferencePoint], masks: Sequence[InstanceMask]
) -> List[Tuple[int, ReferencePoint]]:
    """
    Pair each reference point with every mask containing its pixel cell.

    Cells use floor(u), floor(v). A point inside overlapping masks appears once
    per containing mask; points in no mask are dropped. Output follows the
    reference order, then mask order.
    """
    paired = []
    for ref in refs:
        cell = (int(np.floor(ref.u)), int(np.floor(ref.v)))
        for mask in masks:
            if cell in mask.pixels:
                paired.append((mask.instance_id, ref))
    return paired


def group_by_instance(
    pairs: Sequence[Tuple[int, ReferencePoint]]
) -> dict:
    """Group (instance_id, ref) pairs into {instance_id: [refs...]} keeping order."""
    groups = {}
    for instance_id, ref in pairs:
        groups.setdefault(instance_id, []).append(ref)
    return groups


def refs_to_arrays(refs: Sequence[ReferencePoint]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split references into (uv (n, 2), depth (n,), source_index (n,)) arrays."""
    if not refs:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64)
    uv = np.array([[r.u, r.v] for r in refs], dtype=np.float64)
    depth = np.array([r.d for r in refs], dtype=np.float64)
    source = np.array([r.source_index for r in refs], dtype=np.int64)
    return uv, depth, source
