"""
Run configuration: defaults, TOML/JSON loading and command-line overrides.
"""

import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from src.validation import ConfigError, ParameterValidator, ValidationError
from src.voxelgrid import DEFAULT_BOUNDS, DEFAULT_VOXEL_SIZE

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

LAYOUTS = ("ellipsoid", "planar")
PAIRINGS = ("own", "global")
GENERATE_PREFIX = "generate:"


@dataclass(frozen=True)
class SceneSpec:
    """A scene directory, or the parameters of a generated scene when ``path`` is None."""

    path: Optional[str] = None
    instances: int = 4
    points_per_instance: int = 200
    spread: float = 1.0
    layout: str = "ellipsoid"
    layers: int = 3
    cameras: int = 1
    max_retries: int = 10


@dataclass(frozen=True)
class MduSettings:
    seeds_per_instance: int = 50
    k: int = 6
    # false runs MDU* (camera features without the sparse depth map)
    depth_aware_features: bool = True


@dataclass(frozen=True)
class ScaleOverride:
    l: Optional[int] = None
    radius_voxels: Optional[float] = None


@dataclass(frozen=True)
class GmaSettings:
    l: int = 2048
    radius_voxels: float = 4.0
    scales: Dict[int, ScaleOverride] = field(default_factory=dict)

    def l_for(self, scale_id: int) -> int:
        override = self.scales.get(scale_id)
        return override.l if override and override.l is not None else self.l

    def radius_for(self, scale_id: int) -> float:
        override = self.scales.get(scale_id)
        if override and override.radius_voxels is not None:
            return override.radius_voxels
        return self.radius_voxels


@dataclass(frozen=True)
class VoxelSettings:
    base_size: Tuple[float, float, float] = DEFAULT_VOXEL_SIZE
    bounds: Tuple[float, ...] = DEFAULT_BOUNDS
    origin: Optional[Tuple[float, float, float]] = None
    scales: int = 4
    channels: int = 4

    @property
    def grid_origin(self) -> Tuple[float, float, float]:
        return self.origin if self.origin is not None else tuple(self.bounds[:3])  # type: ignore[return-value]


@dataclass(frozen=True)
class EvalSettings:
    holdout_fraction: float = 0.5
    ks: Tuple[int, ...] = (1, 3, 6, 10)
    pairing: str = "own"
    recall_radius: float = 0.23


@dataclass(frozen=True)
class BenchSettings:
    sizes: Tuple[Tuple[int, int], ...] = ((50000, 50000), (100000, 100000))
    l: int = 256
    radius_voxels: float = 4.0
    repeats: int = 5


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs; every randomness source derives from ``seed``."""

    seed: int = 0
    out: str = "out"
    fixtures: Optional[str] = None
    scene: SceneSpec = field(default_factory=SceneSpec)
    mdu: MduSettings = field(default_factory=MduSettings)
    gma: GmaSettings = field(default_factory=GmaSettings)
    voxel: VoxelSettings = field(default_factory=VoxelSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def validate(self) -> "RunConfig":
        """Check ranges, raising ValidationError with the offending setting named."""
        v = ParameterValidator()
        v.validate_non_negative_int(self.seed, "seed")
        v.validate_positive_int(self.scene.instances, "scene.instances")
        v.validate_positive_int(self.scene.points_per_instance, "scene.points_per_instance")
        v.validate_positive_float(self.scene.spread, "scene.spread")
        v.validate_positive_int(self.scene.layers, "scene.layers")
        v.validate_positive_int(self.scene.cameras, "scene.cameras")
        v.validate_non_negative_int(self.scene.max_retries, "scene.max_retries")
        if self.scene.layout not in LAYOUTS:
            raise ValidationError(f"scene.layout must be one of {LAYOUTS}, got {self.scene.layout!r}")
        v.validate_positive_int(self.mdu.seeds_per_instance, "mdu.seeds_per_instance")
        v.validate_positive_int(self.mdu.k, "mdu.k")
        if not isinstance(self.mdu.depth_aware_features, bool):
            raise ValidationError(
                f"mdu.depth_aware_features must be true or false, got {self.mdu.depth_aware_features!r}"
            )
        v.validate_positive_int(self.gma.l, "gma.l")
        v.validate_positive_float(self.gma.radius_voxels, "gma.radius_voxels")
        for scale_id, override in self.gma.scales.items():
            if not 0 <= scale_id < self.voxel.scales:
                raise ValidationError(f"gma.scales has no scale {scale_id}")
            if override.l is not None:
                v.validate_positive_int(override.l, f"gma.scales.{scale_id}.l")
            if override.radius_voxels is not None:
                v.validate_positive_float(override.radius_voxels, f"gma.scales.{scale_id}.radius_voxels")
        v.validate_triple(self.voxel.base_size, "voxel.base_size")
        v.validate_bounds(self.voxel.bounds)
        v.validate_positive_int(self.voxel.scales, "voxel.scales")
        v.validate_positive_int(self.voxel.channels, "voxel.channels")
        v.validate_fraction(self.eval.holdout_fraction, "eval.holdout_fraction")
        v.validate_k_list(self.eval.ks)
        if self.eval.pairing not in PAIRINGS:
            raise ValidationError(f"eval.pairing must be one of {PAIRINGS}, got {self.eval.pairing!r}")
        v.validate_positive_float(self.eval.recall_radius, "eval.recall_radius")
        v.validate_sizes(self.bench.sizes)
        v.validate_positive_int(self.bench.l, "bench.l")
        v.validate_positive_float(self.bench.radius_voxels, "bench.radius_voxels")
        v.validate_positive_int(self.bench.repeats, "bench.repeats")
        return self


_SECTIONS = {
    "scene": SceneSpec,
    "mdu": MduSettings,
    "gma": GmaSettings,
    "voxel": VoxelSettings,
    "eval": EvalSettings,
    "bench": BenchSettings,
}
_SCALARS = ("seed", "out", "fixtures")
_TUPLE_FIELDS = {"base_size", "bounds", "origin", "ks"}


def _build_section(cls, data: Dict[str, Any], source: str, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: [{section}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        try:
            if key in _TUPLE_FIELDS and value is not None:
                value = tuple(value)
            elif section == "bench" and key == "sizes":
                value = tuple(tuple(int(x) for x in pair) for pair in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{source}: [{section}].{key} must be a list, got {value!r}")
        if section == "gma" and key == "scales":
            value = _build_scale_overrides(value, source)
        values[key] = value
    return cls(**values)


def _build_scale_overrides(data: Dict[str, Any], source: str) -> Dict[int, ScaleOverride]:
    overrides = {}
    for key, table in data.items():
        try:
            scale_id = int(key)
        except ValueError:
            raise ConfigError(f"{source}: gma.scales key {key!r} is not a scale index")
        overrides[scale_id] = _build_section(ScaleOverride, table, source, f"gma.scales.{key}")
    return overrides


def config_from_dict(data: Dict[str, Any], source: str = "<dict>") -> RunConfig:
    """
    Build and validate a RunConfig from parsed TOML/JSON.

    Raises:
        ConfigError: On unknown sections or keys, or values failing validation
    """
    unknown = sorted(set(data) - set(_SECTIONS) - set(_SCALARS))
    if unknown:
        raise ConfigError(f"{source}: unknown section(s): {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {k: data[k] for k in _SCALARS if k in data}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], source, name)
    try:
        return RunConfig(**kwargs).validate()
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"{source}: {e}")


def load_config(path) -> RunConfig:
    """
    Load a RunConfig from a ``.toml`` or ``.json`` file.

    Raises:
        ConfigError: If the file is missing, unreadable or invalid
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        elif path.suffix == ".json":
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        else:
            raise ConfigError(f"Unsupported config format {path.suffix!r}: {path}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, OSError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    config = config_from_dict(data, str(path))
    logger.info("Loaded config %s", path)
    return config


def parse_scene_arg(value: str, base: Optional[SceneSpec] = None) -> SceneSpec:
    """
    Parse a ``--scene`` value: a directory, or
    ``generate:instances=4,points=200,spread=1.0,layout=planar,layers=3,cameras=1``.
    """
    base = base or SceneSpec()
    if not value.startswith(GENERATE_PREFIX):
        return replace(base, path=value)
    names = {
        "instances": ("instances", int),
        "points": ("points_per_instance", int),
        "spread": ("spread", float),
        "layout": ("layout", str),
        "layers": ("layers", int),
        "cameras": ("cameras", int),
        "retries": ("max_retries", int),
    }
    updates: Dict[str, Any] = {"path": None}
    body = value[len(GENERATE_PREFIX):]
    for item in filter(None, (part.strip() for part in body.split(","))):
        key, sep, raw = item.partition("=")
        if not sep or key not in names:
            raise ConfigError(
                f"Invalid scene generation option {item!r}; expected one of {', '.join(names)}"
            )
        attr, cast = names[key]
        try:
            updates[attr] = cast(raw)
        except ValueError:
            raise ConfigError(f"Invalid value for scene option {key}: {raw!r}")
    return replace(base, **updates)


def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """
    Apply command-line overrides (``seed``, ``out``, ``fixtures``, ``scene``, ``k``, ``ks``).

    None values are ignored. The result is validated.
    """
    top = {}
    for key in ("seed", "out", "fixtures", "scene"):
        if overrides.get(key) is not None:
            top[key] = overrides[key]
    config = replace(config, **top)
    if overrides.get("k") is not None:
        config = replace(config, mdu=replace(config.mdu, k=int(overrides["k"])))
    if overrides.get("ks") is not None:
        config = replace(config, eval=replace(config.eval, ks=tuple(overrides["ks"])))
    if overrides.get("sizes") is not None:
        config = replace(config, bench=replace(config.bench, sizes=tuple(overrides["sizes"])))
    return config.validate()
