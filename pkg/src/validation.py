"""
Error types and argument validation for voxfuse.
"""

import math
import re
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np


class ValidationError(ValueError):
    """Raised when an operation receives an invalid argument."""

    pass


class ConfigError(Exception):
    """Raised for unreadable or malformed configuration and fixture files."""

    pass


class SceneGenerationError(RuntimeError):
    """Raised when a synthetic scene cannot be generated within the retry budget."""

    pass


class ParameterValidator:
    """Handles range checks shared by the library modules and the CLI."""

    def __init__(self):
        """Initialize the validator with limits and patterns."""
        self.max_k = 1000
        self.max_list_length = 64

        self.patterns = {
            "int_list": re.compile(r"^\s*-?\d+(\s*,\s*-?\d+)*\s*$"),
            "size_pair": re.compile(r"^\s*(\d+)\s*[:xX]\s*(\d+)\s*$"),
        }

    def validate_positive_int(self, value: Any, name: str) -> int:
        """
        Validate a strictly positive integer.

        Args:
            value: Value to validate
            name: Parameter name used in the error message

        Returns:
            int: Validated value

        Raises:
            ValidationError: If value is not an integer >= 1
        """
        if isinstance(value, bool):
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        try:
            as_int = int(value)
        except (ValueError, TypeError):
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        if as_int != value and not isinstance(value, str):
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        if as_int < 1:
            raise ValidationError(f"{name} must be >= 1, got {as_int}")
        return as_int

    def validate_non_negative_int(self, value: Any, name: str) -> int:
        """Validate an integer >= 0."""
        try:
            as_int = int(value)
        except (ValueError, TypeError):
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        if as_int < 0:
            raise ValidationError(f"{name} must be >= 0, got {as_int}")
        return as_int

    def validate_positive_float(self, value: Any, name: str) -> float:
        """Validate a finite float > 0."""
        try:
            as_float = float(value)
        except (ValueError, TypeError):
            raise ValidationError(f"{name} must be a number, got {value!r}")
        if not math.isfinite(as_float) or as_float <= 0:
            raise ValidationError(f"{name} must be a finite number > 0, got {value!r}")
        return as_float

    def validate_fraction(self, value: Any, name: str) -> float:
        """
        Validate a fraction strictly inside (0, 1).

        Raises:
            ValidationError: If value is outside the open interval
        """
        try:
            as_float = float(value)
        except (ValueError, TypeError):
            raise ValidationError(f"{name} must be a number, got {value!r}")
        if not 0.0 < as_float < 1.0:
            raise ValidationError(f"{name} must be in (0, 1), got {as_float}")
        return as_float

    def validate_triple(self, value: Sequence[float], name: str) -> Tuple[float, float, float]:
        """Validate a triple of finite positive floats (voxel sizes)."""
        if value is None or len(value) != 3:
            raise ValidationError(f"{name} must have exactly 3 components, got {value!r}")
        return tuple(self.validate_positive_float(v, name) for v in value)  # type: ignore[return-value]

    def validate_bounds(self, value: Sequence[float]) -> Tuple[float, ...]:
        """Validate (xmin, ymin, zmin, xmax, ymax, zmax) with min < max per axis."""
        if value is None or len(value) != 6:
            raise ValidationError(f"bounds must have 6 components, got {value!r}")
        bounds = tuple(float(v) for v in value)
        if not all(math.isfinite(b) for b in bounds):
            raise ValidationError(f"bounds must be finite, got {value!r}")
        for axis in range(3):
            if bounds[axis] >= bounds[axis + 3]:
                raise ValidationError(
                    f"bounds minimum must be below maximum on axis {axis}, got {value!r}"
                )
        return bounds

    def validate_k_list(self, value: Union[str, Sequence[int]]) -> List[int]:
        """
        Validate a list of depth counts (e.g. "1,3,6,10").

        Args:
            value: Comma separated string or sequence of ints

        Returns:
            List[int]: Validated K values in the given order

        Raises:
            ValidationError: If the list is empty or holds a K < 1
        """
        if isinstance(value, str):
            if not value.strip():
                raise ValidationError("K list cannot be empty")
            if not self.patterns["int_list"].match(value):
                raise ValidationError(f"Invalid K list: '{value}'")
            items = [int(part) for part in value.split(",")]
        else:
            items = list(value)

        if not items:
            raise ValidationError("K list cannot be empty")
        if len(items) > self.max_list_length:
            raise ValidationError(f"Too many K values (max {self.max_list_length})")

        validated = []
        for k in items:
            k = self.validate_positive_int(k, "K")
            if k > self.max_k:
                raise ValidationError(f"K must be <= {self.max_k}, got {k}")
            validated.append(k)
        return validated

    def validate_sizes(self, value: Union[str, Sequence[Tuple[int, int]]]) -> List[Tuple[int, int]]:
        """
        Validate benchmark sizes given as "M:N,M:N" or a sequence of pairs.

        Sizes must be ascending in M + N. N may be zero (no LiDAR voxels).
        """
        if isinstance(value, str):
            parts = [p for p in value.split(",") if p.strip()]
            if not parts:
                raise ValidationError("Size list cannot be empty")
            pairs = []
            for part in parts:
                match = self.patterns["size_pair"].match(part)
                if not match:
                    raise ValidationError(f"Invalid size '{part}', expected M:N")
                pairs.append((int(match.group(1)), int(match.group(2))))
        else:
            pairs = [(int(m), int(n)) for m, n in value]

        if not pairs:
            raise ValidationError("Size list cannot be empty")

        validated = []
        for m, n in pairs:
            validated.append(
                (self.validate_positive_int(m, "M"), self.validate_non_negative_int(n, "N"))
            )
        totals = [m + n for m, n in validated]
        if totals != sorted(totals):
            raise ValidationError("Sizes must be ascending in M + N")
        return validated

    def format_error_message(self, error: Exception, context: str = "") -> str:
        """
        Format error messages in a user-friendly way.

        Args:
            error: Exception to format
            context: Additional context for the error

        Returns:
            str: Formatted error message
        """
        error_type = type(error).__name__
        error_msg = str(error)

        if context:
            return f"{error_type} in {context}: {error_msg}"
        else:
            return f"{error_type}: {error_msg}"


def require_finite(values: Any, name: str, shape: Optional[Tuple[int, ...]] = None) -> Any:
    """Check an array-like is finite (and optionally of a given shape); returns it as float64."""
    array = np.array(values, dtype=np.float64)
    if shape is not None and array.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} must be finite")
    return array
