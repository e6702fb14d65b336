"""
Tests for argument validation and the error hierarchy.
"""

import math

import numpy as np
import pytest

from src.validation import (
    ConfigError,
    ParameterValidator,
    SceneGenerationError,
    ValidationError,
    require_finite,
)


@pytest.mark.unit
class TestParameterValidator:
    """Test cases for ParameterValidator class."""

    def setup_method(self):
        """Set up test fixtures."""
        self.validator = ParameterValidator()

    def test_initialization(self):
        """Test ParameterValidator initialization."""
        assert self.validator.max_k == 1000
        assert self.validator.max_list_length == 64
        assert "int_list" in self.validator.patterns
        assert "size_pair" in self.validator.patterns

    def test_validate_positive_int(self):
        """Test positive integer validation."""
        assert self.validator.validate_positive_int(1, "n") == 1
        assert self.validator.validate_positive_int("50", "n") == 50
        assert self.validator.validate_positive_int(np.int64(6), "n") == 6

        with pytest.raises(ValidationError, match="n must be >= 1"):
            self.validator.validate_positive_int(0, "n")
        with pytest.raises(ValidationError, match="n must be an integer"):
            self.validator.validate_positive_int("abc", "n")
        with pytest.raises(ValidationError, match="n must be an integer"):
            self.validator.validate_positive_int(2.5, "n")
        with pytest.raises(ValidationError, match="n must be an integer"):
            self.validator.validate_positive_int(True, "n")

    def test_validate_non_negative_int(self):
        """Test non-negative integer validation."""
        assert self.validator.validate_non_negative_int(0, "seed") == 0
        with pytest.raises(ValidationError, match="seed must be >= 0"):
            self.validator.validate_non_negative_int(-1, "seed")

    def test_validate_positive_float(self):
        """Test positive float validation."""
        assert self.validator.validate_positive_float("0.5", "r") == 0.5
        for bad in (0, -1.0, math.inf, math.nan):
            with pytest.raises(ValidationError):
                self.validator.validate_positive_float(bad, "r")

    def test_validate_fraction(self):
        """Test open-interval fraction validation."""
        assert self.validator.validate_fraction(0.5, "f") == 0.5
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValidationError, match=r"f must be in \(0, 1\)"):
                self.validator.validate_fraction(bad, "f")
        with pytest.raises(ValidationError, match="must be a number"):
            self.validator.validate_fraction("half", "f")

    def test_validate_triple(self):
        """Test voxel size triple validation."""
        assert self.validator.validate_triple([0.075, 0.075, 0.2], "voxel") == (0.075, 0.075, 0.2)
        with pytest.raises(ValidationError, match="exactly 3 components"):
            self.validator.validate_triple([1.0, 1.0], "voxel")
        with pytest.raises(ValidationError):
            self.validator.validate_triple([1.0, 0.0, 1.0], "voxel")

    def test_validate_bounds(self):
        """Test bounds validation."""
        bounds = self.validator.validate_bounds([-54, -54, -5, 54, 54, 3])
        assert bounds == (-54.0, -54.0, -5.0, 54.0, 54.0, 3.0)
        with pytest.raises(ValidationError, match="6 components"):
            self.validator.validate_bounds([0, 0, 0, 1, 1])
        with pytest.raises(ValidationError, match="axis 2"):
            self.validator.validate_bounds([0, 0, 3, 1, 1, 3])

    def test_validate_k_list(self):
        """Test K list parsing and validation."""
        assert self.validator.validate_k_list("1,3,6,10") == [1, 3, 6, 10]
        assert self.validator.validate_k_list(" 1 , 6 ") == [1, 6]
        assert self.validator.validate_k_list([6]) == [6]

        with pytest.raises(ValidationError, match="K list cannot be empty"):
            self.validator.validate_k_list("")
        with pytest.raises(ValidationError, match="K list cannot be empty"):
            self.validator.validate_k_list([])
        with pytest.raises(ValidationError, match="Invalid K list"):
            self.validator.validate_k_list("1,,3")
        with pytest.raises(ValidationError, match="K must be >= 1"):
            self.validator.validate_k_list("0,3")
        with pytest.raises(ValidationError, match="K must be <= 1000"):
            self.validator.validate_k_list([1001])
        with pytest.raises(ValidationError, match="Too many K values"):
            self.validator.validate_k_list(list(range(1, 66)))

    def test_validate_sizes(self):
        """Test benchmark size list validation."""
        assert self.validator.validate_sizes("100:100,200:200") == [(100, 100), (200, 200)]
        assert self.validator.validate_sizes("10x0") == [(10, 0)]
        assert self.validator.validate_sizes([(5, 5)]) == [(5, 5)]

        with pytest.raises(ValidationError, match="Size list cannot be empty"):
            self.validator.validate_sizes("")
        with pytest.raises(ValidationError, match="expected M:N"):
            self.validator.validate_sizes("100")
        with pytest.raises(ValidationError, match="ascending"):
            self.validator.validate_sizes("200:200,100:100")
        with pytest.raises(ValidationError, match="M must be >= 1"):
            self.validator.validate_sizes("0:10")

    def test_format_error_message(self):
        """Test error message formatting."""
        error = ValidationError("bad value")
        assert self.validator.format_error_message(error) == "ValidationError: bad value"
        assert (
            self.validator.format_error_message(error, "run")
            == "ValidationError in run: bad value"
        )


@pytest.mark.unit
class TestHelpers:
    """Test cases for module-level helpers and the error hierarchy."""

    def test_require_finite(self):
        """Test finiteness and shape checks."""
        array = require_finite([1, 2, 3], "v", (3,))
        assert array.dtype == np.float64
        with pytest.raises(ValidationError, match="v must be finite"):
            require_finite([1.0, np.nan], "v")
        with pytest.raises(ValidationError, match=r"must have shape \(3,\)"):
            require_finite([1.0, 2.0], "v", (3,))

    def test_require_finite_copies(self):
        """Test the returned array does not alias the input."""
        source = np.zeros(3)
        array = require_finite(source, "v")
        array[0] = 1.0
        assert source[0] == 0.0

    def test_error_hierarchy(self):
        """Test exception base classes."""
        assert issubclass(ValidationError, ValueError)
        assert issubclass(SceneGenerationError, RuntimeError)
        assert not issubclass(ConfigError, ValueError)
