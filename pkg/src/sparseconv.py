"""
Submanifold and stride-2 sparse 3D convolution over SparseVoxelTensor.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.validation import ValidationError, require_finite
from src.voxelgrid import SparseVoxelTensor, group_modality, encode_keys

logger = logging.getLogger(__name__)


def kernel_offsets(extent: int) -> List[Tuple[int, int, int]]:
    """Kernel offsets in lexicographic (dx, dy, dz) order."""
    radius = extent // 2
    span = range(-radius, radius + 1)
    return list(itertools.product(span, span, span))


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """
    Sparse convolution parameters.

    Attributes:
        extent: odd kernel size per axis
        weights: (extent**3, out, in), one matrix per lexicographic offset
        bias: (out,)
    """

    extent: int
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        extent = int(self.extent)
        if extent < 1 or extent % 2 == 0:
            raise ValidationError(f"Kernel extent must be odd and >= 1, got {self.extent}")
        weights = require_finite(self.weights, "kernel weights")
        if weights.ndim != 3 or weights.shape[0] != extent ** 3:
            raise ValidationError(
                f"Kernel weights must be ({extent ** 3}, out, in), got {weights.shape}"
            )
        bias = require_finite(self.bias, "kernel bias", (weights.shape[1],))
        weights.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def offsets(self) -> List[Tuple[int, int, int]]:
        return kernel_offsets(self.extent)

    @property
    def center_index(self) -> int:
        return (self.extent ** 3) // 2

    @classmethod
    def identity(cls, channels: int, extent: int = 3) -> "ConvKernel":
        weights = np.zeros((extent ** 3, channels, channels))
        weights[(extent ** 3) // 2] = np.eye(channels)
        return cls(extent=extent, weights=weights, bias=np.zeros(channels))

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, extent: int = 3) -> "ConvKernel":
        return cls(
            extent=extent,
            weights=np.zeros((extent ** 3, out_channels, in_channels)),
            bias=np.zeros(out_channels),
        )

    def to_dict(self) -> dict:
        return {
            "extent": self.extent,
            "weights": self.weights.tolist(),
            "bias": [float(b) for b in self.bias],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConvKernel":
        try:
            return cls(
                extent=int(data["extent"]),
                weights=np.asarray(data["weights"], dtype=np.float64),
                bias=np.asarray(data["bias"], dtype=np.float64),
            )
        except KeyError as e:
            raise ValidationError(f"Kernel description missing field {e}")


def _check_channels(t: SparseVoxelTensor, k: ConvKernel) -> None:
    if t.channels != k.in_channels:
        raise ValidationError(
            f"Kernel expects {k.in_channels} input channels, tensor has {t.channels}"
        )


def submanifold_conv(t: SparseVoxelTensor, k: ConvKernel) -> SparseVoxelTensor:
    """
    Submanifold convolution: the output active set equals the input active set.

    out[x] = bias + sum over offsets o with x + o active of W_o @ in[x + o].
    Offsets are accumulated in lexicographic order.
    """
    _check_channels(t, k)
    out = np.tile(k.bias, (len(t), 1))
    if len(t):
        for weight, offset in zip(k.weights, k.offsets):
            rows = t.lookup(t.keys + np.asarray(offset))
            active = rows >= 0
            if not np.any(active):
                continue
            out[active] += t.features[rows[active]] @ weight.T
    return t.with_features(out)


def strided_conv(t: SparseVoxelTensor, k: ConvKernel, stride: int = 2) -> SparseVoxelTensor:
    """
    Stride-2 sparse convolution.

    Output keys are floor(x / 2) for every active input x. Each input x
    contributes W_o @ in[x] to output floor((x + o) / 2) for every offset o whose
    target is an active output; with only the center weight set this reduces to
    summing the children of each coarse voxel.
    """
    if stride != 2:
        raise ValidationError(f"Only stride 2 is supported, got {stride}")
    _check_channels(t, k)
    coarse_size = tuple(2.0 * s for s in t.voxel_size)
    if len(t) == 0:
        return SparseVoxelTensor.empty(k.out_channels, coarse_size, t.origin)

    parent_codes = encode_keys(np.floor_divide(t.keys, 2))
    out_codes, inverse = np.unique(parent_codes, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.zeros(len(out_codes), dtype=np.int64)
    np.add.at(counts, inverse, t.counts)
    modality = group_modality(inverse, len(out_codes), t.modality)

    out = np.tile(k.bias, (len(out_codes), 1))
    for weight, offset in zip(k.weights, k.offsets):
        targets = encode_keys(np.floor_divide(t.keys + np.asarray(offset), 2))
        pos = np.minimum(np.searchsorted(out_codes, targets), len(out_codes) - 1)
        active = out_codes[pos] == targets
        if not np.any(active):
            continue
        np.add.at(out, pos[active], t.features[active] @ weight.T)

    return SparseVoxelTensor.from_codes(t, out_codes, out, modality, counts, voxel_size=coarse_size)
