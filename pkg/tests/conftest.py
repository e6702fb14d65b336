"""
Pytest configuration and shared fixtures.
"""

import os
import sys

import numpy as np
import pytest

# Add project root to Python path for all tests
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.geometry import Camera, InstanceMask
from src.voxelgrid import Modality, SparseVoxelTensor, encode_keys


def make_tensor(keys, features, modality=Modality.LIDAR, counts=None, voxel_size=(1.0, 1.0, 1.0)):
    """Build a tensor from unsorted keys; rows are reordered into key order."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64).reshape(len(keys), -1)
    order = np.argsort(encode_keys(keys), kind="stable")
    if counts is None:
        counts = np.ones(len(keys), dtype=np.int64)
    modality = np.broadcast_to(np.asarray(modality, dtype=np.int8), (len(keys),))
    return SparseVoxelTensor(
        voxel_size=voxel_size,
        origin=(0.0, 0.0, 0.0),
        keys=keys[order],
        features=features[order],
        modality=modality[order],
        counts=np.asarray(counts)[order],
    )


def random_tensor(rng, n, channels=3, extent=6, modality=Modality.LIDAR, voxel_size=(1.0, 1.0, 1.0)):
    """n distinct random keys in [0, extent)^3 with normal features."""
    codes = rng.choice(extent ** 3, size=n, replace=False)
    keys = np.stack([codes // (extent * extent), (codes // extent) % extent, codes % extent], axis=1)
    return make_tensor(keys, rng.normal(size=(n, channels)), modality, voxel_size=voxel_size)


@pytest.fixture
def identity_camera():
    """fx=fy=1, cx=cy=0, identity pose, large image."""
    return Camera(
        fx=1.0, fy=1.0, cx=0.0, cy=0.0,
        rotation=np.eye(3), translation=np.zeros(3),
        width=100, height=100,
    )


@pytest.fixture
def desk_camera():
    """A 100x80 camera looking along +z from the origin."""
    return Camera(
        fx=100.0, fy=100.0, cx=50.0, cy=40.0,
        rotation=np.eye(3), translation=np.zeros(3),
        width=100, height=80,
    )


@pytest.fixture
def rotated_camera():
    """A camera with a non-trivial rotation and translation."""
    angle = 0.3
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return Camera(
        fx=320.0, fy=300.0, cx=160.0, cy=120.0,
        rotation=rotation, translation=np.array([0.2, -0.1, 0.5]),
        width=320, height=240,
    )


@pytest.fixture
def rect_mask():
    return InstanceMask.from_rects(1, [[0, 0, 10, 10]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
