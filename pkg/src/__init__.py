"""
voxfuse - multi-depth unprojection and gated modality-aware voxel fusion.
"""

__version__ = "0.1.0"
__author__ = "voxfuse developers"
