"""
Test package for voxfuse.
"""
