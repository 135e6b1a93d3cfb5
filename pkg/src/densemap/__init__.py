"""Densification of sparse monocular SLAM submaps with up-to-scale depth maps."""

__version__ = "0.1.0"
