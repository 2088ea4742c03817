"""Lossless octree geometry codec with learned occupancy context models."""

__version__ = "0.1.0"
