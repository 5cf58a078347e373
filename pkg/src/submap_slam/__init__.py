"""Submap-based monocular dense SLAM backend with a splat map and loop closure."""

__version__ = "0.1.0"
