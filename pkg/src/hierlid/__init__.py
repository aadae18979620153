"""Hierarchical hybrid inference for strip-sampled lidar biomass estimation."""

__version__ = "0.1.0"
