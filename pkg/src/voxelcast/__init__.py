"""Voxel-wise brain encoding toolkit.

Trains encoding models that predict per-voxel brain responses from
precomputed image feature grids, runs the multi-stage All-for-One
distillation recipe over ROI partitions, discovers data-driven ROIs by
clustering regression weights, and checks every mechanism against a
synthetic brain with known ground truth.
"""

__version__ = "0.1.0"
