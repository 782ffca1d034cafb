"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .field_sampler import SamplingError, VoxelGrid
from .geometry import GeometryError


def check_boxes(boxes, name: str = "boxes") -> np.ndarray:
    """``(N, 7)`` finite float array with positive sizes; accepts an empty list."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 7)
    arr = check_array(arr.reshape(-1, arr.shape[-1]), dtype=np.float64, ensure_all_finite=True,
                      input_name=name)
    if arr.shape[1] != 7:
        raise GeometryError(f"{name} must have 7 columns [cx, cy, cz, w, l, h, yaw], got {arr.shape[1]}")
    if np.any(arr[:, 3:6] <= 0):
        raise GeometryError(f"{name} has non-positive sizes")
    return arr


def check_grid(grid) -> VoxelGrid:
    if not isinstance(grid, VoxelGrid):
        raise SamplingError(f"expected a VoxelGrid, got {type(grid).__name__}")
    if not np.all(np.isfinite(grid.data)):
        raise SamplingError("grid contains non-finite samples")
    return grid


def check_paired(grids, boxes) -> tuple[list, list]:
    grids = [check_grid(g) for g in grids]
    if boxes is None or len(boxes) != len(grids):
        raise ValueError("need one box array per grid")
    return grids, [check_boxes(b) for b in boxes]
