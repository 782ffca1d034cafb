"""Rotated 3D region proposals on voxel grids sampled from density fields."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("voxrpn")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

from .config import RunConfig
from .estimator import GridSampler, RegionProposer
from .field_sampler import VoxelGrid, read_nvg, write_nvg
from .geometry import Aabb, Camera, Obb, rotated_iou

__all__ = ["__version__", "Aabb", "Camera", "GridSampler", "Obb", "RegionProposer", "RunConfig", "VoxelGrid",
           "read_nvg", "rotated_iou", "write_nvg"]
