"""Nested host/accelerator partitioning for dG elastic-acoustic wave propagation."""

from .errors import (
    InfeasiblePartitionError,
    MeshError,
    MissingCalibrationError,
    NestpartError,
    NumericalError,
    ReportError,
)
from .mesh import Mesh, MeshConfig, MortonKey, TreeSpec, build_mesh, extract_face_mesh, morton_decode, morton_encode
from .partition import NestedPartition, NodePartition, grow_device_set, interior_elements, nested_partition, splice
from .perfmodel import DeviceProfile, KernelTimeTable, TransferModel, balance, calibrate, pci_time, predict_step_time
from .physics import Material, WaveState

__version__ = "0.1.0"
