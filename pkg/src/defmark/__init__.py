"""defmark: landmark transfer onto 3D scans via deformation-graph registration.

A landmark-annotated source model is rigidly pre-aligned onto a target scan
(rigid coherent point drift), then deformed non-rigidly through a graph of
sampled nodes whose per-node rotations and translations are fitted by
alternating closest-point matching with closed-form Gauss-Seidel block
updates. The fitted deformation carries the source landmarks onto the target.
"""

from .backend import BACKEND
from .cli import EvaluationOutcome, landmark_error
from .errors import (
    DefmarkError,
    DegenerateGeometryError,
    FileFormatError,
    InputError,
    NumericalError,
)
from .geometry import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    TriMesh,
    axis_angle_rotation,
    bbox_diagonal,
    kabsch_rotation,
    rotation_from_cross_covariance,
)
from .graph import (
    DeformationGraph,
    NodeAdjacency,
    NodeSet,
    NodeTransformSet,
    VertexBinding,
    VertexBindings,
    bind_vertices,
    build_deformation_graph,
    build_node_graph,
    deform_points,
    sample_nodes,
    transfer_landmarks,
)
from .model_io import (
    LandmarkSet,
    ReportDocument,
    read_landmarks,
    read_mesh,
    write_landmarks,
    write_mesh,
    write_report,
)
from .rigid import CpdParams, CpdResult, apply_rigid, rigid_cpd
from .solver import (
    CorrespondenceSet,
    NodeSystem,
    RegistrationResult,
    SolverParams,
    build_node_system,
    energy_align,
    energy_smooth,
    energy_total,
    find_correspondences,
    register,
    solve_node,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CorrespondenceSet",
    "CpdParams",
    "CpdResult",
    "DefmarkError",
    "DeformationGraph",
    "DegenerateGeometryError",
    "EvaluationOutcome",
    "FileFormatError",
    "InputError",
    "LandmarkSet",
    "NodeAdjacency",
    "NodeSet",
    "NodeSystem",
    "NodeTransformSet",
    "NumericalError",
    "PointCloud",
    "RegistrationResult",
    "ReportDocument",
    "RigidTransform",
    "SolverParams",
    "SpatialIndex",
    "TriMesh",
    "VertexBinding",
    "VertexBindings",
    "apply_rigid",
    "axis_angle_rotation",
    "bbox_diagonal",
    "bind_vertices",
    "build_deformation_graph",
    "build_node_graph",
    "build_node_system",
    "deform_points",
    "energy_align",
    "energy_smooth",
    "energy_total",
    "find_correspondences",
    "kabsch_rotation",
    "landmark_error",
    "read_landmarks",
    "read_mesh",
    "register",
    "rigid_cpd",
    "rotation_from_cross_covariance",
    "sample_nodes",
    "solve_node",
    "transfer_landmarks",
    "write_landmarks",
    "write_mesh",
    "write_report",
]
