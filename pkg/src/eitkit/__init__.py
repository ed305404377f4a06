"""Differentiable 2-D electrical impedance tomography toolkit.

Forward solver for the Complete Electrode Model on the unit disk,
measurement Jacobians by dual-number forward differentiation and by the
adjoint identity, Levenberg-Marquardt anomaly reconstruction, and the
batch experiments and benchmarks built on top of them.
"""

from .anomaly import (
    PARAM_ORDER,
    AnomalyParams,
    SmoothingConfig,
    element_conductivities,
    level_set,
    smooth_heaviside,
)
from .dual import DualScalar, seed
from .forward import (
    CurrentPatterns,
    FemSystem,
    ForwardModel,
    ModelError,
    SolverError,
    assemble_system,
    extract_voltages,
    simulate,
    solve_system,
    trig_patterns,
)
from .inverse import LmConfig, LmTrace, loss, reconstruct, relative_loss
from .jacobian import (
    JacobianComparison,
    compare_jacobians,
    jacobian_ad,
    jacobian_analytic,
    jacobian_fd,
)
from .mesh import ElectrodeLayout, Mesh, MeshError, build_disk_mesh, load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "PARAM_ORDER",
    "AnomalyParams",
    "SmoothingConfig",
    "element_conductivities",
    "level_set",
    "smooth_heaviside",
    "DualScalar",
    "seed",
    "CurrentPatterns",
    "FemSystem",
    "ForwardModel",
    "ModelError",
    "SolverError",
    "assemble_system",
    "extract_voltages",
    "simulate",
    "solve_system",
    "trig_patterns",
    "LmConfig",
    "LmTrace",
    "loss",
    "reconstruct",
    "relative_loss",
    "JacobianComparison",
    "compare_jacobians",
    "jacobian_ad",
    "jacobian_analytic",
    "jacobian_fd",
    "ElectrodeLayout",
    "Mesh",
    "MeshError",
    "build_disk_mesh",
    "load_mesh",
    "save_mesh",
]
