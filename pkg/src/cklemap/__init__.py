"""Heterogeneous log-transmissivity estimation for steady Darcy flow.

Submodules: mesh (FV lattice + observation operators), fvtpfa (forward
model and sensitivities), gpr (field prior and kriging), ckle (truncated
conditional expansion), sparsechol (factorization and closure solves),
inverse (estimators and the trust-region solver), synth (reference data),
bench (scaling harness), cli (command line).
"""

from .mesh import BoundaryCondition, BoundaryRule, Mesh, MeshSpec, ObservationSet, build_mesh
from .gpr import KernelParams, fit_hyperparameters, condition
from .ckle import CkleBasis, build_basis, expand
from .inverse import InverseConfig, InversionReport, invert

__all__ = [
    "BoundaryCondition", "BoundaryRule", "Mesh", "MeshSpec", "ObservationSet",
    "build_mesh", "KernelParams", "fit_hyperparameters", "condition",
    "CkleBasis", "build_basis", "expand", "InverseConfig", "InversionReport",
    "invert",
]

__version__ = "0.1.0"
