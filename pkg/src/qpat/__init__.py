"""Optical inverse problem of quantitative photoacoustic tomography on tetrahedral meshes.

Reconstructs nodal diffusion and absorption from interior absorbed-energy data
by repeated linearization, a Perona-Malik edge prior with lagged diffusivity
and priorconditioned LSQR with matrix-free Jacobian products.
"""

__version__ = "0.1.0"

from .forward import Illumination, evaluate_forward
from .mesh import TetMesh, build_interpolation, generate_box_mesh, load_mesh
from .prior import PriorSpec
from .plsqr import LsqrConfig, plsqr_solve
from .reconstruct import ReconConfig, ReconResult, reconstruct
from .simulate import MeasurementSet, PhantomSpec, Primitive, simulate_data

__all__ = [
    "Illumination", "evaluate_forward", "TetMesh", "build_interpolation", "generate_box_mesh", "load_mesh",
    "PriorSpec", "LsqrConfig", "plsqr_solve", "ReconConfig", "ReconResult", "reconstruct",
    "MeasurementSet", "PhantomSpec", "Primitive", "simulate_data",
]
