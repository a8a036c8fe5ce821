"""Edge-preferring priors R(u) = int r(|grad u|) and the lagged-diffusivity matrix M(u)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import TetMesh


@dataclass(frozen=True)
class PriorSpec:
    """Prior family and its parameters.

    ``threshold`` is the Perona-Malik edge threshold ``T`` (same units as
    ``|grad u|``, i.e. 1/mm for log-parameters); ``smoothing`` is the
    smoothed-TV ``eps``. ``weight_ratio`` is ``b/a`` and ``delta`` the
    diagonal shift of ``M_delta``.
    """

    kind: str = "perona_malik"
    threshold: float = 5e-3
    smoothing: float = 1e-3
    weight_ratio: float = 1.0
    delta: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("perona_malik", "smoothed_tv"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "perona_malik" and not self.threshold > 0:
            raise ValueError("Perona-Malik threshold T must be positive")
        if self.kind == "smoothed_tv" and not self.smoothing > 0:
            raise ValueError("smoothed-TV epsilon must be positive")
        if not (self.weight_ratio > 0 and self.delta > 0):
            raise ValueError("weight ratio b/a and delta must be positive")


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("gradient magnitude must be non-negative")
    return t


def r_value(t, spec: PriorSpec):
    t = _check_t(t)
    if spec.kind == "perona_malik":
        T = spec.threshold
        return 0.5 * T**2 * np.log1p((t / T) ** 2)
    e = spec.smoothing
    return np.sqrt(t**2 + e**2) - e


def diffusivity(t, spec: PriorSpec):
    """``r'(t) / t``, continuous at ``t = 0``."""
    t = _check_t(t)
    if spec.kind == "perona_malik":
        return 1.0 / (1.0 + (t / spec.threshold) ** 2)
    return 1.0 / np.sqrt(t**2 + spec.smoothing**2)


def gradient_norms(mesh: TetMesh, u) -> np.ndarray:
    """Element-wise ``|grad u|`` of a P1 field."""
    grad = np.einsum("ec,ecd->ed", np.asarray(u, dtype=float)[mesh.tets], mesh.gradients)
    return np.linalg.norm(grad, axis=1)


def assemble_M(mesh: TetMesh, u, spec: PriorSpec) -> sp.csr_matrix:
    """Stiffness matrix of ``-div(c_u grad .)`` with natural boundary conditions."""
    c = diffusivity(gradient_norms(mesh, u), spec)
    return fem.stiffness_matrix(mesh, c)


def regularizer_value(mesh: TetMesh, u, spec: PriorSpec) -> float:
    return float(np.sum(mesh.volumes * r_value(gradient_norms(mesh, u), spec)))


@dataclass(frozen=True, eq=False)
class PriorPreconditioner:
    """``M_delta = blockdiag(M_1, w M_2, ...) + delta I`` with a reusable solver."""

    matrix: sp.csr_matrix
    factor: fem.SpdFactorization

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, x) -> np.ndarray:
        return self.factor.solve(x)

    def __matmul__(self, x):
        return self.matrix @ x


def build_Mdelta(M_kappa, M_mu, spec: PriorSpec, solver: str = "direct") -> PriorPreconditioner:
    """Regularized block-diagonal prior matrix. Pass ``M_mu=None`` for the kappa block only."""
    blocks = [M_kappa] if M_mu is None else [M_kappa, spec.weight_ratio * M_mu]
    M = sp.block_diag(blocks, format="csr")
    M = (M + spec.delta * sp.identity(M.shape[0], format="csr")).tocsr()
    M.sort_indices()
    try:
        factor = fem.factorize(M, solver)
    except fem.FactorizationError as exc:
        raise fem.FactorizationError(f"M_delta is not positive definite: {exc}", pivot=exc.pivot) from exc
    return PriorPreconditioner(M, factor)
