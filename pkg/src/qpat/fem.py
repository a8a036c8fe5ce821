"""P1 finite element assembly and SPD sparse solves.

Quadrature conventions (all exact for P1 data):

* stiffness: the diffusion coefficient enters through its element mean, which
  is exact because the basis gradients are constant per element;
* mass with a P1 coefficient: closed-form integrals of triple products of
  barycentric coordinates (degree 3);
* boundary mass: closed-form facet mass matrix (degree 2);
* boundary loads: 3-point facet rule, exact for degree 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .mesh import _FACET_RULE, TetMesh

logger = logging.getLogger(__name__)


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD yields a non-positive pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


# integral of lambda_a * lambda_b * lambda_c over a tet, divided by its volume
_TRIPLE = np.empty((4, 4, 4))
for _a in range(4):
    for _b in range(4):
        for _c in range(4):
            _n = len({_a, _b, _c})
            _TRIPLE[_a, _b, _c] = {1: 1 / 20, 2: 1 / 60, 3: 1 / 120}[_n]


def _assemble_symmetric(n, conn, blocks) -> sp.csr_matrix:
    """Scatter symmetric local blocks, accumulating only one triangle.

    The upper triangle is summed once and mirrored, so the result is
    symmetric bit for bit.
    """
    k = conn.shape[1]
    iu, ju = np.triu_indices(k)
    gi = conn[:, iu].reshape(-1)
    gj = conn[:, ju].reshape(-1)
    vals = blocks[:, iu, ju].reshape(-1)
    r, c = np.minimum(gi, gj), np.maximum(gi, gj)
    upper = sp.coo_matrix((vals, (r, c)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    strict = sp.triu(upper, k=1, format="csr")
    A = (upper + strict.T).tocsr()
    A.sort_indices()
    return A


def _assemble_general(n, conn, blocks) -> sp.csr_matrix:
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).reshape(-1)
    cols = np.tile(conn, (1, k)).reshape(-1)
    A = sp.coo_matrix((blocks.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def stiffness_blocks(mesh: TetMesh, coeff_per_tet=None) -> np.ndarray:
    g = mesh.gradients
    blocks = np.einsum("eai,ebi->eab", g, g) * mesh.volumes[:, None, None]
    if coeff_per_tet is not None:
        blocks *= np.asarray(coeff_per_tet)[:, None, None]
    return blocks


def mass_blocks(mesh: TetMesh, coeff=None) -> np.ndarray:
    """Local mass blocks, optionally weighted by a nodal (P1) coefficient."""
    vol = mesh.volumes[:, None, None]
    if coeff is None:
        local = np.full((4, 4), 1 / 20) + np.eye(4) / 20
        return vol * local[None]
    c = np.asarray(coeff)[mesh.tets]  # (M, 4)
    return vol * np.einsum("abc,ec->eab", _TRIPLE, c)


def stiffness_matrix(mesh: TetMesh, coeff_per_tet=None) -> sp.csr_matrix:
    """Laplacian stiffness ``int c grad(phi_i) . grad(phi_j)`` for element-constant ``c``."""
    return _assemble_symmetric(mesh.n_vertices, mesh.tets, stiffness_blocks(mesh, coeff_per_tet))


def mass_matrix(mesh: TetMesh, coeff=None) -> sp.csr_matrix:
    """``int c phi_i phi_j``; ``c`` nodal (P1) or ``None`` for unit density."""
    return _assemble_symmetric(mesh.n_vertices, mesh.tets, mass_blocks(mesh, coeff))


def boundary_mass_matrix(mesh: TetMesh, rule: str = "exact") -> sp.csr_matrix:
    """``int_boundary phi_i phi_j dS``.

    ``rule='exact'`` integrates the product exactly; ``'lumped'`` uses the
    vertex rule (row sums moved onto the diagonal), which keeps the system an
    M-matrix when the Robin layer is thinner than the mesh spacing.
    """
    if rule == "lumped":
        w = np.zeros(mesh.n_vertices)
        np.add.at(w, mesh.facets.reshape(-1), np.repeat(mesh.facet_areas / 3, 3))
        return sp.diags(w, format="csr")
    if rule != "exact":
        raise ValueError(f"unknown boundary rule {rule!r}")
    local = (np.full((3, 3), 1 / 12) + np.eye(3) / 12)[None] * mesh.facet_areas[:, None, None]
    return _assemble_symmetric(mesh.n_vertices, mesh.facets, local)


def _check_field(mesh, values, label):
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_vertices,):
        raise ValueError(f"{label} has shape {values.shape}, expected ({mesh.n_vertices},)")
    return values


def assemble_system(mesh: TetMesh, kappa, mu, *, check_positive=True, boundary_rule="lumped") -> sp.csr_matrix:
    """System matrix of the diffusion approximation with Robin boundary.

    ``K_ij = int kappa grad(phi_i).grad(phi_j) + int mu phi_i phi_j
    + 1/2 int_boundary phi_i phi_j``; see :func:`boundary_mass_matrix` for
    ``boundary_rule``.
    """
    kappa = _check_field(mesh, kappa, "kappa")
    mu = _check_field(mesh, mu, "mu")
    if check_positive:
        for label, v in (("kappa", kappa), ("mu", mu)):
            if not np.all(v > 0):
                bad = int(np.nonzero(~(v > 0))[0][0])
                raise ValueError(f"{label} must be positive; node {bad} has {v[bad]!r}")
    kbar = kappa[mesh.tets].mean(axis=1)
    blocks = stiffness_blocks(mesh, kbar) + mass_blocks(mesh, mu)
    K = _assemble_symmetric(mesh.n_vertices, mesh.tets, blocks)
    K = (K + 0.5 * boundary_mass_matrix(mesh, boundary_rule)).tocsr()
    K.sort_indices()
    return K


def assemble_load(mesh: TetMesh, flux) -> np.ndarray:
    """Load ``f_i = 2 int_boundary Phi phi_i dS`` for an illumination/flux.

    ``flux`` is an object with ``evaluate(mesh) -> (F, 3)`` values at the
    facet quadrature points, or such an array directly.
    """
    vals = flux.evaluate(mesh) if hasattr(flux, "evaluate") else np.asarray(flux, dtype=float)
    vals = np.broadcast_to(vals, (len(mesh.facets), 3))
    if not np.all(np.isfinite(vals)):
        raise ValueError("flux is not finite on every boundary quadrature point")
    local = 2.0 * (mesh.facet_areas[:, None] / 3.0) * (vals @ _FACET_RULE)
    f = np.zeros(mesh.n_vertices)
    np.add.at(f, mesh.facets.reshape(-1), local.reshape(-1))
    return f


@dataclass(frozen=True, eq=False)
class SpdFactorization:
    """Reusable solver for one SPD matrix (direct, or Jacobi-CG fallback)."""

    matrix: sp.csr_matrix
    method: str
    _lu: object = None
    _diag: np.ndarray | None = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.method == "direct":
            return self._lu.solve(b)
        if b.ndim == 2:
            return np.column_stack([self._cg(b[:, j]) for j in range(b.shape[1])])
        return self._cg(b)

    __call__ = solve

    def _cg(self, b):
        if not np.any(b):
            return np.zeros_like(b)
        n = len(b)
        precond = sp.diags(1.0 / self._diag)
        x, info = cg(self.matrix, b, rtol=1e-10, atol=0.0, maxiter=10 * n, M=precond)
        if info != 0:
            raise FactorizationError(f"conjugate gradients did not converge (info={info})")
        return x


def factorize(A, method: str = "direct") -> SpdFactorization:
    """Factorize an SPD sparse matrix for repeated solves.

    The direct path is an LDL^T-equivalent sparse LU with a symmetric
    fill-reducing ordering and no pivoting; a non-positive pivot means the
    input was not SPD and raises :class:`FactorizationError`.
    """
    A = sp.csc_matrix(A)
    if method == "direct":
        try:
            lu = splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}") from exc
        pivots = lu.U.diagonal()
        bad = np.nonzero(~(pivots > 0))[0]
        if len(bad) or not np.array_equal(lu.perm_r, lu.perm_c):
            step = int(bad[0]) if len(bad) else -1
            row = int(np.argsort(lu.perm_c)[step]) if step >= 0 else -1
            raise FactorizationError(
                f"matrix is not SPD: pivot {step} (row {row}) is {pivots[step]!r}", pivot=step
            )
        return SpdFactorization(A.tocsr(), "direct", _lu=lu)
    if method == "cg":
        d = A.diagonal()
        if not np.all(d > 0):
            bad = int(np.nonzero(~(d > 0))[0][0])
            raise FactorizationError(f"matrix is not SPD: diagonal entry {bad} is {d[bad]!r}", pivot=bad)
        return SpdFactorization(A.tocsr(), "cg", _diag=d)
    raise ValueError(f"unknown solver method {method!r}")


def spd_solve(A, b, method: str = "direct") -> np.ndarray:
    return factorize(A, method).solve(b)


def integrate_p1(mesh: TetMesh, values) -> float:
    """Integral of a P1 field over the domain."""
    values = _check_field(mesh, values, "field")
    return float(np.sum(mesh.volumes * values[mesh.tets].mean(axis=1)))


def integrate_boundary_p1(mesh: TetMesh, values) -> float:
    values = _check_field(mesh, values, "field")
    return float(np.sum(mesh.facet_areas * values[mesh.facets].mean(axis=1)))
