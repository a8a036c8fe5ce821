"""Discrete measurement map h(kappa~, mu~) = mu * phi for one or more illuminations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import FACE_TAGS, TetMesh

_AXES = {"x": 0, "y": 1, "z": 2}
# (u, v) coordinate pair with theta = atan2(v, u); axis y gives x = rho cos, z = rho sin
_POLAR_PLANE = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}


@dataclass(frozen=True)
class Illumination:
    """Boundary photon flux ``Phi``.

    kinds
    -----
    ``cylinder_cosine``
        ``cos(pi (theta - theta0) / width)`` for ``|theta - theta0| <= width/2``,
        zero elsewhere; ``theta`` is the polar angle about ``axis``. Only
        facets on the lateral surface (normal not aligned with the axis) are lit.
    ``face_characteristic``
        1 on boundary facets whose tag equals ``face``, 0 elsewhere.
    ``custom``
        ``values`` per facet (length F) or a callable ``values(points)``
        mapping ``(..., 3)`` coordinates to flux values.
    """

    kind: str
    theta0: float = 0.0
    width: float = np.pi / 4
    axis: str = "y"
    face: int | str | None = None
    values: np.ndarray | Callable | None = field(default=None, compare=False)
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cylinder_cosine", "face_characteristic", "custom"):
            raise ValueError(f"unknown illumination kind {self.kind!r}")
        if self.kind == "face_characteristic" and self.face is None:
            raise ValueError("face_characteristic illumination needs a face tag")
        if self.kind == "custom" and self.values is None:
            raise ValueError("custom illumination needs values")
        if self.kind == "cylinder_cosine" and not (0 < self.width <= 2 * np.pi):
            raise ValueError("cylinder_cosine width must lie in (0, 2 pi]")

    @property
    def face_tag(self) -> int:
        return FACE_TAGS[self.face] if isinstance(self.face, str) else int(self.face)

    def profile(self, theta) -> np.ndarray:
        """Angular profile of a ``cylinder_cosine`` flux."""
        d = np.angle(np.exp(1j * (np.asarray(theta) - self.theta0)))
        inside = np.abs(d) <= self.width / 2 + 1e-15
        return self.amplitude * np.where(inside, np.cos(np.pi * d / self.width).clip(min=0.0), 0.0)

    def evaluate(self, mesh: TetMesh) -> np.ndarray:
        """Flux at the (F, 3) facet quadrature points of ``mesh``."""
        nf = len(mesh.facets)
        if self.kind == "face_characteristic":
            if mesh.facet_tags is None:
                raise ValueError(f"mesh {mesh.name!r} has no facet tags")
            lit = (mesh.facet_tags == self.face_tag).astype(float)
            return self.amplitude * np.repeat(lit[:, None], 3, axis=1)
        if self.kind == "custom":
            if callable(self.values):
                vals = np.asarray(self.values(mesh.facet_quadrature_points()), dtype=float)
            else:
                vals = np.asarray(self.values, dtype=float)
                if vals.shape[0] != nf:
                    raise ValueError(f"custom flux has {vals.shape[0]} values, mesh has {nf} facets")
                if vals.ndim == 1:
                    vals = np.repeat(vals[:, None], 3, axis=1)
            return self.amplitude * np.broadcast_to(vals, (nf, 3))
        ax = _AXES[self.axis]
        u, v = _POLAR_PLANE[self.axis]
        pts = mesh.facet_quadrature_points()
        theta = np.arctan2(pts[..., v], pts[..., u])
        lateral = np.abs(mesh.facet_normals[:, ax]) < 0.5
        return self.profile(theta) * lateral[:, None]


def cylinder_illuminations(k: int = 4, width: float = np.pi / 4, axis: str = "y") -> list[Illumination]:
    """``k`` fluxes centred at polar angles ``(j - 1) * 2 pi / k``."""
    return [
        Illumination("cylinder_cosine", theta0=j * 2 * np.pi / k, width=width, axis=axis)
        for j in range(k)
    ]


def solve_fluence(factor: fem.SpdFactorization, loads: np.ndarray) -> np.ndarray:
    """Solve ``K phi = f`` for each column of ``loads`` (N, K)."""
    return np.asarray(factor.solve(loads)).reshape(loads.shape)


@dataclass(frozen=True, eq=False)
class OpticalState:
    """Log-parameters, derived coefficients and the solved fluences.

    ``phi`` and ``loads`` are (K, N) arrays in illumination order.
    """

    mesh: TetMesh
    kappa_log: np.ndarray
    mu_log: np.ndarray
    kappa0: float
    mu0: float
    kappa: np.ndarray
    mu: np.ndarray
    system: sp.csr_matrix
    factor: fem.SpdFactorization
    loads: np.ndarray
    phi: np.ndarray

    @property
    def n_illuminations(self) -> int:
        return len(self.phi)

    @property
    def h(self) -> np.ndarray:
        """Stacked absorbed energy density, length K*N."""
        return (self.mu[None, :] * self.phi).reshape(-1)

    def energy_balance_error(self) -> np.ndarray:
        """Relative mismatch ``|1'K phi - 1'f| / |1'f|`` per illumination."""
        lhs = np.asarray(self.system.sum(axis=0)).ravel() @ self.phi.T
        rhs = self.loads.sum(axis=1)
        scale = np.where(rhs != 0, np.abs(rhs), 1.0)
        return np.abs(lhs - rhs) / scale


def evaluate_forward(
    mesh: TetMesh,
    kappa_log,
    mu_log,
    kappa0: float,
    mu0: float,
    illuminations: Sequence[Illumination],
    *,
    loads: np.ndarray | None = None,
    solver: str = "direct",
    boundary_rule: str = "lumped",
) -> tuple[OpticalState, np.ndarray]:
    """Solve the forward problem in log-parameters.

    ``kappa = kappa0 * exp(kappa_log)``, ``mu = mu0 * exp(mu_log)``; the system
    matrix is assembled and factorized once and shared by all illuminations.
    Precomputed ``loads`` (K, N) skip load assembly.
    """
    if not (kappa0 > 0 and mu0 > 0):
        raise ValueError("background levels kappa0, mu0 must be positive")
    kappa_log = np.array(kappa_log, dtype=float)
    mu_log = np.array(mu_log, dtype=float)
    if not (np.all(np.isfinite(kappa_log)) and np.all(np.isfinite(mu_log))):
        raise ValueError("log-parameters must be finite")
    kappa = kappa0 * np.exp(kappa_log)
    mu = mu0 * np.exp(mu_log)
    K = fem.assemble_system(mesh, kappa, mu, boundary_rule=boundary_rule)
    factor = fem.factorize(K, solver)
    if loads is None:
        loads = np.array([fem.assemble_load(mesh, ill) for ill in illuminations]).reshape(-1, mesh.n_vertices)
    else:
        loads = np.array(loads, dtype=float).reshape(-1, mesh.n_vertices)
    phi = solve_fluence(factor, loads.T).T
    for arr in (kappa_log, mu_log, kappa, mu, loads, phi):
        arr.setflags(write=False)
    state = OpticalState(mesh, kappa_log, mu_log, float(kappa0), float(mu0), kappa, mu, K, factor, loads, phi)
    return state, state.h


def total_absorption(mesh: TetMesh, h) -> float:
    """Integral of the P1 interpolant of ``h`` over the domain."""
    return fem.integrate_p1(mesh, h)
