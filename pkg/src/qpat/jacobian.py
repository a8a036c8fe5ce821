"""Matrix-free products with the Jacobian of (kappa~, mu~) -> h and its transpose.

For illumination k, with ``G1``/``G2`` the derivative load matrices

    G1_ij = -int phi_j grad(phi_k) . grad(phi_i),   G2_ij = -int phi_j phi_k phi_i,

the forward product is

    J s = mu * K^-1 (G1 (kappa * s1) + G2 (mu * s2)) + phi_k * mu * s2

and the transpose follows from the symmetry of ``K`` and ``G2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from . import fem
from .forward import OpticalState, evaluate_forward
from .mesh import TetMesh


def derivative_loads(mesh: TetMesh, phi: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Assemble ``(G1, G2)`` for one nodal fluence ``phi``."""
    g = mesh.gradients
    grad_phi = np.einsum("ec,ecd->ed", phi[mesh.tets], g)
    # int_e phi_j (grad phi . grad phi_i) = vol/4 * (grad phi . g_i) for j in e
    col = mesh.volumes * 0.25
    blk = -np.einsum("ead,ed->ea", g, grad_phi) * col[:, None]
    blocks = np.repeat(blk[:, :, None], 4, axis=2)
    G1 = fem._assemble_general(mesh.n_vertices, mesh.tets, blocks)
    G2 = fem.mass_matrix(mesh, phi)
    G2.data *= -1.0
    return G1, G2


@dataclass(frozen=True, eq=False)
class JacobianState:
    """Everything needed for ``J s`` and ``J^T t`` at one parameter vector."""

    kappa: np.ndarray
    mu: np.ndarray
    phi: np.ndarray  # (K, N)
    factor: fem.SpdFactorization
    G1: tuple
    G2: tuple

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def n_illuminations(self) -> int:
        return len(self.phi)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_illuminations * self.n, 2 * self.n

    def apply(self, s) -> np.ndarray:
        return jac_apply(self, s)

    def apply_transpose(self, t) -> np.ndarray:
        return jac_apply_transpose(self, t)

    def as_operator(self, block: str = "both") -> LinearOperator:
        """View as a scipy ``LinearOperator``; ``block='kappa'`` keeps only the kappa columns."""
        m, n2 = self.shape
        if block == "both":
            return LinearOperator((m, n2), matvec=self.apply, rmatvec=self.apply_transpose)
        if block == "kappa":
            n = self.n
            zeros = np.zeros(n)
            return LinearOperator(
                (m, n),
                matvec=lambda s: self.apply(np.concatenate([np.ravel(s), zeros])),
                rmatvec=lambda t: self.apply_transpose(t)[:n],
            )
        raise ValueError(f"unknown block {block!r}")


def build_jacobian_state(state: OpticalState) -> JacobianState:
    G1, G2 = zip(*(derivative_loads(state.mesh, phi) for phi in state.phi))
    return JacobianState(state.kappa, state.mu, state.phi, state.factor, tuple(G1), tuple(G2))


def jac_apply(state: JacobianState, s) -> np.ndarray:
    """``J s`` for ``s = [s_kappa, s_mu]`` (length 2N); returns length K*N."""
    s = np.asarray(s, dtype=float)
    n = state.n
    if s.shape != (2 * n,):
        raise ValueError(f"direction has shape {s.shape}, expected ({2 * n},)")
    sk = state.kappa * s[:n]
    sm = state.mu * s[n:]
    rhs = np.column_stack([g1 @ sk + g2 @ sm for g1, g2 in zip(state.G1, state.G2)])
    z = state.factor.solve(rhs).reshape(n, -1)
    out = state.mu[None, :] * z.T + state.phi * sm[None, :]
    return out.reshape(-1)


def jac_apply_transpose(state: JacobianState, t) -> np.ndarray:
    """``J^T t`` for stacked ``t`` (length K*N); returns length 2N."""
    t = np.asarray(t, dtype=float)
    n, k = state.n, state.n_illuminations
    if t.shape != (k * n,):
        raise ValueError(f"vector has shape {t.shape}, expected ({k * n},)")
    t = t.reshape(k, n)
    z = state.factor.solve((state.mu[None, :] * t).T).reshape(n, k)
    out_k = np.zeros(n)
    out_m = np.zeros(n)
    for i in range(k):
        out_k += state.G1[i].T @ z[:, i]
        out_m += state.G2[i] @ z[:, i] + state.phi[i] * t[i]
    return np.concatenate([state.kappa * out_k, state.mu * out_m])


def check_jacobian(mesh, kappa_log, mu_log, kappa0, mu0, illuminations, *, n_pairs=20, n_dirs=10, eps=1e-5, seed=0):
    """Adjoint and central-difference consistency errors at one state.

    Returns ``(adjoint_error, fd_error)``: the worst relative adjoint
    mismatch ``|<Js,t> - <s,J^T t>| / (|Js| |t|)`` over ``n_pairs`` random pairs
    and the worst relative error of ``J s`` against central differences of
    :func:`~qpat.forward.evaluate_forward` over ``n_dirs`` random directions.
    """
    rng = np.random.default_rng(seed)
    state, _ = evaluate_forward(mesh, kappa_log, mu_log, kappa0, mu0, illuminations)
    jac = build_jacobian_state(state)
    m, n2 = jac.shape
    adj = 0.0
    for _ in range(n_pairs):
        s, t = rng.standard_normal(n2), rng.standard_normal(m)
        js = jac.apply(s)
        err = abs(js @ t - s @ jac.apply_transpose(t)) / (np.linalg.norm(js) * np.linalg.norm(t))
        adj = max(adj, err)
    fd = 0.0
    beta = np.concatenate([kappa_log, mu_log])
    n = n2 // 2
    for _ in range(n_dirs):
        s = rng.standard_normal(n2)
        s /= np.linalg.norm(s, np.inf)
        hp = evaluate_forward(mesh, *np.split(beta + eps * s, [n]), kappa0, mu0, illuminations, loads=state.loads)[1]
        hm = evaluate_forward(mesh, *np.split(beta - eps * s, [n]), kappa0, mu0, illuminations, loads=state.loads)[1]
        ref = (hp - hm) / (2 * eps)
        fd = max(fd, np.linalg.norm(jac.apply(s) - ref) / np.linalg.norm(ref))
    return adj, fd
