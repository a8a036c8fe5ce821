"""Priorconditioned LSQR with a windowed relative-reduction stopping rule.

Solves ``min |A beta - y|`` by LSQR on ``A L^-1`` started from zero and mapped
back with ``beta = L^-1 beta~``, where ``M = L^T L``. The factor ``L`` is never
formed: the Golub-Kahan recurrence is run in the original coordinates with
right-space inner products weighted by ``M^-1``, which costs one ``M`` solve,
one ``A`` and one ``A^T`` product per iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

Operator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LsqrConfig:
    """``window`` is m0 and ``tau`` the relative-reduction threshold.

    ``tol`` (off by default) adds the classical LSQR test
    ``|A~^T r| <= tol |A~| |r|`` for running to convergence.
    """

    window: int = 10
    tau: float = 1e-2
    max_iter: int = 200
    record_history: bool = False
    tol: float = 0.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window m0 must be >= 1")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.max_iter < self.window + 1:
            raise ValueError("max_iter must be at least m0 + 1")


@dataclass
class LsqrOutcome:
    solution: np.ndarray
    residuals: list[float]  # residuals[m] = |A beta_m - y|, residuals[0] = |y|
    iterations: int
    stop_reason: str
    iterates: list[np.ndarray] = field(default_factory=list)


def relative_reduction(residuals, m: int, window: int) -> float:
    """``r_m = 1 - res_m / res_{m - m0}`` (defined for ``m > m0``)."""
    prev = residuals[m - window]
    if prev == 0.0:
        return 0.0
    return 1.0 - residuals[m] / prev


def window_stop_index(residuals, window: int, tau: float):
    """Smallest ``m > window`` with ``r_m <= tau`` in a residual history, or None."""
    for m in range(window + 1, len(residuals)):
        if relative_reduction(residuals, m, window) <= tau:
            return m
    return None


def plsqr_solve(
    apply_A: Operator,
    apply_At: Operator,
    solve_M: Operator,
    y: np.ndarray,
    cfg: LsqrConfig = LsqrConfig(),
) -> LsqrOutcome:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("right-hand side is not finite (iteration 0)")

    beta = np.linalg.norm(y)
    if beta == 0.0:
        return LsqrOutcome(np.zeros_like(apply_At(y), dtype=float), [0.0], 0, "zero_rhs")

    u = y / beta
    p = apply_At(u)
    x = np.zeros_like(p, dtype=float)
    q = solve_M(p)
    alpha = np.sqrt(max(p @ q, 0.0))
    if alpha == 0.0:
        return LsqrOutcome(x, [beta], 0, "converged")
    v = q / alpha  # M^-1-normalised direction, original coordinates
    vd = p / alpha  # M v
    w = v.copy()
    phibar, rhobar = beta, alpha
    anorm2 = 0.0
    history = [beta]
    iterates = [x.copy()] if cfg.record_history else []

    reason = "max_iter"
    for it in range(1, cfg.max_iter + 1):
        av = apply_A(v)
        u = av - alpha * u
        beta = np.linalg.norm(u)
        broke = beta <= 1e-14 * np.linalg.norm(av)
        if not broke:
            u /= beta
            p = apply_At(u) - beta * vd
            q = solve_M(p)
            alpha_new = np.sqrt(max(p @ q, 0.0))
        else:
            beta, alpha_new = 0.0, 0.0
        anorm2 += alpha**2 + beta**2

        rho = np.hypot(rhobar, beta)
        c, s = rhobar / rho, beta / rho
        theta = s * alpha_new
        rhobar = -c * alpha_new
        phi = c * phibar
        phibar = s * phibar
        x = x + (phi / rho) * w

        if alpha_new > 1e-14 * max(np.sqrt(anorm2), 1e-300):
            v = q / alpha_new
            vd = p / alpha_new
            w = v - (theta / rho) * w
        else:
            broke = True
        alpha = alpha_new

        if not (np.isfinite(phibar) and np.all(np.isfinite(x))):
            raise FloatingPointError(f"non-finite value in LSQR at iteration {it}")
        history.append(abs(phibar))
        if cfg.record_history:
            iterates.append(x.copy())

        if it > cfg.window and relative_reduction(history, it, cfg.window) <= cfg.tau:
            reason = "window_rule"
            break
        if broke:
            reason = "converged"
            break
        if cfg.tol > 0 and alpha * abs(c * phibar) <= cfg.tol * np.sqrt(anorm2) * abs(phibar):
            reason = "converged"
            break
    else:
        logger.warning("LSQR hit max_iter=%d before the window rule triggered", cfg.max_iter)

    return LsqrOutcome(x, history, it, reason, iterates)
