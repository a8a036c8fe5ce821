"""Outer reconstruction loop: background fit, initial guesses, the diffusion-only
zeroth step and repeated linearization with priorconditioned LSQR.

Every linearization solves ``A beta = y~`` with ``A = Gamma^-1/2 J`` and
``y~ = Gamma^-1/2 (chi - h + J beta_l)`` from zero, preconditioned by the
lagged-diffusivity prior ``M_delta(beta_l)``. A candidate is accepted only if it
lowers the whitened nonlinear residual ``|Gamma^-1/2 (chi - h(beta))|``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import fem
from .forward import Illumination, OpticalState, evaluate_forward
from .jacobian import JacobianState, build_jacobian_state
from .mesh import TetMesh
from .plsqr import LsqrConfig, LsqrOutcome, plsqr_solve
from .prior import PriorSpec, assemble_M, build_Mdelta
from .simulate import MeasurementSet

logger = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    """Numerical failure inside the outer loop; ``outer`` is the linearization index."""

    def __init__(self, message, outer=None):
        super().__init__(message)
        self.outer = outer


@dataclass(frozen=True)
class BackgroundSearch:
    """log10 grid over ``(kappa, mu)`` followed by Nelder-Mead in natural-log space.

    Refinement stops once the simplex diameter falls below ``xatol``.
    """

    kappa_bounds: tuple[float, float] = (0.03, 3.0)
    mu_bounds: tuple[float, float] = (0.001, 0.1)
    grid: int = 7
    xatol: float = 1e-3
    max_evals: int = 400

    def __post_init__(self):
        for lo, hi in (self.kappa_bounds, self.mu_bounds):
            if not 0 < lo < hi:
                raise ValueError("background bounds must satisfy 0 < low < high")
        if self.grid < 2 or self.xatol <= 0:
            raise ValueError("grid must have >= 2 points per axis and xatol must be positive")


@dataclass(frozen=True)
class ReconConfig:
    prior: PriorSpec = PriorSpec()
    lsqr: LsqrConfig = LsqrConfig()
    max_outer: int = 10  # total linearizations, step 0 included
    background: BackgroundSearch = BackgroundSearch()
    clamp_floor: float = 1e-6
    enable_step_zero: bool = True
    seed: int = 0
    solver: str = "direct"
    keep_iterates: bool = False

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if not 0 < self.clamp_floor < 1:
            raise ValueError("clamp_floor must lie in (0, 1)")
        if self.solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class ReconResult:
    """Reconstructed fields and the full iteration record.

    ``nonlinear_residuals[0]`` belongs to the initial guess; entry ``i >= 1``
    to the candidate of linearization ``i`` (accepted or not), whose inner
    LSQR residuals are ``inner_histories[i - 1]``.
    """

    kappa: np.ndarray
    mu: np.ndarray
    kappa_log: np.ndarray
    mu_log: np.ndarray
    kappa0: float
    mu0: float
    nonlinear_residuals: list[float]
    accepted: list[bool]
    inner_histories: list[list[float]]
    stop_reasons: list[str]
    termination: str
    n_measurements: int
    flags: list[str] = field(default_factory=list)
    betas: list[np.ndarray] = field(default_factory=list)

    @property
    def linearizations(self) -> int:
        return len(self.inner_histories)

    @property
    def noise_level(self) -> float:
        """Expected whitened residual of pure noise, ``sqrt(K N)``."""
        return float(np.sqrt(self.n_measurements))

    def accepted_residuals(self) -> list[float]:
        r = self.nonlinear_residuals
        return [r[0]] + [r[i + 1] for i, ok in enumerate(self.accepted) if ok]


def _loads(mesh, illuminations):
    return np.array([fem.assemble_load(mesh, ill) for ill in illuminations]).reshape(-1, mesh.n_vertices)


def fit_background(
    mesh: TetMesh,
    data: MeasurementSet,
    illuminations: Sequence[Illumination],
    search: BackgroundSearch = BackgroundSearch(),
    *,
    loads=None,
    solver: str = "direct",
) -> tuple[float, float]:
    """Constant ``(kappa0, mu0)`` minimizing the whitened data misfit."""
    if data.chi.size == 0:
        raise ValueError("empty measurement set")
    loads = _loads(mesh, illuminations) if loads is None else loads
    zero = np.zeros(mesh.n_vertices)

    def objective(x):
        try:
            _, h = evaluate_forward(mesh, zero, zero, np.exp(x[0]), np.exp(x[1]), illuminations,
                                    loads=loads, solver=solver)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError):
            return np.inf
        val = data.whitened_residual(h)
        return val if np.isfinite(val) else np.inf

    lk = np.linspace(*np.log10(search.kappa_bounds), search.grid)
    lm = np.linspace(*np.log10(search.mu_bounds), search.grid)
    # natural-log coordinates for the whole search
    grid = np.log(10.0) * np.array([(a, b) for a in lk for b in lm])
    vals = np.array([objective(x) for x in grid])
    if not np.any(np.isfinite(vals)):
        raise ValueError("background objective is non-finite on the whole grid")
    x0 = grid[int(np.argmin(vals))]
    step = 0.5 * np.log(10.0) * np.array([lk[1] - lk[0], lm[1] - lm[0]])
    simplex = np.array([x0, x0 + [step[0], 0.0], x0 + [0.0, step[1]]])
    res = minimize(
        objective, x0, method="Nelder-Mead",
        # max per-coordinate spread xatol/3 keeps the Euclidean diameter below xatol
        options=dict(initial_simplex=simplex, xatol=search.xatol / 3, fatol=np.inf, maxfev=search.max_evals),
    )
    x = res.x if res.fun <= vals.min() else x0
    kappa0, mu0 = float(np.exp(x[0])), float(np.exp(x[1]))
    logger.info("background fit: kappa0=%.5g mm, mu0=%.5g /mm (misfit %.5g, %d evals)",
                kappa0, mu0, min(res.fun, vals.min()), res.nfev + len(grid))
    return kappa0, mu0


def init_guesses(data: MeasurementSet, kappa0: float, mu0: float, phi0, clamp_floor: float = 1e-6):
    """``(kappa~_init, mu~_init)`` with ``exp(mu~_init)`` the illumination-average of ``chi / (phi0 mu0)``."""
    phi0 = np.asarray(phi0, dtype=float).reshape(data.chi.shape)
    if np.any(phi0 <= 0):
        raise ValueError("background fluence must be positive at every node")
    ratio = np.mean(data.chi / (phi0 * mu0), axis=0)
    top = ratio.max()
    if not top > 0:
        raise ValueError("all measurements are non-positive")
    mu_log = np.log(np.maximum(ratio, clamp_floor * top))
    return np.zeros_like(mu_log), mu_log


def linearized_data(state: OpticalState, jac: JacobianState, data: MeasurementSet, beta=None):
    """Whitened right-hand side ``Gamma^-1/2 (chi - h + J beta)``; ``beta`` defaults to the state's."""
    if beta is None:
        beta = np.concatenate([state.kappa_log, state.mu_log])
    beta = np.asarray(beta, dtype=float)
    if beta.shape == (jac.n,):
        beta = np.concatenate([beta, np.zeros(jac.n)])
    return data.weights * (data.stacked - state.h + jac.apply(beta))


def _whitened_ops(jac: JacobianState, w, kappa_only=False):
    n = jac.n
    if kappa_only:
        pad = np.zeros(n)
        return (lambda s: w * jac.apply(np.concatenate([s, pad])),
                lambda t: jac.apply_transpose(w * t)[:n])
    return lambda s: w * jac.apply(s), lambda t: jac.apply_transpose(w * t)


def step_zero(state: OpticalState, data: MeasurementSet, cfg: ReconConfig) -> tuple[np.ndarray, LsqrOutcome | None]:
    """One kappa-only priorconditioned LSQR solve at ``(kappa~_init, mu~_init)``.

    Returns the refined ``kappa~_init`` and the inner outcome (``None`` when disabled).
    """
    if not cfg.enable_step_zero:
        return np.array(state.kappa_log), None
    jac = build_jacobian_state(state)
    A, At = _whitened_ops(jac, data.weights, kappa_only=True)
    y = linearized_data(state, jac, data, state.kappa_log)
    Md = build_Mdelta(assemble_M(state.mesh, state.kappa_log, cfg.prior), None, cfg.prior, cfg.solver)
    out = plsqr_solve(A, At, Md.solve, y, cfg.lsqr)
    return out.solution, out


def _forward(mesh, beta, kappa0, mu0, illuminations, loads, cfg, outer):
    n = mesh.n_vertices
    try:
        with np.errstate(over="raise", invalid="raise"):
            state, _ = evaluate_forward(mesh, beta[:n], beta[n:], kappa0, mu0, illuminations,
                                        loads=loads, solver=cfg.solver)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise ReconstructionError(f"forward solve failed at linearization {outer}: {exc}", outer) from exc
    return state


def _log_extremes(mesh, state, outer):
    interior = np.setdiff1d(np.arange(mesh.n_vertices), mesh.boundary_vertices)
    k = state.kappa
    msg = "linearization %d: kappa range [%.4g, %.4g]"
    args = [outer, k.min(), k.max()]
    if interior.size:
        msg += ", interior [%.4g, %.4g]"
        args += [k[interior].min(), k[interior].max()]
    logger.info(msg, *args)


def reconstruct(
    mesh: TetMesh,
    data: MeasurementSet,
    illuminations: Sequence[Illumination],
    cfg: ReconConfig = ReconConfig(),
    *,
    background: tuple[float, float] | None = None,
) -> ReconResult:
    """Run the full algorithm; ``background`` skips the ``(kappa0, mu0)`` search."""
    if data.chi.shape != (len(illuminations), mesh.n_vertices):
        raise ValueError(f"data shape {data.chi.shape} does not match "
                         f"{len(illuminations)} illuminations on {mesh.n_vertices} nodes")
    n = mesh.n_vertices
    loads = _loads(mesh, illuminations)
    if background is None:
        kappa0, mu0 = fit_background(mesh, data, illuminations, cfg.background, loads=loads, solver=cfg.solver)
    else:
        kappa0, mu0 = map(float, background)
    bg_state = _forward(mesh, np.zeros(2 * n), kappa0, mu0, illuminations, loads, cfg, 0)
    try:
        k_log, m_log = init_guesses(data, kappa0, mu0, bg_state.phi, cfg.clamp_floor)
    except ValueError as exc:
        raise ReconstructionError(f"initial guess failed: {exc}", 0) from exc

    beta = np.concatenate([k_log, m_log])
    state = _forward(mesh, beta, kappa0, mu0, illuminations, loads, cfg, 0)
    res = data.whitened_residual(state.h)
    residuals, accepted, inner, reasons, flags = [res], [], [], [], []
    betas = [beta.copy()] if cfg.keep_iterates else []
    logger.info("initial guess: nonlinear residual %.6g (noise level %.6g)", res, np.sqrt(data.chi.size))

    def record(outcome, cand_res, ok, label):
        inner.append(list(outcome.residuals))
        reasons.append(outcome.stop_reason)
        residuals.append(cand_res)
        accepted.append(ok)
        logger.info("%s: %d inner iterations (%s), inner residual %.6g, nonlinear residual %.6g, %s",
                    label, outcome.iterations, outcome.stop_reason, outcome.residuals[-1], cand_res,
                    "accepted" if ok else "rejected")

    if cfg.enable_step_zero:
        try:
            k_new, out = step_zero(state, data, cfg)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise ReconstructionError(f"step 0 failed: {exc}", 0) from exc
        cand = np.concatenate([k_new, m_log])
        cand_state = _forward(mesh, cand, kappa0, mu0, illuminations, loads, cfg, 0)
        cand_res = data.whitened_residual(cand_state.h)
        ok = cand_res < res
        record(out, cand_res, ok, "step 0")
        if ok:
            beta, state, res = cand, cand_state, cand_res
            betas += [beta.copy()] if cfg.keep_iterates else []
            _log_extremes(mesh, state, 0)
        else:
            flags.append("step_zero_rejected")

    termination = "max_outer"
    while len(inner) < cfg.max_outer:
        outer = len(inner)
        try:
            jac = build_jacobian_state(state)
            A, At = _whitened_ops(jac, data.weights)
            y = linearized_data(state, jac, data, beta)
            Md = build_Mdelta(assemble_M(mesh, beta[:n], cfg.prior), assemble_M(mesh, beta[n:], cfg.prior),
                              cfg.prior, cfg.solver)
            out = plsqr_solve(A, At, Md.solve, y, cfg.lsqr)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise ReconstructionError(f"linearization {outer} failed: {exc}", outer) from exc
        cand_state = _forward(mesh, out.solution, kappa0, mu0, illuminations, loads, cfg, outer)
        cand_res = data.whitened_residual(cand_state.h)
        ok = cand_res < res
        record(out, cand_res, ok, f"linearization {outer}")
        if not ok:
            termination = "residual_increase"
            if not any(accepted[int(cfg.enable_step_zero):]):
                flags.append("no_accepted_update")
            break
        beta, state, res = out.solution, cand_state, cand_res
        if cfg.keep_iterates:
            betas.append(beta.copy())
        _log_extremes(mesh, state, outer)

    return ReconResult(
        kappa=np.array(state.kappa), mu=np.array(state.mu),
        kappa_log=beta[:n].copy(), mu_log=beta[n:].copy(), kappa0=kappa0, mu0=mu0,
        nonlinear_residuals=residuals, accepted=accepted, inner_histories=inner, stop_reasons=reasons,
        termination=termination, n_measurements=int(data.chi.size), flags=flags, betas=betas,
    )
