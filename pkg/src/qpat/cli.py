"""Command-line entry point and the strict JSON run configuration.

Usage::

    qpat <mode> --config PATH [--seed N] [--out DIR] [--override key=value ...]

Exit status is 0 on success, 1 for configuration errors and 2 for numerical
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import io as qio
from .forward import evaluate_forward
from .jacobian import check_jacobian
from .mesh import FACE_TAGS, MeshError, TetMesh, build_interpolation, generate_box_mesh, load_mesh
from .plsqr import LsqrConfig
from .prior import PriorSpec
from .reconstruct import BackgroundSearch, ReconConfig, ReconstructionError, reconstruct
from .simulate import PhantomSpec, Primitive, cube_phantom, cylinder_phantom, make_illumination, rasterize_phantom, simulate_data

logger = logging.getLogger("qpat")

MODES = ("simulate", "reconstruct", "forward", "check-jacobian", "info")
PRESETS = {"cube": cube_phantom, "cylinder": cylinder_phantom}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BoxMesh(_Strict):
    n: tuple[int, int, int]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extent: tuple[float, float, float] = (1.0, 1.0, 1.0)


class FileMesh(_Strict):
    node: str
    ele: str
    face: Optional[str] = None


class MeshConfig(_Strict):
    box: Optional[BoxMesh] = None
    files: Optional[FileMesh] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.box is None) == (self.files is None):
            raise ValueError("give exactly one of 'box' or 'files'")
        return self


class PrimitiveConfig(_Strict):
    shape: str
    params: dict
    kappa: Optional[float] = None
    mu: Optional[float] = None
    label: Optional[str] = None


class PhantomConfig(_Strict):
    preset: Optional[Literal["cube", "cylinder"]] = None
    kappa_bg: Optional[float] = None
    mu_bg: Optional[float] = None
    primitives: list[PrimitiveConfig] = Field(default_factory=list)


class IlluminationConfig(_Strict):
    kind: Literal["face_characteristic", "face", "cylinder_cosine", "cylinder"]
    face: Optional[Union[int, str]] = None
    theta0: float = 0.0
    width: float = float(np.pi / 4)
    axis: Literal["x", "y", "z"] = "y"
    amplitude: float = 1.0


class PriorConfig(_Strict):
    kind: Literal["perona_malik", "smoothed_tv"] = "perona_malik"
    threshold: float = 5e-3
    smoothing: float = 1e-3
    weight_ratio: float = 1.0
    delta: float = 1e-6


class LsqrSection(_Strict):
    window: int = 10
    tau: float = 1e-2
    max_iter: int = 200
    tol: float = 0.0


class BackgroundConfig(_Strict):
    kappa_bounds: tuple[float, float] = (0.03, 3.0)
    mu_bounds: tuple[float, float] = (0.001, 0.1)
    grid: int = 7
    xatol: float = 1e-3
    max_evals: int = 400


class ReconSection(_Strict):
    prior: PriorConfig = Field(default_factory=PriorConfig)
    lsqr: LsqrSection = Field(default_factory=LsqrSection)
    max_outer: int = 10
    background: BackgroundConfig = Field(default_factory=BackgroundConfig)
    clamp_floor: float = 1e-6
    enable_step_zero: bool = True
    solver: Literal["direct", "cg"] = "direct"


class JacobianCheckConfig(_Strict):
    n_pairs: int = 20
    n_dirs: int = 10
    eps: float = 1e-5
    scale: float = 0.3  # std of the random log-parameters
    kappa0: float = 0.3
    mu0: float = 0.015
    adjoint_tol: float = 1e-10
    fd_tol: float = 1e-4


class RunConfig(_Strict):
    mode: Optional[Literal["simulate", "reconstruct", "forward", "check-jacobian", "info"]] = None
    seed: int = 0
    mesh: MeshConfig
    fine_mesh: Optional[MeshConfig] = None
    phantom: Optional[PhantomConfig] = None
    illuminations: list[IlluminationConfig] = Field(default_factory=list)
    noise_level: float = Field(0.01, ge=0)
    measurements: Optional[str] = None
    recon: ReconSection = Field(default_factory=ReconSection)
    jacobian_check: JacobianCheckConfig = Field(default_factory=JacobianCheckConfig)
    export_matrices: bool = False
    output: str = "out"


# ----------------------------------------------------------------- config ---

def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; ``value`` is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = _coerce(value)


def load_config(path, overrides=(), *, mode=None, seed=None, out=None) -> tuple[RunConfig, Path]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for item in overrides:
        apply_override(raw, item)
    for key, val in (("mode", mode), ("seed", seed), ("output", out)):
        if val is not None:
            raw[key] = val
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, path.parent


def config_echo(cfg: RunConfig) -> dict:
    """JSON-ready config without the output location (keeps manifests path-independent)."""
    d = cfg.model_dump(mode="json")
    d.pop("output", None)
    return d


def build_mesh(mc: MeshConfig, base: Path) -> TetMesh:
    if mc.box is not None:
        b = mc.box
        return generate_box_mesh(*b.n, origin=b.origin, extent=b.extent)
    f = mc.files
    rel = lambda p: p if p is None or Path(p).is_absolute() else str(base / p)  # noqa: E731
    return load_mesh(rel(f.node), rel(f.ele), rel(f.face))


def build_phantom(pc: Optional[PhantomConfig]) -> PhantomSpec:
    if pc is None:
        raise ConfigError("this mode needs a 'phantom' section")
    base = PRESETS[pc.preset]() if pc.preset else None
    kbg = pc.kappa_bg if pc.kappa_bg is not None else (base.kappa_bg if base else None)
    mbg = pc.mu_bg if pc.mu_bg is not None else (base.mu_bg if base else None)
    if kbg is None or mbg is None:
        raise ConfigError("phantom needs kappa_bg and mu_bg (or a preset)")
    prims = list(base.primitives) if base else []
    labels = [base.label(i) for i in range(len(prims))] if base else []
    for i, p in enumerate(pc.primitives, start=len(prims)):
        prims.append(Primitive(p.shape, p.params, kappa=p.kappa, mu=p.mu))
        labels.append(p.label or f"{p.shape}{i}")
    return PhantomSpec(kbg, mbg, prims, labels=tuple(labels))


def build_illuminations(items: list[IlluminationConfig]):
    if not items:
        raise ConfigError("at least one illumination is required")
    out = []
    for it in items:
        kind = {"face": "face_characteristic", "cylinder": "cylinder_cosine"}.get(it.kind, it.kind)
        if kind == "face_characteristic":
            if it.face is None:
                raise ConfigError("face illumination needs 'face'")
            out.append(make_illumination(kind, face=it.face, amplitude=it.amplitude))
        else:
            out.append(make_illumination(kind, theta0=it.theta0, width=it.width, axis=it.axis, amplitude=it.amplitude))
    return out


def build_recon_config(cfg: RunConfig) -> ReconConfig:
    r = cfg.recon
    return ReconConfig(
        prior=PriorSpec(**r.prior.model_dump()),
        lsqr=LsqrConfig(**r.lsqr.model_dump()),
        max_outer=r.max_outer,
        background=BackgroundSearch(**r.background.model_dump()),
        clamp_floor=r.clamp_floor,
        enable_step_zero=r.enable_step_zero,
        seed=cfg.seed,
        solver=r.solver,
    )


# ------------------------------------------------------------------ modes ---

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _measurements_path(cfg: RunConfig, base: Path) -> Path:
    if cfg.measurements is None:
        return Path(cfg.output) / "measurements.vtk"
    p = Path(cfg.measurements)
    return p if p.is_absolute() else base / p


def run_simulate(cfg, base):
    coarse = build_mesh(cfg.mesh, base)
    if cfg.fine_mesh is None:
        raise ConfigError("simulate needs a 'fine_mesh' section")
    fine = build_mesh(cfg.fine_mesh, base)
    spec = build_phantom(cfg.phantom)
    ills = build_illuminations(cfg.illuminations)
    return lambda: _simulate(cfg, coarse, fine, spec, ills)


def _simulate(cfg, coarse, fine, spec, ills):
    data = simulate_data(fine, spec, ills, coarse, noise_level=cfg.noise_level, seed=cfg.seed)
    out = _out_dir(cfg)
    P = build_interpolation(fine, coarse)
    kf, mf = rasterize_phantom(fine, spec)
    kc, mc = rasterize_phantom(coarse, spec)
    files = list(qio.write_measurements(out / "measurements.vtk", coarse, data))
    files.append(qio.write_field(out / "target.vtk", coarse, {
        "kappa_target": kc, "mu_target": mc, "kappa_target_interp": P(kf), "mu_target_interp": P(mf)}))
    print(f"simulated {data.n_illuminations} illumination(s) on {coarse.n_vertices} nodes -> {out}")
    return files


def run_reconstruct(cfg, base):
    mesh = build_mesh(cfg.mesh, base)
    ills = build_illuminations(cfg.illuminations)
    rcfg = build_recon_config(cfg)
    mpath = _measurements_path(cfg, base)
    try:
        data, ff = qio.read_measurements(mpath)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read measurements {mpath}: {exc}") from exc
    if ff.vertices.shape != mesh.vertices.shape or not np.array_equal(ff.tets, mesh.tets):
        raise ConfigError("measurement file does not match the reconstruction mesh")
    if data.n_illuminations != len(ills):
        raise ConfigError(f"measurements have {data.n_illuminations} illuminations, config lists {len(ills)}")
    return lambda: _reconstruct(cfg, mesh, data, ills, rcfg)


def _reconstruct(cfg, mesh, data, ills, rcfg):
    res = reconstruct(mesh, data, ills, rcfg)
    out = _out_dir(cfg)
    files = [
        qio.write_field(out / "reconstruction.vtk", mesh, {"kappa": res.kappa, "mu": res.mu}, title="qpat reconstruction"),
        qio.write_residuals(out / "residuals.csv", res),
    ]
    summary = dict(kappa0=res.kappa0, mu0=res.mu0, linearizations=res.linearizations, termination=res.termination,
                   flags=res.flags, nonlinear_residuals=res.nonlinear_residuals, accepted=res.accepted,
                   inner_iterations=[len(h) - 1 for h in res.inner_histories], stop_reasons=res.stop_reasons,
                   noise_level=res.noise_level)
    files.append(qio.atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    print(f"reconstruction: kappa0={res.kappa0:.5g} mm, mu0={res.mu0:.5g} /mm, "
          f"{res.linearizations} linearizations ({res.termination}) -> {out}")
    return files


def run_forward(cfg, base):
    mesh = build_mesh(cfg.mesh, base)
    spec = build_phantom(cfg.phantom)
    ills = build_illuminations(cfg.illuminations)
    return lambda: _forward(cfg, mesh, spec, ills)


def _forward(cfg, mesh, spec, ills):
    kappa, mu = rasterize_phantom(mesh, spec)
    state, _ = evaluate_forward(mesh, np.log(kappa / spec.kappa_bg), np.log(mu / spec.mu_bg),
                                spec.kappa_bg, spec.mu_bg, ills, solver=cfg.recon.solver)
    out = _out_dir(cfg)
    fields = {"kappa": kappa, "mu": mu}
    for k in range(state.n_illuminations):
        fields[f"phi_{k}"] = state.phi[k]
        fields[f"h_{k}"] = state.mu * state.phi[k]
    files = [qio.write_field(out / "forward.vtk", mesh, fields, title="qpat forward")]
    if cfg.export_matrices:
        files.append(qio.export_matrix(out / "system.mtx", state.system, comment="diffusion system matrix K"))
    err = state.energy_balance_error()
    print(f"forward: {state.n_illuminations} illumination(s), energy balance error max {err.max():.3e}")
    return files


def run_check_jacobian(cfg, base):
    mesh = build_mesh(cfg.mesh, base)
    ills = build_illuminations(cfg.illuminations)
    return lambda: _check_jacobian(cfg, mesh, ills)


def _check_jacobian(cfg, mesh, ills):
    jc = cfg.jacobian_check
    rng = np.random.default_rng(cfg.seed)
    kl, ml = jc.scale * rng.standard_normal((2, mesh.n_vertices))
    adj, fd = check_jacobian(mesh, kl, ml, jc.kappa0, jc.mu0, ills, n_pairs=jc.n_pairs, n_dirs=jc.n_dirs,
                             eps=jc.eps, seed=cfg.seed)
    for label, err, tol in (("adjoint", adj, jc.adjoint_tol), ("finite-difference", fd, jc.fd_tol)):
        print(f"{label} error {err:.3e} (tol {tol:.1e}) {'PASS' if err <= tol else 'FAIL'}")
    if not (adj <= jc.adjoint_tol and fd <= jc.fd_tol):
        raise ReconstructionError("Jacobian check exceeded tolerance")
    return []


def run_info(cfg, base):
    mesh = build_mesh(cfg.mesh, base)

    def _info():
        print(f"vertices {mesh.n_vertices}, tets {mesh.n_tets}, boundary facets {len(mesh.facets)}")
        print(f"volume {mesh.total_volume():.10g} mm^3, diameter {mesh.diameter:.6g} mm")
        if mesh.facet_tags is not None:
            names = {v: k for k, v in FACE_TAGS.items()}
            tags, counts = np.unique(mesh.facet_tags, return_counts=True)
            print("facet tags: " + ", ".join(f"{names.get(int(t), t)}={c}" for t, c in zip(tags, counts)))
        print(f"fingerprint {mesh.fingerprint}")
        return None

    return _info


RUNNERS = {"simulate": run_simulate, "reconstruct": run_reconstruct, "forward": run_forward,
           "check-jacobian": run_check_jacobian, "info": run_info}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpat", description=__doc__.split("\n")[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides 'output')")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a nested config value, e.g. recon.max_outer=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, base = load_config(args.config, args.override, mode=args.mode, seed=args.seed, out=args.out)
        task = RUNNERS[args.mode](cfg, base)
    except (ConfigError, MeshError, ValueError, OSError) as exc:
        print(f"qpat: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        outputs = task()
    except (ReconstructionError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"qpat: numerical failure: {exc}", file=sys.stderr)
        return 2
    if outputs:
        qio.write_manifest(Path(cfg.output), args.mode, config_echo(cfg), cfg.seed, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
