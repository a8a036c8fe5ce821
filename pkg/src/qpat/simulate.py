"""Phantoms, illumination sets and synthetic measurements on a finer mesh."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .forward import Illumination, evaluate_forward
from .mesh import FACE_TAGS, TetMesh, build_interpolation

logger = logging.getLogger(__name__)

_AXES = {"x": 0, "y": 1, "z": 2}
_TOL = 1e-9

_REQUIRED = {
    "box": ("center", "size"),
    "sphere": ("center", "radius"),
    "spherical_shell": ("center", "inner_radius", "outer_radius"),
    "axis_cylinder": ("center", "radius", "span"),
    "helical_cylinder": ("rho", "radius", "span", "theta_range"),
    "planar_cross": ("center", "normal", "arm", "half_length", "half_width", "half_thickness"),
}


@dataclass(frozen=True)
class Primitive:
    """One inclusion. ``kappa``/``mu`` left as ``None`` leave that field untouched.

    Geometry parameters (mm) by shape:

    - ``box``: ``center``, ``size`` (3 edge lengths)
    - ``sphere``: ``center``, ``radius``
    - ``spherical_shell``: ``center``, ``inner_radius``, ``outer_radius``
    - ``axis_cylinder``: ``center``, ``radius``, ``span`` (axial range), ``axis``
    - ``helical_cylinder``: tube of ``radius`` around the curve
      ``(rho cos t, y, rho sin t)`` (for ``axis='y'``) with ``t`` mapped linearly
      from ``theta_range`` onto the axial ``span``
    - ``planar_cross``: two perpendicular bars lying in the plane through
      ``center`` with unit ``normal``; ``arm`` is the in-plane direction of the
      first bar, the second is ``normal x arm``
    """

    shape: str
    params: Mapping = field(default_factory=dict)
    kappa: float | None = None
    mu: float | None = None

    def __post_init__(self):
        if self.shape not in _REQUIRED:
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        missing = [k for k in _REQUIRED[self.shape] if k not in self.params]
        if missing:
            raise ValueError(f"{self.shape} primitive is missing {missing}")
        for v in (self.kappa, self.mu):
            if v is not None and not v > 0:
                raise ValueError("optical values must be positive")
        p = self.params
        for key in ("radius", "inner_radius", "outer_radius", "half_length", "half_width", "half_thickness", "rho"):
            if key in p and not p[key] > 0:
                raise ValueError(f"{self.shape}: {key} must be positive")
        if self.shape == "spherical_shell" and not p["outer_radius"] > p["inner_radius"]:
            raise ValueError("spherical_shell: outer radius must exceed inner radius")
        if self.shape == "box" and not np.all(np.asarray(p["size"], dtype=float) > 0):
            raise ValueError("box: sizes must be positive")
        if self.shape == "planar_cross":
            n, a = np.asarray(p["normal"], float), np.asarray(p["arm"], float)
            if abs(n @ a) > 1e-9 * np.linalg.norm(n) * np.linalg.norm(a):
                raise ValueError("planar_cross: arm must be perpendicular to the normal")

    def contains(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        x = np.atleast_2d(x)
        if self.shape == "box":
            half = 0.5 * np.asarray(p["size"], dtype=float)
            return np.all(np.abs(x - np.asarray(p["center"])) <= half + _TOL, axis=1)
        if self.shape in ("sphere", "spherical_shell"):
            r = np.linalg.norm(x - np.asarray(p["center"]), axis=1)
            if self.shape == "sphere":
                return r <= p["radius"] + _TOL
            return (r >= p["inner_radius"] - _TOL) & (r <= p["outer_radius"] + _TOL)
        if self.shape == "axis_cylinder":
            ax = _AXES[p.get("axis", "y")]
            d = x - np.asarray(p["center"])
            radial = np.linalg.norm(np.delete(d, ax, axis=1), axis=1)
            lo, hi = p["span"]
            return (radial <= p["radius"] + _TOL) & (x[:, ax] >= lo - _TOL) & (x[:, ax] <= hi + _TOL)
        if self.shape == "helical_cylinder":
            curve = helix_samples(p)
            dist, _ = cKDTree(curve).query(x)
            return dist <= p["radius"] + _TOL
        # planar_cross
        n = np.asarray(p["normal"], float)
        n /= np.linalg.norm(n)
        a = np.asarray(p["arm"], float)
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        d = x - np.asarray(p["center"], float)
        s, t, off = d @ a, d @ b, np.abs(d @ n)
        L, W = p["half_length"] + _TOL, p["half_width"] + _TOL
        slab = off <= p["half_thickness"] + _TOL
        bar1 = (np.abs(s) <= L) & (np.abs(t) <= W)
        bar2 = (np.abs(t) <= L) & (np.abs(s) <= W)
        return slab & (bar1 | bar2)


def helix_samples(p: Mapping, per_turn: int = 200) -> np.ndarray:
    """Points along a helical centre curve; ``theta`` varies linearly with the axial coordinate."""
    t0, t1 = p["theta_range"]
    lo, hi = p["span"]
    n = max(2, int(np.ceil(abs(t1 - t0) / (2 * np.pi) * per_turn)) + 1)
    theta = np.linspace(t0, t1, n)
    ax_coord = np.linspace(lo, hi, n)
    rho = p["rho"]
    axis = p.get("axis", "y")
    u, v = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}[axis]
    pts = np.zeros((n, 3))
    pts[:, u] = rho * np.cos(theta)
    pts[:, v] = rho * np.sin(theta)
    pts[:, _AXES[axis]] = ax_coord
    return pts


@dataclass(frozen=True)
class PhantomSpec:
    kappa_bg: float
    mu_bg: float
    primitives: Sequence[Primitive] = ()
    labels: Sequence[str] = ()

    def __post_init__(self):
        if not (self.kappa_bg > 0 and self.mu_bg > 0):
            raise ValueError("background optical values must be positive")
        if self.labels and len(self.labels) != len(self.primitives):
            raise ValueError("labels must match primitives one to one")

    def label(self, i: int) -> str:
        return self.labels[i] if self.labels else f"{self.primitives[i].shape}{i}"


def rasterize_phantom(mesh: TetMesh, spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nodal kappa, mu; later primitives overwrite earlier ones."""
    (kappa, mu), _ = rasterize_with_support(mesh, spec)
    return kappa, mu


def rasterize_with_support(mesh: TetMesh, spec: PhantomSpec):
    """Like :func:`rasterize_phantom`, also returning per-node owner indices.

    The second return value is ``(kappa_owner, mu_owner)``: the index of the
    primitive that set each node's value, or -1 for background.
    """
    x = mesh.vertices
    kappa = np.full(len(x), float(spec.kappa_bg))
    mu = np.full(len(x), float(spec.mu_bg))
    k_owner = np.full(len(x), -1)
    m_owner = np.full(len(x), -1)
    for i, prim in enumerate(spec.primitives):
        inside = prim.contains(x)
        if prim.kappa is not None:
            kappa[inside] = prim.kappa
            k_owner[inside] = i
        if prim.mu is not None:
            mu[inside] = prim.mu
            m_owner[inside] = i
    return (kappa, mu), (k_owner, m_owner)


def cube_phantom() -> PhantomSpec:
    """Cube phantom: absorbing shell and cross, diffusive ball and cross.

    Each cross is two perpendicular 2 mm x 2 mm bars of half-length 3 mm,
    one along y and one along the in-plane diagonal. The absorbing cross is
    centred at (2.5, 0, 2.5) in the plane z = x and cuts through the shell;
    the diffusive one at (-2.5, 0, 2.5) in the plane z = -x cuts into the
    ball without covering the origin. Crosses come after the shell/ball so
    they win on overlap.
    """
    s = 1 / np.sqrt(2)
    bars = dict(half_length=3.0, half_width=1.0, half_thickness=1.0, arm=[0.0, 1.0, 0.0])
    prims = [
        Primitive("spherical_shell", dict(center=[0.0, 0.0, 0.0], inner_radius=4.0, outer_radius=5.0), mu=0.02),
        Primitive("planar_cross", dict(bars, center=[2.5, 0.0, 2.5], normal=[s, 0.0, -s]), mu=0.01),
        Primitive("sphere", dict(center=[0.0, 0.0, 0.0], radius=3.0), kappa=0.2),
        Primitive("planar_cross", dict(bars, center=[-2.5, 0.0, 2.5], normal=[s, 0.0, s]), kappa=0.4),
    ]
    return PhantomSpec(0.3, 0.015, prims, labels=("shell", "absorbing_cross", "ball", "diffusive_cross"))


def cylinder_phantom() -> PhantomSpec:
    """Cylinder phantom with boxes, helices and cubes (axis along y)."""
    prims, labels = [], []
    for i, (y, mu) in enumerate([(-11.0, 0.05), (0.0, 0.02), (11.0, 0.002)], start=1):
        prims.append(Primitive("box", dict(center=[0.0, y, 0.0], size=[4.0, 6.0, 4.0]), mu=mu))
        labels.append(f"mu{i}")
    for i, (th, mu) in enumerate([((np.pi / 6, 11 * np.pi / 6), 0.05), ((7 * np.pi / 6, 17 * np.pi / 6), 0.002)], start=4):
        prims.append(Primitive("helical_cylinder", dict(rho=5.5, radius=1.0, span=(-16.0, 16.0), theta_range=th), mu=mu))
        labels.append(f"mu{i}")
    prims.append(Primitive("axis_cylinder", dict(center=[0.0, 0.0, 0.0], radius=1.0, span=(-20.0, 20.0)), kappa=0.05))
    labels.append("kappa1")
    for i, (k, kap) in enumerate(zip(range(1, 12, 2), [0.05, 0.15, 0.6, 0.05, 0.15, 0.6]), start=2):
        th = k * np.pi / 6
        y = -15.0 + 6.0 * (i - 2)
        c = [5.5 * np.cos(th), y, 5.5 * np.sin(th)]
        prims.append(Primitive("box", dict(center=c, size=[4.0, 4.0, 4.0]), kappa=kap))
        labels.append(f"kappa{i}")
    return PhantomSpec(0.3, 0.01, prims, labels=tuple(labels))


def make_illumination(kind: str, **params) -> Illumination:
    """Build an illumination; ``face`` accepts the names in :data:`~qpat.mesh.FACE_TAGS`.

    Aliases: ``face`` for ``face_characteristic`` and ``cylinder`` for
    ``cylinder_cosine``.
    """
    kind = {"face": "face_characteristic", "cylinder": "cylinder_cosine"}.get(kind, kind)
    if kind == "face_characteristic":
        face = params.get("face")
        if isinstance(face, str) and face not in FACE_TAGS:
            raise ValueError(f"unknown face {face!r}; expected one of {sorted(FACE_TAGS)}")
    return Illumination(kind, **params)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Per-illumination data ``chi`` and noise std ``sigma``, both (K, N).

    ``Gamma = diag(sigma**2)``; whitening divides entrywise by ``sigma``.
    """

    chi: np.ndarray
    sigma: np.ndarray
    seed: int | None = None
    noise_level: float | None = None
    clean: np.ndarray | None = None

    def __post_init__(self):
        if self.chi.shape != self.sigma.shape or self.chi.ndim != 2:
            raise ValueError("chi and sigma must be (K, N) arrays of equal shape")
        if not np.all(self.sigma > 0):
            raise ValueError("noise standard deviations must be positive")

    @property
    def n_illuminations(self) -> int:
        return self.chi.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return self.chi.reshape(-1)

    @property
    def weights(self) -> np.ndarray:
        """Stacked ``1 / sigma`` (the diagonal of ``Gamma^-1/2``)."""
        return 1.0 / self.sigma.reshape(-1)

    def whitened_residual(self, h: np.ndarray) -> float:
        return float(np.linalg.norm(self.weights * (self.stacked - h)))


def noise_sigma(h: np.ndarray, level: float) -> np.ndarray:
    """``level * |h|`` floored at ``1e-12 * max|h|`` so Gamma stays invertible."""
    a = np.abs(h)
    floor = 1e-12 * a.max() if a.max() > 0 else 1e-300
    return np.maximum(level * a, floor)


def simulate_data(
    fine: TetMesh,
    spec: PhantomSpec,
    illuminations: Sequence[Illumination],
    coarse: TetMesh,
    noise_level: float = 0.01,
    seed: int = 0,
    sigma_level: float | None = None,
) -> MeasurementSet:
    """Forward-solve on ``fine``, interpolate to ``coarse`` and add Gaussian noise.

    ``sigma_level`` sets the stored noise model when it should differ from the
    level actually injected (e.g. noiseless data with a 1% noise model).
    """
    if noise_level < 0:
        raise ValueError("noise level must be non-negative")
    if fine.fingerprint == coarse.fingerprint:
        warnings.warn("simulation and inversion meshes are identical (inverse crime)", stacklevel=2)
    P = build_interpolation(fine, coarse)
    kappa, mu = rasterize_phantom(fine, spec)
    _, hf = evaluate_forward(
        fine, np.log(kappa / spec.kappa_bg), np.log(mu / spec.mu_bg), spec.kappa_bg, spec.mu_bg, illuminations
    )
    hf = hf.reshape(len(illuminations), fine.n_vertices)
    clean = np.array([P(row) for row in hf])

    level = noise_level if sigma_level is None else sigma_level
    sigma = np.array([noise_sigma(row, level) for row in clean])
    chi = clean.copy()
    if noise_level > 0:
        streams = np.random.SeedSequence(seed).spawn(len(illuminations))
        for k, ss in enumerate(streams):
            z = np.random.default_rng(ss).standard_normal(coarse.n_vertices)
            chi[k] = clean[k] + noise_sigma(clean[k], noise_level) * z
    logger.info(
        "simulated %d illuminations: fine N=%d, coarse N=%d, noise %.3g",
        len(illuminations), fine.n_vertices, coarse.n_vertices, noise_level,
    )
    return MeasurementSet(chi, sigma, seed=seed, noise_level=noise_level, clean=clean)
