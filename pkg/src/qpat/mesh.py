"""Tetrahedral P1 meshes: generation, import, point location and interpolation.

All coordinates are in millimetres. Vertex indices are stored 0-based.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

#: Boundary face labels used by :func:`generate_box_mesh`.
FACE_TAGS = {"-x": 0, "+x": 1, "-y": 2, "+y": 3, "-z": 4, "+z": 5}

EPS_BARY = 1e-10
SNAP_TOL = 1e-6  # relative to domain diameter

# local vertex triples of the face opposite vertex 0, 1, 2, 3
_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


class MeshError(ValueError):
    """Invalid mesh input (bad indices, degenerate or non-manifold elements)."""


class PointNotFound(LookupError):
    """Point lies outside the meshed domain."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _signed_volumes(vertices, tets):
    x = vertices[tets]
    d = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
    return np.linalg.det(d) / 6.0


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Conforming tetrahedral mesh with precomputed boundary facets.

    Use :meth:`from_arrays` (or the generators / loaders) rather than the
    raw constructor; it validates connectivity and derives the boundary.

    Attributes
    ----------
    vertices : (N, 3) float array
    tets : (M, 4) int array, positively oriented
    facets : (F, 3) int array, ordered so the right-hand normal points outward
    facet_parent : (F,) int array, index of the tet owning each facet
    facet_normals : (F, 3) float array, outward unit normals
    facet_areas : (F,) float array
    facet_tags : (F,) int array or None
    """

    vertices: np.ndarray
    tets: np.ndarray
    facets: np.ndarray
    facet_parent: np.ndarray
    facet_normals: np.ndarray
    facet_areas: np.ndarray
    facet_tags: np.ndarray | None = None
    name: str = field(default="mesh", compare=False)

    @classmethod
    def from_arrays(cls, vertices, tets, tag_lookup=None, name="mesh") -> "TetMesh":
        """Validate ``vertices``/``tets`` and build the boundary description.

        ``tag_lookup`` maps a sorted vertex triple to an integer facet tag, or
        is a callable ``f(facet_vertex_coords) -> tags`` evaluated on all
        boundary facets at once.
        """
        vertices = np.asarray(vertices, dtype=float)
        tets = np.array(tets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must have shape (N, 3)")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshError("tets must have shape (M, 4)")
        n = len(vertices)
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            bad = int(np.nonzero((tets < 0).any(1) | (tets >= n).any(1))[0][0])
            raise MeshError(f"tet {bad} has a vertex index out of range [0, {n})")

        vol = _signed_volumes(vertices, tets)
        scale = np.ptp(vertices, axis=0).max() if n else 1.0
        degenerate = np.abs(vol) <= 1e-14 * scale**3
        if degenerate.any():
            bad = int(np.nonzero(degenerate)[0][0])
            raise MeshError(f"tet {bad} is degenerate (zero volume)")
        inverted = vol < 0
        if inverted.any():
            idx = np.nonzero(inverted)[0]
            warnings.warn(
                f"{len(idx)} inverted tets (first: {idx[0]}); reordering vertices",
                stacklevel=2,
            )
            tets[idx, 2], tets[idx, 3] = tets[idx, 3].copy(), tets[idx, 2].copy()

        facets, parent = _boundary_facets(vertices, tets)
        a, b, c = (vertices[facets[:, i]] for i in range(3))
        cross = np.cross(b - a, c - a)
        area2 = np.linalg.norm(cross, axis=1)
        normals = cross / area2[:, None]

        tags = None
        if callable(tag_lookup):
            tags = np.asarray(tag_lookup(vertices[facets]), dtype=np.int64)
        elif tag_lookup is not None:
            keys = np.sort(facets, axis=1)
            tags = np.array([tag_lookup.get(tuple(k), -1) for k in keys.tolist()], dtype=np.int64)

        return cls(
            vertices=_frozen(vertices, float),
            tets=_frozen(tets, np.int64),
            facets=_frozen(facets, np.int64),
            facet_parent=_frozen(parent, np.int64),
            facet_normals=_frozen(normals, float),
            facet_areas=_frozen(0.5 * area2, float),
            facet_tags=None if tags is None else _frozen(tags, np.int64),
            name=name,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def volumes(self) -> np.ndarray:
        return _frozen(_signed_volumes(self.vertices, self.tets), float)

    @cached_property
    def _inv_maps(self) -> np.ndarray:
        x = self.vertices[self.tets]
        d = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
        return np.linalg.inv(d)

    @cached_property
    def gradients(self) -> np.ndarray:
        """(M, 4, 3) gradients of the four barycentric basis functions per tet."""
        inv = self._inv_maps  # rows are grad(lambda_1..3)
        g = np.empty((self.n_tets, 4, 3))
        g[:, 1:] = inv
        g[:, 0] = -inv.sum(axis=1)
        g.setflags(write=False)
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return _frozen(self.vertices[self.tets].mean(axis=1), float)

    @cached_property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.ptp(self.vertices, axis=0)))

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return _frozen(np.unique(self.facets), np.int64)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.tets.tobytes())
        return h.hexdigest()[:16]

    def facet_quadrature_points(self) -> np.ndarray:
        """(F, 3, 3) points of the 3-point edge-free rule (exact for degree 2)."""
        x = self.vertices[self.facets]  # (F, 3 vertices, 3 coords)
        return np.einsum("qv,fvd->fqd", _FACET_RULE, x)

    def total_volume(self) -> float:
        return float(self.volumes.sum())


# barycentric weights of the 3-point facet rule, one row per quadrature point
_FACET_RULE = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])


def _boundary_facets(vertices, tets):
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    opposite = tets.reshape(-1)
    owner = np.repeat(np.arange(len(tets)), 4)
    keys = np.sort(faces, axis=1)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if (counts > 2).any():
        bad = uniq[np.nonzero(counts > 2)[0][0]]
        raise MeshError(f"facet {tuple(bad.tolist())} is shared by more than two tets")
    on_boundary = counts[inverse] == 1
    faces = faces[on_boundary]
    opposite = opposite[on_boundary]
    owner = owner[on_boundary]
    keys = keys[on_boundary]

    a, b, c = (vertices[faces[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, vertices[opposite] - a) > 0
    faces[inward, 1], faces[inward, 2] = faces[inward, 2].copy(), faces[inward, 1].copy()

    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    return faces[order], owner[order]


def generate_box_mesh(nx, ny, nz, origin=(0.0, 0.0, 0.0), extent=(1.0, 1.0, 1.0)) -> TetMesh:
    """Structured box mesh, every hexahedral cell split into six Kuhn tets.

    Boundary facets are tagged with the values of :data:`FACE_TAGS`.
    """
    counts = (int(nx), int(ny), int(nz))
    if min(counts) < 1:
        raise MeshError(f"subdivision counts must be >= 1, got {counts}")
    origin = np.asarray(origin, dtype=float)
    extent = np.asarray(extent, dtype=float)
    if extent.shape != (3,) or np.any(extent <= 0):
        raise MeshError(f"extents must be positive, got {extent.tolist()}")

    axes = [origin[d] + extent[d] * np.arange(counts[d] + 1) / counts[d] for d in range(3)]
    # index = i + (nx+1) * (j + (ny+1) * k)
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    sx, sy, sz = 1, counts[0] + 1, (counts[0] + 1) * (counts[1] + 1)
    k, j, i = np.meshgrid(*(np.arange(c) for c in counts[::-1]), indexing="ij")
    base = (i * sx + j * sy + k * sz).ravel()
    stride = np.array([sx, sy, sz])

    tets = []
    for perm in permutations(range(3)):
        offs = [0]
        for ax in perm:
            offs.append(offs[-1] + stride[ax])
        tet = np.column_stack([base + o for o in offs])
        if np.linalg.det(np.eye(3)[list(perm)]) < 0:
            tet[:, [2, 3]] = tet[:, [3, 2]]
        tets.append(tet)
    # cell-major ordering: the six tets of a cell are contiguous
    tets = np.stack(tets, axis=1).reshape(-1, 4)

    lo, hi = origin, origin + extent
    tol = 1e-9 * extent.max()

    def tag_faces(x):
        tags = np.full(len(x), -1, dtype=np.int64)
        for d, axis in enumerate("xyz"):
            tags[np.all(np.abs(x[:, :, d] - lo[d]) < tol, axis=1)] = FACE_TAGS["-" + axis]
            tags[np.all(np.abs(x[:, :, d] - hi[d]) < tol, axis=1)] = FACE_TAGS["+" + axis]
        return tags

    name = f"box{counts[0]}x{counts[1]}x{counts[2]}"
    return TetMesh.from_arrays(vertices, tets, tag_lookup=tag_faces, name=name)


# ---------------------------------------------------------------- file formats


def _data_lines(path):
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                yield line.split()


def load_mesh(node_path, ele_path, face_path=None) -> TetMesh:
    """Read a TetGen-style ``.node``/``.ele`` (and optional ``.face``) mesh.

    Indices may be 0- or 1-based; the base is taken from the first node index.
    Facet tags come from the last column of the ``.face`` file when present.
    """
    try:
        lines = _data_lines(node_path)
        header = next(lines)
        n = int(header[0])
        if len(header) > 1 and int(header[1]) != 3:
            raise MeshError(f"{node_path}: only 3D node files are supported")
        ids = np.empty(n, dtype=np.int64)
        vertices = np.empty((n, 3))
        for r in range(n):
            tok = next(lines)
            ids[r] = int(tok[0])
            vertices[r] = [float(t) for t in tok[1:4]]
    except (StopIteration, ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{node_path}: cannot parse node file ({exc})") from exc
    base = int(ids[0]) if n else 0
    if not np.array_equal(ids, np.arange(base, base + n)):
        raise MeshError(f"{node_path}: node indices must be consecutive")

    try:
        lines = _data_lines(ele_path)
        header = next(lines)
        m = int(header[0])
        if len(header) > 1 and int(header[1]) != 4:
            raise MeshError(f"{ele_path}: only linear tets (4 nodes) are supported")
        tets = np.array([[int(t) for t in next(lines)[1:5]] for _ in range(m)], dtype=np.int64)
    except (StopIteration, ValueError, IndexError) as exc:
        raise MeshError(f"{ele_path}: cannot parse element file ({exc})") from exc
    tets = tets.reshape(-1, 4) - base

    tag_lookup = None
    if face_path is not None:
        try:
            lines = _data_lines(face_path)
            f = int(next(lines)[0])
            tag_lookup = {}
            for _ in range(f):
                tok = next(lines)
                tri = tuple(sorted(int(t) - base for t in tok[1:4]))
                tag_lookup[tri] = int(tok[4]) if len(tok) > 4 else 0
        except (StopIteration, ValueError, IndexError) as exc:
            raise MeshError(f"{face_path}: cannot parse face file ({exc})") from exc

    return TetMesh.from_arrays(vertices, tets, tag_lookup=tag_lookup, name=Path(node_path).stem)


def write_mesh(mesh: TetMesh, stem) -> tuple[Path, Path, Path]:
    """Write ``stem.node``, ``stem.ele`` and ``stem.face`` (1-based indices)."""
    stem = Path(stem)
    paths = tuple(stem.with_suffix(s) for s in (".node", ".ele", ".face"))
    with open(paths[0], "w") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, (x, y, z) in enumerate(mesh.vertices.tolist(), start=1):
            fh.write(f"{i} {x!r} {y!r} {z!r}\n")
    with open(paths[1], "w") as fh:
        fh.write(f"{mesh.n_tets} 4 0\n")
        for i, t in enumerate(mesh.tets.tolist(), start=1):
            fh.write(f"{i} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}\n")
    tags = mesh.facet_tags if mesh.facet_tags is not None else np.zeros(len(mesh.facets), int)
    with open(paths[2], "w") as fh:
        fh.write(f"{len(mesh.facets)} 3 0\n")
        for i, (t, tag) in enumerate(zip(mesh.facets.tolist(), tags.tolist()), start=1):
            fh.write(f"{i} {t[0] + 1} {t[1] + 1} {t[2] + 1} {tag}\n")
    return paths


# ---------------------------------------------------------------- point location


def _barycentric(mesh, tet_idx, points):
    x0 = mesh.vertices[mesh.tets[tet_idx, 0]]
    lam = np.einsum("...ij,...j->...i", mesh._inv_maps[tet_idx], points - x0)
    return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)


@dataclass(frozen=True)
class _Locator:
    mesh: TetMesh
    tree: cKDTree

    @classmethod
    def for_mesh(cls, mesh):
        return cls(mesh, cKDTree(mesh.centroids))

    def best(self, points, k=16):
        """Return (tet, bary, min_bary) of the best candidate tet per point."""
        mesh = self.mesh
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(k, mesh.n_tets)
        _, cand = self.tree.query(points, k=k)
        cand = np.asarray(cand).reshape(len(points), k)
        bary = _barycentric(mesh, cand, points[:, None, :])
        score = bary.min(axis=2)
        pick = np.argmax(score, axis=1)
        rows = np.arange(len(points))
        tet, lam, best = cand[rows, pick], bary[rows, pick], score[rows, pick]

        # exhaustive fallback for points not contained in any candidate
        miss = np.nonzero(best < -EPS_BARY)[0]
        chunk = max(1, 2_000_000 // max(mesh.n_tets, 1))
        all_tets = np.arange(mesh.n_tets)
        for s in range(0, len(miss), chunk):
            sel = miss[s : s + chunk]
            b = _barycentric(mesh, all_tets[None, :], points[sel, None, :])
            sc = b.min(axis=2)
            p = np.argmax(sc, axis=1)
            r = np.arange(len(sel))
            tet[sel], lam[sel], best[sel] = p, b[r, p], sc[r, p]
        return tet, lam, best


def locate_point(mesh: TetMesh, x) -> tuple[int, np.ndarray]:
    """Find a tet containing ``x`` and the barycentric coordinates of ``x``.

    Raises
    ------
    PointNotFound
        If ``x`` is outside every tet by more than the barycentric tolerance.
    """
    tet, lam, best = _Locator.for_mesh(mesh).best(np.asarray(x, dtype=float)[None, :])
    if best[0] < -EPS_BARY:
        raise PointNotFound(f"point {np.asarray(x).tolist()} is outside the mesh")
    return int(tet[0]), lam[0]


@dataclass(frozen=True)
class InterpolationOperator:
    """Row-stochastic P1 interpolation ``h_coarse = P @ h_fine``."""

    matrix: sp.csr_matrix
    source: str
    target: str

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values


def build_interpolation(fine: TetMesh, coarse: TetMesh) -> InterpolationOperator:
    """Linear interpolation from the nodes of ``fine`` onto the nodes of ``coarse``.

    Coarse vertices up to ``SNAP_TOL * diameter`` outside the fine domain get
    the clamped, renormalised barycentrics of the best-fitting fine tet.
    """
    tet, lam, best = _Locator.for_mesh(fine).best(coarse.vertices)
    outside = np.nonzero(best < -EPS_BARY)[0]
    if len(outside):
        clamped = np.clip(lam[outside], 0.0, None)
        clamped /= clamped.sum(axis=1, keepdims=True)
        proj = np.einsum("pi,pid->pd", clamped, fine.vertices[fine.tets[tet[outside]]])
        dist = np.linalg.norm(proj - coarse.vertices[outside], axis=1)
        tol = SNAP_TOL * fine.diameter
        if (dist > tol).any():
            bad = outside[np.argmax(dist)]
            raise MeshError(
                f"coarse vertex {bad} lies {dist.max():.3g} mm outside the fine mesh "
                f"(tolerance {tol:.3g} mm)"
            )
        lam[outside] = clamped
        logger.debug("snapped %d coarse vertices onto the fine mesh", len(outside))

    # drop round-off entries so coincident nodes give exact injection rows
    lam = np.where(np.abs(lam) < 1e-14, 0.0, lam)
    lam /= lam.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(coarse.n_vertices), 4)
    cols = fine.tets[tet].reshape(-1)
    P = sp.csr_matrix((lam.reshape(-1), (rows, cols)), shape=(coarse.n_vertices, fine.n_vertices))
    P.eliminate_zeros()
    P.sort_indices()
    return InterpolationOperator(P, source=fine.fingerprint, target=coarse.fingerprint)
