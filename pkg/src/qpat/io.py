"""File formats: legacy-ASCII VTK fields, measurement sets, residual CSVs,
Matrix Market exports and run manifests. All writers are atomic."""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import platform
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy
import scipy.io

from .mesh import TetMesh
from .simulate import MeasurementSet

VTK_TETRA = 10
RESIDUAL_HEADER = ("outer", "inner", "inner_residual", "nonlinear_residual", "accepted")


class FormatError(ValueError):
    pass


def atomic_write(path, data) -> Path:
    """Write ``data`` (str or bytes) to a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(x) -> str:
    return f"{x:.17g}"


@dataclass(frozen=True)
class FieldFile:
    vertices: np.ndarray
    tets: np.ndarray
    fields: dict[str, np.ndarray]


def write_field(path, mesh: TetMesh, fields: Mapping[str, np.ndarray], title: str = "qpat fields") -> Path:
    """Nodal scalar fields on ``mesh`` as a legacy-ASCII unstructured grid."""
    n, m = mesh.n_vertices, mesh.n_tets
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {n} double"]
    out += [" ".join(map(_fmt, v)) for v in mesh.vertices]
    out.append(f"CELLS {m} {5 * m}")
    out += ["4 " + " ".join(map(str, t)) for t in mesh.tets]
    out.append(f"CELL_TYPES {m}")
    out += [str(VTK_TETRA)] * m
    out.append(f"POINT_DATA {n}")
    for name, vals in fields.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"field name {name!r} contains whitespace")
        vals = np.asarray(vals, dtype=float)
        if vals.shape != (n,):
            raise ValueError(f"field {name!r} has shape {vals.shape}, expected ({n},)")
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_fmt(x) for x in vals]
    return atomic_write(path, "\n".join(out) + "\n")


def read_field(path) -> FieldFile:
    tokens = Path(path).read_text().split("\n")
    if not tokens[0].startswith("# vtk DataFile"):
        raise FormatError(f"{path}: not a legacy VTK file")
    if tokens[2].strip() != "ASCII" or tokens[3].split() != ["DATASET", "UNSTRUCTURED_GRID"]:
        raise FormatError(f"{path}: expected an ASCII UNSTRUCTURED_GRID")
    words = " ".join(tokens[4:]).split()
    pos = 0

    def take(k):
        nonlocal pos
        chunk = words[pos:pos + k]
        if len(chunk) < k:
            raise FormatError(f"{path}: truncated file")
        pos += k
        return chunk

    head = take(3)
    if head[0] != "POINTS":
        raise FormatError(f"{path}: expected POINTS, found {head[0]!r}")
    n = int(head[1])
    vertices = np.array(take(3 * n), dtype=float).reshape(n, 3)
    head = take(3)
    m = int(head[1])
    cells = np.array(take(5 * m), dtype=np.int64).reshape(m, 5)
    if np.any(cells[:, 0] != 4):
        raise FormatError(f"{path}: only tetrahedral cells are supported")
    take(2)
    if np.any(np.array(take(m), dtype=int) != VTK_TETRA):
        raise FormatError(f"{path}: unexpected cell type")
    fields = {}
    if pos < len(words):
        take(2)  # POINT_DATA n
        while pos < len(words):
            _, name, _, _ = take(4)
            take(2)  # LOOKUP_TABLE default
            fields[name] = np.array(take(n), dtype=float)
    return FieldFile(vertices, cells[:, 1:].copy(), fields)


def write_measurements(path, mesh: TetMesh, data: MeasurementSet) -> tuple[Path, Path]:
    """``chi_k``/``sigma_k`` (and ``clean_k`` if present) arrays plus a JSON sidecar."""
    fields = {}
    for k in range(data.n_illuminations):
        fields[f"chi_{k}"] = data.chi[k]
        fields[f"sigma_{k}"] = data.sigma[k]
        if data.clean is not None:
            fields[f"clean_{k}"] = data.clean[k]
    path = Path(path)
    vtk = write_field(path, mesh, fields, title="qpat measurements")
    meta = dict(n_illuminations=data.n_illuminations, seed=data.seed, noise_level=data.noise_level,
                mesh_fingerprint=mesh.fingerprint)
    side = atomic_write(path.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return vtk, side


def read_measurements(path) -> tuple[MeasurementSet, FieldFile]:
    path = Path(path)
    ff = read_field(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    k = int(meta["n_illuminations"])
    try:
        chi = np.array([ff.fields[f"chi_{i}"] for i in range(k)])
        sigma = np.array([ff.fields[f"sigma_{i}"] for i in range(k)])
    except KeyError as exc:
        raise FormatError(f"{path}: missing array {exc}") from None
    clean = None
    if all(f"clean_{i}" in ff.fields for i in range(k)):
        clean = np.array([ff.fields[f"clean_{i}"] for i in range(k)])
    data = MeasurementSet(chi, sigma, seed=meta.get("seed"), noise_level=meta.get("noise_level"), clean=clean)
    return data, ff


def residual_rows(result) -> list[tuple]:
    """CSV rows for a :class:`~qpat.reconstruct.ReconResult`.

    Linearization ``i`` (1-based) contributes one row per inner LSQR iteration
    followed by one outer row with its candidate's nonlinear residual; outer
    index 0 is the initial guess. A final ``noise_level`` row carries sqrt(K N).
    """
    rows = [(0, "", "", _fmt(result.nonlinear_residuals[0]), 1)]
    for i, hist in enumerate(result.inner_histories, start=1):
        rows += [(i, m, _fmt(r), "", "") for m, r in enumerate(hist[1:], start=1)]
        rows.append((i, "", "", _fmt(result.nonlinear_residuals[i]), int(result.accepted[i - 1])))
    rows.append(("noise_level", "", "", _fmt(result.noise_level), ""))
    return rows


def write_residuals(path, result) -> Path:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESIDUAL_HEADER)
    w.writerows(residual_rows(result))
    return atomic_write(path, buf.getvalue())


def read_residuals(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_matrix(path, A, comment: str = "") -> Path:
    """Sparse matrix in Matrix Market coordinate format."""
    buf = _io.BytesIO()
    scipy.io.mmwrite(buf, A, comment=comment, precision=17)
    return atomic_write(path, buf.getvalue())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict[str, str]:
    from . import __version__

    return {"qpat": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out_dir, mode: str, config: Mapping, seed, outputs) -> Path:
    """Config echo, seed, library versions and output digests (no timestamps)."""
    out_dir = Path(out_dir)
    manifest = dict(
        mode=mode,
        seed=seed,
        config=config,
        versions=versions(),
        outputs={Path(p).name: file_digest(p) for p in sorted(map(str, outputs))},
    )
    return atomic_write(out_dir / f"manifest_{mode}.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
