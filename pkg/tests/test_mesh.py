from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpat.mesh import (
    EPS_BARY,
    FACE_TAGS,
    MeshError,
    PointNotFound,
    TetMesh,
    build_interpolation,
    generate_box_mesh,
    load_mesh,
    locate_point,
    write_mesh,
)

FIX = Path(__file__).parent / "fixtures"


def _interior_facet_counts(mesh):
    faces = np.sort(mesh.tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    return counts


def test_unit_box_counts(unit_cube):
    assert unit_cube.n_vertices == 8
    assert unit_cube.n_tets == 6
    assert len(unit_cube.facets) == 12
    assert unit_cube.total_volume() == pytest.approx(1.0, abs=1e-12)


def test_box_volume_additivity():
    m = generate_box_mesh(2, 2, 2, extent=(11.0, 11.0, 11.0))
    assert (m.n_vertices, m.n_tets) == (27, 48)
    assert abs(m.volumes.sum() - 1331.0) <= 1e-9 * 1331.0


@settings(max_examples=25, deadline=None)
@given(
    n=st.tuples(*[st.integers(1, 4)] * 3),
    ext=st.tuples(*[st.floats(0.1, 20.0)] * 3),
    org=st.tuples(*[st.floats(-10.0, 10.0)] * 3),
)
def test_box_invariants(n, ext, org):
    m = generate_box_mesh(*n, origin=org, extent=ext)
    nx, ny, nz = n
    assert m.n_vertices == (nx + 1) * (ny + 1) * (nz + 1)
    assert m.n_tets == 6 * nx * ny * nz
    assert np.all(m.volumes > 0)
    assert abs(m.volumes.sum() - np.prod(ext)) <= 1e-9 * np.prod(ext)
    # closed surface: sum of area-weighted normals vanishes
    s = (m.facet_areas[:, None] * m.facet_normals).sum(axis=0)
    assert np.linalg.norm(s) <= 1e-10 * m.facet_areas.sum()
    # each boundary facet once, each interior facet twice
    counts = _interior_facet_counts(m)
    assert set(np.unique(counts)) <= {1, 2}
    assert (counts == 1).sum() == len(m.facets)
    # outward normals
    fc = m.vertices[m.facets].mean(axis=1)
    assert np.all(np.einsum("fd,fd->f", m.facet_normals, fc - m.centroids[m.facet_parent]) > 0)


def test_box_face_tags():
    m = generate_box_mesh(2, 3, 4, origin=(-1, -1, -1), extent=(2, 3, 4))
    for name, tag in FACE_TAGS.items():
        ax = "xyz".index(name[1])
        sel = m.facet_tags == tag
        expected = np.sign(1 if name[0] == "+" else -1)
        assert np.allclose(m.facet_normals[sel, ax], expected)
        area = {0: 3 * 4, 1: 2 * 4, 2: 2 * 3}[ax]
        assert m.facet_areas[sel].sum() == pytest.approx(area)


@pytest.mark.parametrize("args", [(0, 1, 1), (1, 1, 1, (0, 0, 0), (1, 0, 1)), (1, 1, 1, (0, 0, 0), (1, -1, 1))])
def test_box_errors(args):
    with pytest.raises(MeshError):
        generate_box_mesh(*args)


def test_fixture_matches_generator(unit_cube):
    m = load_mesh(FIX / "unit_cube.node", FIX / "unit_cube.ele", FIX / "unit_cube.face")
    assert np.array_equal(m.vertices, unit_cube.vertices)
    assert np.array_equal(m.tets, unit_cube.tets)
    assert np.array_equal(m.facets, unit_cube.facets)
    assert np.array_equal(m.facet_tags, unit_cube.facet_tags)


def test_fixture_without_face_file(unit_cube):
    m = load_mesh(FIX / "unit_cube.node", FIX / "unit_cube.ele")
    assert np.array_equal(m.facets, unit_cube.facets)
    assert m.facet_tags is None


def test_degenerate_fixture_names_tet():
    with pytest.raises(MeshError, match="tet 1"):
        load_mesh(FIX / "degenerate.node", FIX / "degenerate.ele")


def test_round_trip(tmp_path):
    m = generate_box_mesh(3, 2, 2, origin=(-0.3, 0.1, 2.0), extent=(1.7, 2.3, 0.9))
    write_mesh(m, tmp_path / "m")
    r = load_mesh(tmp_path / "m.node", tmp_path / "m.ele", tmp_path / "m.face")
    assert np.array_equal(r.tets, m.tets)
    assert np.array_equal(r.facets, m.facets)
    assert np.array_equal(r.facet_tags, m.facet_tags)
    assert np.allclose(r.vertices, m.vertices, rtol=0, atol=1e-15)


def test_zero_based_and_inverted(tmp_path):
    (tmp_path / "t.node").write_text("4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n")
    (tmp_path / "t.ele").write_text("1 4 0\n0 0 2 1 3\n")  # negative orientation
    with pytest.warns(UserWarning, match="inverted"):
        m = load_mesh(tmp_path / "t.node", tmp_path / "t.ele")
    assert m.volumes[0] == pytest.approx(1 / 6)


def test_parse_and_range_errors(tmp_path):
    (tmp_path / "a.node").write_text("4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 x\n")
    (tmp_path / "a.ele").write_text("1 4 0\n1 1 2 3 4\n")
    with pytest.raises(MeshError, match="parse"):
        load_mesh(tmp_path / "a.node", tmp_path / "a.ele")
    (tmp_path / "b.node").write_text("4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
    (tmp_path / "b.ele").write_text("1 4 0\n1 1 2 3 9\n")
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(tmp_path / "b.node", tmp_path / "b.ele")


def test_locate_centroid(box3):
    tet, bary = locate_point(box3, box3.centroids[0])
    assert tet == 0
    assert np.allclose(bary, 0.25, atol=1e-12)


def test_locate_vertex(box3):
    v = 21
    tet, bary = locate_point(box3, box3.vertices[v])
    assert v in box3.tets[tet]
    assert bary[list(box3.tets[tet]).index(v)] == pytest.approx(1.0, abs=1e-12)


def test_locate_outside(box3):
    with pytest.raises(PointNotFound):
        locate_point(box3, [-1.0, 1.5, 1.5])


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.floats(0.0, 3.0)] * 3))
def test_locate_reproduces_point(box3, x):
    tet, bary = locate_point(box3, x)
    assert bary.min() >= -EPS_BARY
    assert bary.sum() == pytest.approx(1.0, abs=1e-12)
    recon = bary @ box3.vertices[box3.tets[tet]]
    assert np.linalg.norm(recon - np.asarray(x)) <= 1e-9 * box3.diameter


def test_interpolation_identity(box3):
    P = build_interpolation(box3, box3).matrix
    assert abs(P - np.eye(box3.n_vertices)).max() == 0.0


def test_interpolation_affine_and_stochastic():
    fine = generate_box_mesh(7, 6, 5, origin=(-1, -1, -1), extent=(2, 2, 2))
    coarse = generate_box_mesh(3, 4, 2, origin=(-1, -1, -1), extent=(2, 2, 2))
    P = build_interpolation(fine, coarse)
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(3), rng.standard_normal()
    f = fine.vertices @ a + b
    assert np.abs(P(f) - (coarse.vertices @ a + b)).max() <= 1e-10
    assert np.abs(P(np.ones(fine.n_vertices)) - 1).max() <= 1e-12
    M = P.matrix
    assert np.diff(M.indptr).max() <= 4
    assert M.data.min() >= -EPS_BARY and M.data.max() <= 1 + EPS_BARY


def test_interpolation_snaps_near_exterior():
    fine = generate_box_mesh(4, 4, 4)
    v = generate_box_mesh(2, 2, 2).vertices * (1 + 1e-8) - 0.5e-8
    coarse = TetMesh.from_arrays(v, generate_box_mesh(2, 2, 2).tets)
    P = build_interpolation(fine, coarse)
    assert np.abs(P(np.ones(fine.n_vertices)) - 1).max() <= 1e-12
    far = TetMesh.from_arrays(generate_box_mesh(2, 2, 2).vertices * 1.1, generate_box_mesh(2, 2, 2).tets)
    with pytest.raises(MeshError, match="outside"):
        build_interpolation(fine, far)


def test_mesh_is_immutable(box3):
    with pytest.raises(ValueError):
        box3.vertices[0, 0] = 5.0
