import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpat import fem
from qpat.forward import Illumination, cylinder_illuminations, evaluate_forward, total_absorption
from qpat.mesh import FACE_TAGS, generate_box_mesh

BOTTOM = Illumination("face_characteristic", face="-z")


def _state(mesh, ills, kl=None, ml=None, k0=0.3, m0=0.015, **kw):
    kl = np.zeros(mesh.n_vertices) if kl is None else kl
    ml = np.zeros(mesh.n_vertices) if ml is None else ml
    return evaluate_forward(mesh, kl, ml, k0, m0, ills, **kw)


def test_zero_log_parameters_give_background(box3):
    state, h = _state(box3, [BOTTOM], k0=0.37, m0=0.021)
    assert np.all(state.kappa == 0.37)
    assert np.all(state.mu == 0.021)
    assert h.shape == (box3.n_vertices,)


def test_zero_flux_gives_zero(box3):
    state, h = _state(box3, [Illumination("custom", values=np.zeros(len(box3.facets)))])
    assert np.all(state.phi == 0)
    assert np.all(h == 0)


def test_stacking_order(box3, two_faces):
    _, h = _state(box3, two_faces)
    _, h0 = _state(box3, two_faces[:1])
    _, h1 = _state(box3, two_faces[1:])
    assert np.array_equal(h, np.concatenate([h0, h1]))


def test_xy_swap_symmetry():
    n = 4
    m = generate_box_mesh(n, n, n, origin=(-1, -1, -1), extent=(2, 2, 2))
    _, h = _state(m, [BOTTOM], k0=0.5, m0=0.05)
    idx = np.arange(m.n_vertices)
    i, j, k = idx % (n + 1), (idx // (n + 1)) % (n + 1), idx // (n + 1) ** 2
    swap = j + (n + 1) * (i + (n + 1) * k)
    assert np.allclose(m.vertices[swap][:, [1, 0, 2]], m.vertices)
    assert np.abs(h[swap] - h).max() <= 1e-9 * np.abs(h).max()


def test_total_absorption_quadrature(unit_cube):
    assert total_absorption(unit_cube, np.ones(8)) == pytest.approx(1.0, abs=1e-14)
    a, b = np.array([0.2, 0.7, -1.1]), 0.4
    assert total_absorption(unit_cube, unit_cube.vertices @ a + b) == pytest.approx(a.sum() / 2 + b, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), face=st.sampled_from(sorted(FACE_TAGS)))
def test_weak_form_with_unit_test_function(box3, seed, face):
    rng = np.random.default_rng(seed)
    ill = Illumination("face_characteristic", face=face)
    state, _ = _state(box3, [ill], 0.5 * rng.standard_normal(64), 0.5 * rng.standard_normal(64))
    phi = state.phi[0]
    absorbed = np.ones(64) @ fem.mass_matrix(box3, state.mu) @ phi
    boundary = 0.5 * fem.integrate_boundary_p1(box3, phi)
    vals = ill.evaluate(box3)
    inflow = 2 * np.sum(box3.facet_areas * vals.mean(axis=1))
    assert abs(absorbed + boundary - inflow) <= 1e-9 * inflow
    assert state.energy_balance_error().max() <= 1e-9


@pytest.mark.parametrize("face", sorted(FACE_TAGS))
def test_positivity(box3, face):
    rng = np.random.default_rng(4)
    _, h = _state(box3, [Illumination("face_characteristic", face=face)], 0.3 * rng.standard_normal(64),
                  0.3 * rng.standard_normal(64))
    assert np.all(h > 0)


def test_linear_in_flux(box3):
    rng = np.random.default_rng(8)
    kl, ml = 0.2 * rng.standard_normal((2, 64))
    _, h1 = _state(box3, [BOTTOM], kl, ml)
    _, h2 = _state(box3, [Illumination("face_characteristic", face="-z", amplitude=2.0)], kl, ml)
    assert np.array_equal(h2, 2 * h1)


def test_absorption_change_is_detected(box3):
    _, h1 = _state(box3, [BOTTOM])
    _, h2 = _state(box3, [BOTTOM], ml=np.full(64, 0.1))
    assert np.linalg.norm(h2 - h1) > 0


def test_cg_matches_direct(box3, two_faces):
    rng = np.random.default_rng(9)
    kl, ml = 0.3 * rng.standard_normal((2, 64))
    _, hd = _state(box3, two_faces, kl, ml)
    _, hc = _state(box3, two_faces, kl, ml, solver="cg")
    assert np.linalg.norm(hc - hd) <= 1e-8 * np.linalg.norm(hd)


def test_inputs_are_copied(box3):
    kl = np.zeros(64)
    state, _ = _state(box3, [BOTTOM], kl=kl)
    kl[0] = 1.0
    assert state.kappa_log[0] == 0.0
    with pytest.raises(ValueError):
        state.phi[0, 0] = 1.0


@pytest.mark.parametrize("bad", [dict(k0=0.0), dict(kl=np.full(64, np.nan))])
def test_invalid_parameters(box3, bad):
    with pytest.raises(ValueError):
        _state(box3, [BOTTOM], **bad)


def test_cosine_profile():
    ill = Illumination("cylinder_cosine", theta0=0.7)
    assert ill.profile(0.7) == pytest.approx(1.0)
    assert ill.profile(0.7 + np.pi / 8) == pytest.approx(0.0, abs=1e-15)
    assert ill.profile(0.7 - np.pi / 8) == pytest.approx(0.0, abs=1e-15)
    t = np.linspace(0.7 - np.pi / 8, 0.7 + np.pi / 8, 41)
    assert np.allclose(ill.profile(t), np.cos(4 * (t - 0.7)), atol=1e-15)
    assert ill.profile(0.7 + 0.5) == 0.0
    # wraps around the branch cut
    assert Illumination("cylinder_cosine", theta0=np.pi).profile(-np.pi + 0.1) == pytest.approx(np.cos(0.4))


def test_cylinder_flux_lights_lateral_facets_only():
    m = generate_box_mesh(4, 4, 4, origin=(-1, -1, -1), extent=(2, 2, 2))
    vals = Illumination("cylinder_cosine", theta0=0.0, width=np.pi, axis="y").evaluate(m)
    caps = np.abs(m.facet_normals[:, 1]) > 0.5
    assert np.all(vals[caps] == 0)
    assert vals[~caps].max() > 0
    assert np.all(vals >= 0)


def test_cylinder_illumination_centres():
    ills = cylinder_illuminations(4)
    assert [i.theta0 for i in ills] == pytest.approx([0, np.pi / 2, np.pi, 3 * np.pi / 2])
    assert all(i.width == pytest.approx(np.pi / 4) for i in ills)


@pytest.mark.parametrize("kw", [dict(kind="laser"), dict(kind="face_characteristic"), dict(kind="custom"),
                                dict(kind="cylinder_cosine", width=0.0)])
def test_illumination_validation(kw):
    with pytest.raises(ValueError):
        Illumination(**kw)


def test_custom_flux_length_checked(box3):
    with pytest.raises(ValueError, match="facets"):
        Illumination("custom", values=np.ones(3)).evaluate(box3)
