import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpat.forward import evaluate_forward
from qpat.mesh import FACE_TAGS, build_interpolation, generate_box_mesh
from qpat.simulate import (
    MeasurementSet,
    PhantomSpec,
    Primitive,
    cube_phantom,
    cylinder_phantom,
    helix_samples,
    make_illumination,
    noise_sigma,
    rasterize_phantom,
    rasterize_with_support,
    simulate_data,
)

CUBE = dict(origin=(-5.5, -5.5, -5.5), extent=(11.0, 11.0, 11.0))
BOTTOM_TOP = [make_illumination("face", face="-z"), make_illumination("face", face="+z")]


def test_empty_phantom_is_constant(box3):
    k, m = rasterize_phantom(box3, PhantomSpec(0.3, 0.01))
    assert np.all(k == 0.3) and np.all(m == 0.01)


def test_cube_phantom_reference_points():
    spec = cube_phantom()
    x = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 4.5]])
    kappa, mu = _rasterize_points(spec, x)
    assert kappa[0] == pytest.approx(0.2)
    assert mu[1] == pytest.approx(0.02)
    assert (spec.kappa_bg, spec.mu_bg) == (0.3, 0.015)


def _rasterize_points(spec, x):
    kappa = np.full(len(x), spec.kappa_bg)
    mu = np.full(len(x), spec.mu_bg)
    for p in spec.primitives:
        inside = p.contains(x)
        if p.kappa is not None:
            kappa[inside] = p.kappa
        if p.mu is not None:
            mu[inside] = p.mu
    return kappa, mu


def test_cross_wins_over_shell():
    spec = cube_phantom()
    m = generate_box_mesh(22, 22, 22, **CUBE)
    shell, cross = spec.primitives[0], spec.primitives[1]
    both = shell.contains(m.vertices) & cross.contains(m.vertices)
    assert both.any()
    (_, mu), (_, owner) = rasterize_with_support(m, spec)
    assert np.all(mu[both] == cross.mu)
    assert np.all(owner[both] == 1)


def test_crosses_have_two_bars():
    cross = cube_phantom().primitives[1]
    c = np.array(cross.params["center"])
    s = 1 / np.sqrt(2)
    along_y = c + [0, 2.5, 0]
    along_diag = c + 2.5 * np.array([s, 0, s])
    off_plane = c + 1.5 * np.array([s, 0, -s])
    corner = c + [0, 2.0, 0] + 2.0 * np.array([s, 0, s])
    assert cross.contains(np.array([along_y, along_diag])).all()
    assert not cross.contains(np.array([off_plane, corner])).any()


@pytest.mark.parametrize(
    "prim, inside, outside",
    [
        (Primitive("box", dict(center=[0, 0, 0], size=[2, 4, 6]), mu=1.0), [0.9, 1.9, 2.9], [1.1, 0, 0]),
        (Primitive("sphere", dict(center=[1, 0, 0], radius=2), kappa=1.0), [2.9, 0, 0], [3.1, 0, 0]),
        (Primitive("spherical_shell", dict(center=[0, 0, 0], inner_radius=1, outer_radius=2), mu=1.0),
         [0, 1.5, 0], [0, 0.5, 0]),
        (Primitive("axis_cylinder", dict(center=[0, 0, 0], radius=1, span=(-3, 3)), kappa=1.0),
         [0.5, 2.9, 0.5], [0.5, 3.1, 0.5]),
        (Primitive("helical_cylinder", dict(rho=5.5, radius=1, span=(-16, 16), theta_range=(0.0, np.pi)), mu=1.0),
         [5.5, -16, 0], [-5.5, -16, 0]),
    ],
)
def test_primitive_membership(prim, inside, outside):
    assert prim.contains(np.array([inside]))[0]
    assert not prim.contains(np.array([outside]))[0]


@pytest.mark.parametrize(
    "shape, params, kw",
    [
        ("torus", {}, dict(mu=1.0)),
        ("sphere", dict(center=[0, 0, 0]), dict(mu=1.0)),
        ("sphere", dict(center=[0, 0, 0], radius=-1.0), dict(mu=1.0)),
        ("spherical_shell", dict(center=[0, 0, 0], inner_radius=2, outer_radius=1), dict(mu=1.0)),
        ("sphere", dict(center=[0, 0, 0], radius=1.0), dict(mu=-0.1)),
        ("planar_cross", dict(center=[0, 0, 0], normal=[0, 0, 1], arm=[1, 0, 1], half_length=1, half_width=1,
                              half_thickness=1), dict(mu=1.0)),
    ],
)
def test_primitive_validation(shape, params, kw):
    with pytest.raises(ValueError):
        Primitive(shape, params, **kw)


def test_phantom_validation():
    with pytest.raises(ValueError):
        PhantomSpec(0.0, 0.01)
    with pytest.raises(ValueError):
        PhantomSpec(0.3, 0.01, [Primitive("sphere", dict(center=[0, 0, 0], radius=1), mu=0.1)], labels=("a", "b"))


def test_helix_linear_parametrisation():
    p = dict(rho=5.5, span=(-16.0, 16.0), theta_range=(np.pi / 6, 11 * np.pi / 6))
    pts = helix_samples(p)
    assert len(pts) >= 200 * 5 / 6
    theta = np.unwrap(np.arctan2(pts[:, 2], pts[:, 0]))
    assert np.allclose(np.hypot(pts[:, 0], pts[:, 2]), 5.5)
    assert theta[0] == pytest.approx(np.pi / 6) and theta[-1] == pytest.approx(11 * np.pi / 6)
    slope = np.diff(theta) / np.diff(pts[:, 1])
    assert np.allclose(slope, slope[0])


def test_cylinder_phantom_tables():
    spec = cylinder_phantom()
    assert len(spec.primitives) == 12
    assert (spec.kappa_bg, spec.mu_bg) == (0.3, 0.01)
    k, m = _rasterize_points(spec, np.array([[0.0, 0.0, 0.0], [0.0, -11.0, 1.5]]))
    assert k[0] == pytest.approx(0.05)
    assert m[1] == pytest.approx(0.05)


def test_rasterized_volume_fraction():
    m = generate_box_mesh(20, 20, 20, **CUBE)
    ball = PhantomSpec(0.3, 0.015, [Primitive("sphere", dict(center=[0, 0, 0], radius=3.0), kappa=0.2)])
    k, _ = rasterize_phantom(m, ball)
    # node indicator weighted by the P1 lumped mass
    w = np.zeros(m.n_vertices)
    np.add.at(w, m.tets.reshape(-1), np.repeat(m.volumes / 4, 4))
    frac = w[k == 0.2].sum() / w.sum()
    exact = 4 / 3 * np.pi * 27 / 1331
    assert abs(frac - exact) <= 0.1 * exact


def test_cylinder_illumination_values():
    ill = make_illumination("cylinder", theta0=np.pi / 2)
    assert ill.profile(np.pi / 2) == pytest.approx(1.0)
    assert ill.profile(np.pi / 2 + np.pi / 8) == pytest.approx(0.0, abs=1e-15)
    assert ill.profile(np.pi / 2 - np.pi / 8) == pytest.approx(0.0, abs=1e-15)


def test_face_illumination_values():
    m = generate_box_mesh(2, 2, 2)
    vals = make_illumination("face", face="-z").evaluate(m)
    assert np.all(vals[m.facet_tags == FACE_TAGS["-z"]] == 1.0)
    assert np.all(vals[m.facet_tags != FACE_TAGS["-z"]] == 0.0)
    with pytest.raises(ValueError):
        make_illumination("face", face="top")


@pytest.fixture(scope="module")
def meshes():
    return generate_box_mesh(10, 10, 10, **CUBE), generate_box_mesh(6, 6, 6, **CUBE)


def test_noiseless_data_is_projected_forward_data(meshes):
    fine, coarse = meshes
    spec = cube_phantom()
    data = simulate_data(fine, spec, BOTTOM_TOP, coarse, noise_level=0.0, seed=1)
    k, m = rasterize_phantom(fine, spec)
    _, hf = evaluate_forward(fine, np.log(k / 0.3), np.log(m / 0.015), 0.3, 0.015, BOTTOM_TOP)
    P = build_interpolation(fine, coarse)
    ref = np.array([P(row) for row in hf.reshape(2, -1)])
    assert np.array_equal(data.chi, ref)
    assert np.array_equal(data.clean, ref)
    modelled = simulate_data(fine, spec, BOTTOM_TOP, coarse, noise_level=0.0, sigma_level=0.01)
    assert np.array_equal(modelled.chi, ref)
    assert np.allclose(modelled.sigma, 0.01 * np.abs(ref), rtol=0, atol=1e-12 * np.abs(ref).max())


def test_seed_determinism(meshes):
    fine, coarse = meshes
    a = simulate_data(fine, cube_phantom(), BOTTOM_TOP, coarse, seed=11)
    b = simulate_data(fine, cube_phantom(), BOTTOM_TOP, coarse, seed=11)
    c = simulate_data(fine, cube_phantom(), BOTTOM_TOP, coarse, seed=12)
    assert np.array_equal(a.chi, b.chi)
    assert not np.array_equal(a.chi, c.chi)
    assert a.seed == 11


def test_inverse_crime_warning(meshes):
    _, coarse = meshes
    with pytest.warns(UserWarning, match="inverse crime"):
        simulate_data(coarse, cube_phantom(), BOTTOM_TOP[:1], coarse, seed=0)


def test_noise_statistics():
    fine = generate_box_mesh(20, 20, 20, **CUBE)
    coarse = generate_box_mesh(17, 17, 17, **CUBE)
    assert coarse.n_vertices >= 5000
    data = simulate_data(fine, cube_phantom(), BOTTOM_TOP[:1], coarse, noise_level=0.01, seed=3)
    h, chi = data.clean[0], data.chi[0]
    big = np.abs(h) > np.median(np.abs(h))
    rel = (chi - h)[big] / np.abs(h[big])
    assert abs(rel.std() - 0.01) <= 0.2 * 0.01
    z = (chi - h) / data.sigma[0]
    assert abs(z.var() - 1.0) <= 0.1


def test_sigma_floor():
    h = np.array([0.0, 1e-20, 0.5, 2.0])
    s = noise_sigma(h, 0.01)
    assert np.all(s > 0)
    assert s[0] == pytest.approx(2e-12)
    assert s[3] == pytest.approx(0.02)


def test_measurement_set_validation():
    with pytest.raises(ValueError):
        MeasurementSet(np.ones((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        MeasurementSet(np.ones((1, 3)), np.ones((1, 4)))
    d = MeasurementSet(np.ones((2, 3)), np.full((2, 3), 0.5))
    assert d.n_illuminations == 2
    assert np.all(d.weights == 2.0)
    assert d.whitened_residual(np.zeros(6)) == pytest.approx(np.sqrt(6 * 4))


def test_negative_noise_level(meshes):
    fine, coarse = meshes
    with pytest.raises(ValueError):
        simulate_data(fine, cube_phantom(), BOTTOM_TOP, coarse, noise_level=-0.1)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 4.0), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_sphere_rasterization_matches_distance(r, cx, cy, cz):
    m = generate_box_mesh(6, 6, 6, **CUBE)
    spec = PhantomSpec(1.0, 1.0, [Primitive("sphere", dict(center=[cx, cy, cz], radius=r), mu=2.0)])
    _, mu = rasterize_phantom(m, spec)
    d = np.linalg.norm(m.vertices - [cx, cy, cz], axis=1)
    assert np.array_equal(mu == 2.0, d <= r + 1e-9)
