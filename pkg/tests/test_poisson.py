import json

import numpy as np
import pytest
from scipy import integrate

from vpcontrol.phase_space import InitialDatum, ParticleEnsemble, lp_norm, sample_ensemble
from vpcontrol.poisson import (
    CUBE_MEAN_INV_DIST,
    GridField,
    GridSpec,
    ParticleEscapeError,
    deposit_charge,
    electric_field,
    field_energy_from_field,
    field_energy_from_potential,
    interpolate_field,
    laplacian_residual,
    load_grid,
    save_grid,
    solve_potential,
    uniform_ball_charge,
)


def centred_spec(n, L):
    # shift by half a spacing so that a node sits on the origin
    h = 2 * L / (n - 1)
    return GridSpec(center=(h / 2,) * 3, L=L, n=n)


def ball_potential(r, a, Q):
    r = np.asarray(r, float)
    inside = Q * (3 * a * a - r * r) / (2 * a**3)
    with np.errstate(divide="ignore"):
        return np.where(r < a, inside, Q / r)


def test_cube_constant_against_cubature():
    # mean of 1/|r| over [-1/2, 1/2]^3 = 8 * int over [0, 1/2]^3
    val = integrate.tplquad(lambda z, y, x: 1 / np.sqrt(x * x + y * y + z * z),
                            0, 0.5, 0, 0.5, 0, 0.5, epsabs=1e-10, epsrel=1e-10)[0]
    assert CUBE_MEAN_INV_DIST == pytest.approx(8 * val, rel=1e-8)
    assert CUBE_MEAN_INV_DIST == pytest.approx(2.3800773639795536, rel=1e-15)


def one_marker(x, q):
    p = np.array([[*x, 0, 0, 0]], float)
    return ParticleEnsemble(p, p, [q], 1.0)


def test_deposit_single_node():
    spec = GridSpec(L=1.0, n=9)
    node = spec.nodes()[3, 4, 5]
    rho = deposit_charge(one_marker(node, 2.0), spec)
    assert rho.data[3, 4, 5] == pytest.approx(2.0 / spec.cell_volume, rel=1e-14)
    assert np.count_nonzero(rho.data) == 1


def test_deposit_empty_and_total_charge():
    spec = GridSpec(L=2.0, n=16)
    empty = ParticleEnsemble(np.zeros((0, 6)), np.zeros((0, 6)), np.zeros(0), 1.0)
    assert np.all(deposit_charge(empty, spec).data == 0)
    ens = sample_ensemble(InitialDatum(), 0.25)
    rho = deposit_charge(ens, spec)
    assert rho.data.sum() * spec.cell_volume == pytest.approx(lp_norm(ens, 1), rel=1e-13)
    assert np.all(rho.data >= 0)


def test_deposit_escape_names_marker():
    spec = GridSpec(L=1.0, n=8)
    ens = sample_ensemble(InitialDatum(), 0.5)
    pts = ens.points.copy()
    pts[7, 0] = 3.0
    with pytest.raises(ParticleEscapeError) as info:
        deposit_charge(ens.moved(pts), spec)
    assert info.value.index == 7


def test_zero_density():
    spec = GridSpec(L=1.0, n=8)
    psi = solve_potential(GridField(spec, np.zeros((8, 8, 8))))
    assert np.all(psi.data == 0)


def test_fft_matches_direct(rng):
    spec = GridSpec(L=1.0, n=12)
    rho = GridField(spec, rng.random((12, 12, 12)))
    a = solve_potential(rho, "direct").data
    b = solve_potential(rho, "fft").data
    assert np.max(np.abs(a - b)) / np.max(np.abs(a)) < 1e-13


def test_linearity_and_positivity(rng):
    spec = GridSpec(L=1.0, n=10)
    r1 = rng.random((10, 10, 10))
    r2 = rng.random((10, 10, 10))
    p1 = solve_potential(GridField(spec, r1), "direct").data
    p2 = solve_potential(GridField(spec, r2), "direct").data
    p12 = solve_potential(GridField(spec, r1 + r2), "direct").data
    assert np.max(np.abs(p12 - p1 - p2)) < 1e-12 * np.max(p12)
    assert np.all(p1 >= 0)
    with pytest.raises(FloatingPointError):
        solve_potential(GridField(spec, np.full((10, 10, 10), np.nan)))


def test_uniform_ball_potential_direct_path():
    a, Q = 1.0, 1.0
    spec = centred_spec(32, 2.5 * a)
    psi = solve_potential(uniform_ball_charge(spec, a, Q), "direct")
    c = interpolate_field(psi, np.zeros(3))
    o = interpolate_field(psi, np.array([2 * a, 0, 0]))
    assert abs(c / ball_potential(0.0, a, Q) - 1) < 1e-2
    assert abs(o / ball_potential(2 * a, a, Q) - 1) < 1e-2


def test_far_field_and_coulomb_field():
    a, Q = 1.0, 1.0
    spec = centred_spec(32, 4.5 * a)
    psi = solve_potential(uniform_ball_charge(spec, a, Q))
    far = interpolate_field(psi, np.array([4 * a, 0, 0]))
    assert abs(far / (Q / (4 * a)) - 1) < 2e-2
    spec2 = centred_spec(32, 2.5 * a)
    E = electric_field(solve_potential(uniform_ball_charge(spec2, a, Q)))
    e = interpolate_field(E, np.array([2 * a, 0, 0]))
    assert abs(e[0] / (Q / (2 * a) ** 2) - 1) < 2e-2
    assert e[0] > 0  # repulsive: points away from the charge


def test_laplacian_residual_decreases():
    res = []
    for n in (16, 32):
        spec = centred_spec(n, 2.5)
        rho = uniform_ball_charge(spec, 1.0, 1.0)
        res.append(laplacian_residual(rho, solve_potential(rho)))
    assert res[1] < res[0]


def test_field_bound_stable_under_refinement():
    # free streaming to t = 1/2 spreads the lattice clusters (all velocities
    # of one lattice site start at the same x), support radius stays <= 1.5
    ens = sample_ensemble(InitialDatum(), 0.25)
    ens = ens.moved(np.hstack([ens.x + 0.5 * ens.v, ens.v]))
    consts = []
    for n in (32, 48):
        spec = GridSpec(L=2.0, n=n)
        E = electric_field(solve_potential(deposit_charge(ens, spec)))
        consts.append(np.sqrt((E.data**2).sum(-1)).max() / lp_norm(ens, np.inf))
    assert consts[1] == pytest.approx(consts[0], rel=0.2)


def test_electric_field_exact_cases():
    spec = GridSpec(L=1.0, n=9)
    x = spec.nodes()
    E = electric_field(GridField(spec, np.full((9, 9, 9), 3.0)))
    assert np.all(E.data == 0)
    E = electric_field(GridField(spec, -x[..., 0]))
    np.testing.assert_allclose(E.data[..., 0], 1.0, rtol=1e-13)
    np.testing.assert_allclose(E.data[..., 1:], 0.0, atol=1e-13)


def test_interpolation_exactness(rng):
    spec = GridSpec(center=(0.1, -0.2, 0.3), L=1.3, n=10)
    x = spec.nodes()
    a = rng.normal(size=3)
    lin = GridField(spec, x @ a + 0.5)
    pts = spec.lower + rng.random((50, 3)) * 2 * spec.L
    np.testing.assert_allclose(interpolate_field(lin, pts), pts @ a + 0.5, rtol=1e-12, atol=1e-12)
    assert interpolate_field(lin, x[2, 3, 4]) == pytest.approx(lin.data[2, 3, 4], rel=1e-14)
    const = GridField(spec, np.full((10, 10, 10, 3), 2.0))
    np.testing.assert_allclose(interpolate_field(const, pts), 2.0, rtol=1e-14)
    with pytest.raises(ParticleEscapeError):
        interpolate_field(lin, np.array([5.0, 0, 0]))


def test_field_energy_consistency():
    # |E|^2/8pi over the box misses the exterior tail Q^2/(2R), R between
    # the inscribed and circumscribed sphere radii of the box (10% slack for
    # the discretization error of both estimates)
    a, Q = 1.0, 1.0
    spec = centred_spec(48, 6.0)
    rho = uniform_ball_charge(spec, a, Q)
    psi = solve_potential(rho)
    w_rho = field_energy_from_potential(rho, psi)
    w_e = field_energy_from_field(electric_field(psi))
    assert w_rho == pytest.approx(0.6 * Q * Q / a, rel=2e-2)  # 3Q^2/5a
    tail = w_rho - w_e
    assert 0.9 * Q * Q / (2 * 6.0 * np.sqrt(3)) < tail < 1.1 * Q * Q / (2 * 6.0)


def test_grid_dump_roundtrip(tmp_path, rng):
    spec = GridSpec(center=(0.5, 0, 0), L=2.0, n=8)
    g = GridField(spec, rng.random((8, 8, 8, 3)), "E")
    path = save_grid(tmp_path / "e", g, time=0.25)
    back, t = load_grid(path)
    assert back.spec == spec and back.name == "E" and t == 0.25
    assert np.array_equal(back.data, g.data)
    side = json.loads((tmp_path / "e.json").read_text())
    assert side["shape"] == [8, 8, 8, 3]
