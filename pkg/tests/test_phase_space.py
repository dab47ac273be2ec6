import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from vpcontrol.phase_space import (
    InitialDatum,
    ParticleEnsemble,
    PhasePoint,
    SupportRadii,
    eval_initial_datum,
    load_ensemble,
    lp_norm,
    sample_ensemble,
    save_ensemble,
    support_radii,
)

# int over the unit ball of (1 - |y|^2)^4 is 4 pi * 128/3465 (Beta function);
# the datum integral is its square. Cross-checked by quadrature below.
BUMP_MASS = 4 * np.pi * 128 / 3465
DATUM_MASS = BUMP_MASS**2


def test_bump_mass_oracle():
    radial = integrate.quad(lambda r: 4 * np.pi * r * r * (1 - r * r) ** 4, 0, 1,
                            epsabs=1e-14)[0]
    assert radial == pytest.approx(BUMP_MASS, rel=1e-12)


def test_datum_examples():
    assert eval_initial_datum(InitialDatum(), PhasePoint((0, 0, 0), (0, 0, 0))) == 1.0
    d2 = InitialDatum(amplitude=2.0)
    assert eval_initial_datum(d2, [0.5, 0, 0, 0, 0, 0]) == pytest.approx(0.6328125, abs=1e-15)
    d = InitialDatum(1.0, 1.5, 0.7)
    assert eval_initial_datum(d, [0, 1.5, 0, 0.1, 0, 0]) == 0.0
    assert eval_initial_datum(d, [0, 0, 0, 0, 0.7, 0]) == 0.0


def test_datum_validation():
    with pytest.raises(ValueError):
        InitialDatum(amplitude=-1)
    with pytest.raises(ValueError):
        InitialDatum(r_x=0)
    assert InitialDatum(amplitude=0)(np.zeros(6)) == 0.0
    with pytest.raises(ValueError):
        PhasePoint((0, 0, np.nan), (0, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_datum_nonnegative_and_supported(z):
    d = InitialDatum(1.3, 1.0, 0.8)
    val = d(np.array(z))
    assert val >= 0
    if np.linalg.norm(z[:3]) >= 1.0 or np.linalg.norm(z[3:]) >= 0.8:
        assert val == 0


def test_datum_c2_at_boundary():
    # second differences on both sides of |x| = r_x approach the same limit (zero)
    d = InitialDatum()
    e = np.array([1, 0, 0, 0, 0, 0.0])

    def d2(r, h):
        return (d(e * (r + h)) - 2 * d(e * r) + d(e * (r - h))) / h**2

    for eps in (1e-1, 1e-2, 1e-3):
        inside, outside = d2(1 - eps, eps / 10), d2(1 + eps, eps / 10)
        assert outside == 0.0
        assert abs(inside) < 200 * eps**2  # f'' ~ 192 eps^2 near the edge


def test_lattice_geometry():
    ens = sample_ensemble(InitialDatum(), 0.5)
    assert set(np.unique(ens.origins)) <= {-0.5, 0.0, 0.5}
    assert np.all(ens.values > 0)
    assert ens.weight == 0.5**6
    assert len(np.unique(ens.origins, axis=0)) == len(ens)


def test_lattice_rejects_coarse_spacing():
    with pytest.raises(ValueError):
        sample_ensemble(InitialDatum(), 1.0)
    with pytest.raises(ValueError):
        sample_ensemble(InitialDatum(), -0.1)


def test_lattice_count_scaling():
    d = InitialDatum()
    n1 = len(sample_ensemble(d, 0.25))
    n2 = len(sample_ensemble(d, 0.125))
    assert n2 / n1 == pytest.approx(2**6, rel=0.2)


def test_l1_norm_converges_to_oracle():
    d = InitialDatum()
    coarse = lp_norm(sample_ensemble(d, 0.25), 1)
    fine = lp_norm(sample_ensemble(d, 0.125), 1)
    assert abs(coarse / fine - 1) < 0.05
    assert abs(fine - DATUM_MASS) < abs(coarse - DATUM_MASS) + 1e-12
    assert fine == pytest.approx(DATUM_MASS, rel=1e-3)


def test_lp_norm_examples():
    ens = sample_ensemble(InitialDatum(), 0.25)
    assert lp_norm(ens, np.inf) == 1.0
    zero = sample_ensemble(InitialDatum(amplitude=0.0), 0.5)
    assert all(lp_norm(zero, p) == 0 for p in (1, 2, np.inf))
    with pytest.raises(ValueError):
        lp_norm(ens, 0.5)


def test_lp_norm_position_and_permutation_invariance(rng):
    ens = sample_ensemble(InitialDatum(), 0.5)
    moved = ens.moved(ens.points + rng.normal(size=ens.points.shape))
    perm = rng.permutation(len(ens))
    shuffled = ParticleEnsemble(ens.points[perm], ens.origins[perm], ens.values[perm], ens.weight)
    for p in (1, 2, np.inf):
        assert lp_norm(moved, p) == lp_norm(ens, p)
        assert lp_norm(shuffled, p) == pytest.approx(lp_norm(ens, p), rel=1e-14)


def test_values_frozen():
    ens = sample_ensemble(InitialDatum(), 0.5)
    with pytest.raises(ValueError):
        ens.values[0] = 3.0
    with pytest.raises(ValueError):
        ens.origins[0, 0] = 3.0
    assert np.array_equal(ens.values, InitialDatum()(ens.origins))


def test_support_radii_initial_and_monotone(rng):
    ens = sample_ensemble(InitialDatum(), 0.25)
    r = support_radii(ens)
    assert r.P <= 1 and r.Q <= 1 and r.S <= np.sqrt(2)
    hist = r
    for _ in range(5):
        new = support_radii(ens.moved(ens.points * rng.uniform(0.2, 1.5)), hist)
        assert new.P >= hist.P and new.Q >= hist.Q and new.S >= hist.S
        hist = new
    assert support_radii(sample_ensemble(InitialDatum(0.0), 0.5)) == SupportRadii()


def test_checkpoint_roundtrip(tmp_path):
    ens = sample_ensemble(InitialDatum(2.0, 1.0, 0.8), 0.4)
    ens = ens.moved(ens.points * 1.1)
    path = save_ensemble(tmp_path / "e.npz", ens, time=0.5)
    back = load_ensemble(path)
    assert np.array_equal(back.points, ens.points)
    assert np.array_equal(back.origins, ens.origins)
    assert np.array_equal(back.values, ens.values)
    assert back.weight == ens.weight and back.h == ens.h
    assert back.datum == ens.datum
    assert back.meta["time"] == 0.5
