import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from maxlab.flow.drift import (ABCField, ConstantDrift, GridDrift, LinearDrift, MollifierSchedule,
                               PlanarVortex, ZeroDrift, build_drift, bump_1d, bump_disk, bump_transform,
                               divergence_probe, make_drift_sequence, mollify_axial, smooth_step,
                               smooth_step_deriv)


def test_bumps_are_normalised():
    assert integrate.quad(bump_1d, -1, 1)[0] == pytest.approx(1.0, rel=1e-12)
    assert integrate.quad(lambda r: 2 * np.pi * r * bump_disk(r), 0, 1)[0] == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("eps", [0.05, 0.3, 1.0])
def test_bump_transform_matches_quadrature(eps):
    direct = integrate.quad(lambda w: bump_1d(w / eps) / eps * math.cos(w), -eps, eps)[0]
    assert bump_transform(eps) == pytest.approx(direct, rel=1e-10)
    assert bump_transform(0.0) == 1.0


def test_smooth_step():
    s = np.array([-1.0, 0.5, 1.0, 1.5, 2.0, 3.0])
    np.testing.assert_allclose(smooth_step(s), [1, 1, 1, 0.5, 0, 0], atol=1e-15)
    x = np.linspace(0.9, 2.1, 301)
    h = 1e-6
    fd = (smooth_step(x + h) - smooth_step(x - h)) / (2 * h)
    np.testing.assert_allclose(smooth_step_deriv(x), fd, atol=1e-7)


def test_simple_fields():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.all(ZeroDrift(3)(0, x) == 0)
    np.testing.assert_array_equal(ConstantDrift([1, 2, 3])(0, x), np.tile([1.0, 2, 3], (5, 1)))
    M = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]])
    lin = LinearDrift(M)
    assert lin.divergence_free
    np.testing.assert_allclose(lin(0, x), x @ M.T)
    assert not LinearDrift(-np.eye(2)).divergence_free


@pytest.mark.parametrize("field", [ABCField(), ABCField(eps=0.2, R=3.0), PlanarVortex(),
                                   PlanarVortex(R=4.0, eps=0.125)])
def test_divergence_free(field):
    div = divergence_probe(field, 500, box=(-3, 3), seed=1)
    scale = float(np.max(np.abs(field.gradient(0, np.random.default_rng(1).uniform(-3, 3, (500, 3))))))
    assert div <= 1e-6 * max(scale, 1.0)


def test_analytic_gradients_match_differences():
    x = np.random.default_rng(2).uniform(-2, 2, (50, 3))
    x = x[np.hypot(x[:, 0], x[:, 1]) > 0.3]
    from maxlab.flow.drift import DriftField
    for f in [ABCField(eps=0.1), PlanarVortex(), PlanarVortex(R=4.0, eps=0.125)]:
        np.testing.assert_allclose(f.gradient(0, x), DriftField.gradient(f, 0, x, 1e-6),
                                   atol=2e-4 * max(1.0, float(np.abs(f.gradient(0, x)).max())))


def test_abc_mollification_is_second_order():
    x = np.random.default_rng(3).uniform(-3, 3, (200, 3))
    base = ABCField()(0, x)
    ratios = []
    for eps in [0.2, 0.1, 0.05]:
        diff = np.abs(ABCField(eps=eps)(0, x) - base).max()
        ratios.append(diff / eps**2)
    assert max(ratios) / min(ratios) < 1.05


def test_vortex_axial_mollification_is_second_order():
    z = np.linspace(-2, 2, 41)
    phi = lambda u: np.exp(-u**2 / 2)
    r = [np.abs(mollify_axial(phi, e, z) - phi(z)).max() / e**2 for e in [0.2, 0.1, 0.05]]
    assert max(r) / min(r) < 1.05


def test_vortex_profile_and_singularity():
    v = PlanarVortex(a=1.25)
    rho = np.array([1e-3, 1e-2])
    # |b| ~ rho^{1-a} near the axis
    mag = rho * np.abs(v.base_profile(rho))
    slope = math.log(mag[1] / mag[0]) / math.log(10)
    assert slope == pytest.approx(1 - 1.25, abs=0.01)
    # G' = rho g
    r = np.linspace(0.2, 3, 20)
    h = 1e-6
    np.testing.assert_allclose((v.potential(r + h) - v.potential(r - h)) / (2 * h), r * v.base_profile(r),
                               rtol=1e-6)


def test_vortex_levels_converge_in_sobolev_norm():
    base = PlanarVortex()
    levels = make_drift_sequence(base, MollifierSchedule((4, 8, 16)))
    g = [lev.grad_lp_norm(1.0) for lev in levels]
    d = [levels[i].difference_lp_norm(levels[i + 1], 1.0) for i in range(2)]
    assert d[1] < d[0] / 2
    assert all(x < base.grad_lp_norm(1.0) * 1.01 for x in g)


def test_direct_cutoff_is_rejected():
    with pytest.raises(ValueError):
        make_drift_sequence(ABCField(), MollifierSchedule(mode="direct_cutoff"))


def test_schedule_validation():
    s = MollifierSchedule((4, 8))
    assert s.epsilons == (0.25, 0.125)
    assert s.radii == pytest.approx((4.0, 2 * math.sqrt(8)))
    assert MollifierSchedule((4, 8), "direct_mollify").radii == (math.inf, math.inf)
    with pytest.raises(ValueError):
        MollifierSchedule((4, 8), eps=(0.1, 0.2))
    with pytest.raises(ValueError):
        MollifierSchedule(mode="other")


def test_build_drift_catalog():
    assert isinstance(build_drift("abc", A=1.0), ABCField)
    assert isinstance(build_drift("ou", dim=2), LinearDrift)
    with pytest.raises(ValueError):
        build_drift("nope")


def test_grid_container_round_trip(tmp_path):
    f = GridDrift.sample(ABCField(), [-1, -1, -1], [1, 1, 1], 9, times=(0.0, 1.0))
    path = tmp_path / "abc.npz"
    f.save(path)
    g = GridDrift.load(path)
    assert np.array_equal(g.values, f.values) and g.header() == f.header()
    x = np.random.default_rng(0).uniform(-0.9, 0.9, (20, 3))
    np.testing.assert_allclose(g(0.5, x), ABCField()(0, x), atol=0.05)
    assert np.all(g(0.0, np.full((1, 3), 5.0)) == 0)


def test_grid_container_rejects_bad_files(tmp_path):
    np.savez(tmp_path / "bad.npz", header=np.array('{"magic": "x"}'), values=np.zeros((1, 2, 2, 2, 3)))
    with pytest.raises(ValueError):
        GridDrift.load(tmp_path / "bad.npz")
    with pytest.raises(ValueError):
        GridDrift(np.zeros((1, 4, 4, 3)), 0.1)


def test_grid_mollify_preserves_constants():
    f = GridDrift(np.ones((1, 16, 16, 16, 3)), 0.1, mode="wrap")
    np.testing.assert_allclose(f.mollify(0.3).values, 1.0, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 8), st.floats(0.02, 0.5))
def test_abc_levels_divergence_free(R, eps):
    assert divergence_probe(ABCField(eps=eps, R=R), 50, box=(-2 * R, 2 * R)) < 1e-5
