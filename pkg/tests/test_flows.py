import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maxlab.em import integrate_flows
from maxlab.flow.drift import (ABCField, ConstantDrift, DriftField, MollifierSchedule, PlanarVortex,
                               ZeroDrift, make_drift_sequence)
from maxlab.flow.flows import (ball_lattice, box_lattice, cauchy_report, density_report,
                               log_estimate_check, log_functional, lk_distance, markov_check,
                               pushforward_density, solve_flow_ensemble, sup_distance_field)
from maxlab.process import make_time_grid, sample_brownian
from maxlab.rng import RandomStream


def test_ball_lattice_volume():
    g = ball_lattice(1.0, 4096)
    assert abs(g.n_points - 4096) <= 0.03 * 4096
    assert np.all(np.linalg.norm(g.points, axis=1) < 1)
    assert g.quadrature_tolerance < 1e-3 * g.exact_volume
    assert g.boundary_layer().sum() > 0


def test_box_lattice():
    g = box_lattice([0, 0], [1, 1], 10)
    assert g.n_points == 100 and g.weights.sum() == pytest.approx(1.0)
    assert g.quadrature_tolerance < 1e-8
    with pytest.raises(ValueError):
        box_lattice([0, 0], [1, 2], 10)


def test_zero_drift_bitwise(stream):
    g = make_time_grid(0, 1, 32)
    src = box_lattice([-1, -1, -1], [1, 1, 1], 3)
    ens = solve_flow_ensemble([ZeroDrift(3)], g, src, 4, stream, store_paths=True)
    B = sample_brownian(g, 3, 4, stream).values
    np.testing.assert_array_equal(ens.paths[0], src.points[None, :, None, :] + B[:, None, :, :])


def test_identical_levels_distance_zero(stream):
    g = make_time_grid(0, 0.5, 32)
    src = ball_lattice(1.0, 300)
    f = ABCField()
    ens = solve_flow_ensemble([f, f, f], g, src, 3, stream, pairs="all", residual=(f, 2))
    for n, m in [(0, 1), (1, 2), (0, 2)]:
        assert np.all(ens.pair(n, m) == 0)
        assert log_functional(ens, n, m, 0.1, 1.0)[0] == 0.0
    df = sup_distance_field(ens, 0, 1, R=2.0)
    assert np.array_equal(df.inside, ens.sup_norm[0] < 2.0)
    assert sup_distance_field(ens, 0, 1).outside_fraction == 0.0
    rep = cauchy_report(ens)
    assert rep.empirical[:2] == [0.0, 0.0] and not any(rep.checked[:2])


def test_abc_mollification_levels_converge(stream):
    g = make_time_grid(0, 0.5, 64)
    src = ball_lattice(1.0, 300)
    levels = [ABCField(eps=e) for e in (0.2, 0.1, 0.05, 0.025)]
    ens = solve_flow_ensemble(levels, g, src, 4, stream, labels=(0.2, 0.1, 0.05, 0.025))
    med = [np.median(ens.pair(a, b)) for a, b in [(0.2, 0.1), (0.1, 0.05), (0.05, 0.025)]]
    assert med[0] > med[1] > med[2]
    rep = cauchy_report(ens, r=1.0)
    assert rep.passed
    assert all(r <= 0.8 for r in rep.diagnostics["ratios"])


def test_log_functional_properties(stream):
    g = make_time_grid(0, 0.5, 32)
    src = ball_lattice(1.0, 200)
    ens = solve_flow_ensemble([ABCField(eps=0.3), ABCField()], g, src, 3, stream)
    vals = [log_functional(ens, 0, 1, th)[0] for th in (1.0, 0.1, 0.01)]
    assert vals[0] < vals[1] < vals[2]
    assert log_functional(ens, 0, 1, 0.1)[0] == log_functional(ens, 1, 0, 0.1)[0]
    with pytest.raises(ValueError):
        log_functional(ens, 0, 1, 0.0)
    lhs, rhs = markov_check(ens, 0, 1, 0.01, 1.0)
    assert lhs <= rhs
    d, (lo, hi) = lk_distance(ens, 0, 1)
    assert lo <= d <= hi


def test_flow_worker_invariance():
    g = make_time_grid(0, 0.25, 16)
    src = ball_lattice(1.0, 150)
    levels = [PlanarVortex(R=4.0, eps=0.25), ABCField()]
    a = solve_flow_ensemble(levels, g, src, 5, RandomStream(8), workers=1, chunk=1)
    b = solve_flow_ensemble(levels, g, src, 5, RandomStream(8), workers=3, chunk=2)
    assert np.array_equal(a.final, b.final) and np.array_equal(a.pair(0, 1), b.pair(0, 1))


class _Bad(DriftField):
    def __init__(self):
        super().__init__(1, "bad")

    def __call__(self, t, x):
        out = np.ones_like(x)
        out[x[:, 0] > 0.5] = np.nan
        return out


def test_non_finite_drift_is_flagged(stream):
    g = make_time_grid(0, 1, 16)
    ens = integrate_flows([_Bad()], g, np.array([[0.0], [1.0]]), stream, n_noise=2, noise_scale=0.0)
    assert ens.flagged[0, :, 1].all()
    assert np.all(np.isfinite(ens.final))


def test_cap_flags_large_steps(stream):
    g = make_time_grid(0, 1, 4)
    ens = integrate_flows([ConstantDrift([10.0])], g, np.zeros((1, 1)), stream, n_noise=1,
                          noise_scale=0.0, cap=1.0)
    assert ens.flagged.all() and ens.final[0, 0, 0, 0] == pytest.approx(4.0)


def test_log_estimate_check_constant():
    g = make_time_grid(0, 0.5, 32)
    src = ball_lattice(1.0, 200)
    ens = solve_flow_ensemble([ABCField(eps=e) for e in (0.4, 0.2, 0.1)], g, src, 3, RandomStream(2),
                              pairs="all")
    chk = log_estimate_check(ens, [(0, 1), (1, 2)], [1.0, 1.0], [0.1, 0.1], tolerance=10.0)
    assert chk.constant == pytest.approx(math.sqrt(chk.ratios[0] * chk.ratios[1]))
    assert chk.stable


def test_translation_density_is_one(stream):
    g = make_time_grid(0, 0.5, 16)
    src = ball_lattice(1.0, 4096)
    ens = solve_flow_ensemble([ZeroDrift(3)], g, src, 2, stream)
    pfd = pushforward_density(ens, 0, 1, src)
    assert pfd.interior.sum() > 50
    np.testing.assert_allclose(pfd.density[pfd.interior], 1.0, rtol=1e-12)
    assert pfd.mass_conserved
    assert density_report(pfd).passed


def test_noiseless_abc_density():
    g = make_time_grid(0, 0.5, 256)
    src = ball_lattice(1.0, 4096)
    ens = solve_flow_ensemble([ABCField()], g, src, 1, RandomStream(0), noise_scale=0.0)
    pfd = pushforward_density(ens, 0, 0, src)
    assert pfd.interior_fraction_within(0.95, 1.05) >= 0.95
    assert pfd.mass_conserved


def test_density_needs_snapshot_and_noise(stream):
    g = make_time_grid(0, 0.5, 8)
    src = ball_lattice(1.0, 500)
    ens = solve_flow_ensemble([ZeroDrift(3)], g, src, 1, stream, snapshot_times=(0.25,))
    assert pushforward_density(ens, 0, 0, src, 0.25).t == 0.25
    with pytest.raises(KeyError):
        pushforward_density(ens, 0, 0, src, 0.125)
    with pytest.raises(ValueError):
        pushforward_density(ens, 0, None, src)
    with pytest.raises(ValueError):
        pushforward_density(ens, 0, 0, ball_lattice(1.0, 300))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(0.1, 5.0))
def test_markov_inequality_property(theta, L):
    ens = _SMALL["ens"]
    lhs, rhs = markov_check(ens, 0, 1, theta, L)
    assert lhs <= rhs + 1e-15


_SMALL = {"ens": solve_flow_ensemble([ABCField(eps=0.5), ABCField()], make_time_grid(0, 0.5, 16),
                                     ball_lattice(1.0, 100), 3, RandomStream(1))}
