import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maxlab.bounds import HoelderControl
from maxlab.flow.drift import ConstantDrift, LinearDrift
from maxlab.increments import (IncrementMomentTable, IncrementRow, analytic_control, certifies,
                               conditional_increment_moment, ensemble_table, fit_holder_control,
                               ladder_design, nested_table, unconditional_increment_moment,
                               unconditional_table)
from maxlab.process import PathEnsemble, ProcessModel, make_time_grid, sample_brownian
from maxlab.rng import RandomStream

OU = ProcessModel("diffusion", x0=1.0, drift=LinearDrift([[-1.0]]))


def test_ladder_design():
    pairs = ladder_design(1.0, 1, 3, bases=(0.0, 0.5))
    assert pairs == [(0.0, 0.5), (0.0, 0.25), (0.0, 0.125), (0.5, 1.0), (0.5, 0.75), (0.5, 0.625)]


def test_brownian_nested_is_zero(stream):
    est = conditional_increment_moment(ProcessModel("brownian"), 0.25, 0.5, 4000, 64, 2.0, stream)
    assert abs(est.corrected) <= 3 * est.corrected_se + est.bias_bound
    # the plug-in estimate sits at the inner-mean noise level, var/n_inner
    assert est.estimate == pytest.approx(0.25 / 64, rel=0.1)


def test_ou_conditional_moment(stream):
    s, t = 0.5, 0.75
    est = conditional_increment_moment(OU, s, t, 4000, 64, 2.0, stream, dt=2**-8)
    m = math.exp(-s)
    second = m**2 + (1 - math.exp(-2 * s)) / 2                  # E X_s^2
    exact = second * (1 - math.exp(-(t - s))) ** 2
    assert abs(est.corrected - exact) < 4 * est.corrected_se + 0.02 * exact


def test_deterministic_conditional_moment(stream):
    c = 0.7
    model = ProcessModel("diffusion", drift=ConstantDrift([c]), noise_scale=0.0)
    est = conditional_increment_moment(model, 0.25, 0.75, 10, 4, 3.0, stream, dt=2**-6)
    assert est.estimate == pytest.approx(abs(c * 0.5) ** 3, rel=1e-12)
    assert est.standard_error == pytest.approx(0.0, abs=1e-15)


def test_nested_rejects_fbm_and_odd_inner(stream):
    with pytest.raises(ValueError):
        conditional_increment_moment(ProcessModel("fbm", hurst=0.7), 0.1, 0.2, 10, 4, 2, stream)
    with pytest.raises(ValueError):
        conditional_increment_moment(ProcessModel("brownian"), 0.1, 0.2, 10, 5, 2, stream)


def test_nested_worker_invariance():
    s = RandomStream(1)
    a = conditional_increment_moment(OU, 0.25, 0.5, 300, 8, 2, s, dt=2**-6, workers=1, chunk=50)
    b = conditional_increment_moment(OU, 0.25, 0.5, 300, 8, 2, s, dt=2**-6, workers=3, chunk=128)
    assert (a.estimate, a.corrected) == (b.estimate, b.corrected)


def test_unconditional_moments(stream):
    g = make_time_grid(0, 1, 64)
    ens = sample_brownian(g, 1, 50_000, stream)
    est, se = unconditional_increment_moment(ens, 0.25, 0.75, 4.0)
    assert abs(est - 3 * 0.5**2) < 3 * se
    const = PathEnsemble(g, np.ones((3, 65, 1)))
    assert unconditional_increment_moment(const, 0.0, 1.0, 2.0)[0] == 0.0
    with pytest.raises(ValueError):
        unconditional_increment_moment(ens, 0.5, 0.25, 2.0)
    with pytest.raises(ValueError):
        unconditional_increment_moment(ens, 0.0, 0.3, 2.0)


def test_streamed_table_matches_in_memory(stream):
    g = make_time_grid(0, 1, 16)
    pairs = [(0.0, 0.5), (0.25, 0.5)]
    a = unconditional_table(ProcessModel("brownian"), g, 1000, stream, pairs, [2.0, 4.0], chunk=300)
    b = ensemble_table(sample_brownian(g, 1, 1000, stream), pairs, [2.0, 4.0])
    for ra, rb in zip(a.rows, b.rows):
        assert ra.estimate == pytest.approx(rb.estimate, rel=1e-12)
        assert ra.se == pytest.approx(rb.se, rel=1e-9)


def _synthetic_table(p, h, A, n_rows=8, se=0.0):
    t = IncrementMomentTable()
    for k in range(1, n_rows + 1):
        dt = 2.0**-k
        t.add(IncrementRow(0.0, dt, p, "unconditional", A * dt ** (p * h), se, 1000, 0))
    return t


@settings(max_examples=40, deadline=None)
@given(st.floats(1.5, 6), st.floats(0.2, 1.0), st.floats(0.1, 10))
def test_fit_recovers_exact_power_law(p, h, A):
    c = fit_holder_control(_synthetic_table(p, h, A), p)
    assert c.h == pytest.approx(h, rel=1e-8)
    assert c.A == pytest.approx(A, rel=1e-7)
    assert c.diagnostics["certified"]


def test_fit_caps_h_at_one():
    c = fit_holder_control(_synthetic_table(2.0, 1.3, 1.0), 2.0)
    assert c.h == 1.0 and c.diagnostics["h_slope"] == pytest.approx(1.3)
    assert certifies(c, _synthetic_table(2.0, 1.3, 1.0))


def test_fit_rejects_thin_designs():
    with pytest.raises(ValueError):
        fit_holder_control(_synthetic_table(2, 0.5, 1, n_rows=3), 2)
    t = IncrementMomentTable([IncrementRow(0, 0.5 + 0.01 * k, 2, "nested", 1.0, 0, 10) for k in range(5)])
    with pytest.raises(ValueError):
        fit_holder_control(t, 2)


def test_certifies_detects_violation():
    table = _synthetic_table(4, 0.5, 3.0)
    assert certifies(HoelderControl(4, 0.5, 3.0), table)
    assert not certifies(HoelderControl(4, 0.5, 1.0), table)


def test_brownian_fourth_moment_fit(stream):
    g = make_time_grid(0, 1, 256)
    table = unconditional_table(ProcessModel("brownian"), g, 20_000, stream,
                                ladder_design(1.0, 1, 8), [4.0])
    c = fit_holder_control(table, 4.0)
    assert abs(c.h - 0.5) < 0.02
    assert 2.7 <= c.A <= 3.6


def test_ou_nested_fit(stream):
    pairs = ladder_design(1.0, 2, 6, bases=(0.25,))
    table = nested_table(OU, pairs, 2.0, 1500, 32, stream, dt=2**-8)
    c = fit_holder_control(table, 2.0)
    assert abs(c.diagnostics["h_slope"] - 1.0) < 0.1


def test_table_csv_round_trip(tmp_path):
    t = _synthetic_table(4, 0.5, 3.0, se=0.01)
    t.to_csv(tmp_path / "t.csv")
    back = IncrementMomentTable.from_csv(tmp_path / "t.csv")
    assert back.rows == t.rows


def test_analytic_controls():
    assert analytic_control(ProcessModel("brownian"), 4).A == 0.0
    f = analytic_control(ProcessModel("fbm", hurst=0.7), 2)
    assert (f.h, f.A) == (0.7, pytest.approx(1.0))
    ou = analytic_control(OU, 2.0)
    assert ou.h == 1.0 and ou.A > 0
    # the OU control must dominate the exact conditional moment on a ladder
    for s, t in ladder_design(1.0, 1, 8):
        second = math.exp(-2 * s) + (1 - math.exp(-2 * s)) / 2
        exact = second * (1 - math.exp(-(t - s))) ** 2
        assert ou.A * (t - s) ** 2 >= exact
    with pytest.raises(ValueError):
        analytic_control(ProcessModel("diffusion", drift=ConstantDrift([1.0])), 2)
