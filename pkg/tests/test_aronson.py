import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maxlab.aronson import (VacuousBoundWarning, aronson_branches, aronson_regime, aronson_upper,
                            branch_boundary_radius, branch_exponents, branch_mismatch,
                            density_envelope_check, fit_aronson_constants, marginal_alpha,
                            moment_exponent_vacuous, radial_shells, radial_tail_slope,
                            sde_moment_exponent)
from maxlab.process import make_time_grid, sample_brownian
from maxlab.rng import RandomStream
from oracles import random_regimes


def test_reference_regime():
    r = aronson_regime(4, 6, 3)
    assert (r.gamma, r.mu, r.nu, r.branch) == (1, Fraction(4, 3), 2, "mu_gt_1")
    assert marginal_alpha(r) == 2.0


def test_q_infinite_regime():
    r = aronson_regime(2, math.inf, 3)
    assert (r.gamma, r.mu, r.nu, r.branch) == (1, 1, Fraction(1, 2), "mu_eq_1")


@pytest.mark.parametrize("args", [(2, 2, 3), (1, 6, 3), (4, 1.5, 3), (4, 6, 2), (3, 4, 3)])
def test_regime_domain(args):
    with pytest.raises(ValueError):
        aronson_regime(*args)


def test_zero_distance_and_gaussian_reduction():
    r = aronson_regime(4, 6, 3, c1=2.0, c2=3.0)
    assert aronson_upper(r, 0.7, 0.2, 0.0) == pytest.approx(2.0 / 0.5**1.5)
    g = aronson_regime(2, math.inf, 3, 0.0, c1=1.5)
    s, x = 0.4, np.linspace(0, 3, 7)
    np.testing.assert_allclose(aronson_upper(g, s, 0.0, x), 1.5 / s**1.5 * np.exp(-x**2 / (4 * 1.5 * s)),
                               rtol=1e-13)
    with pytest.raises(ValueError):
        aronson_upper(aronson_regime(4, 6, 3), 1, 0, 1)
    with pytest.raises(ValueError):
        aronson_upper(r, 0.1, 0.2, 1.0)


def test_branch_boundary_continuity_reference():
    r = aronson_regime(4, 6, 3, c1=1.0, c2=1.0)
    for s in [0.01, 0.5, 2.0, 50.0]:
        rb = branch_boundary_radius(r, s)
        near, far = aronson_branches(r, s, rb)
        assert abs(near - far) <= 1e-12 * near
        assert branch_mismatch(r, s) <= 1e-12


def test_branch_mismatch_random_regimes():
    regs = random_regimes(100, seed=1)
    rng = np.random.default_rng(2)
    worst = max(branch_mismatch(r, float(s)) for r in regs for s in 10 ** rng.uniform(-3, 3, 5))
    assert worst <= 1e-12


def test_selector_picks_the_smaller_density():
    # on either side of the boundary the selected branch is the active one
    r = aronson_regime(4, 6, 3, c1=1.0, c2=1.0)
    s = 0.5
    rb = branch_boundary_radius(r, s)
    for x in [0.5 * rb, 2 * rb]:
        near, far = aronson_branches(r, s, x)
        val = aronson_upper(r, s, 0.0, x)
        assert val == pytest.approx(far if x ** (float(r.mu) - 2) >= s ** float(r.mu - r.nu - 1) else near)


def test_moment_exponents():
    assert sde_moment_exponent(4, 1, 3) == 2
    assert sde_moment_exponent(2, 1, 3) == 1
    with pytest.warns(VacuousBoundWarning):
        assert sde_moment_exponent(1, 1.8, 3) == pytest.approx(-1.1)
    assert moment_exponent_vacuous(1, 1.8, 3)
    with pytest.raises(ValueError):
        sde_moment_exponent(2, 2.0, 3)


def test_marginal_alpha():
    assert marginal_alpha(Fraction(4, 3)) == 2
    assert marginal_alpha(2) == 2
    assert marginal_alpha(3) == 1.5
    assert marginal_alpha(1) == 2
    with pytest.raises(ValueError):
        marginal_alpha(0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 6), st.fractions(Fraction(11, 10), Fraction(40)),
       st.fractions(Fraction(1), Fraction(60)))
def test_regime_invariants(d, l, q):
    try:
        r = aronson_regime(l, q, d)
    except ValueError:
        return
    assert 1 <= r.gamma < 2
    assert r.mu >= 1 and r.nu > 0
    assert r.gamma == Fraction(2) / l + Fraction(d) / q
    assert 1 < marginal_alpha(r) <= 2


def test_radial_shells_gaussian():
    x = np.random.default_rng(0).standard_normal((200_000, 3))
    sh = radial_shells(x, np.linspace(0, 3, 13))
    exact = (2 * np.pi) ** -1.5 * np.exp(-sh.mid**2 / 2)
    assert np.all(np.abs(sh.density / exact - 1)[:8] < 0.1)
    assert np.all(sh.lower <= sh.upper)


def test_envelope_dominates_brownian_density():
    g = make_time_grid(0, 0.5, 64)
    train = sample_brownian(g, 3, 20_000, RandomStream(1))
    test = sample_brownian(g, 3, 20_000, RandomStream(2))
    for reg in [aronson_regime(4, 6, 3), aronson_regime(2, math.inf, 3)]:
        fitted = fit_aronson_constants(train, 0.5, reg)
        assert fitted.constants_set
        rep = density_envelope_check(test, 0.5, fitted)
        assert rep.passed, rep.diagnostics


def test_density_check_requires_constants():
    g = make_time_grid(0, 0.5, 8)
    ens = sample_brownian(g, 3, 100, RandomStream(1))
    with pytest.raises(ValueError):
        density_envelope_check(ens, 0.5, aronson_regime(4, 6, 3))


def test_radial_tail_slope_gaussian():
    g = make_time_grid(0, 1, 8)
    ens = sample_brownian(g, 3, 50_000, RandomStream(4))
    out = radial_tail_slope(ens, 1.0)
    assert 1.7 < out["profile_alpha"] < 2.5
