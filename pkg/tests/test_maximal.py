import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maxlab.flow.maximal import (PairSample, TrigPolynomial, check_lusin_lipschitz, gradient_norm,
                                 local_maximal, lusin_ratios, maximal_bruteforce, radius_ladder)
from maxlab.rng import RandomStream


def test_radius_ladder():
    r = radius_ladder(0.1, 1.0, 1.5)
    assert r[0] == pytest.approx(0.1) and r[-1] == 1.0
    assert np.all(np.diff(r) > 0)
    with pytest.raises(ValueError):
        radius_ladder(0.5, 0.1)


def test_constant_function():
    f = np.full((16, 16, 16), 2.5)
    np.testing.assert_allclose(local_maximal(f, 1 / 16, 0.3), 2.5, rtol=1e-12)
    np.testing.assert_allclose(local_maximal(f, 1 / 16, 0.3, mode="zero")[8, 8, 8], 2.5, rtol=1e-12)


def test_half_space_boundary_is_one_half():
    n = 32
    f = np.zeros((n, n, n))
    f[: n // 2] = 1.0
    # balls centred on the x1 = 1/2 plane itself; put the boundary on a lattice plane
    g = np.zeros((n + 1, n, n))
    g[: n // 2] = 1.0
    g[n // 2] = 0.5
    M = local_maximal(g, 1 / n, 0.25, mode="zero", r0=2 / n)
    inner = M[n // 2, n // 2 - 2: n // 2 + 2, n // 2 - 2: n // 2 + 2]
    np.testing.assert_allclose(inner, 0.5, atol=1e-12)


def test_resolution_guard():
    with pytest.raises(ValueError):
        local_maximal(np.zeros((8, 8, 8)), 0.1, 0.2)


def test_matches_bruteforce_oracle():
    tp = TrigPolynomial.random(RandomStream(1), degree=3)
    vals, _ = tp.grid(32)
    f = vals - vals.min()
    R = 0.2
    M = local_maximal(f, 1 / 32, R, ratio=1.02)
    probes = np.random.default_rng(0).integers(0, 32, (30, 3))
    bf = maximal_bruteforce(f, 1 / 32, R, probes)
    fast = M[tuple(probes.T)]
    # the ladder skips some discrete radii, so it can only under-estimate
    assert np.all(fast <= bf * (1 + 1e-9) + 1e-12)
    assert np.max(np.abs(fast / bf - 1)) < 0.02


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 3.0))
def test_sublinear_and_homogeneous(seed, c):
    rng = np.random.default_rng(seed)
    f, g = rng.random((12, 12, 12)), rng.random((12, 12, 12))
    h, R = 1 / 12, 0.34
    Mf, Mg = local_maximal(f, h, R), local_maximal(g, h, R)
    assert np.all(local_maximal(f + g, h, R) <= Mf + Mg + 1e-12)
    np.testing.assert_allclose(local_maximal(c * f, h, R), c * Mf, rtol=1e-10)
    assert np.all(Mf >= f - 1e-12)


def test_affine_function_satisfies_c_one():
    n = 32
    x = np.arange(n) / n
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    f = 0.3 * X - 0.7 * Y + 0.2 * Z
    grad = np.full_like(f, np.sqrt(0.3**2 + 0.7**2 + 0.2**2))
    # an affine function is not periodic, so keep both ends of every pair inside the box
    rng = np.random.default_rng(2)
    i = rng.integers(10, 22, (500, 3))
    o = rng.integers(-6, 7, (500, 3))
    o[np.sum(o**2, axis=1) < 16] = [4, 0, 0]
    pairs = PairSample(i / n, (i + o) / n, n)
    rep = check_lusin_lipschitz(f, 1 / n, 500, 1.0, grad_norm=grad, mode="zero", pairs=pairs)
    assert rep.passed and rep.diagnostics["max_ratio"] <= 0.5 + 1e-9


def test_constant_field_both_sides_zero():
    f = np.full((16, 16, 16), 3.0)
    rep = check_lusin_lipschitz(f, 1 / 16, 200, 1e-6, stream=RandomStream(1))
    assert rep.passed and rep.diagnostics["max_ratio"] == 0.0


def test_pairs_are_shared_across_refinements():
    pairs = PairSample.draw(RandomStream(3), 100, n0=16, r_max=0.25, r_min_cells=1)
    ix16, _ = pairs.indices(16)
    ix32, _ = pairs.indices(32)
    np.testing.assert_array_equal(ix32, 2 * ix16)
    with pytest.raises(ValueError):
        pairs.indices(24)


def test_trig_gradient_matches_differences():
    tp = TrigPolynomial.random(RandomStream(4))
    vals, gn = tp.grid(64)
    np.testing.assert_allclose(gradient_norm(vals, 1 / 64), gn, atol=0.02 * gn.max())


def test_lusin_constant_stable_under_refinement():
    tp = TrigPolynomial.random(RandomStream(5))
    pairs = PairSample.draw(RandomStream(6), 5000, n0=32, r_min_cells=4)
    cs = []
    for n in (32, 64):
        vals, gn = tp.grid(n)
        r = lusin_ratios(vals, gn, 1 / n, pairs)
        cs.append(np.quantile(r, 0.999))
    assert abs(cs[1] / cs[0] - 1) < 0.2
