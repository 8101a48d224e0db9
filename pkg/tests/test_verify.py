import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from maxlab.bounds import HoelderControl, TailDecay, cph_constant
from maxlab.increments import analytic_control
from maxlab.process import PathEnsemble, ProcessModel, bridge_sup, make_time_grid, sample_brownian, sample_fbm
from maxlab.rng import RandomStream
from maxlab.verify import (VerificationReport, certify_decay, digest, empirical_sup_norm,
                           empirical_survival, exact_curve, fit_tail_exponent, lq_norm_bootstrap,
                           verify_doob, verify_tail, wilson_interval)
from oracles import SUP_ABS_BROWNIAN_NORM


def test_wilson_interval_brackets():
    lo, hi = wilson_interval(np.array([0, 5, 100]), 100, 0.99)
    assert lo[0] == 0 and hi[-1] == 1
    assert lo[1] < 0.05 < hi[1]


def test_survival_examples():
    c = empirical_survival(np.full(10, 5.0), [1, 10])
    assert c.probs.tolist() == [1.0, 0.0]
    z = np.random.default_rng(0).standard_normal(100_000)
    c = empirical_survival(np.abs(z), [1.0])
    exact = 2 * (1 - stats.norm.cdf(1))
    assert c.lower[0] <= exact <= c.upper[0]


def test_sup_norm_of_constant_paths():
    g = make_time_grid(0, 1, 4)
    est = empirical_sup_norm(PathEnsemble(g, np.full((5, 5, 1), 2.0)), 2)
    assert (est.estimate, est.lower, est.upper) == (2.0, 2.0, 2.0)


def test_one_sided_sup_second_moment(stream):
    g = make_time_grid(0, 1, 256)
    ens = sample_brownian(g, 1, 50_000, stream)
    s = bridge_sup(ens, stream.child("b"))
    est = lq_norm_bootstrap(s, 2.0, stream.child("boot"), n_boot=200)
    assert est.lower <= 1.0 <= est.upper or abs(est.estimate - 1) < 0.01
    assert abs(np.mean(s) - math.sqrt(2 / math.pi)) < 0.01


@pytest.mark.parametrize("q", [1.0, 2.0, 4.0])
def test_two_sided_sup_norm(stream, q):
    g = make_time_grid(0, 1, 1024)
    ens = sample_brownian(g, 1, 20_000, stream)
    est = empirical_sup_norm(ens, q, n_boot=200, stream=stream.child("boot"))
    # grid maxima sit below the continuous supremum by O(sqrt(dt))
    target = SUP_ABS_BROWNIAN_NORM[q]
    assert target * 0.96 < est.estimate < target * 1.01


def test_bootstrap_is_reproducible():
    v = np.random.default_rng(1).exponential(size=500)
    a = lq_norm_bootstrap(v, 2, RandomStream(4), n_boot=50, workers=1)
    b = lq_norm_bootstrap(v, 2, RandomStream(4), n_boot=50, workers=3)
    assert a == b


def test_verify_doob_brownian(stream):
    g = make_time_grid(0, 1, 1024)
    ens = sample_brownian(g, 1, 10_000, stream)
    rep = verify_doob(ens, HoelderControl(4, 0.5, 3.0, "fitted", {"certified": True}), 2.0,
                      stream=stream, n_boot=100)
    assert rep.passed and rep.margin >= 2
    assert rep.bound[0] == pytest.approx(2 * ((3 * cph_constant(4, 0.5)) ** 0.25
                                              + rep.diagnostics["terminal_norm_lower"]))
    mart = verify_doob(ens, analytic_control(ProcessModel("brownian"), 4), 2.0, stream=stream, n_boot=100)
    assert mart.passed
    assert mart.bound[0] == pytest.approx(2 * mart.diagnostics["terminal_norm_lower"])
    assert mart.diagnostics["doob_ratio"] <= 2


def test_verify_doob_uncertified_premise(stream):
    g = make_time_grid(0, 1, 64)
    ens = sample_brownian(g, 1, 500, stream)
    rep = verify_doob(ens, HoelderControl(4, 0.5, 3.0, "fitted"), 2.0, n_boot=20)
    assert rep.status == "unverified_premise"
    with pytest.raises(ValueError):
        verify_doob(ens, HoelderControl(2, 1, 1), 3.0)


def test_verify_doob_fbm(stream):
    g = make_time_grid(0, 1, 1024)
    ens = sample_fbm(g, 0.7, 5000, stream)
    rep = verify_doob(ens, analytic_control(ProcessModel("fbm", hurst=0.7), 2), 2.0, n_boot=100)
    assert rep.passed


def test_exact_curve_fit():
    lam = np.linspace(1.5, 3.0, 30)
    fit = fit_tail_exponent(exact_curve(lam, lambda x: np.exp(-x**2)), window=(1e-12, 0.2))
    assert abs(fit.alpha - 2) < 1e-6
    assert fit.c1 == pytest.approx(1.0, rel=1e-5)
    assert fit.c2 == pytest.approx(1.0, rel=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 4.0), st.floats(0.3, 3.0), st.floats(0.5, 3.0))
def test_exact_curve_recovery(alpha, c1, c2):
    lam = np.linspace(0.5, 5, 60)
    curve = exact_curve(lam, lambda x: c2 * np.exp(-c1 * x**alpha))
    m = (curve.probs > 1e-12) & (curve.probs < 0.5)
    if m.sum() < 8:
        return
    fit = fit_tail_exponent(curve, window=(1e-12, 0.5))
    assert fit.alpha == pytest.approx(alpha, rel=1e-5)


def test_gaussian_tail_exponent():
    z = np.abs(np.random.default_rng(3).standard_normal(100_000))
    fit = fit_tail_exponent(empirical_survival(z, np.linspace(0.5, 5, 91)))
    assert 1.8 <= fit.alpha <= 2.2


def test_fit_needs_points():
    c = empirical_survival(np.arange(10.0), [1.0, 2.0])
    with pytest.raises(ValueError):
        fit_tail_exponent(c)


def test_certify_decay():
    z = np.abs(np.random.default_rng(5).standard_normal((20_000, 3)))
    lam = np.linspace(0.5, 4, 15)
    assert certify_decay(z, lam, decay=TailDecay(2, 0.5, 2)).certified
    assert not certify_decay(z, lam, decay=TailDecay(2, 2.0, 1)).certified
    cert = certify_decay(z, lam)
    assert cert.certified and cert.adjusted.c2 >= cert.raw.c2


def test_verify_tail(stream):
    g = make_time_grid(0, 1, 256)
    ens = sample_brownian(g, 1, 20_000, stream)
    ctl = analytic_control(ProcessModel("brownian"), 4)
    rep = verify_tail(ens, ctl, TailDecay(2, 0.5, 2), decay_certified=True)
    assert rep.passed and rep.lambda_grid == [2.0, 3.0, 4.0]
    # the premise is checked on the same lambda grid, so keep it inside the sample's resolution
    lam = (1.5, 2.0, 2.5)
    marg = np.abs(ens.values[:, 1:, 0])
    rep2 = verify_tail(ens, ctl, TailDecay(2, 0.5, 2), lambda_grid=lam, marginals=marg)
    assert rep2.passed
    bad = verify_tail(ens, ctl, TailDecay(2, 5.0, 0.1), lambda_grid=lam, marginals=marg)
    assert bad.status == "unverified_premise"


def test_report_round_trip(tmp_path):
    rep = VerificationReport("doob_maximal", {"q": 2}, [], [1.3], [1.35], [7.0], "pass", 11,
                             checked=[True], diagnostics={"x": np.float64(0.5)})
    text = rep.to_json(tmp_path / "r.json")
    back = VerificationReport.from_json(text)
    assert back.to_json() == text
    d = rep.as_dict()
    for key in ["claim", "params", "lambda_grid", "empirical", "upper_ci", "bound", "pass", "seed",
                "runtime_ms"]:
        assert key in d
    assert d["runtime_ms"] is None and d["config_digest"] == digest({"q": 2})


def test_digest_is_order_free():
    assert digest({"a": 1, "b": [1.0, 2]}) == digest({"b": [1.0, 2], "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})
