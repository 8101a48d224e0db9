"""Aronson-type transition density bounds for divergence-free drift.

Regime arithmetic (gamma, mu, nu) is exact when l and q are rational, so
branch and domain decisions never depend on rounding.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import special

from .process import PathEnsemble
from .verify import VerificationReport, _canonical, wilson_interval


class VacuousBoundWarning(UserWarning):
    pass


def _exact(x):
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    x = float(x)
    if math.isinf(x):
        return math.inf
    return Fraction(repr(x))


@dataclass(frozen=True)
class AronsonRegime:
    l: Fraction
    q: Fraction | float
    d: int
    Lambda: float
    gamma: Fraction
    mu: Fraction
    nu: Fraction
    branch: str
    c1: float | None = None
    c2: float | None = None
    large_lambda_threshold: float | None = None
    notes: dict = field(default_factory=dict)

    @property
    def constants_set(self) -> bool:
        return self.c1 is not None and (self.c2 is not None or self.branch == "mu_eq_1")

    def with_constants(self, c1: float, c2: float | None = None, **notes) -> "AronsonRegime":
        return replace(self, c1=float(c1), c2=None if c2 is None else float(c2),
                       notes={**self.notes, **notes})

    def as_dict(self) -> dict:
        def show(x):
            return "inf" if x == math.inf else str(x)
        return _canonical({
            "l": show(self.l), "q": show(self.q), "d": self.d, "Lambda": self.Lambda,
            "gamma": show(self.gamma), "mu": show(self.mu), "nu": show(self.nu),
            "gamma_float": float(self.gamma), "mu_float": float(self.mu), "nu_float": float(self.nu),
            "branch": self.branch, "c1": self.c1, "c2": self.c2,
            "marginal_alpha": marginal_alpha(self), "alpha_source": "derived from proof",
            "large_lambda_threshold": self.large_lambda_threshold, "notes": self.notes})


def aronson_regime(l, q, d: int, Lambda: float = 0.0, *, c1=None, c2=None,
                   large_lambda_threshold=None) -> AronsonRegime:
    """gamma = 2/l + d/q, mu = 2/(2 - gamma + 2/l) and the matching nu."""
    L, Q = _exact(l), _exact(q)
    if not L > 1:
        raise ValueError("need l > 1")
    if int(d) != d or d < 3:
        raise ValueError("need integer d >= 3")
    if not Q > Fraction(d, 2):
        raise ValueError("need q > d/2")
    if Lambda < 0:
        raise ValueError("Lambda must be non-negative")
    dq = Fraction(0) if Q == math.inf else Fraction(d) / Q
    gamma = 2 / L + dq
    if not 1 <= gamma < 2:
        raise ValueError(f"gamma = {gamma} outside [1, 2)")
    mu = 2 / (2 - gamma + 2 / L)
    if mu == 1:
        nu = (2 - gamma) / 2
        branch = "mu_eq_1"
    else:
        den = 2 - gamma - 2 / L
        if den <= 0:
            raise ValueError(f"nu = (2-gamma)/(2-gamma-2/l) is not finite and positive "
                             f"(denominator {den})")
        nu = (2 - gamma) / den
        branch = "mu_gt_1"
    return AronsonRegime(L, Q, int(d), float(Lambda), gamma, mu, nu, branch, c1, c2,
                         large_lambda_threshold)


def _log_envelope(regime: AronsonRegime, s, r):
    s = np.asarray(s, dtype=float)
    r = np.asarray(r, dtype=float)
    d, c1 = regime.d, regime.c1
    base = math.log(c1) - d / 2 * np.log(s)
    if regime.branch == "mu_eq_1":
        shift = c1 * regime.Lambda * s ** float(regime.nu)
        return base - (shift - r) ** 2 / (4 * c1 * s)
    mu, nu = float(regime.mu), float(regime.nu)
    with np.errstate(divide="ignore", invalid="ignore"):
        # selector r^{mu-2} / s^{mu-nu-1} >= 1 in log form; at r = 0 both exponents vanish
        log_r = 0.0 if mu == 2 else (mu - 2) * np.log(r)
        sel = log_r - (mu - nu - 1) * np.log(s)
        near = r**2 / s
        far = (r**mu / s**nu) ** (1 / (mu - 1))
    expo = np.where(sel >= 0, far, near)
    return base - expo / regime.c2


def aronson_upper(regime: AronsonRegime, t, tau, r):
    """Upper bound on the transition density at distance r = |x - xi|."""
    if not regime.constants_set:
        raise ValueError("regime constants c1, c2 are not set")
    s = np.asarray(t, dtype=float) - np.asarray(tau, dtype=float)
    if np.any(s <= 0):
        raise ValueError("need t > tau")
    if np.any(np.asarray(r) < 0):
        raise ValueError("need r >= 0")
    out = np.exp(_log_envelope(regime, s, r))
    return float(out) if out.ndim == 0 else out


def branch_exponents(regime: AronsonRegime, s, r) -> tuple[float, float]:
    """Both mu > 1 exponent arguments (r^2/s, (r^mu/s^nu)^{1/(mu-1)}), before the 1/c2 factor."""
    if regime.branch != "mu_gt_1":
        raise ValueError("two branches exist only for mu > 1")
    mu, nu = float(regime.mu), float(regime.nu)
    near = r * r / s
    far = math.exp((mu * math.log(r) - nu * math.log(s)) / (mu - 1)) if r > 0 else 0.0
    return near, far


def aronson_branches(regime: AronsonRegime, s, r) -> tuple[float, float]:
    """Both mu > 1 branch values (near, far), regardless of the selector."""
    pre = regime.c1 / s ** (regime.d / 2)
    near, far = branch_exponents(regime, s, r)
    return pre * math.exp(-near / regime.c2), pre * math.exp(-far / regime.c2)


def branch_mismatch(regime: AronsonRegime, s: float, log_r: float | None = None) -> float:
    """Relative mismatch of the two branch exponents at distance r = e^{log_r}.

    Defaults to the selector boundary.  Everything is evaluated in log space
    in floating point, so extreme regimes neither underflow nor overflow.
    """
    if regime.branch != "mu_gt_1":
        raise ValueError("two branches exist only for mu > 1")
    mu, nu = float(regime.mu), float(regime.nu)
    ls = math.log(s)
    if log_r is None:
        log_r = (mu - nu - 1) / (mu - 2) * ls
    log_near = 2 * log_r - ls
    log_far = (mu * log_r - nu * ls) / (mu - 1)
    return abs(math.expm1(log_near - log_far))


def branch_boundary_radius(regime: AronsonRegime, s: float) -> float:
    """r solving r^{mu-2} = s^{mu-nu-1} (needs mu != 2)."""
    mu, nu = float(regime.mu), float(regime.nu)
    if mu == 2:
        raise ValueError("selector is independent of r when mu = 2")
    return s ** ((mu - nu - 1) / (mu - 2))


def sde_moment_exponent(p: float, gamma: float, d: int, *, warn: bool = True) -> float:
    """((2 - gamma)(p + d) - d) / 2; a non-positive value makes the bound vacuous."""
    if not 1 <= float(gamma) < 2:
        raise ValueError("need gamma in [1, 2)")
    if p < 1:
        raise ValueError("need p >= 1")
    e = ((2 - gamma) * (p + d) - d) / 2
    e = float(e) if not isinstance(e, Fraction) else e
    if e <= 0 and warn:
        warnings.warn(f"moment exponent {float(e):.4g} <= 0: bound is vacuous for p={p}",
                      VacuousBoundWarning, stacklevel=2)
    return e


def moment_exponent_vacuous(p: float, gamma: float, d: int) -> bool:
    return sde_moment_exponent(p, gamma, d, warn=False) <= 0


def marginal_alpha(regime_or_mu) -> float:
    """min(2, mu/(mu-1)) for mu > 1, and 2 for mu = 1."""
    mu = regime_or_mu.mu if isinstance(regime_or_mu, AronsonRegime) else _exact(regime_or_mu)
    if mu < 1:
        raise ValueError("mu must be >= 1")
    if mu == 1:
        return 2.0
    return float(min(Fraction(2), mu / (mu - 1)))


# -- density envelopes --------------------------------------------------------------

def _ball_volume(d: int, r):
    return math.pi ** (d / 2) / special.gamma(d / 2 + 1) * np.asarray(r, dtype=float) ** d


def scott_width(x) -> float:
    x = np.asarray(x, dtype=float)
    return 3.49 * x.std(ddof=1) * x.size ** (-1 / 3)


@dataclass(frozen=True)
class ShellTable:
    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int
    d: int

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def to_csv(self, path, envelope=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r_lo", "r_hi", "count", "density", "lower", "upper", "envelope"])
            env = [None] * len(self.counts) if envelope is None else envelope
            for i in range(len(self.counts)):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            int(self.counts[i]), repr(float(self.density[i])),
                            repr(float(self.lower[i])), repr(float(self.upper[i])),
                            "" if env[i] is None else repr(float(env[i]))])


def radial_shells(displacements, edges=None, confidence: float = 0.99) -> ShellTable:
    """Shell-averaged density of displacement vectors (n, d)."""
    x = np.asarray(displacements, dtype=float)
    n, d = x.shape
    r = np.linalg.norm(x, axis=1)
    if edges is None:
        w = scott_width(r)
        edges = np.arange(0.0, r.max() + w, w)
    edges = np.asarray(edges, dtype=float)
    counts = np.histogram(r, edges)[0]
    vol = np.diff(_ball_volume(d, edges))
    lo, hi = wilson_interval(counts, n, confidence)
    return ShellTable(edges, counts, counts / n / vol, lo / vol, hi / vol, n, d)


def _shell_envelope(regime, s, edges, n_sub=9):
    # sup over each shell, sampled at n_sub radii including both edges
    u = np.linspace(0, 1, n_sub)
    rr = edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * u[None, :]
    return np.exp(_log_envelope(regime, s, rr)).max(axis=1)


def _displacements(ensemble: PathEnsemble, t: float):
    start = ensemble.values[:, 0]
    if not np.allclose(start, start[0]):
        raise ValueError("ensemble must start from a single point")
    return ensemble.at(t) - start


def fit_aronson_constants(ensemble: PathEnsemble, t: float, regime: AronsonRegime, *,
                          edges=None, min_count: int = 30, slack: float = 0.25,
                          confidence: float = 0.99) -> AronsonRegime:
    """Fit (c1, c2) on a training run, returning a regime with frozen constants.

    c2 comes from a weighted regression of log density on the branch
    exponent, inflated by (1 + slack); c1 is then the max ratio of upper
    shell limits to the envelope shape, inflated by (1 + slack).
    """
    shells = radial_shells(_displacements(ensemble, t), edges, confidence)
    ok = shells.counts >= min_count
    if ok.sum() < 3:
        raise ValueError("insufficient shell occupancy for fitting")
    s = t - ensemble.grid.t_start
    if regime.branch == "mu_eq_1":
        probe = regime.with_constants(1.0)
        c2 = None
    else:
        probe = regime.with_constants(1.0, 1.0)
        expo = -(_log_envelope(probe, s, shells.mid[ok]) - _log_envelope(probe, s, 0.0 * shells.mid[ok]))
        y = np.log(shells.density[ok])
        wts = shells.counts[ok].astype(float)
        X = np.column_stack([np.ones_like(expo), -expo])
        sw = np.sqrt(wts)
        coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        if coef[1] <= 0:
            raise ValueError("fitted density does not decay with the branch exponent")
        c2 = (1 + slack) / coef[1]
        probe = regime.with_constants(1.0, c2)
    shape = _shell_envelope(probe, s, shells.edges)
    c1 = (1 + slack) * float(np.max(shells.upper[ok] / shape[ok]))
    if regime.branch == "mu_eq_1":
        # c1 also enters the exponent; iterate the max-ratio rule to a fixed point
        for _ in range(50):
            shape = _shell_envelope(regime.with_constants(c1), s, shells.edges) / c1
            new = (1 + slack) * float(np.max(shells.upper[ok] / shape[ok]))
            if abs(new - c1) <= 1e-12 * c1:
                break
            c1 = max(c1, new)
    return regime.with_constants(c1, c2, fitted_on=ensemble.provenance.get("master_seed"),
                                 fit_time=t, slack=slack)


def density_envelope_check(ensemble: PathEnsemble, t: float, regime: AronsonRegime, bins=None, *,
                           min_count: int = 30, confidence: float = 0.99) -> VerificationReport:
    """Shell density upper limits against the frozen envelope."""
    if not regime.constants_set:
        raise ValueError("fit c1, c2 on a training run first")
    shells = radial_shells(_displacements(ensemble, t), bins, confidence)
    ok = shells.counts >= min_count
    if ok.sum() < 3:
        raise ValueError("insufficient shell occupancy: fewer than 3 shells with "
                         f">= {min_count} samples")
    s = t - ensemble.grid.t_start
    env = _shell_envelope(regime, s, shells.edges)
    status = "pass" if np.all(shells.upper[ok] <= env[ok]) else "bound_violation"
    params = {"regime": regime.as_dict(), "t": t, "n_paths": ensemble.n_paths,
              "min_count": min_count, "confidence": confidence,
              "model": ensemble.provenance.get("model")}
    return VerificationReport(
        claim="aronson_density", params=params, lambda_grid=shells.mid.tolist(),
        empirical=shells.density.tolist(), upper_ci=shells.upper.tolist(), bound=env.tolist(),
        status=status, seed=ensemble.provenance.get("master_seed"), checked=ok.tolist(),
        diagnostics={"edges": shells.edges.tolist(), "counts": shells.counts.tolist()})


def radial_tail_slope(ensemble: PathEnsemble, t: float, lambda_grid=None, window=None) -> dict:
    """log(-log P(|X_t - X_0| >= lam)) regression slope, plus the profile fit."""
    from .verify import empirical_survival, fit_tail_exponent
    r = np.linalg.norm(_displacements(ensemble, t), axis=1)
    lam = np.linspace(r.max() / 200, r.max(), 200) if lambda_grid is None else lambda_grid
    fit = fit_tail_exponent(empirical_survival(r, lam), window)
    return {"loglog_slope": fit.diagnostics["loglog_slope"], "profile_alpha": fit.alpha,
            "lambda_range": fit.diagnostics["lambda_range"]}
