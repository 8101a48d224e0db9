"""Closed-form constants and bounds for processes with conditional increment control.

Notation: a process satisfies conditional increment control with parameters
(p, h, A) when E|E(X_t | F_s) - X_s|^p <= A |t - s|^{ph} for all s < t, with
p > 1, 0 < h <= 1 and ph > 1.  Uniform alpha-exponential marginal decay with
constants (alpha, C1, C2) means P(|X_t| >= lam) <= C2 exp(-C1 lam^alpha).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import optimize, special


@dataclass(frozen=True)
class HoelderControl:
    p: float
    h: float
    A: float
    source: str = "analytic"
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if not 0 < self.h <= 1:
            raise ValueError(f"h must lie in (0, 1], got {self.h}")
        if not self.A >= 0:
            raise ValueError(f"A must be non-negative, got {self.A}")
        if self.source not in ("analytic", "fitted"):
            raise ValueError("source is 'analytic' or 'fitted'")

    @property
    def usable(self) -> bool:
        """Whether ph > 1, as the maximal inequalities require."""
        return self.p * self.h > 1

    def require_usable(self):
        if not self.usable:
            raise ValueError(f"ph = {self.p * self.h:.4g} <= 1: control unusable for maximal bounds")

    def as_dict(self) -> dict:
        return {"p": self.p, "h": self.h, "A": self.A, "source": self.source}


@dataclass(frozen=True)
class TailDecay:
    alpha: float
    c1: float
    c2: float
    source: str = "analytic"
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.alpha > 0 and self.c1 > 0 and self.c2 > 0):
            raise ValueError("alpha, c1, c2 must all be strictly positive")

    def survival_bound(self, lam):
        lam = np.asarray(lam, dtype=float)
        return self.c2 * np.exp(-self.c1 * lam ** self.alpha)

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "c1": self.c1, "c2": self.c2, "source": self.source}


@dataclass(frozen=True)
class TailBoundConfig:
    beta: float | None = None      # None: max(2, 2 alpha)
    theta: float = 2.0
    n_max: int = 10**6

    def __post_init__(self):
        if self.beta is not None and not self.beta > 1:
            raise ValueError("beta must exceed 1")
        if not self.theta > 1:
            raise ValueError("theta must exceed 1")
        if self.n_max < 1:
            raise ValueError("n_max must be positive")

    def beta_for(self, decay: TailDecay) -> float:
        return self.beta if self.beta is not None else max(2.0, 2.0 * decay.alpha)


# -- the maximal constant -----------------------------------------------------

def _check_ph(p, h):
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if not 0 < h <= 1:
        raise ValueError(f"h must lie in (0, 1], got {h}")
    if not p * h > 1:
        raise ValueError(f"need ph > 1, got ph = {p * h}")


def log_cph_constant(p: float, h: float, theta: float = 2.0) -> float:
    _check_ph(p, h)
    if not theta > 1:
        raise ValueError(f"theta must exceed 1, got {theta}")
    k = theta * (p - 1) + 1
    return ((p - 1) * math.log(2 * special.zeta(theta, 1))
            + p * math.log(p / (p - 1))
            + k * math.log(4 / (p * h - 1))
            + special.gammaln(k))


def cph_constant(p: float, h: float, theta: float = 2.0) -> float:
    """[2 zeta(theta)]^{p-1} (p/(p-1))^p (4/(ph-1))^{theta(p-1)+1} Gamma(theta(p-1)+1).

    Returns inf when the value exceeds the float range.
    """
    log_c = log_cph_constant(p, h, theta)
    return math.exp(log_c) if log_c < 709.0 else math.inf


def cph_series(p: float, h: float, theta: float = 2.0, tol: float = 1e-15) -> float:
    """The dyadic-sum constant before the Gamma-function majorant.

    [2 zeta]^{p-1} (p/(p-1))^p sum_m m^{theta(p-1)} 2^{-m(ph-1)}; never larger
    than :func:`cph_constant`.
    """
    _check_ph(p, h)
    a, r = theta * (p - 1), (p * h - 1) * math.log(2)
    m_peak = max(1.0, a / r)
    total, m = 0.0, 1
    while True:
        term = math.exp(a * math.log(m) - r * m)
        total += term
        if m > m_peak and term < tol * total:
            break
        m += 1
    return (2 * special.zeta(theta, 1)) ** (p - 1) * (p / (p - 1)) ** p * total


def cph_optimal(p: float, h: float, theta_max: float = 50.0) -> tuple[float, float]:
    """Minimise the constant over theta in (1, theta_max]."""
    _check_ph(p, h)
    res = optimize.minimize_scalar(lambda th: log_cph_constant(p, h, th),
                                   bounds=(1.0 + 1e-9, theta_max), method="bounded",
                                   options={"xatol": 1e-10})
    theta = float(res.x)
    c = cph_constant(p, h, theta)
    c2 = cph_constant(p, h, 2.0)
    if c2 < c:
        theta, c = 2.0, c2
    return theta, c


# -- dyadic partition ---------------------------------------------------------

@dataclass(frozen=True)
class DyadicInterval:
    level: int
    index: int          # 1-based: [(index-1)/2^level, index/2^level] in parent units
    left: Fraction
    right: Fraction

    @property
    def length(self) -> Fraction:
        return self.right - self.left


@dataclass(frozen=True)
class DyadicPartition:
    parent: tuple[float, float]
    target: tuple[float, float]
    intervals: tuple[DyadicInterval, ...]
    resolution: int
    gaps: tuple[tuple[float, float], ...]

    @property
    def exact(self) -> bool:
        return not self.gaps

    def level_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for iv in self.intervals:
            out[iv.level] = out.get(iv.level, 0) + 1
        return out

    def as_floats(self) -> list[tuple[float, float]]:
        s0, t0 = self.parent
        span = t0 - s0
        return [(s0 + span * float(iv.left), s0 + span * float(iv.right)) for iv in self.intervals]


def dyadic_partition(s: float, t: float, s0: float, t0: float,
                     resolution_level: int = 40) -> DyadicPartition:
    """Greedy dyadic decomposition of [s, t] inside the parent [s0, t0].

    The coarsest level m0 holding a dyadic interval inside [s, t] contributes
    one or two such intervals; each side is then extended by at most one
    interval per finer level, down to ``resolution_level``.  Arithmetic is
    exact (rationals in parent units).
    """
    if not t > s:
        raise ValueError("inverted or empty target interval")
    if not t0 > s0:
        raise ValueError("inverted parent interval")
    if s < s0 or t > t0:
        raise ValueError("target not inside parent")
    S0, span = Fraction(s0), Fraction(t0) - Fraction(s0)
    a, b = (Fraction(s) - S0) / span, (Fraction(t) - S0) / span

    def make(m, l):
        return DyadicInterval(m, l, Fraction(l - 1, 2**m), Fraction(l, 2**m))

    m0 = None
    for m in range(resolution_level + 1):
        first = math.ceil(a * 2**m) + 1        # smallest l with (l-1)/2^m >= a
        if Fraction(first, 2**m) <= b:
            m0 = m
            break
    if m0 is None:
        gaps = ((float(s), float(t)),)
        return DyadicPartition((s0, t0), (s, t), (), resolution_level, gaps)
    mid = [make(m0, first)]
    if Fraction(first + 1, 2**m0) <= b:
        mid.append(make(m0, first + 1))
    lo, hi = mid[0].left, mid[-1].right
    left, right = [], []
    for m in range(m0 + 1, resolution_level + 1):
        w = Fraction(1, 2**m)
        if hi + w <= b:
            right.append(make(m, int(hi * 2**m) + 1))
            hi += w
        if lo - w >= a:
            left.append(make(m, int(lo * 2**m)))
            lo -= w
        if hi == b and lo == a:
            break
    ivs = tuple(reversed(left)) + tuple(mid) + tuple(right)
    gaps = []
    if lo > a:
        gaps.append((float(S0 + span * a), float(S0 + span * lo)))
    if hi < b:
        gaps.append((float(S0 + span * hi), float(S0 + span * b)))
    return DyadicPartition((s0, t0), (s, t), ivs, resolution_level, tuple(gaps))


# -- Doob-type bound and moment control ----------------------------------------

def doob_bound(control: HoelderControl, q: float, window: float, terminal_q_norm: float,
               theta: float = 2.0) -> float:
    """(q/(q-1)) [C^{1/p} A^{1/p} window^h + ||X_{t0}||_q]."""
    control.require_usable()
    if not 1 < q <= control.p:
        raise ValueError(f"q must lie in (1, p] = (1, {control.p}], got {q}")
    if window < 0 or terminal_q_norm < 0:
        raise ValueError("window and terminal norm must be non-negative")
    p, h = control.p, control.h
    hoelder = 0.0
    if control.A > 0 and window > 0:
        hoelder = math.exp((log_cph_constant(p, h, theta) + math.log(control.A)) / p
                           + h * math.log(window))
    return q / (q - 1) * (hoelder + terminal_q_norm)


def moment_from_tail(decay: TailDecay, q: float) -> float:
    """E|X|^q <= C2 C1^{-q/alpha} Gamma(q/alpha + 1)."""
    if not q > 0:
        raise ValueError("q must be positive")
    r = q / decay.alpha
    return decay.c2 * math.exp(-r * math.log(decay.c1) + special.gammaln(r + 1))


# -- supremum tail bound --------------------------------------------------------

def series_constant(decay: TailDecay, beta: float) -> float:
    """Bound on E exp((C1/4) sup|E(X_{t_n}|F_t)|^alpha) from the exponential series.

    Terms with alpha q <= beta use the beta-moment and Doob's L^beta
    inequality; the rest are dominated by 4^{-q} (beta/(beta-1))^beta C2.
    """
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    a, c1, c2 = decay.alpha, decay.c1, decay.c2
    K = math.floor(beta / a)
    doob = beta / (beta - 1)
    mom = c2 * c1 ** (-beta / a) * math.gamma(beta / a + 1)
    head = sum((c1 / 4) ** q / math.factorial(q) * doob ** (a * q) * mom ** (a * q / beta)
               for q in range(K + 1))
    tail = doob ** beta * c2 * 4.0 ** (-K) / 3.0
    return head + tail


@dataclass(frozen=True)
class TailBoundResult:
    lam: float
    value: float
    n_opt: int
    E: float
    F: float
    interior: bool
    exhausted: bool
    series_constant: float

    def __float__(self):
        return self.value


def tail_bound_terms(control: HoelderControl, decay: TailDecay, horizon: float, lam: float,
                     cfg: TailBoundConfig = TailBoundConfig()) -> TailBoundResult:
    """P(sup_{[0,T]} |X| >= lam) <= min_N E N^{1-ph} + F N, terms taken at lam/2."""
    control.require_usable()
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    p, h, A = control.p, control.h, control.A
    a = p * h
    half = lam / 2.0
    cs = series_constant(decay, cfg.beta_for(decay))
    F = cs * math.exp(-(decay.c1 / 4.0) * half ** decay.alpha)
    if A == 0:
        return TailBoundResult(lam, F, 1, 0.0, F, False, False, cs)
    E = math.exp(log_cph_constant(p, h, cfg.theta) + math.log(A) + a * math.log(horizon)
                 - p * math.log(half))

    def f(N):
        return E * N ** (1 - a) + F * N

    # objective is convex in N; its real minimiser is ((a-1)E/F)^{1/a}
    n_star = ((a - 1) * E / F) ** (1 / a) if F > 0 else math.inf
    warm = (E / F) ** (1 / a) if F > 0 else math.inf
    exhausted = n_star > cfg.n_max
    cands = {1, cfg.n_max}
    for x in (n_star, warm):
        if math.isfinite(x):
            cands.update({min(cfg.n_max, max(1, math.floor(x))), min(cfg.n_max, max(1, math.ceil(x)))})
    n_opt = min(sorted(cands), key=f)
    return TailBoundResult(lam, f(n_opt), int(n_opt), E, F, E >= F, exhausted, cs)


def sup_tail_bound(control: HoelderControl, decay: TailDecay, horizon: float, lam: float,
                   cfg: TailBoundConfig = TailBoundConfig()) -> float:
    return tail_bound_terms(control, decay, horizon, lam, cfg).value


def sup_tail_exponent_rate(control: HoelderControl, decay: TailDecay) -> float:
    """c in the asymptotic form lam^{-1/h} exp(-c lam^alpha)."""
    return decay.c1 / 2 ** (decay.alpha + 2) * (1 - 1 / (control.p * control.h))


def sup_tail_asymptotic(control: HoelderControl, decay: TailDecay, horizon: float, lam: float,
                        cfg: TailBoundConfig = TailBoundConfig()) -> float:
    """K lam^{-1/h} exp(-c lam^alpha): the bound with N optimised over the reals."""
    control.require_usable()
    p, h, A = control.p, control.h, control.A
    if A == 0:
        raise ValueError("asymptotic form needs A > 0")
    a = p * h
    cs = series_constant(decay, cfg.beta_for(decay))
    log_k = (math.log(a) + (1 / a - 1) * math.log(a - 1)
             + (log_cph_constant(p, h, cfg.theta) + math.log(A)) / a + math.log(horizon)
             + math.log(2) / h + (1 - 1 / a) * math.log(cs))
    return math.exp(log_k - math.log(lam) / h - sup_tail_exponent_rate(control, decay) * lam ** decay.alpha)


def tail_validity_threshold(control: HoelderControl, decay: TailDecay, horizon: float,
                            cfg: TailBoundConfig = TailBoundConfig()) -> float:
    """Smallest lam0 with E/F >= 1 for every lam >= lam0 (0 when always, or when A = 0)."""
    control.require_usable()
    if control.A == 0:
        return 0.0
    p, h = control.p, control.h
    cs = series_constant(decay, cfg.beta_for(decay))
    base = log_cph_constant(p, h, cfg.theta) + math.log(control.A) + p * h * math.log(horizon) - math.log(cs)

    def g(lam):
        half = lam / 2
        return base - p * math.log(half) + decay.c1 / 4 * half ** decay.alpha

    lam_min = 2 * (4 * p / (decay.c1 * decay.alpha)) ** (1 / decay.alpha)
    if g(lam_min) >= 0:
        return 0.0
    hi = 2 * lam_min
    while g(hi) < 0:
        hi *= 2
    return float(optimize.brentq(g, lam_min, hi, xtol=1e-12))
