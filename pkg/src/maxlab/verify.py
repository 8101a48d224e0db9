"""Empirical checks of the maximal inequalities against the bound evaluators.

Comparisons always use one-sided upper confidence limits of the empirical
side, so a pass is conservative.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from ._parallel import chunk_ranges, pmap
from .bounds import (HoelderControl, TailBoundConfig, TailDecay, doob_bound, tail_bound_terms,
                     tail_validity_threshold)
from .process import PathEnsemble, path_sup
from .rng import RandomStream

REPORT_SCHEMA = {
    "type": "object",
    "required": ["claim", "params", "lambda_grid", "empirical", "upper_ci", "bound", "pass",
                 "seed", "runtime_ms"],
    "properties": {
        "claim": {"type": "string"},
        "params": {"type": "object"},
        "lambda_grid": {"type": "array", "items": {"type": ["number", "null"]}},
        "empirical": {"type": "array", "items": {"type": ["number", "null"]}},
        "upper_ci": {"type": "array", "items": {"type": ["number", "null"]}},
        "bound": {"type": "array", "items": {"type": ["number", "null"]}},
        "pass": {"type": "boolean"},
        "seed": {"type": ["integer", "null"]},
        "runtime_ms": {"type": ["number", "null"]},
        "status": {"enum": ["pass", "bound_violation", "unverified_premise"]},
    },
}


def _z(confidence: float) -> float:
    return float(stats.norm.ppf(confidence))


def wilson_interval(k, n, confidence: float = 0.99):
    """One-sided Wilson limits: each of (lo, hi) holds at ``confidence``."""
    k = np.asarray(k, dtype=float)
    z = _z(confidence)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return np.clip(centre - half, 0.0, 1.0), np.clip(centre + half, 0.0, 1.0)


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def digest(obj) -> str:
    """Content hash of a JSON-able object (canonical key order)."""
    text = json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- survival curves ------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalCurve:
    lambdas: np.ndarray
    probs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_paths: int
    confidence: float = 0.99

    def __post_init__(self):
        if np.any(np.diff(self.lambdas) <= 0):
            raise ValueError("lambda grid must be strictly increasing")

    @property
    def counts(self) -> np.ndarray:
        return np.rint(self.probs * self.n_paths).astype(np.int64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "prob", "lower", "upper", "n"])
            for row in zip(self.lambdas, self.probs, self.lower, self.upper):
                w.writerow([repr(float(x)) for x in row] + [self.n_paths])


def empirical_survival(statistics, lambda_grid, confidence: float = 0.99) -> SurvivalCurve:
    """P(statistic >= lambda) on a grid, with one-sided Wilson limits."""
    x = np.sort(np.asarray(statistics, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("empty sample")
    lam = np.asarray(lambda_grid, dtype=float)
    k = x.size - np.searchsorted(x, lam, side="left")
    lo, hi = wilson_interval(k, x.size, confidence)
    return SurvivalCurve(lam, k / x.size, lo, hi, int(x.size), confidence)


def exact_curve(lambda_grid, survival, n_paths: int = 10**12) -> SurvivalCurve:
    """Noise-free curve from a survival function (for synthetic checks)."""
    lam = np.asarray(lambda_grid, dtype=float)
    p = np.asarray(survival(lam), dtype=float)
    return SurvivalCurve(lam, p, p.copy(), p.copy(), int(n_paths), 1.0)


# -- sup norms --------------------------------------------------------------------

@dataclass(frozen=True)
class SupNormEstimate:
    estimate: float
    lower: float
    upper: float
    q: float
    n_paths: int
    n_boot: int

    def __iter__(self):
        yield self.estimate
        yield (self.lower, self.upper)


def lq_norm_bootstrap(values, q: float, stream: RandomStream | None = None, *, n_boot: int = 1000,
                      confidence: float = 0.99, workers=None) -> SupNormEstimate:
    """(mean |v|^q)^{1/q} with one-sided percentile bootstrap limits."""
    if q < 1:
        raise ValueError("q must be >= 1")
    v = np.abs(np.asarray(values, dtype=float).ravel()) ** q
    n = v.size
    est = float(v.mean()) ** (1 / q)
    if n_boot <= 0 or n < 2 or np.all(v == v[0]):
        return SupNormEstimate(est, est, est, q, n, 0)
    stream = RandomStream(0, ("bootstrap",)) if stream is None else stream
    per = max(1, 5_000_000 // n)

    def job(r):
        gen = stream.substream(r[0]).generator()
        return np.array([v[gen.integers(0, n, n)].mean() for _ in range(r[0], r[1])])

    boots = np.concatenate(pmap(job, chunk_ranges(n_boot, per), workers)) ** (1 / q)
    lo, hi = np.quantile(boots, [1 - confidence, confidence])
    return SupNormEstimate(est, float(lo), float(hi), q, n, n_boot)


def empirical_sup_norm(ensemble: PathEnsemble, q: float, window=None, *,
                       stream: RandomStream | None = None, n_boot: int = 1000,
                       confidence: float = 0.99, one_sided: bool = False, workers=None):
    """||sup_{window} |X|||_q with bootstrap confidence limits."""
    sup = path_sup(ensemble, window, one_sided=one_sided)
    if one_sided:
        sup = np.maximum(sup, 0.0)
    return lq_norm_bootstrap(sup, q, stream, n_boot=n_boot, confidence=confidence, workers=workers)


# -- reports ---------------------------------------------------------------------

@dataclass
class VerificationReport:
    claim: str
    params: dict
    lambda_grid: list
    empirical: list
    upper_ci: list
    bound: list
    status: str
    seed: int | None = None
    runtime_ms: float | None = None
    config_digest: str = ""
    checked: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @property
    def margin(self) -> float | None:
        """Smallest bound / upper_ci ratio over checked points."""
        r = [b / u for b, u, c in zip(self.bound, self.upper_ci, self.checked or [True] * len(self.bound))
             if c and u is not None and u > 0]
        return min(r) if r else None

    def as_dict(self) -> dict:
        d = {"claim": self.claim, "params": self.params, "lambda_grid": self.lambda_grid,
             "empirical": self.empirical, "upper_ci": self.upper_ci, "bound": self.bound,
             "pass": self.passed, "status": self.status, "seed": self.seed,
             "runtime_ms": self.runtime_ms, "config_digest": self.config_digest or digest(self.params),
             "checked": self.checked, "margin": self.margin, "diagnostics": self.diagnostics}
        return _canonical(d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "VerificationReport":
        d = json.loads(text)
        return cls(d["claim"], d["params"], d["lambda_grid"], d["empirical"], d["upper_ci"],
                   d["bound"], d["status"], d["seed"], d["runtime_ms"], d.get("config_digest", ""),
                   d.get("checked", []), d.get("diagnostics", {}))


def _verdict(bound, upper, checked, premise_ok) -> str:
    if not premise_ok:
        return "unverified_premise"
    ok = all(b >= u for b, u, c in zip(bound, upper, checked) if c)
    return "pass" if ok else "bound_violation"


def _seed_of(ensemble, stream):
    if stream is not None:
        return int(stream.master_seed)
    return ensemble.provenance.get("master_seed") if ensemble is not None else None


def _control_certified(control: HoelderControl, table) -> bool:
    if not control.usable:
        return False
    if control.source == "analytic":
        return True
    if table is not None:
        from .increments import certifies
        return certifies(control, table)
    return bool(control.diagnostics.get("certified", False))


def verify_doob(ensemble: PathEnsemble, control: HoelderControl, q: float, window=None, *,
                table=None, theta: float = 2.0, stream: RandomStream | None = None,
                n_boot: int = 1000, confidence: float = 0.99, workers=None) -> VerificationReport:
    """Empirical ||X*||_q (upper limit) against the Doob-type bound.

    The terminal norm entering the bound is the lower bootstrap limit of
    ||X_{t0}||_q, which keeps the comparison conservative.
    """
    if not 1 < q <= control.p:
        raise ValueError(f"need 1 < q <= p, got q={q}, p={control.p}")
    grid = ensemble.grid
    i0, i1 = grid.window(*(window or (grid.t_start, grid.t_end)))
    s0, t0 = grid.node(i0), grid.node(i1)
    sub = stream if stream is not None else RandomStream(0, ("bootstrap",))
    sup = empirical_sup_norm(ensemble, q, (s0, t0), stream=sub.child("sup"), n_boot=n_boot,
                             confidence=confidence, workers=workers)
    term = lq_norm_bootstrap(np.linalg.norm(ensemble.values[:, i1], axis=-1), q, sub.child("terminal"),
                             n_boot=n_boot, confidence=confidence, workers=workers)
    premise = _control_certified(control, table)
    bound = doob_bound(control, q, t0 - s0, term.lower, theta) if control.usable else math.inf
    params = {"control": control.as_dict(), "q": q, "window": [s0, t0], "theta": theta,
              "n_paths": ensemble.n_paths, "grid": [grid.t_start, grid.t_end, grid.n_steps],
              "confidence": confidence, "model": ensemble.provenance.get("model")}
    return VerificationReport(
        claim="doob_maximal", params=params, lambda_grid=[], empirical=[sup.estimate],
        upper_ci=[sup.upper], bound=[bound], status=_verdict([bound], [sup.upper], [True], premise),
        seed=_seed_of(ensemble, stream), checked=[True],
        diagnostics={"terminal_norm": term.estimate, "terminal_norm_lower": term.lower,
                     "sup_norm_lower": sup.lower, "doob_ratio": sup.estimate / term.estimate
                     if term.estimate > 0 else None, "premise_certified": premise})


# -- tail exponents ---------------------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    alpha: float
    c1: float
    c2: float
    alpha_ci: tuple[float, float]
    diagnostics: dict

    def __iter__(self):
        yield self.alpha
        yield self.c1
        yield self.diagnostics

    def decay(self) -> TailDecay:
        return TailDecay(self.alpha, self.c1, self.c2, "fitted", dict(self.diagnostics))


def _profile_fit(lam, prob, weights, bounds=(0.2, 8.0)):
    y = np.log(prob)
    sw = np.sqrt(weights)

    def solve(a):
        X = np.column_stack([np.ones_like(lam), -lam**a])
        coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        r = (y - X @ coef) * sw
        return float(r @ r), coef

    res = optimize.minimize_scalar(lambda a: solve(a)[0], bounds=bounds, method="bounded",
                                   options={"xatol": 1e-10})
    rss, (logc2, c1) = solve(res.x)
    return float(res.x), float(c1), float(math.exp(logc2)), rss


def fit_tail_exponent(curve: SurvivalCurve, window: tuple[float, float] | None = None,
                      min_points: int = 5) -> TailFit:
    """Fit P(stat >= lam) ~ C2 exp(-C1 lam^alpha) over the window of probabilities.

    The default window is P in [10/n, 0.1].  alpha is profiled by a bounded
    1-d search; for each alpha, (log C2, C1) solve a weighted least-squares
    problem with binomial delta-method weights n P / (1 - P).  The interval
    refits the lower and upper Wilson curves.  The plain log(-log P) on
    log lam slope is kept as a diagnostic.
    """
    lo_p, hi_p = window if window is not None else (10.0 / curve.n_paths, 0.1)
    m = (curve.probs >= lo_p) & (curve.probs <= hi_p) & (curve.probs > 0) & (curve.lambdas > 0)
    if m.sum() < min_points:
        raise ValueError(f"only {int(m.sum())} grid points with P in [{lo_p:.3g}, {hi_p:.3g}]")
    lam, p = curve.lambdas[m], curve.probs[m]
    w = curve.n_paths * p / np.maximum(1 - p, 1e-300)
    alpha, c1, c2, rss = _profile_fit(lam, p, w)
    side = []
    for q in (curve.lower[m], curve.upper[m]):
        ok = q > 0
        if ok.sum() >= min_points and not np.array_equal(q, p):
            side.append(_profile_fit(lam[ok], q[ok], curve.n_paths * q[ok] / np.maximum(1 - q[ok], 1e-300))[0])
        else:
            side.append(alpha)
    slope = float(np.polyfit(np.log(lam), np.log(-np.log(p)), 1)[0]) if np.all(p < 1) else None
    diag = {"window": [float(lo_p), float(hi_p)], "n_points": int(m.sum()),
            "lambda_range": [float(lam.min()), float(lam.max())], "loglog_slope": slope,
            "weighted_rss": rss, "method": "weighted profile least squares"}
    return TailFit(alpha, c1, c2, (min(side + [alpha]), max(side + [alpha])), diag)


@dataclass(frozen=True)
class DecayCertificate:
    """Raw large-lambda pair and its all-lambda adjustment.

    The fitted (C1, C2) hold for lambda >= M (the window start).  Below M
    the trivial P <= 1 <= e^{C1 M^alpha} e^{-C1 lam^alpha} gives the
    all-lambda constant C2' = max(C2, e^{C1 M^alpha}).
    """

    raw: TailDecay
    adjusted: TailDecay
    threshold: float
    certified: bool
    worst_ratio: float


def certify_decay(marginals, lambda_grid, *, alpha: float | None = None, c1: float | None = None,
                  decay: TailDecay | None = None, confidence: float = 0.99,
                  window: tuple[float, float] | None = None) -> DecayCertificate:
    """Certify uniform exponential marginal decay from per-node samples.

    ``marginals`` is (n_paths, n_nodes) of |X_t|.  With ``decay`` given, it
    is checked directly: C2 exp(-C1 lam^alpha) must dominate the upper Wilson
    limit at every node and lam.  Otherwise alpha and C1 come from a fit on
    the pooled worst-node curve (or are supplied), and C2 is set by the
    max-ratio rule over the upper limits.
    """
    x = np.asarray(marginals, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    lam = np.asarray(lambda_grid, dtype=float)
    curves = [empirical_survival(x[:, j], lam, confidence) for j in range(x.shape[1])]
    upper = np.max([c.upper for c in curves], axis=0)
    if decay is not None:
        ratio = upper / decay.survival_bound(lam)
        worst = float(ratio.max())
        return DecayCertificate(decay, decay, 0.0, worst <= 1.0, worst)
    worst_node = int(np.argmax([c.probs.sum() for c in curves]))
    fit = fit_tail_exponent(curves[worst_node], window)
    a = fit.alpha if alpha is None else alpha
    k = fit.c1 if c1 is None else c1
    M = fit.diagnostics["lambda_range"][0]
    big = lam >= M
    c2 = float(np.max(upper[big] * np.exp(k * lam[big] ** a)))
    raw = TailDecay(a, k, c2, "fitted", {"threshold": M, "fit": fit.diagnostics})
    adj = TailDecay(a, k, max(c2, math.exp(k * M**a)), "fitted",
                    {"threshold": M, "adjusted_from": c2})
    worst = float(np.max(upper / adj.survival_bound(lam)))
    return DecayCertificate(raw, adj, M, worst <= 1.0 + 1e-12, worst)


def verify_tail(ensemble: PathEnsemble | None, control: HoelderControl, decay: TailDecay,
                cfg: TailBoundConfig | None = None, *, lambda_grid=(2.0, 3.0, 4.0),
                horizon: float | None = None, statistics=None, decay_certified: bool | None = None,
                marginals=None, table=None, confidence: float = 0.99,
                stream: RandomStream | None = None) -> VerificationReport:
    """Sup-survival upper limits against the supremum tail bound.

    ``statistics`` overrides the per-path sup |X| taken from the ensemble.
    The decay premise is either asserted (``decay_certified``) or checked on
    ``marginals``; points below the computed validity threshold are reported
    but not checked.
    """
    cfg = cfg or TailBoundConfig()
    if statistics is None:
        statistics = path_sup(ensemble)
    if horizon is None:
        horizon = ensemble.grid.duration if ensemble is not None else 1.0
    lam = np.asarray(lambda_grid, dtype=float)
    curve = empirical_survival(statistics, lam, confidence)
    if decay_certified is None:
        decay_certified = (marginals is not None and
                           certify_decay(marginals, lam, decay=decay, confidence=confidence).certified)
    premise = bool(decay_certified) and _control_certified(control, table)
    results = [tail_bound_terms(control, decay, horizon, float(x), cfg) for x in lam]
    thr = tail_validity_threshold(control, decay, horizon, cfg) if control.A > 0 else 0.0
    checked = [bool(x >= thr) for x in lam]
    bound = [r.value for r in results]
    params = {"control": control.as_dict(), "decay": decay.as_dict(), "horizon": horizon,
              "beta": cfg.beta_for(decay), "theta": cfg.theta, "n_max": cfg.n_max,
              "n_paths": int(np.size(statistics)), "confidence": confidence}
    if ensemble is not None:
        g = ensemble.grid
        params["grid"] = [g.t_start, g.t_end, g.n_steps]
        params["model"] = ensemble.provenance.get("model")
    return VerificationReport(
        claim="sup_tail", params=params, lambda_grid=lam.tolist(), empirical=curve.probs.tolist(),
        upper_ci=curve.upper.tolist(), bound=bound,
        status=_verdict(bound, curve.upper, checked, premise), seed=_seed_of(ensemble, stream),
        checked=checked,
        diagnostics={"validity_threshold": thr, "n_opt": [r.n_opt for r in results],
                     "exhausted": [r.exhausted for r in results],
                     "vacuous": [r.value >= 1 for r in results],
                     "premise_certified": premise})
