"""Local maximal functions on regular grids and Lusin-Lipschitz checks.

Ball averages use the discrete ball {grid offsets k : |k| h <= r}.  A ladder
of radii is swept with FFT convolutions and the running maximum gives
M_R f for every R on the ladder at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from ..rng import RandomStream
from ..verify import VerificationReport


def radius_ladder(h: float, R: float, ratio: float = 1.08, r0: float | None = None) -> np.ndarray:
    """Geometric radii from r0 (default h) up to and including R."""
    if R < h:
        raise ValueError(f"R={R} is below the grid resolution h={h}")
    r0 = h if r0 is None else r0
    n = int(math.floor(math.log(R / r0) / math.log(ratio))) + 1
    r = r0 * ratio ** np.arange(max(n, 1))
    return np.unique(np.append(r[r < R], R))


def _ball_offsets(r_cells: float, d: int) -> np.ndarray:
    m = int(math.floor(r_cells))
    ax = np.arange(-m, m + 1)
    off = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
    return off[np.sum(off**2, axis=1) <= r_cells**2 + 1e-9]


class _BallAverager:
    """Discrete-ball averages of one array for a sequence of radii."""

    def __init__(self, f, h, mode):
        self.f = np.asarray(f, dtype=float)
        self.h = float(h)
        self.mode = mode
        if mode == "wrap":
            self.F = np.fft.rfftn(self.f)
        elif mode != "zero":
            raise ValueError(f"unknown mode {mode!r}")

    def average(self, r):
        off = _ball_offsets(r / self.h, self.f.ndim)
        if self.mode == "wrap":
            shape = self.f.shape
            if any(2 * int(np.max(np.abs(off[:, j]))) + 1 > shape[j] for j in range(self.f.ndim)):
                raise ValueError("ball wider than the periodic box")
            k = np.zeros(shape)
            k[tuple((off % np.array(shape)).T)] = 1.0
            out = np.fft.irfftn(self.F * np.fft.rfftn(k), s=shape, axes=tuple(range(len(shape))))
        else:
            m = int(np.max(np.abs(off))) if off.size else 0
            k = np.zeros((2 * m + 1,) * self.f.ndim)
            k[tuple((off + m).T)] = 1.0
            out = signal.fftconvolve(self.f, k, mode="same")
        return out / len(off)


def local_maximal(f, spacing: float, R: float, *, ratio: float = 1.08, r0: float | None = None,
                  mode: str = "wrap", ladder: bool = False):
    """M_R f(x) = max over ladder radii r <= R of the ball average, and f(x) itself.

    ``mode`` is "wrap" (periodic box) or "zero" (f extended by zero).  With
    ``ladder=True`` returns (radii, list of M_r f for every ladder radius).
    """
    h = float(spacing)
    if h > R / 4:
        raise ValueError(f"grid spacing {h} exceeds R/4 = {R / 4}: R is below grid resolution")
    radii = radius_ladder(h, R, ratio, r0)
    avg = _BallAverager(f, h, mode)
    M = np.array(f, dtype=float, copy=True)
    out = []
    for r in radii:
        np.maximum(M, avg.average(r), out=M)
        if ladder:
            out.append(M.copy())
    return (radii, out) if ladder else M


def maximal_bruteforce(f, spacing: float, R: float, probes, mode: str = "wrap") -> np.ndarray:
    """Max over every distinct discrete ball of radius <= R centred at each probe."""
    f = np.asarray(f, dtype=float)
    d = f.ndim
    off = _ball_offsets(R / spacing, d)
    r2 = np.sum(off**2, axis=1)
    order = np.argsort(r2, kind="stable")
    off, r2 = off[order], r2[order]
    last = np.r_[np.nonzero(np.diff(r2))[0], len(r2) - 1]    # end of each shell
    shape = np.array(f.shape)
    res = []
    for p in np.atleast_2d(probes):
        idx = off + p
        if mode == "wrap":
            vals = f[tuple((idx % shape).T)]
        else:
            ok = np.all((idx >= 0) & (idx < shape), axis=1)
            vals = np.where(ok, f[tuple(np.clip(idx, 0, shape - 1).T)], 0.0)
        cum = np.cumsum(vals)
        res.append(np.max(cum[last] / (last + 1)))
    return np.array(res)


# -- test functions -------------------------------------------------------------------

@dataclass(frozen=True)
class TrigPolynomial:
    """f(x) = sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x) on the unit torus."""

    freqs: np.ndarray              # (m, d) integer
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def random(cls, stream: RandomStream, degree: int = 3, d: int = 3, n_terms: int = 12):
        rng = stream.generator()
        freqs = rng.integers(-degree, degree + 1, size=(n_terms, d))
        decay = 1.0 / (1.0 + np.sum(freqs**2, axis=1))
        return cls(freqs, rng.standard_normal(n_terms) * decay, rng.standard_normal(n_terms) * decay)

    def __call__(self, x):
        ph = 2 * np.pi * np.atleast_2d(x) @ self.freqs.T
        return np.cos(ph) @ self.a + np.sin(ph) @ self.b

    def gradient(self, x):
        ph = 2 * np.pi * np.atleast_2d(x) @ self.freqs.T
        w = -np.sin(ph) * self.a + np.cos(ph) * self.b
        return 2 * np.pi * w @ self.freqs

    def grid(self, n: int):
        """Values and gradient norms on the n^d lattice i/n."""
        d = self.freqs.shape[1]
        ax = np.arange(n) / n
        pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
        return (self(pts).reshape((n,) * d),
                np.linalg.norm(self.gradient(pts), axis=1).reshape((n,) * d))


def gradient_norm(f, spacing: float, mode: str = "wrap") -> np.ndarray:
    """|grad f| by central differences."""
    f = np.asarray(f, dtype=float)
    if mode == "wrap":
        parts = [(np.roll(f, -1, j) - np.roll(f, 1, j)) / (2 * spacing) for j in range(f.ndim)]
    else:
        parts = np.gradient(f, spacing)
        parts = parts if isinstance(parts, (list, tuple)) else [parts]
    return np.sqrt(sum(p**2 for p in parts))


# -- Lusin-Lipschitz ----------------------------------------------------------------

@dataclass(frozen=True)
class PairSample:
    """Pairs of points on the sub-lattice j / n0, shared by every refinement."""

    x: np.ndarray                  # (n, d) physical coordinates
    y: np.ndarray
    n0: int

    @classmethod
    def draw(cls, stream: RandomStream, n_pairs: int, n0: int = 32, d: int = 3, r_max: float = 0.25,
             r_min_cells: int = 2):
        rng = stream.generator()
        m = int(math.floor(r_max * n0))
        xs, ys = [], []
        while sum(len(a) for a in xs) < n_pairs:
            i = rng.integers(0, n0, size=(n_pairs, d))
            o = rng.integers(-m, m + 1, size=(n_pairs, d))
            r2 = np.sum(o**2, axis=1)
            ok = (r2 >= r_min_cells**2) & (r2 <= (r_max * n0) ** 2)
            xs.append(i[ok])
            ys.append(i[ok] + o[ok])
        x = np.concatenate(xs)[:n_pairs] / n0
        y = np.concatenate(ys)[:n_pairs] / n0
        return cls(x, y, n0)

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.x - self.y, axis=1)

    def indices(self, n: int):
        """Lattice indices of x and y on the n^d grid (wrapped into the torus)."""
        if n % self.n0:
            raise ValueError("grid size must be a multiple of the pair lattice")
        k = n // self.n0
        ix = np.rint(self.x * self.n0).astype(int) * k % n
        iy = np.rint(self.y * self.n0).astype(int) * k % n
        return ix, iy


def lusin_ratios(values, grad_norm, spacing: float, pairs: PairSample, *, ratio: float = 1.08,
                 mode: str = "wrap") -> np.ndarray:
    """|f(x)-f(y)| / (|x-y| (M_R|grad f|(x) + M_R|grad f|(y))) with R = |x-y|.

    M_R is taken at the largest ladder radius not exceeding |x-y|, which can
    only shrink the right-hand side.
    """
    n = values.shape[0]
    dist = pairs.distance
    R = float(dist.max())
    radii, Ms = local_maximal(grad_norm, spacing, R, ratio=ratio, r0=4 * spacing, mode=mode, ladder=True)
    k = np.searchsorted(radii, dist * (1 + 1e-12), side="right") - 1
    if np.any(k < 0):
        raise ValueError("pairs closer than four grid spacings")
    ix, iy = pairs.indices(n)
    stack = np.stack(Ms)
    mx = stack[(k,) + tuple(ix.T)]
    my = stack[(k,) + tuple(iy.T)]
    num = np.abs(values[tuple(ix.T)] - values[tuple(iy.T)])
    den = dist * (mx + my)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.where(num > 0, np.inf, 0.0))


def constant_ladder(c_min: float = 1e-3, c_max: float = 1e3, ratio: float = 1.02) -> np.ndarray:
    n = int(math.ceil(math.log(c_max / c_min) / math.log(ratio)))
    return c_min * ratio ** np.arange(n + 1)


def check_lusin_lipschitz(values, spacing: float, n_pairs: int, C_trial: float, *,
                          grad_norm=None, stream: RandomStream | None = None, pairs: PairSample | None = None,
                          coverage: float = 0.999, ratio: float = 1.08, mode: str = "wrap",
                          r_max: float = 0.25, n0: int | None = None) -> VerificationReport:
    """Fraction of random pairs with |f(x)-f(y)| <= C |x-y| (M_R|grad f|(x) + M_R|grad f|(y)).

    Reports the satisfaction fraction at ``C_trial``, the smallest ladder
    constant reaching ``coverage`` and the empirical quantile of the ratio.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if grad_norm is None:
        grad_norm = gradient_norm(values, spacing, mode)
    if pairs is None:
        stream = stream if stream is not None else RandomStream(0, ("pairs",))
        n0 = n0 or min(n, 32)
        pairs = PairSample.draw(stream, n_pairs, n0, values.ndim, r_max, max(1, math.ceil(4 * n0 / n)))
    ratios = lusin_ratios(values, grad_norm, spacing, pairs, ratio=ratio, mode=mode)
    frac = float(np.mean(ratios <= C_trial))
    ladder = constant_ladder()
    sat = np.array([np.mean(ratios <= c) for c in ladder])
    hit = np.nonzero(sat >= coverage)[0]
    c_ladder = float(ladder[hit[0]]) if hit.size else None
    c_quant = float(np.quantile(ratios, coverage)) if np.all(np.isfinite(ratios)) else None
    status = "pass" if frac >= coverage else "bound_violation"
    return VerificationReport(
        "lusin_lipschitz_sum", {"grid": list(values.shape), "spacing": spacing, "n_pairs": len(ratios),
                                "C_trial": C_trial, "coverage": coverage, "mode": mode, "r_max": r_max},
        [C_trial], [frac], [coverage], [frac], status, None, checked=[True],
        diagnostics={"C_ladder": c_ladder, "C_quantile": c_quant, "max_ratio": float(np.max(ratios)),
                     "median_ratio": float(np.median(ratios))})
