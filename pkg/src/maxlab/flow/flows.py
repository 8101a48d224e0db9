"""Common-noise flow ensembles and the functionals built on them.

Initial points come from a cell-centred lattice; each point carries the
volume of its cell, so sums over points are midpoint quadratures over the
source set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..em import FlowEnsemble, integrate_flows
from ..process import TimeGrid
from ..verify import VerificationReport


# -- initial grids ----------------------------------------------------------------------

@dataclass(frozen=True)
class InitialGrid:
    """Lattice points with cell-volume weights covering a ball or a box."""

    points: np.ndarray
    weights: np.ndarray
    spacing: float
    kind: str                       # "ball" or "box"
    center: np.ndarray
    extent: tuple                   # (radius,) or (lo, hi)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def exact_volume(self) -> float:
        if self.kind == "ball":
            r = self.extent[0]
            return math.pi ** (self.dim / 2) * r**self.dim / math.gamma(self.dim / 2 + 1)
        lo, hi = np.asarray(self.extent[0]), np.asarray(self.extent[1])
        return float(np.prod(hi - lo))

    @property
    def quadrature_tolerance(self) -> float:
        """|sum(weights) - m(A)| plus rounding: the mass any deposit must reproduce."""
        return abs(float(self.weights.sum()) - self.exact_volume) + 1e-9 * self.exact_volume

    def boundary_layer(self, cells: float = 1.5) -> np.ndarray:
        """Points within ``cells`` lattice spacings of the boundary of A."""
        h = self.spacing
        if self.kind == "ball":
            dist = self.extent[0] - np.linalg.norm(self.points - self.center, axis=1)
        else:
            lo, hi = np.asarray(self.extent[0]), np.asarray(self.extent[1])
            dist = np.min(np.minimum(self.points - lo, hi - self.points), axis=1)
        return dist < cells * h


def ball_lattice(r: float = 1.0, n_target: int = 4096, d: int = 3, center=None) -> InitialGrid:
    """Cell-centred cubic lattice inside B_r with about ``n_target`` points."""
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    unit = math.pi ** (d / 2) / math.gamma(d / 2 + 1)

    def build(h):
        m = int(math.ceil(r / h)) + 1
        ax = (np.arange(-m, m) + 0.5) * h
        pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
        return pts[np.linalg.norm(pts, axis=1) < r]

    vol = unit * r**d
    h0 = (vol / n_target) ** (1 / d)
    # among spacings giving about n_target points, take the one whose
    # cell volumes add up closest to |B_r|
    cands = [(h0 * s, build(h0 * s)) for s in np.linspace(0.98, 1.02, 401)]
    near = [c for c in cands if abs(len(c[1]) - n_target) <= 0.03 * n_target]
    if near:
        h, pts = min(near, key=lambda c: abs(len(c[1]) * c[0] ** d - vol))
    else:   # small targets: the count jumps in coarse steps
        h, pts = min(cands, key=lambda c: abs(len(c[1]) - n_target))
    return InitialGrid(pts + c, np.full(len(pts), h**d), float(h), "ball", c, (float(r),))


def box_lattice(lo, hi, n_per_axis: int) -> InitialGrid:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    d = lo.size
    h = (hi - lo) / n_per_axis
    if not np.allclose(h, h[0]):
        raise ValueError("box_lattice needs equal spacing on every axis")
    axes = [lo[i] + (np.arange(n_per_axis) + 0.5) * h[i] for i in range(d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    return InitialGrid(pts, np.full(len(pts), float(np.prod(h))), float(h[0]), "box",
                       (lo + hi) / 2, (tuple(lo.tolist()), tuple(hi.tolist())))


# -- ensembles ----------------------------------------------------------------------

def solve_flow_ensemble(levels, grid: TimeGrid, initial_grid: InitialGrid, n_noise: int, stream, *,
                        labels=None, noise_scale: float = 1.0, cap: float | None = 1.0,
                        pairs="consecutive", residual=None, snapshot_times=(), store_paths=False,
                        workers=None, chunk=None) -> FlowEnsemble:
    """EM trajectories for every (level, noise, initial point) under shared noise.

    ``noise_scale=0`` gives the deterministic (ODE) flow.  ``cap`` bounds the
    per-step drift displacement; capped or non-finite steps are flagged.
    """
    dims = {getattr(b, "dim", initial_grid.dim) for b in levels}
    if dims != {initial_grid.dim}:
        raise ValueError("drift levels and initial grid disagree on the dimension")
    ens = integrate_flows(levels, grid, initial_grid.points, stream, n_noise=n_noise,
                          noise_scale=noise_scale, weights=initial_grid.weights, labels=labels,
                          cap=cap, store_paths=store_paths, snapshot_times=snapshot_times,
                          pairs=pairs, residual=residual, workers=workers, chunk=chunk)
    ens.provenance["initial_grid"] = {"kind": initial_grid.kind, "n_points": initial_grid.n_points,
                                      "spacing": initial_grid.spacing}
    ens.provenance["levels"] = [getattr(b, "describe", lambda: {})() for b in levels]
    return ens


def _restrict(ens: FlowEnsemble, r: float | None, center=None) -> np.ndarray:
    """Weights of the initial points lying in B_r (all points when r is None)."""
    w = ens.weights
    if r is None:
        return w
    c = np.zeros(ens.dim) if center is None else np.asarray(center, dtype=float)
    inside = np.linalg.norm(ens.initial_points - c, axis=1) < r
    if not inside.any():
        raise ValueError(f"no initial points inside B_{r}")
    return np.where(inside, w, 0.0)


def _mean_ci(per_noise, confidence):
    x = np.asarray(per_noise, dtype=float)
    m = float(np.mean(x))
    if x.size < 2:
        return m, (m, m)
    half = float(stats.t.ppf((1 + confidence) / 2, x.size - 1) * np.std(x, ddof=1) / math.sqrt(x.size))
    return m, (m - half, m + half)


@dataclass
class DistanceField:
    """S = sup_t |X^(n) - X^(m)|^2 per (noise, point) and the O^R occupancy."""

    n: object
    m: object
    S: np.ndarray                   # (N, P)
    R: float
    inside: np.ndarray              # (N, P) bool
    weights: np.ndarray             # (P,)

    @property
    def outside_fraction(self) -> float:
        """Average over (noise, point) of 1{x not in O^R}."""
        return float(1.0 - np.mean(self.inside))

    @property
    def worst_outside_fraction(self) -> float:
        """max over initial points of P(x not in O^R)."""
        return float(np.max(1.0 - np.mean(self.inside, axis=0)))

    def lk_distance(self, k: float = 2.0, confidence: float = 0.99):
        """(E sum_x w_x S^{k/2})^{1/k}, with a CI from the noise replicates."""
        per = (self.S ** (k / 2)) @ self.weights
        m, (lo, hi) = _mean_ci(per, confidence)
        return m ** (1 / k), (max(lo, 0.0) ** (1 / k), max(hi, 0.0) ** (1 / k))


def sup_distance_field(ens: FlowEnsemble, n, m, R: float = math.inf) -> DistanceField:
    a, b = ens.level_index(n), ens.level_index(m)
    inside = (ens.sup_norm[a] < R) & (ens.sup_norm[b] < R)
    return DistanceField(n, m, ens.pair(n, m), float(R), inside, ens.weights)


def log_functional(ens: FlowEnsemble, n, m, theta: float, r: float | None = None, *,
                   confidence: float = 0.99):
    """E int_{B_r} log(S/theta^2 + 1) dx with a CI over noise realisations."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    w = _restrict(ens, r)
    per = np.log1p(ens.pair(n, m) / theta**2) @ w
    return _mean_ci(per, confidence)


def lk_distance(ens: FlowEnsemble, n, m, k: float = 2.0, r: float | None = None, *,
                confidence: float = 0.99):
    """L^k(Omega x B_r; C([0,T])) distance between two levels."""
    w = _restrict(ens, r)
    per = (ens.pair(n, m) ** (k / 2)) @ w
    m_, (lo, hi) = _mean_ci(per, confidence)
    return m_ ** (1 / k), (max(lo, 0.0) ** (1 / k), max(hi, 0.0) ** (1 / k))


def markov_check(ens: FlowEnsemble, n, m, theta: float, L: float, r: float | None = None):
    """(E m{S >= theta^2 (e^L - 1)}, E int log(S/theta^2 + 1) / L); the first is at most the second."""
    w = _restrict(ens, r)
    S = ens.pair(n, m)
    lhs = float(np.mean((S >= theta**2 * math.expm1(L)) @ w))
    rhs = float(np.mean(np.log1p(S / theta**2) @ w)) / L
    return lhs, rhs


@dataclass(frozen=True)
class LogEstimateCheck:
    """Log functional at theta = ||b_n - b_m|| against C (||grad b_n|| + 1)."""

    pairs: list
    theta: list
    value: list
    rhs_unit: list                  # ||grad b_n|| + ||b_n - b_m|| / theta
    constant: float                 # fitted C (geometric mean of the ratios)
    ratios: list
    tolerance: float

    @property
    def stable(self) -> bool:
        return all(abs(r / self.constant - 1) <= self.tolerance for r in self.ratios)

    def as_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "theta": self.theta, "value": self.value,
                "rhs_unit": self.rhs_unit, "constant": self.constant, "ratios": self.ratios,
                "tolerance": self.tolerance, "stable": self.stable}


def log_estimate_check(ens: FlowEnsemble, pairs, grad_norms, diff_norms, r: float | None = None,
                       *, tolerance: float = 0.25) -> LogEstimateCheck:
    """Fit one C across level pairs and test every pair against it.

    ``grad_norms[i]`` is ||grad b_n||_{L^1 L^p} for the first level of pair i
    and ``diff_norms[i]`` is ||b_n - b_m||_{L^1 L^p}, used as theta.
    """
    vals, units = [], []
    for (n, m), g, th in zip(pairs, grad_norms, diff_norms):
        vals.append(log_functional(ens, n, m, th, r)[0])
        units.append(g + 1.0)
    ratios = [v / u for v, u in zip(vals, units)]
    C = float(np.exp(np.mean(np.log(ratios))))
    return LogEstimateCheck(list(pairs), [float(t) for t in diff_norms], vals, units, C, ratios, tolerance)


# -- Cauchy diagnostics -----------------------------------------------------------------

def cauchy_report(ens: FlowEnsemble, k: float = 2.0, r: float | None = 1.0, *, max_ratio: float = 0.8,
                  flag_tolerance: float = 1e-3, confidence: float = 0.99, log_check=None,
                  seed=None) -> VerificationReport:
    """Consecutive L^k distances along the level ladder and the limit-drift residual.

    Checked rows: distance_{i+1} <= max_ratio * distance_i for each i, and
    the residual of the finest level below the last consecutive distance.
    The premise is an acceptable flagged (capped) fraction.
    """
    L = len(ens.levels)
    if L < 3:
        raise ValueError("a Cauchy ladder needs at least 3 levels")
    levels = ens.levels
    dist, lo, hi = [], [], []
    for i in range(L - 1):
        d, (a, b) = lk_distance(ens, levels[i], levels[i + 1], k, r, confidence=confidence)
        dist.append(d)
        lo.append(a)
        hi.append(b)
    ratios = [dist[i + 1] / dist[i] if dist[i] > 0 else None for i in range(L - 2)]
    labels = [f"{levels[i]}-{levels[i + 1]}" for i in range(L - 1)]
    empirical = dist[1:]
    bound = [max_ratio * d for d in dist[:-1]]
    rows = labels[1:]
    checked = [dist[i] > 0 for i in range(L - 2)]
    if all(d == 0 for d in dist):
        # identical levels: the ladder is trivially Cauchy
        checked = [False] * (L - 2)
    diagnostics = {"distances": dist, "distance_ci": [list(p) for p in zip(lo, hi)],
                   "ratios": ratios, "level_pairs": labels}
    if ens.residual_sup is not None:
        w = _restrict(ens, r)
        per = (ens.residual_sup ** k) @ w
        m, (_, up) = _mean_ci(per, confidence)
        res = m ** (1 / k)
        empirical.append(res)
        bound.append(dist[-1])
        rows.append("residual")
        checked.append(dist[-1] > 0)
        diagnostics["residual"] = res
        diagnostics["residual_upper"] = max(up, 0.0) ** (1 / k)
    flagged = float(np.mean(ens.flagged))
    diagnostics["flagged_fraction"] = flagged
    diagnostics["flagged_by_level"] = np.mean(ens.flagged, axis=(1, 2)).tolist()
    if log_check is not None:
        diagnostics["log_estimate"] = log_check.as_dict()
    premise = flagged <= flag_tolerance
    ok = all(e <= b for e, b, c in zip(empirical, bound, checked) if c)
    if log_check is not None:
        ok = ok and log_check.stable
    status = "unverified_premise" if not premise else ("pass" if ok else "bound_violation")
    params = {"k": k, "r": r, "max_ratio": max_ratio, "levels": list(map(str, levels)),
              "n_noise": ens.n_noise, "n_points": ens.n_points,
              "grid": [ens.grid.t_start, ens.grid.t_end, ens.grid.n_steps], "confidence": confidence}
    return VerificationReport("cauchy_ladder", params, rows, empirical, list(empirical), bound, status,
                              seed if seed is not None else ens.provenance.get("master_seed"),
                              checked=checked, diagnostics=diagnostics)


# -- push-forward densities ------------------------------------------------------------------

@dataclass
class PushForwardDensity:
    """Histogram density of the image of m restricted to A under one flow map."""

    edges: list                     # per-axis bin edges
    density: np.ndarray             # rho-hat per bin
    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray              # points contributing to each bin
    interior: np.ndarray            # bool: bin lies inside the image of A
    mass: float
    source_volume: float
    mass_tolerance: float
    t: float
    noise_index: int | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def mass_conserved(self) -> bool:
        return abs(self.mass - self.source_volume) <= self.mass_tolerance

    def interior_fraction_within(self, lo: float, hi: float) -> float:
        v = self.density[self.interior]
        return float(np.mean((v >= lo) & (v <= hi))) if v.size else float("nan")

    def max_interior(self) -> float:
        v = self.density[self.interior]
        return float(v.max()) if v.size else float("nan")


def _cic_deposit(points, weights, origin, width, shape, h):
    """Spread each point's weight uniformly over the cube of side h centred on it."""
    d = points.shape[1]
    mass = np.zeros(shape)
    count = np.zeros(shape, dtype=np.int64)
    lo = (points - h / 2 - origin) / width           # cube start in bin units
    first = np.floor(lo).astype(np.int64)
    frac = h / width
    # a cube narrower than one bin touches at most two bins per axis
    parts = []
    for j in range(d):
        f0 = np.clip(first[:, j] + 1 - lo[:, j], 0.0, frac) / frac
        parts.append(((first[:, j], f0), (first[:, j] + 1, 1.0 - f0)))
    for corner in np.ndindex(*([2] * d)):
        idx = [parts[j][c][0] for j, c in enumerate(corner)]
        share = np.prod([parts[j][c][1] for j, c in enumerate(corner)], axis=0)
        ok = share > 0
        for j in range(d):
            ok &= (idx[j] >= 0) & (idx[j] < shape[j])
        flat = np.ravel_multi_index(tuple(i[ok] for i in idx), shape)
        np.add.at(mass.reshape(-1), flat, (weights * share)[ok])
        np.add.at(count.reshape(-1), flat, 1)
    return mass, count


def pushforward_density(ens: FlowEnsemble, level, noise_index: int | None, source: InitialGrid,
                        t: float | None = None, *, bin_cells: int = 2, min_count: int = 2,
                        max_sparse: float = 0.10, confidence: float = 0.99) -> PushForwardDensity:
    """Density of the image of Lebesgue measure on A at time t for one noise path.

    Each initial point carries its lattice cell (volume h^d) to its image and
    deposits it on bins of width ``bin_cells`` h aligned with the lattice.
    For a translation this reproduces the indicator of A + B_t exactly on
    interior bins.  A bin is interior when it has mass and no image of a
    boundary-layer point of A touches it.
    """
    if source.n_points != ens.n_points or not np.allclose(source.points, ens.initial_points):
        raise ValueError("source grid differs from the ensemble's initial points")
    lev = ens.level_index(level)
    if t is None or t == ens.grid.t_end:
        X = ens.final[lev]
        t = ens.grid.t_end
    else:
        k = ens.grid.index_of(t)
        if k not in ens.snapshots:
            raise KeyError(f"no snapshot stored at t={t}")
        X = ens.snapshots[k][lev]
    if noise_index is None:
        raise ValueError("the push-forward density is pathwise: give a noise index")
    Y = X[noise_index]
    h = source.spacing
    width = bin_cells * h
    # align the bin lattice with the source lattice shifted by the mean displacement
    shift = np.mean(Y - source.points, axis=0)
    anchor = source.points.min(axis=0) - h / 2 + shift
    lo = anchor + np.floor((Y.min(axis=0) - h - anchor) / width) * width
    hi = Y.max(axis=0) + h
    shape = tuple(int(math.ceil(v)) + 1 for v in (hi - lo) / width)
    mass, count = _cic_deposit(Y, source.weights, lo, width, shape, h)
    bvol = width ** source.dim
    dens = mass / bvol
    # boundary classification
    edge = source.boundary_layer(1.5)
    _, bcount = _cic_deposit(Y[edge], source.weights[edge], lo, width, shape, h)
    interior = (count > 0) & (bcount == 0)
    occupied = count > 0
    sparse = float(np.mean(count[occupied] < min_count)) if occupied.any() else 1.0
    if sparse > max_sparse:
        raise ValueError(f"occupancy too low: {sparse:.1%} of image bins have < {min_count} points")
    # per-bin CI from the deposit granularity: one cell of mass h^d per point
    z = float(stats.norm.ppf((1 + confidence) / 2))
    cell = h ** source.dim / bvol
    half = z * cell * np.sqrt(np.maximum(count, 1))
    edges = [lo[j] + width * np.arange(shape[j] + 1) for j in range(source.dim)]
    total = float(mass.sum())
    return PushForwardDensity(edges, dens, np.maximum(dens - half, 0.0), dens + half, count, interior,
                              total, source.exact_volume, source.quadrature_tolerance, float(t),
                              noise_index, {"bin_width": width, "sparse_fraction": sparse,
                                            "n_interior": int(interior.sum()),
                                            "lattice_volume": float(source.weights.sum())})


def density_report(pfd: PushForwardDensity, *, tol: float = 0.05, coverage: float = 0.95,
                   seed=None, params=None) -> VerificationReport:
    """rho-hat <= 1 + tol on ``coverage`` of interior bins and mass within tolerance."""
    frac_hi = float(np.mean(pfd.density[pfd.interior] <= 1 + tol)) if pfd.interior.any() else 0.0
    frac_band = pfd.interior_fraction_within(1 - tol, 1 + tol)
    ok = frac_hi >= coverage and pfd.mass_conserved
    status = "pass" if ok else "bound_violation"
    if not pfd.interior.any():
        status = "unverified_premise"
    return VerificationReport(
        "pushforward_density", {**(params or {}), "t": pfd.t, "noise_index": pfd.noise_index,
                                "tol": tol, "coverage": coverage},
        ["mass", "interior_le_1_plus_tol"], [pfd.mass, frac_hi], [pfd.mass, frac_hi],
        [pfd.source_volume + pfd.mass_tolerance, None], status, seed,
        checked=[True, False],
        diagnostics={"mass_lower_limit": pfd.source_volume - pfd.mass_tolerance,
                     "fraction_in_band": frac_band, "max_interior": pfd.max_interior(),
                     **pfd.diagnostics})
