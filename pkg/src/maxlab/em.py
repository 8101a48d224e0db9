"""Euler-Maruyama flows driven by common noise.

Every trajectory is stored as ``x0 + D_k + B_k`` where ``B`` is the shared
Brownian path of its noise index and ``D`` the accumulated drift
displacement.  With zero drift this is bitwise ``x0 + B``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._parallel import chunk_ranges, pmap
from .process import PathEnsemble, TimeGrid, brownian_increments
from .rng import RandomStream


@dataclass
class FlowEnsemble:
    """Trajectories indexed by (level, noise, initial point).

    Full paths are only kept when requested; sup-type functionals are
    accumulated during integration so large ensembles stay in memory.
    """

    grid: TimeGrid
    initial_points: np.ndarray
    weights: np.ndarray
    levels: tuple
    n_noise: int
    final: np.ndarray                 # (L, N, P, d)
    sup_norm: np.ndarray              # (L, N, P): sup_t |X_t|
    sup_disp: np.ndarray              # (L, N, P): sup_t |X_t - x0|
    flagged: np.ndarray               # (L, N, P) bool
    pair_sup_sq: dict = field(default_factory=dict)   # (a, b) -> (N, P)
    snapshots: dict = field(default_factory=dict)     # node index -> (L, N, P, d)
    paths: np.ndarray | None = None   # (L, N, P, nodes, d)
    residual_sup: np.ndarray | None = None            # (N, P)
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.initial_points.shape[1]

    @property
    def n_points(self) -> int:
        return self.initial_points.shape[0]

    def level_index(self, level) -> int:
        try:
            return self.levels.index(level)
        except ValueError:
            raise KeyError(f"level {level!r} not in ensemble levels {self.levels}") from None

    def pair(self, n, m) -> np.ndarray:
        a, b = self.level_index(n), self.level_index(m)
        if a == b:
            return np.zeros((self.n_noise, self.n_points))
        return self.pair_sup_sq[(min(a, b), max(a, b))]


def _noise_block(noise, grid, dim, a, b, offset, scale):
    if isinstance(noise, PathEnsemble):
        if noise.grid != grid:
            raise ValueError("noise ensemble must share the time grid")
        if noise.dim != dim:
            raise ValueError("noise dimension differs from state dimension")
        w = noise.values[a:b]
        return (w - w[:, :1]) * scale
    incr = brownian_increments(noise, grid, dim, offset + a, offset + b, scale)
    out = np.zeros((b - a, grid.n_nodes, dim))
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def _integrate_block(drifts, grid, x0, B, *, cap, store_paths, snapshot_idx, pair_list,
                     residual):
    L = len(drifts)
    N, P, d = B.shape[0], x0.shape[0], x0.shape[1]
    dt = grid.step
    D = np.zeros((L, N, P, d))
    flagged = np.zeros((L, N, P), dtype=bool)
    X = np.empty((L, N, P, d))
    sup_norm = np.zeros((L, N, P))
    sup_disp = np.zeros((L, N, P))
    pair_sup = {pq: np.zeros((N, P)) for pq in pair_list}
    snaps = {}
    paths = np.empty((L, N, P, grid.n_nodes, d)) if store_paths else None
    if residual is not None:
        ref_drift, res_level = residual
        R = np.zeros((N, P, d))
        res_sup = np.zeros((N, P))

    def observe(k):
        np.add(x0[None, None] + D, B[None, :, k][:, :, None], out=X)
        np.maximum(sup_norm, np.linalg.norm(X, axis=-1), out=sup_norm)
        np.maximum(sup_disp, np.linalg.norm(X - x0[None, None], axis=-1), out=sup_disp)
        for (a, b), s in pair_sup.items():
            np.maximum(s, np.sum((X[a] - X[b]) ** 2, axis=-1), out=s)
        if paths is not None:
            paths[:, :, :, k] = X
        if k in snapshot_idx:
            snaps[k] = X.copy()

    for k in range(grid.n_steps):
        observe(k)
        t = grid.node(k)
        for lev, drift in enumerate(drifts):
            pts = X[lev].reshape(-1, d)
            with np.errstate(all="ignore"):
                v = np.asarray(drift(t, pts), dtype=float).reshape(N, P, d)
            step = v * dt
            bad = ~np.all(np.isfinite(step), axis=-1)
            if np.any(bad):
                flagged[lev] |= bad
                step[bad] = 0.0
            if cap is not None:
                size = np.linalg.norm(step, axis=-1)
                over = size > cap
                if np.any(over):
                    flagged[lev] |= over
                    step[over] *= (cap / size[over])[:, None]
            if residual is not None and lev == res_level:
                with np.errstate(all="ignore"):
                    ref = np.asarray(ref_drift(t, pts), dtype=float).reshape(N, P, d) * dt
                ref[~np.isfinite(ref)] = 0.0
                R += ref - step
                np.maximum(res_sup, np.linalg.norm(R, axis=-1), out=res_sup)
            D[lev] += step
    observe(grid.n_steps)
    out = dict(final=X.copy(), sup_norm=sup_norm, sup_disp=sup_disp, flagged=flagged,
               pair_sup_sq=pair_sup, snapshots=snaps, paths=paths)
    out["residual_sup"] = res_sup if residual is not None else None
    return out


def integrate_flows(drifts, grid: TimeGrid, initial_points, noise, *, n_noise: int | None = None,
                    noise_offset: int = 0, noise_scale: float = 1.0, weights=None, labels=None,
                    cap: float | None = None, store_paths: bool = False, snapshot_times=(),
                    pairs="consecutive", residual=None, workers=None, chunk: int | None = None,
                    ) -> FlowEnsemble:
    """Integrate every drift level from every initial point under shared noise.

    ``noise`` is a RandomStream (noise index i uses ``substream(noise_offset+i)``,
    the same draws as Brownian path i) or a PathEnsemble of Brownian paths.
    ``pairs`` selects which level pairs get a running sup distance:
    ``"consecutive"``, ``"all"`` or an explicit list of index pairs.
    ``residual`` = (reference_drift, level_index) accumulates
    sup_t |int_0^t (reference - applied drift)(X_s) ds| along that level.
    """
    drifts = list(drifts)
    x0 = np.atleast_2d(np.asarray(initial_points, dtype=float))
    P, d = x0.shape
    if isinstance(noise, PathEnsemble):
        n_noise = noise.n_paths if n_noise is None else n_noise
    elif n_noise is None:
        raise ValueError("n_noise is required with a RandomStream")
    L = len(drifts)
    if pairs == "consecutive":
        pair_list = [(i, i + 1) for i in range(L - 1)]
    elif pairs == "all":
        pair_list = [(i, j) for i in range(L) for j in range(i + 1, L)]
    else:
        pair_list = [tuple(sorted(p)) for p in pairs]
    snapshot_idx = {grid.index_of(t) for t in snapshot_times}
    if residual is not None and not 0 <= residual[1] < L:
        raise ValueError("residual level out of range")
    if chunk is None:
        budget = 2_000_000 if not store_paths else max(1, 20_000_000 // grid.n_nodes)
        chunk = max(1, budget // max(1, P * L))

    def job(r):
        a, b = r
        B = _noise_block(noise, grid, d, a, b, noise_offset, noise_scale)
        return _integrate_block(drifts, grid, x0, B, cap=cap, store_paths=store_paths,
                                snapshot_idx=snapshot_idx, pair_list=pair_list, residual=residual)

    parts = pmap(job, chunk_ranges(n_noise, chunk), workers)

    def cat(key, axis):
        return np.concatenate([p[key] for p in parts], axis=axis)

    ens = FlowEnsemble(
        grid=grid,
        initial_points=x0,
        weights=np.full(P, 1.0 / P) if weights is None else np.asarray(weights, dtype=float),
        levels=tuple(range(L)) if labels is None else tuple(labels),
        n_noise=n_noise,
        final=cat("final", 1),
        sup_norm=cat("sup_norm", 1),
        sup_disp=cat("sup_disp", 1),
        flagged=cat("flagged", 1),
        pair_sup_sq={pq: np.concatenate([p["pair_sup_sq"][pq] for p in parts], axis=0)
                     for pq in pair_list},
        snapshots={k: np.concatenate([p["snapshots"][k] for p in parts], axis=1)
                   for k in sorted(snapshot_idx)},
        paths=cat("paths", 1) if store_paths else None,
        residual_sup=cat("residual_sup", 0) if residual is not None else None,
    )
    if isinstance(noise, RandomStream):
        ens.provenance = {"master_seed": noise.master_seed, "stream_path": list(noise.stream_path),
                          "noise_offset": noise_offset}
    return ens


def euler_maruyama(drift, grid: TimeGrid, x0_set, noise, *, n_noise: int | None = None, **kw) -> FlowEnsemble:
    """Single-level EM flow from every point of ``x0_set`` under shared noise."""
    return integrate_flows([drift], grid, x0_set, noise, n_noise=n_noise, **kw)
