"""Time grids, path ensembles and exact path generators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from ._parallel import chunk_ranges, pmap
from .rng import RandomStream

# snapping tolerance, in units of the grid step
_SNAP_EPS = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ValueError("grid endpoints must be finite")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.t_end > self.t_start:
            raise ValueError(f"empty time interval [{self.t_start}, {self.t_end}]")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def step(self) -> float:
        return self.duration / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        k = np.arange(self.n_nodes, dtype=float)
        return self.t_start + k * self.duration / self.n_steps

    def node(self, k: int) -> float:
        return self.t_start + k * self.duration / self.n_steps

    def index_of(self, t: float, snap: str = "nearest") -> int:
        """Grid index for time ``t``; ``snap`` is one of nearest, down, up."""
        u = (t - self.t_start) / self.step
        if snap == "down":
            k = math.floor(u + _SNAP_EPS)
        elif snap == "up":
            k = math.ceil(u - _SNAP_EPS)
        else:
            k = int(round(u))
        return int(min(max(k, 0), self.n_steps))

    def window(self, s0: float, t0: float) -> tuple[int, int]:
        """Outward-snapped index range [i, j] for the window [s0, t0]."""
        if t0 < s0:
            raise ValueError("window end precedes window start")
        tol = _SNAP_EPS * self.step
        if s0 < self.t_start - tol or t0 > self.t_end + tol:
            raise ValueError(f"window [{s0}, {t0}] not inside the grid range")
        i, j = self.index_of(s0, "down"), self.index_of(t0, "up")
        if j < i:
            raise ValueError("empty window after snapping")
        return i, j

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * int(factor))


def make_time_grid(t_start: float, t_end: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(t_start), float(t_end), n_steps)


@dataclass(frozen=True)
class ProcessModel:
    """What to simulate.

    ``kind`` is ``brownian``, ``fbm`` or ``diffusion``.  A diffusion needs a
    drift evaluator ``drift(t, x)`` acting on arrays of shape (n, dim).
    ``noise_scale`` = 0 switches the Brownian forcing off (deterministic
    test mode).
    """

    kind: str
    dim: int = 1
    x0: Any = 0.0
    hurst: float | None = None
    drift: Any = None
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("brownian", "fbm", "diffusion"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.kind == "fbm":
            if self.hurst is None or not 0.0 < self.hurst < 1.0:
                raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")
            if self.dim != 1:
                raise ValueError("fbm is generated coordinatewise; use dim=1")
        if self.kind == "diffusion" and self.drift is None:
            raise ValueError("diffusion model needs a drift evaluator")

    @property
    def markov(self) -> bool:
        return self.kind in ("brownian", "diffusion")

    def start(self) -> np.ndarray:
        x0 = np.broadcast_to(np.asarray(self.x0, dtype=float), (self.dim,))
        return np.array(x0)

    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim, "x0": self.start().tolist()}
        if self.kind == "fbm":
            out["hurst"] = self.hurst
        if self.kind == "diffusion":
            out["drift"] = getattr(self.drift, "name", type(self.drift).__name__)
        if self.noise_scale != 1.0:
            out["noise_scale"] = self.noise_scale
        return out


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[1] != self.grid.n_nodes:
            raise ValueError(f"values shape {v.shape} inconsistent with {self.grid.n_nodes} nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def at(self, t: float) -> np.ndarray:
        return self.values[:, self.grid.index_of(t)]

    def coarsen(self, factor: int) -> "PathEnsemble":
        """Subsample every ``factor``-th node (exact coupling across grids)."""
        factor = int(factor)
        if self.grid.n_steps % factor:
            raise ValueError("factor must divide n_steps")
        grid = TimeGrid(self.grid.t_start, self.grid.t_end, self.grid.n_steps // factor)
        prov = dict(self.provenance, coarsened_by=factor)
        return PathEnsemble(grid, self.values[:, ::factor], prov)


# -- Brownian motion ---------------------------------------------------------

def brownian_increments(stream: RandomStream, grid: TimeGrid, dim: int, start: int, stop: int,
                        scale: float = 1.0) -> np.ndarray:
    """Increments of paths ``start..stop-1``, shape (n, n_steps, dim)."""
    sd = math.sqrt(grid.step) * scale
    out = np.empty((stop - start, grid.n_steps, dim))
    for j, i in enumerate(range(start, stop)):
        out[j] = stream.substream(i).normals((grid.n_steps, dim))
    out *= sd
    return out


def _cumulate(x0: np.ndarray, incr: np.ndarray) -> np.ndarray:
    n, m, d = incr.shape
    vals = np.empty((n, m + 1, d))
    vals[:, 0] = x0
    np.cumsum(incr, axis=1, out=vals[:, 1:])
    vals[:, 1:] += x0
    return vals


def sample_brownian(grid: TimeGrid, dim: int, n_paths: int, stream: RandomStream, *,
                    x0=0.0, path_offset: int = 0, workers=None, chunk: int = 4096) -> PathEnsemble:
    """Standard Brownian paths; path ``i`` draws from ``stream.substream(path_offset + i)``."""
    if n_paths < 1 or dim < 1:
        raise ValueError("n_paths and dim must be positive")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (dim,))

    def job(r):
        a, b = r
        return _cumulate(x0, brownian_increments(stream, grid, dim, path_offset + a, path_offset + b))

    vals = np.concatenate(pmap(job, chunk_ranges(n_paths, chunk), workers), axis=0)
    prov = {"model": {"kind": "brownian", "dim": dim}, "master_seed": stream.master_seed,
            "stream_path": list(stream.stream_path), "path_offset": path_offset}
    return PathEnsemble(grid, vals, prov)


# -- fractional Brownian motion ----------------------------------------------

def fgn_autocovariance(hurst: float, n: int) -> np.ndarray:
    """Autocovariance of unit-step fractional Gaussian noise at lags 0..n."""
    k = np.arange(n + 1, dtype=float)
    h2 = 2.0 * hurst
    return 0.5 * (np.abs(k + 1) ** h2 - 2.0 * k ** h2 + np.abs(k - 1) ** h2)


def fbm_covariance(times: np.ndarray, hurst: float) -> np.ndarray:
    s, t = np.meshgrid(times, times, indexing="ij")
    h2 = 2.0 * hurst
    return 0.5 * (np.abs(s) ** h2 + np.abs(t) ** h2 - np.abs(t - s) ** h2)


class _FgnCholesky:
    def __init__(self, hurst, n):
        from scipy.linalg import toeplitz
        self.n = n
        self.L = np.linalg.cholesky(toeplitz(fgn_autocovariance(hurst, n - 1)))
        self.draws = n

    def __call__(self, z):
        return z @ self.L.T


class _FgnCirculant:
    """Davies-Harte embedding; exact in law whenever the embedding is PSD."""

    def __init__(self, hurst, n):
        g = fgn_autocovariance(hurst, n)
        c = np.concatenate([g, g[-2:0:-1]])
        lam = np.fft.fft(c).real
        if lam.min() < -1e-10 * lam.max():
            raise ArithmeticError("circulant embedding not positive semidefinite")
        self.n = n
        self.m = c.size
        self.sqrt_lam = np.sqrt(np.clip(lam, 0.0, None) / self.m)
        self.draws = 2 * self.m

    def __call__(self, z):
        w = (z[:, : self.m] + 1j * z[:, self.m:]) * self.sqrt_lam
        return np.fft.fft(w, axis=1).real[:, : self.n]


def _fgn_sampler(hurst, n, method):
    if method == "auto":
        method = "cholesky" if n <= 256 else "circulant"
    if method == "cholesky":
        return _FgnCholesky(hurst, n)
    if method == "circulant":
        return _FgnCirculant(hurst, n)
    raise ValueError(f"unknown fbm method {method!r}")


def sample_fbm(grid: TimeGrid, hurst: float, n_paths: int, stream: RandomStream, *,
               method: str = "auto", path_offset: int = 0, workers=None, chunk: int = 4096) -> PathEnsemble:
    """Fractional Brownian motion started at 0 on a uniform grid.

    Both methods are exact in law at the grid nodes: ``cholesky`` factors the
    fractional-Gaussian-noise covariance, ``circulant`` uses the Davies-Harte
    embedding (non-negative for every Hurst index).
    """
    if hurst is None or not 0.0 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (0, 1), got {hurst}")
    if grid.t_start != 0.0:
        raise ValueError("fbm is generated on grids starting at 0")
    n = grid.n_steps
    sampler = _fgn_sampler(hurst, n, method)
    scale = grid.step ** hurst

    def job(r):
        a, b = r
        z = np.empty((b - a, sampler.draws))
        for j, i in enumerate(range(path_offset + a, path_offset + b)):
            z[j] = stream.substream(i).normals(sampler.draws)
        incr = sampler(z)[:, :, None] * scale
        return _cumulate(np.zeros(1), incr)

    vals = np.concatenate(pmap(job, chunk_ranges(n_paths, chunk), workers), axis=0)
    prov = {"model": {"kind": "fbm", "dim": 1, "hurst": hurst}, "method": type(sampler).__name__,
            "master_seed": stream.master_seed, "stream_path": list(stream.stream_path),
            "path_offset": path_offset}
    return PathEnsemble(grid, vals, prov)


# -- generic dispatch ---------------------------------------------------------

def sample_paths(model: ProcessModel, grid: TimeGrid, n_paths: int, stream: RandomStream, *,
                 path_offset: int = 0, workers=None, **kw) -> PathEnsemble:
    if model.kind == "brownian":
        ens = sample_brownian(grid, model.dim, n_paths, stream, x0=model.start(),
                              path_offset=path_offset, workers=workers)
        if model.noise_scale != 1.0:
            x0 = model.start()
            vals = x0 + model.noise_scale * (ens.values - x0)
            ens = PathEnsemble(grid, vals, ens.provenance)
        return ens
    if model.kind == "fbm":
        return sample_fbm(grid, model.hurst, n_paths, stream, path_offset=path_offset,
                          workers=workers, **kw)
    from .em import euler_maruyama
    flows = euler_maruyama(model.drift, grid, [model.start()], stream, n_noise=n_paths,
                           noise_offset=path_offset, noise_scale=model.noise_scale,
                           store_paths=True, workers=workers, **kw)
    prov = {"model": model.describe(), "master_seed": stream.master_seed,
            "stream_path": list(stream.stream_path), "path_offset": path_offset,
            "flagged": int(flows.flagged.sum())}
    return PathEnsemble(grid, flows.paths[0, :, 0], prov)


def iter_path_chunks(model: ProcessModel, grid: TimeGrid, n_paths: int, stream: RandomStream, *,
                     chunk: int = 10_000, workers=None) -> Iterator[PathEnsemble]:
    """Yield the ensemble in consecutive path blocks (bounded memory)."""
    for a, b in chunk_ranges(n_paths, chunk):
        yield sample_paths(model, grid, b - a, stream, path_offset=a, workers=workers)


# -- path functionals ---------------------------------------------------------

def path_sup(ensemble: PathEnsemble, window: tuple[float, float] | None = None, *,
             one_sided: bool = False) -> np.ndarray:
    """Per-path maximum over the (outward-snapped) window.

    Default statistic is the Euclidean norm; ``one_sided`` takes the first
    coordinate itself.
    """
    g = ensemble.grid
    i, j = g.window(*(window or (g.t_start, g.t_end)))
    v = ensemble.values[:, i: j + 1]
    stat = v[..., 0] if one_sided else np.linalg.norm(v, axis=-1)
    return stat.max(axis=1)


def bridge_sup(ensemble: PathEnsemble, stream: RandomStream,
               window: tuple[float, float] | None = None, *, coordinate: int = 0) -> np.ndarray:
    """Exact one-sided supremum over the continuous window for unit-diffusion paths.

    Conditionally on the grid values, each step of a Brownian (or Euler
    interpolated additive-noise) path is a Brownian bridge, whose maximum is
    sampled exactly by inversion.  Not valid for fBm.
    """
    g = ensemble.grid
    i, j = g.window(*(window or (g.t_start, g.t_end)))
    x = ensemble.values[:, i: j + 1, coordinate]
    if j == i:
        return x[:, 0].copy()
    offset = int(ensemble.provenance.get("path_offset", 0))
    u = np.empty((x.shape[0], j - i))
    for k in range(x.shape[0]):
        u[k] = stream.substream(offset + k).generator().random(j - i)
    a, b = x[:, :-1], x[:, 1:]
    m = 0.5 * (a + b + np.sqrt((b - a) ** 2 - 2.0 * g.step * np.log1p(-u)))
    return m.max(axis=1)
