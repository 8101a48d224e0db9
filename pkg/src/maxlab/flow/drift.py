"""Divergence-free drift fields, cut-off and mollification schedules.

Fields take (t, x) with x of shape (n, d) and return (n, d).  Gradients
follow the convention grad[k, i, j] = d b_i / d x_j at point k.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, ndimage, special
from scipy.interpolate import CubicSpline

KERNEL_ORDER = 3          # bump (1 - s^2)^k


# -- mollifier and cutoff ----------------------------------------------------------

def bump_1d(s, k: int = KERNEL_ORDER):
    """Normalised symmetric bump on [-1, 1]."""
    s = np.asarray(s, dtype=float)
    norm = math.sqrt(math.pi) * math.gamma(k + 1) / math.gamma(k + 1.5)
    return np.where(np.abs(s) < 1, (1 - s * s) ** k, 0.0) / norm


def bump_disk(s, k: int = KERNEL_ORDER):
    """Normalised radial bump on the unit disk (as a function of |y|)."""
    s = np.asarray(s, dtype=float)
    return np.where(s < 1, (1 - s * s) ** k, 0.0) * (k + 1) / math.pi


def bump_transform(eps: float, k: int = KERNEL_ORDER) -> float:
    """int eta_eps(w) cos(w) dw: the multiplier of a unit-frequency mode."""
    if eps == 0:
        return 1.0
    # Gegenbauer form: sqrt(pi) Gamma(k+1) (2/eps)^{k+1/2} J_{k+1/2}(eps) / norm
    norm = math.sqrt(math.pi) * math.gamma(k + 1) / math.gamma(k + 1.5)
    val = math.sqrt(math.pi) * math.gamma(k + 1) * (2 / eps) ** (k + 0.5) * special.jv(k + 0.5, eps)
    return float(val / norm)


def _flat(u):
    """exp(-1/u) for u > 0, else 0, with its derivative."""
    pos = u > 0
    uu = np.where(pos, u, 1.0)
    f = np.where(pos, np.exp(-1 / uu), 0.0)
    return f, np.where(pos, f / uu**2, 0.0)


def smooth_step(s):
    """C-infinity cutoff: 1 for s <= 1, 0 for s >= 2."""
    s = np.asarray(s, dtype=float)
    a, _ = _flat(2 - s)
    b, _ = _flat(s - 1)
    return a / (a + b)


def smooth_step_deriv(s):
    s = np.asarray(s, dtype=float)
    a, da = _flat(2 - s)
    b, db = _flat(s - 1)
    return -(da * b + a * db) / (a + b) ** 2


# -- base class ---------------------------------------------------------------------

@dataclass
class DriftField:
    """Vector field b(t, x) with metadata."""

    dim: int
    name: str = "drift"
    divergence_free: bool = False
    smoothness: str = "smooth"
    norms: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __call__(self, t, x):
        raise NotImplementedError

    @property
    def analytic_gradient(self) -> bool:
        return type(self).gradient is not DriftField.gradient

    def gradient(self, t, x, h: float = 1e-5):
        """Central finite differences; subclasses may override analytically."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        out = np.empty((n, d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            out[:, :, j] = (self(t, x + e) - self(t, x - e)) / (2 * h)
        return out

    def divergence(self, t, x):
        return np.trace(self.gradient(t, x), axis1=1, axis2=2)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "divergence_free": self.divergence_free,
                "smoothness": self.smoothness, "params": self.params, "norms": self.norms}


class ZeroDrift(DriftField):
    def __init__(self, dim: int = 3):
        super().__init__(dim, "zero", True, "smooth")

    def __call__(self, t, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))

    def gradient(self, t, x, h=None):
        x = np.atleast_2d(x)
        return np.zeros((x.shape[0], self.dim, self.dim))


class ConstantDrift(DriftField):
    def __init__(self, c):
        c = np.asarray(c, dtype=float).ravel()
        super().__init__(c.size, "constant", True, "smooth", params={"c": c.tolist()})
        self.c = c

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(self.c, x.shape).copy()

    def gradient(self, t, x, h=None):
        x = np.atleast_2d(x)
        return np.zeros((x.shape[0], self.dim, self.dim))


class LinearDrift(DriftField):
    """b(x) = M x; M = -I gives the Ornstein-Uhlenbeck drift."""

    def __init__(self, matrix):
        M = np.atleast_2d(np.asarray(matrix, dtype=float))
        super().__init__(M.shape[0], "linear", bool(abs(np.trace(M)) < 1e-15), "smooth",
                         params={"matrix": M.tolist()})
        self.M = M

    def __call__(self, t, x):
        return np.atleast_2d(np.asarray(x, dtype=float)) @ self.M.T

    def gradient(self, t, x, h=None):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.M, (x.shape[0],) + self.M.shape).copy()


# -- ABC flow -----------------------------------------------------------------------

def _radial_cutoff(x, R):
    r = np.linalg.norm(x, axis=1)
    return smooth_step(r / R), smooth_step_deriv(r / R) / R, r


class ABCField(DriftField):
    """Arnold-Beltrami-Childress field, optionally mollified and cut off.

    The field satisfies curl b = b, so it is its own vector potential.
    Tensorised mollification multiplies each mode by bump_transform(eps)
    exactly.  The cut-off level is curl(chi_R psi_eps) with
    psi_eps = eta_eps * b, i.e. chi_R b_eps + grad(chi_R) x b_eps, which is
    divergence-free for every R.
    """

    def __init__(self, A: float = 1.0, B: float = 1.0, C: float = 1.0, eps: float = 0.0,
                 R: float = math.inf):
        super().__init__(3, "abc", True, "smooth", params={"A": A, "B": B, "C": C, "eps": eps, "R": R})
        self.A, self.B, self.C, self.eps, self.R = A, B, C, eps, R
        self.scale = bump_transform(eps)

    def _raw(self, x):
        A, B, C = self.A, self.B, self.C
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        return self.scale * np.stack([A * np.sin(x3) + C * np.cos(x2),
                                      B * np.sin(x1) + A * np.cos(x3),
                                      C * np.sin(x2) + B * np.cos(x1)], axis=1)

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = self._raw(x)
        if math.isinf(self.R):
            return b
        chi, dchi, r = _radial_cutoff(x, self.R)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[:, None] > 0, x / r[:, None], 0.0)
        return chi[:, None] * b + np.cross(dchi[:, None] * unit, b)

    def gradient(self, t, x, h: float = 1e-5):
        if not math.isinf(self.R):
            return DriftField.gradient(self, t, x, h)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        A, B, C, s = self.A, self.B, self.C, self.scale
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        g = np.zeros((x.shape[0], 3, 3))
        g[:, 0, 1] = -C * np.sin(x2)
        g[:, 0, 2] = A * np.cos(x3)
        g[:, 1, 0] = B * np.cos(x1)
        g[:, 1, 2] = -A * np.sin(x3)
        g[:, 2, 0] = -B * np.sin(x1)
        g[:, 2, 1] = C * np.cos(x2)
        return s * g

    def level(self, R: float, eps: float) -> "ABCField":
        return ABCField(self.A, self.B, self.C, eps, R)


# -- planar vortex -------------------------------------------------------------------

class _Profile:
    """Radial profile g(rho) tabulated on rho = s sinh(u), u uniform."""

    def __init__(self, values_fn, scale: float, rho_max: float, n: int = 1200):
        self.scale = scale
        self.umax = math.asinh(rho_max / scale)
        self.du = self.umax / (n - 1)
        u = np.linspace(0, self.umax, n)
        self.rho = scale * np.sinh(u)
        self.values = np.asarray(values_fn(self.rho), dtype=float)
        self.spline = CubicSpline(self.rho, self.values)

    def _piece(self, rho):
        # O(1) interval lookup on the uniform u-grid, then the spline's own cubic
        rho = np.asarray(rho, dtype=float)
        u = np.arcsinh(rho / self.scale) / self.du
        i = np.clip(u.astype(np.int64), 0, self.values.size - 2)
        return rho, i, rho - self.rho[i], u > self.values.size - 1

    def __call__(self, rho):
        rho, i, dx, out = self._piece(rho)
        c = self.spline.c
        val = ((c[0, i] * dx + c[1, i]) * dx + c[2, i]) * dx + c[3, i]
        return np.where(out, 0.0, val)

    def deriv(self, rho):
        rho, i, dx, out = self._piece(rho)
        c = self.spline.c
        val = (3 * c[0, i] * dx + 2 * c[1, i]) * dx + c[2, i]
        return np.where(out, 0.0, val)


def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def mollify_planar_profile(g, eps: float, rho, k: int = KERNEL_ORDER, n_r: int = 48,
                           n_t: int = 48) -> np.ndarray:
    """Tangential profile of (J x g(|x|)) * eta_eps in the plane.

    g_eps(rho) = rho^{-2} int (rho^2 - rho y1) g(|x - y|) eta_eps(|y|) dy with
    x = (rho, 0).  Near the axis the integral is done in polar coordinates
    about the origin (where g may be singular) with r = u^4; elsewhere in
    polar coordinates about x.
    """
    rho = np.asarray(rho, dtype=float)
    out = np.empty_like(rho)
    xs, ws = _gauss(n_r)
    near = rho <= 2 * eps
    # about x: y = s (cos a, sin a), s in [0, eps]
    far = ~near
    if np.any(far):
        s = 0.5 * eps * (xs + 1)
        sw = 0.5 * eps * ws
        a = np.linspace(0, 2 * np.pi, n_t, endpoint=False)
        S, Aa = np.meshgrid(s, a, indexing="ij")
        W = (sw[:, None] * (2 * np.pi / n_t)) * S * bump_disk(S / eps, k) / eps**2
        y1, y2 = S * np.cos(Aa), S * np.sin(Aa)
        r_far = rho[far][:, None, None]
        dist = np.sqrt((r_far - y1) ** 2 + y2**2)
        integrand = (r_far**2 - r_far * y1) * g(dist)
        out[far] = np.sum(integrand * W, axis=(1, 2)) / rho[far] ** 2
    if np.any(near):
        for idx in np.nonzero(near)[0]:
            p = rho[idx]
            if p == 0:
                out[idx] = np.nan
                continue
            umax = (p + eps) ** 0.25
            u = 0.5 * umax * (xs + 1)
            uw = 0.5 * umax * ws
            r = u**4
            dr = 4 * u**3 * uw
            c = (p * p + r * r - eps * eps) / (2 * p * r)
            tmax = np.where(c <= -1, np.pi, np.arccos(np.clip(c, -1, 1)))
            tx, tw = _gauss(n_t)
            th = tmax[:, None] * tx[None, :]
            thw = tmax[:, None] * tw[None, :]
            dist = np.sqrt(np.maximum(p * p + r[:, None] ** 2 - 2 * p * r[:, None] * np.cos(th), 0.0))
            kern = bump_disk(dist / eps, k) / eps**2
            val = (r**2 * g(r) * dr)[:, None] * np.cos(th) * kern * thw
            out[idx] = val.sum() / p
    if np.any(rho == 0):
        i0 = np.nonzero(rho == 0)[0]
        first = np.nonzero(rho > 0)[0][0]
        out[i0] = out[first]
    return out


def mollify_axial(phi, eps: float, z, k: int = KERNEL_ORDER, n: int = 48) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if eps == 0:
        return phi(z)
    xs, ws = _gauss(n)
    w = eps * xs
    kern = ws * bump_1d(xs, k)
    return np.sum(phi(z[:, None] - w[None, :]) * kern[None, :], axis=1)


class PlanarVortex(DriftField):
    """b = (-x2, x1, 0) g(rho) phi(x3), divergence-free for any g and phi.

    The field is the curl of the potential (0, 0, -G(rho) phi(x3)) with
    G(rho) = rho^{2-a} exp(-rho^2/2) / (2-a), phi(z) = exp(-z^2/2), so
    g = G'/rho = (rho^{-a} - rho^{2-a}/(2-a)) exp(-rho^2/2).  For a in (1, 2)
    the field is singular on the x3-axis with |b| ~ rho^{1-a} and
    |grad b| ~ rho^{-a}.  The potential decays, so cutting it off costs
    only exponentially small terms.  A level with cut-off radius R
    cuts that potential by chi(rho/R) chi(|x3|/R), which keeps the
    separable form, and then mollifies with a kernel radial in the plane
    times a bump in x3 (this keeps the field azimuthal and divergence-free).
    """

    def __init__(self, a: float = 1.25, R: float = math.inf, eps: float = 0.0,
                 table_size: int = 1200):
        super().__init__(3, "planar_vortex", True, "singular" if (a > 0 and eps == 0) else "smooth",
                         params={"a": a, "R": R, "eps": eps})
        self.a, self.R, self.eps = a, R, eps
        self._g = self._phi = None
        if eps > 0 or not math.isinf(R):
            rho_max = min(2 * R, 12.0) + eps
            scale = max(eps, 1e-3) / 4
            base_g = self.base_profile_cut
            if eps > 0:
                self._g = _Profile(lambda r: mollify_planar_profile(base_g, eps, r), scale, rho_max,
                                   table_size)
            else:
                self._g = _Profile(base_g, scale, rho_max, table_size)
            z_max = min(2 * R, 12.0) + eps
            zz = np.linspace(-z_max, z_max, 4 * table_size + 1)
            vals = mollify_axial(self.base_axial_cut, eps, zz)
            self._phi_z = zz
            self._phi = CubicSpline(zz, vals)

    # profiles of the (possibly cut) field before mollification
    def potential(self, rho):
        """G(rho), with G' = rho g."""
        rho = np.asarray(rho, dtype=float)
        return rho ** (2 - self.a) * np.exp(-rho**2 / 2) / (2 - self.a)

    def base_profile(self, rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (rho ** (-self.a) - rho ** (2 - self.a) / (2 - self.a)) * np.exp(-rho**2 / 2)

    def base_profile_deriv(self, rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.exp(-rho**2 / 2) * (-self.a * rho ** (-self.a - 1) - rho ** (1 - self.a))
                    - rho * self.base_profile(rho))

    def base_profile_cut(self, rho):
        g = self.base_profile(rho)
        if math.isinf(self.R):
            return g
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = smooth_step_deriv(rho / self.R) * self.potential(rho) / (self.R * rho)
        return smooth_step(rho / self.R) * g + np.where(rho > 0, extra, 0.0)

    def base_axial_cut(self, z):
        z = np.asarray(z, dtype=float)
        phi = np.exp(-z**2 / 2)
        return phi if math.isinf(self.R) else phi * smooth_step(np.abs(z) / self.R)

    def profile(self, rho):
        return self._g(rho) if self._g is not None else self.base_profile(rho)

    def axial(self, z):
        if self._phi is None:
            return np.exp(-np.asarray(z) ** 2 / 2)
        z = np.asarray(z)
        zc = np.clip(z, self._phi_z[0], self._phi_z[-1])
        return np.where(np.abs(z) > self._phi_z[-1], 0.0, self._phi(zc))

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rho = np.hypot(x[:, 0], x[:, 1])
        s = self.profile(rho) * self.axial(x[:, 2])
        return np.stack([-x[:, 1] * s, x[:, 0] * s, np.zeros_like(s)], axis=1)

    def gradient(self, t, x, h=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x1, x2, z = x[:, 0], x[:, 1], x[:, 2]
        rho = np.hypot(x1, x2)
        if self._g is not None:
            g, dg = self.profile(rho), self._g.deriv(rho)
        else:
            g, dg = self.base_profile(rho), self.base_profile_deriv(rho)
            g = np.where(rho > 0, g, 0.0)   # singular axis, a null set
        phi = self.axial(z)
        if self._phi is not None:
            dphi = np.where(np.abs(z) > self._phi_z[-1], 0.0,
                            self._phi(np.clip(z, self._phi_z[0], self._phi_z[-1]), 1))
        else:
            dphi = -z * phi
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(rho > 0, dg / rho, 0.0)
        out = np.zeros((x.shape[0], 3, 3))
        out[:, 0, 0] = -x2 * q * x1 * phi
        out[:, 0, 1] = -(g + x2 * q * x2) * phi
        out[:, 0, 2] = -x2 * g * dphi
        out[:, 1, 0] = (g + x1 * q * x1) * phi
        out[:, 1, 1] = x1 * q * x2 * phi
        out[:, 1, 2] = x1 * g * dphi
        return out

    def level(self, R: float, eps: float) -> "PlanarVortex":
        return PlanarVortex(self.a, R, eps)

    # norms by cylindrical quadrature -------------------------------------------------
    def _rz_grid(self, n_rho=1500, n_z=801):
        scale = max(self.eps, 1e-4) / 4
        rmax = min(2 * self.R, 12.0) + self.eps if not math.isinf(self.R) else 12.0
        u = np.linspace(0, math.asinh(rmax / scale), n_rho)
        rho = scale * np.sinh(u)
        jac = scale * np.cosh(u)
        z = np.linspace(-rmax, rmax, n_z)
        return u, rho, jac, z

    def lq_norm(self, q: float) -> float:
        """||b||_{L^q(R^3)} (time-independent field)."""
        u, rho, jac, z = self._rz_grid()
        with np.errstate(invalid="ignore"):
            fr = np.where(rho > 0, 2 * np.pi * rho * np.abs(rho * self.profile(rho)) ** q, 0.0)
        return float((integrate.trapezoid(fr * jac, u) *
                      integrate.trapezoid(np.abs(self.axial(z)) ** q, z)) ** (1 / q))

    def grad_lp_norm(self, p: float) -> float:
        """||grad b||_{L^p(R^3)} with the Frobenius norm."""
        u, rho, jac, z = self._rz_grid()
        pts = np.stack(np.broadcast_arrays(rho[:, None], 0.0 * rho[:, None], z[None, :]), -1).reshape(-1, 3)
        G = self.gradient(0.0, pts)
        fro = np.sqrt(np.sum(G**2, axis=(1, 2))).reshape(rho.size, z.size)
        fro = np.where(rho[:, None] > 0, fro, 0.0)
        inner = integrate.trapezoid(fro**p, z, axis=1)
        return float(integrate.trapezoid(2 * np.pi * rho * inner * jac, u) ** (1 / p))

    def difference_lp_norm(self, other: "PlanarVortex", p: float) -> float:
        """||b - other||_{L^p(R^3)}."""
        grids = [self._rz_grid(), other._rz_grid()]
        u, rho, jac, z = grids[0] if grids[0][1][-1] >= grids[1][1][-1] else grids[1]
        if self.eps and other.eps:
            scale = min(self.eps, other.eps) / 4
            u = np.linspace(0, math.asinh(rho[-1] / scale), u.size)
            rho, jac = scale * np.sinh(u), scale * np.cosh(u)
        a = self.profile(rho)[:, None] * self.axial(z)[None, :]
        b = other.profile(rho)[:, None] * other.axial(z)[None, :]
        diff = np.where(rho[:, None] > 0, np.abs(rho[:, None] * (a - b)) ** p, 0.0)
        inner = integrate.trapezoid(diff, z, axis=1)
        return float(integrate.trapezoid(2 * np.pi * rho * inner * jac, u) ** (1 / p))


# -- grid-sampled fields ------------------------------------------------------------------

CONTAINER_MAGIC = "maxlab-drift-v1"


class GridDrift(DriftField):
    """Field sampled on a regular grid, trilinear in space and linear in time.

    ``values`` has shape (n_times, *dims, d).  Points outside the grid see
    zero drift (``mode="zero"``) or a periodic extension (``mode="wrap"``).
    """

    def __init__(self, values, spacing, origin=None, times=None, *, divergence_free=False,
                 mode: str = "zero", name: str = "grid"):
        v = np.asarray(values, dtype=float)
        if v.ndim < 3:
            raise ValueError("values must be (n_times, *dims, d)")
        d = v.shape[-1]
        if v.ndim != d + 2:
            raise ValueError("spatial rank must equal the vector dimension")
        super().__init__(d, name, divergence_free, "sampled",
                         params={"dims": list(v.shape[1:-1]), "mode": mode})
        self.values = v
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (d,)).copy()
        self.origin = np.zeros(d) if origin is None else np.asarray(origin, dtype=float)
        self.times = np.zeros(1) if times is None else np.asarray(times, dtype=float)
        if self.times.size != v.shape[0]:
            raise ValueError("times must match the first axis of values")
        self.mode = mode

    @property
    def dims(self):
        return self.values.shape[1:-1]

    def _slice(self, k, coords):
        mode = "grid-wrap" if self.mode == "wrap" else "constant"
        return np.stack([ndimage.map_coordinates(self.values[k, ..., i], coords, order=1, mode=mode,
                                                 cval=0.0) for i in range(self.dim)], axis=1)

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        coords = ((x - self.origin) / self.spacing).T
        if self.times.size == 1:
            return self._slice(0, coords)
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
        w = float(np.clip((t - self.times[k]) / (self.times[k + 1] - self.times[k]), 0, 1))
        return (1 - w) * self._slice(k, coords) + w * self._slice(k + 1, coords)

    def mollify(self, eps: float, k: int = KERNEL_ORDER) -> "GridDrift":
        """Discrete convolution with the tensorised bump of radius eps."""
        out = self.values
        for axis in range(self.dim):
            h = self.spacing[axis]
            m = int(math.floor(eps / h))
            if m < 1:
                continue
            w = bump_1d(np.arange(-m, m + 1) * h / eps, k)
            w = w / w.sum()
            out = ndimage.convolve1d(out, w, axis=axis + 1,
                                     mode="wrap" if self.mode == "wrap" else "constant")
        return GridDrift(out, self.spacing, self.origin, self.times,
                         divergence_free=self.divergence_free, mode=self.mode, name=self.name)

    def header(self) -> dict:
        return {"magic": CONTAINER_MAGIC, "d": self.dim, "dims": list(self.dims),
                "spacing": self.spacing.tolist(), "origin": self.origin.tolist(),
                "times": self.times.tolist(), "mode": self.mode,
                "divergence_free": self.divergence_free, "name": self.name}

    def save(self, path):
        np.savez(path, header=np.array(json.dumps(self.header(), sort_keys=True)),
                 values=self.values.astype("<f8"))

    @classmethod
    def load(cls, path) -> "GridDrift":
        with np.load(path, allow_pickle=False) as z:
            hdr = json.loads(str(z["header"]))
            values = z["values"]
        if hdr.get("magic") != CONTAINER_MAGIC:
            raise ValueError("not a drift container")
        if list(values.shape[1:-1]) != hdr["dims"] or values.shape[-1] != hdr["d"]:
            raise ValueError("container header does not match the stored array")
        return cls(values, hdr["spacing"], hdr["origin"], hdr["times"],
                   divergence_free=hdr["divergence_free"], mode=hdr["mode"], name=hdr["name"])

    @classmethod
    def sample(cls, field: DriftField, lo, hi, n, times=(0.0,), **kw) -> "GridDrift":
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        d = lo.size
        n = np.broadcast_to(np.asarray(n), (d,))
        spacing = (hi - lo) / (n - 1)
        axes = [lo[i] + spacing[i] * np.arange(n[i]) for i in range(d)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        vals = np.stack([field(t, pts).reshape(*n, d) for t in times])
        return cls(vals, spacing, lo, np.asarray(times, dtype=float),
                   divergence_free=field.divergence_free, **kw)


# -- catalog, schedules, probes --------------------------------------------------------

CATALOG = {"zero": ZeroDrift, "constant": ConstantDrift, "linear": LinearDrift,
           "abc": ABCField, "planar_vortex": PlanarVortex}


def build_drift(name: str, **params) -> DriftField:
    if name == "grid":
        return GridDrift.load(params["path"])
    if name == "ou":
        return LinearDrift(-np.eye(int(params.get("dim", 1))))
    try:
        cls = CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown drift {name!r}; known: {sorted(CATALOG) + ['grid', 'ou']}") from None
    return cls(**params)


@dataclass(frozen=True)
class MollifierSchedule:
    """Levels n with eps_n = 1/n (or given) and cut-off radius R_n = r0 * sqrt(n)."""

    levels: tuple = (4, 8, 16, 32)
    mode: str = "potential_cutoff"
    r0: float = 2.0
    eps: tuple | None = None

    def __post_init__(self):
        if self.mode not in ("potential_cutoff", "direct_mollify", "direct_cutoff"):
            raise ValueError(f"unknown mode {self.mode!r}")
        e = self.epsilons
        if any(b >= a for a, b in zip(e, e[1:])):
            raise ValueError("eps_n must be strictly decreasing")
        r = self.radii
        if any(b < a for a, b in zip(r, r[1:])):
            raise ValueError("R_n must be non-decreasing")

    @property
    def epsilons(self) -> tuple:
        return tuple(self.eps) if self.eps is not None else tuple(1.0 / n for n in self.levels)

    @property
    def radii(self) -> tuple:
        if self.mode == "direct_mollify":
            return tuple(math.inf for _ in self.levels)
        return tuple(self.r0 * math.sqrt(n) for n in self.levels)


def make_drift_sequence(base: DriftField, schedule: MollifierSchedule) -> list[DriftField]:
    """Cut-off and mollified approximants, every level divergence-free if the base is."""
    if schedule.mode == "direct_cutoff" and base.divergence_free:
        raise ValueError("cutting off a divergence-free field directly breaks div b = 0; "
                         "use the potential cut-off mode")
    out = []
    for R, eps in zip(schedule.radii, schedule.epsilons):
        if isinstance(base, GridDrift):
            if not math.isinf(R):
                raise ValueError("grid fields support direct_mollify only")
            lev = base.mollify(eps)
        elif hasattr(base, "level"):
            lev = base.level(R, eps)
        else:
            raise ValueError(f"{base.name} has no cut-off/mollification rule")
        lev.params = {**lev.params, "R": R, "eps": eps}
        out.append(lev)
    return out


def divergence_probe(field: DriftField, n_probes: int = 1000, *, box=(-2.0, 2.0), t: float = 0.0,
                     seed: int = 0) -> float:
    """Max |div b| over random probe points."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(box[0], box[1], (n_probes, field.dim))
    return float(np.max(np.abs(field.divergence(t, x))))
