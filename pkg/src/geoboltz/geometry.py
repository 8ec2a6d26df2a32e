"""Metric fields, geodesic flow, exit times and curvature diagnostics.

The domain M is a disk of radius R in the plane, extended to a concentric
disk M~ of radius R + margin. Conformal metrics are multiplied by a smooth
cutoff so the metric equals the identity on a collar inside the boundary of
M and everywhere outside; geodesics therefore continue as straight lines
once they leave M, which the probe machinery relies on.

All operations are vectorized over leading axes: points have shape (..., 2),
tangent vectors likewise. Tangent vectors are kept g-unit by renormalizing
after every integrator step.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import ConformalProfile, ZeroProfile, smoothstep


class GeometryError(RuntimeError):
    """Metric evaluation failed (non-SPD sample)."""


class DomainError(ValueError):
    """Evaluation outside the extended domain."""


class TrappingError(RuntimeError):
    """Arc length exceeded the non-trapping cap."""


class ConnectivityError(RuntimeError):
    """Two-point geodesic shooting failed to converge."""


# ---------------------------------------------------------------------------
# Metric field
# ---------------------------------------------------------------------------


class MetricField:
    """Riemannian metric on the extended disk, one of three kinds.

    euclidean   g = id everywhere.
    conformal   g = exp(2 phi_eff) * id with phi_eff = phi * cutoff(r); the
                cutoff kills phi on the collar [R - margin/2, R] and outside,
                so g is the identity near the boundary and beyond.
    tabulated   g_ij sampled on a uniform grid over the bounding box of M~,
                bilinearly interpolated, identity outside the table.
    """

    def __init__(self, radius=1.0, margin=None, kind="euclidean",
                 profile: Optional[ConformalProfile] = None,
                 table=None, h_x=None):
        self.radius = float(radius)
        self.margin = float(margin) if margin is not None else 0.15 * 2.0 * radius
        self.kind = kind
        self.h_x = float(h_x) if h_x is not None else self.margin / 4.0
        if kind == "euclidean":
            self.profile = ZeroProfile()
        elif kind == "conformal":
            if profile is None:
                raise ValueError("conformal metric needs a profile")
            self.profile = profile
        elif kind == "tabulated":
            if table is None:
                raise ValueError("tabulated metric needs (xs, ys, g11, g12, g22)")
            xs, ys, g11, g12, g22 = table
            self._xs = np.asarray(xs, dtype=float)
            self._ys = np.asarray(ys, dtype=float)
            self._gtab = np.stack(
                [np.asarray(g11, float), np.asarray(g12, float), np.asarray(g22, float)],
                axis=-1,
            )
            if self._gtab.shape[:2] != (self._xs.size, self._ys.size):
                raise ValueError("table shape does not match grid axes")
        else:
            raise ValueError(f"unknown metric kind {kind!r}")

    # -- extended radii ----------------------------------------------------

    @property
    def outer_radius(self):
        return self.radius + self.margin

    def diameter(self):
        """Geodesic diameter of M, estimated over a diametral ray fan."""
        if self.kind == "euclidean":
            return 2.0 * self.radius
        n = 64
        ang = np.linspace(0.0, np.pi, n, endpoint=False)
        xb = self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        v = -xb / self.radius
        v = self.unitize(xb, v)
        info = trace_to_boundary(self, xb, v, self.radius, ds=self.h_x / 2.0)
        return float(np.max(info.tau))

    def assert_inside_extended(self, x):
        r = np.linalg.norm(np.asarray(x, float), axis=-1)
        if np.any(r > self.outer_radius + 1e-9):
            raise DomainError("point outside the extended domain")

    # -- conformal factor with boundary collar cutoff ----------------------

    def _cutoff(self, r):
        # 1 inside r <= R - margin, ramps to 0 at R - margin/2
        u = (r - (self.radius - self.margin)) / (0.5 * self.margin)
        return 1.0 - smoothstep(u)

    def _cutoff_derivs(self, r):
        # derivative of the C^4 ramp, evaluated analytically
        w = 0.5 * self.margin
        u = (r - (self.radius - self.margin)) / w
        inside = (u > 0.0) & (u < 1.0)
        uc = np.clip(u, 0.0, 1.0)
        dp = 630.0 * uc ** 4 * (1.0 - uc) ** 4
        d2p = 2520.0 * uc ** 3 * (1.0 - uc) ** 3 * (1.0 - 2.0 * uc)
        c = 1.0 - smoothstep(u)
        dc = np.where(inside, -dp / w, 0.0)
        d2c = np.where(inside, -d2p / w ** 2, 0.0)
        return c, dc, d2c

    def phi_eff(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        return self.profile.value(x) * self._cutoff(r)

    def phi_eff_grad(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        c, dc, _ = self._cutoff_derivs(r)
        rhat = np.where(r[..., None] > 1e-300, x / np.maximum(r, 1e-300)[..., None], 0.0)
        return self.profile.grad(x) * c[..., None] + (
            self.profile.value(x) * dc
        )[..., None] * rhat

    def phi_eff_laplacian(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        c, dc, d2c = self._cutoff_derivs(r)
        rs = np.maximum(r, 1e-300)
        rhat = x / rs[..., None]
        gphi = self.profile.grad(x)
        # lap(phi * c(r)) = lap(phi) c + 2 grad(phi).grad(c) + phi (c'' + c'/r)
        return (
            self.profile.laplacian(x) * c
            + 2.0 * np.sum(gphi * rhat, axis=-1) * dc
            + self.profile.value(x) * (d2c + dc / rs)
        )

    # -- metric tensors -----------------------------------------------------

    def metric(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            g = np.zeros(x.shape[:-1] + (2, 2))
            g[..., 0, 0] = 1.0
            g[..., 1, 1] = 1.0
            return g
        if self.kind == "conformal":
            e2p = np.exp(2.0 * self.phi_eff(x))
            g = np.zeros(x.shape[:-1] + (2, 2))
            g[..., 0, 0] = e2p
            g[..., 1, 1] = e2p
            return g
        comp = self._table_sample(x)
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = comp[..., 0]
        g[..., 0, 1] = comp[..., 1]
        g[..., 1, 0] = comp[..., 1]
        g[..., 1, 1] = comp[..., 2]
        det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
        if np.any(det <= 0.0) or np.any(g[..., 0, 0] + g[..., 1, 1] <= 0.0):
            raise GeometryError("tabulated metric sample is not SPD")
        return g

    def inverse(self, x):
        g = self.metric(x)
        det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
        inv = np.empty_like(g)
        inv[..., 0, 0] = g[..., 1, 1] / det
        inv[..., 1, 1] = g[..., 0, 0] / det
        inv[..., 0, 1] = -g[..., 0, 1] / det
        inv[..., 1, 0] = -g[..., 0, 1] / det
        return inv

    def sqrt_det(self, x):
        if self.kind == "euclidean":
            x = np.asarray(x, dtype=float)
            return np.ones(x.shape[:-1])
        if self.kind == "conformal":
            return np.exp(2.0 * self.phi_eff(x))
        g = self.metric(x)
        return np.sqrt(g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2)

    def _table_sample(self, x):
        x = np.asarray(x, dtype=float)
        xs, ys = self._xs, self._ys
        hx = xs[1] - xs[0]
        hy = ys[1] - ys[0]
        fx = (x[..., 0] - xs[0]) / hx
        fy = (x[..., 1] - ys[0]) / hy
        ix = np.clip(np.floor(fx).astype(int), 0, xs.size - 2)
        iy = np.clip(np.floor(fy).astype(int), 0, ys.size - 2)
        tx = np.clip(fx - ix, 0.0, 1.0)
        ty = np.clip(fy - iy, 0.0, 1.0)
        t = self._gtab
        out = (
            t[ix, iy] * ((1 - tx) * (1 - ty))[..., None]
            + t[ix + 1, iy] * (tx * (1 - ty))[..., None]
            + t[ix, iy + 1] * ((1 - tx) * ty)[..., None]
            + t[ix + 1, iy + 1] * (tx * ty)[..., None]
        )
        # identity outside the tabulated box
        outside = (
            (x[..., 0] < xs[0]) | (x[..., 0] > xs[-1])
            | (x[..., 1] < ys[0]) | (x[..., 1] > ys[-1])
        )
        if np.any(outside):
            ident = np.array([1.0, 0.0, 1.0])
            out = np.where(outside[..., None], ident, out)
        return out

    # -- norms and angular frames -------------------------------------------

    def norm(self, x, v):
        g = self.metric(x)
        return np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))

    def unitize(self, x, v):
        n = self.norm(x, v)
        return v / n[..., None]

    def frame(self, x):
        """Gram-Schmidt orthonormal frame (e1, e2) of the coordinate basis."""
        g = self.metric(x)
        g11 = g[..., 0, 0]
        g12 = g[..., 0, 1]
        det = g11 * g[..., 1, 1] - g12 ** 2
        s1 = np.sqrt(g11)
        e1 = np.zeros_like(x, dtype=float)
        e1[..., 0] = 1.0 / s1
        e2 = np.empty_like(e1)
        denom = np.sqrt(g11 * det)
        e2[..., 0] = -g12 / denom
        e2[..., 1] = g11 / denom
        return e1, e2

    def angle_to_vector(self, x, alpha):
        x = np.asarray(x, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        if self.kind in ("euclidean", "conformal"):
            scale = np.exp(-self.phi_eff(x)) if self.kind == "conformal" else 1.0
            v = np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)
            return v * np.asarray(scale)[..., None] if self.kind == "conformal" else v
        e1, e2 = self.frame(x)
        return np.cos(alpha)[..., None] * e1 + np.sin(alpha)[..., None] * e2

    def vector_to_angle(self, x, v):
        if self.kind in ("euclidean", "conformal"):
            return np.arctan2(v[..., 1], v[..., 0])
        g = self.metric(x)
        gv = np.einsum("...ij,...j->...i", g, v)
        e1, e2 = self.frame(x)
        c1 = np.einsum("...i,...i->...", gv, e1)
        c2 = np.einsum("...i,...i->...", gv, e2)
        return np.arctan2(c2, c1)

    # -- Christoffel symbols and curvature ----------------------------------

    def christoffel(self, x, check_domain=True):
        """Gamma^i_{jk}, shape (..., 2, 2, 2), symmetric in (j, k)."""
        x = np.asarray(x, dtype=float)
        if check_domain:
            self.assert_inside_extended(x)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1] + (2, 2, 2))
        if self.kind == "conformal":
            dp = self.phi_eff_grad(x)
            p1, p2 = dp[..., 0], dp[..., 1]
            G = np.zeros(x.shape[:-1] + (2, 2, 2))
            G[..., 0, 0, 0] = p1
            G[..., 0, 0, 1] = p2
            G[..., 0, 1, 0] = p2
            G[..., 0, 1, 1] = -p1
            G[..., 1, 0, 0] = -p2
            G[..., 1, 0, 1] = p1
            G[..., 1, 1, 0] = p1
            G[..., 1, 1, 1] = p2
            return G
        return self._christoffel_fd(x)

    def _christoffel_fd(self, x):
        h = self.h_x
        ex = np.zeros_like(x)
        ex[..., 0] = h
        ey = np.zeros_like(x)
        ey[..., 1] = h
        dgx = (self.metric(x + ex) - self.metric(x - ex)) / (2.0 * h)
        dgy = (self.metric(x + ey) - self.metric(x - ey)) / (2.0 * h)
        dg = np.stack([dgx, dgy], axis=-3)  # (..., l, i, j) = d_l g_ij
        ginv = self.inverse(x)
        # Gamma^i_jk = 1/2 g^il (d_j g_lk + d_k g_lj - d_l g_jk)
        term = (
            np.einsum("...jlk->...ljk", dg)
            + np.einsum("...klj->...ljk", dg)
            - np.einsum("...ljk->...ljk", dg)
        )
        return 0.5 * np.einsum("...il,...ljk->...ijk", ginv, term)

    def gauss_curvature(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1])
        if self.kind == "conformal":
            return -np.exp(-2.0 * self.phi_eff(x)) * self.phi_eff_laplacian(x)
        # finite differences of the connection: K = R_1212 / det(g)
        h = self.h_x
        ex = np.zeros_like(x)
        ex[..., 0] = h
        ey = np.zeros_like(x)
        ey[..., 1] = h
        G = self.christoffel(x, check_domain=False)
        dGx = (
            self.christoffel(x + ex, check_domain=False)
            - self.christoffel(x - ex, check_domain=False)
        ) / (2.0 * h)
        dGy = (
            self.christoffel(x + ey, check_domain=False)
            - self.christoffel(x - ey, check_domain=False)
        ) / (2.0 * h)
        # R^i_{212} = d_1 G^i_22 - d_2 G^i_12 + G^i_1m G^m_22 - G^i_2m G^m_12
        rup = (
            dGx[..., :, 1, 1]
            - dGy[..., :, 0, 1]
            + np.einsum("...im,...m->...i", G[..., :, 0, :], G[..., :, 1, 1])
            - np.einsum("...im,...m->...i", G[..., :, 1, :], G[..., :, 0, 1])
        )
        g = self.metric(x)
        r1212 = np.einsum("...m,...m->...", g[..., 0, :], rup)
        det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
        return r1212 / det


def christoffel(metric: MetricField, x):
    """Christoffel symbols at x; raises DomainError outside the extended disk."""
    return metric.christoffel(x, check_domain=True)


# ---------------------------------------------------------------------------
# Geodesic flow
# ---------------------------------------------------------------------------


def _rhs(metric, x, v):
    G = metric.christoffel(x, check_domain=False)
    acc = -np.einsum("...ijk,...j,...k->...i", G, v, v)
    return v, acc


def rk4_step(metric, x, v, ds):
    """One classical Runge-Kutta step of the geodesic equation."""
    k1x, k1v = _rhs(metric, x, v)
    k2x, k2v = _rhs(metric, x + 0.5 * ds * k1x, v + 0.5 * ds * k1v)
    k3x, k3v = _rhs(metric, x + 0.5 * ds * k2x, v + 0.5 * ds * k2v)
    k4x, k4v = _rhs(metric, x + ds * k3x, v + ds * k3v)
    xn = x + (ds / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    vn = v + (ds / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return xn, vn


def flow(metric, x, v, t, ds=None, renormalize=True):
    """Advance (x, v) by signed time t along the geodesic flow."""
    x = np.array(x, dtype=float, copy=True)
    v = np.array(v, dtype=float, copy=True)
    if ds is None:
        ds = default_step(metric)
    t = float(t)
    sign = 1.0 if t >= 0 else -1.0
    if sign < 0:
        v = -v
    remaining = abs(t)
    n_full = int(np.floor(remaining / ds + 1e-12))
    for _ in range(n_full):
        x, v = rk4_step(metric, x, v, ds)
        if renormalize:
            v = metric.unitize(x, v)
    last = remaining - n_full * ds
    if last > 1e-14:
        x, v = rk4_step(metric, x, v, last)
        if renormalize:
            v = metric.unitize(x, v)
    if sign < 0:
        v = -v
    return x, v


def default_step(metric: MetricField):
    return min(metric.h_x / 2.0, 1e-2 * 2.0 * metric.outer_radius)


@dataclasses.dataclass
class ExitInfo:
    """Batched boundary-crossing data from trace_to_boundary."""

    tau: np.ndarray            # arc length to the crossing
    x_exit: np.ndarray         # crossing point, |x| = radius
    v_exit: np.ndarray         # unit tangent at the crossing
    transversal: np.ndarray    # bool, |<v, nu>| above the grazing floor
    integrals: Optional[np.ndarray] = None        # (n_states, n_funcs)
    cumtable: Optional[np.ndarray] = None         # (n_states, ksamples)
    samples_x: Optional[np.ndarray] = None        # (n_states, L, 2) padded
    samples_v: Optional[np.ndarray] = None
    samples_s: Optional[np.ndarray] = None        # (n_states, L)
    samples_cum: Optional[np.ndarray] = None      # running first integrand
    n_samples: Optional[np.ndarray] = None


def trace_to_boundary(metric, x0, v0, radius, ds=None, smax=None,
                      integrands: Optional[Sequence[Callable]] = None,
                      ksamples=None, record=False, bisect_tol=1e-10):
    """March unit-speed geodesics until |x| crosses `radius`.

    The crossing is located by bisection in arc length to `bisect_tol`.
    Optional `integrands` f(x, v) are accumulated by the trapezoid rule
    along the path; `ksamples` additionally resamples the cumulative of
    the first integrand onto a uniform table over [0, tau] per state.
    `record=True` stores every step (padded arrays) for path consumers.
    """
    x = np.atleast_2d(np.array(x0, dtype=float, copy=True))
    v = np.atleast_2d(np.array(v0, dtype=float, copy=True))
    n = x.shape[0]
    if ds is None:
        ds = default_step(metric)
    if smax is None:
        smax = 10.0 * 2.0 * metric.outer_radius
    n_int = len(integrands) if integrands else 0

    tau = np.zeros(n)
    r0 = np.linalg.norm(x, axis=-1)
    inward = np.einsum("...i,...i->...", x, v) < 0.0
    # points sitting on the stopping circle still trace when aimed inward
    active = (r0 < radius - 1e-12) | ((r0 <= radius + 1e-9) & inward)
    xe = x.copy()
    ve = v.copy()
    acc = np.zeros((n, n_int)) if n_int else None
    fprev = None
    if n_int:
        fprev = np.stack([f(x, v) for f in integrands], axis=-1)
    hist = None
    cum_hist = None
    if record or ksamples:
        max_steps = int(np.ceil(smax / ds)) + 2
        hist = {
            "x": np.zeros((max_steps, n, 2)),
            "v": np.zeros((max_steps, n, 2)),
            "s": np.zeros((max_steps, n)),
            "k": np.zeros(n, dtype=int),
        }
        hist["x"][0] = x
        hist["v"][0] = v
        hist["k"][:] = 1
        if n_int:
            cum_hist = np.zeros((max_steps, n))

    step_i = 0
    while np.any(active):
        step_i += 1
        if step_i * ds > smax:
            raise TrappingError(
                f"geodesic exceeded arc-length cap {smax:.3g} without exiting"
            )
        idx = np.nonzero(active)[0]
        xa, va = x[idx], v[idx]
        xn, vn = rk4_step(metric, xa, va, ds)
        vn = metric.unitize(xn, vn)
        crossed = np.linalg.norm(xn, axis=-1) >= radius
        # bisection on the crossing subset
        if np.any(crossed):
            ci = idx[crossed]
            lo = np.zeros(ci.size)
            hi = np.full(ci.size, ds)
            xc = x[ci]
            vc = v[ci]
            for _ in range(max(1, int(np.ceil(np.log2(ds / bisect_tol)))) + 2):
                mid = 0.5 * (lo + hi)
                xm, _ = rk4_step(metric, xc, vc, mid[:, None] * np.ones((1, 1)))
                out = np.linalg.norm(xm, axis=-1) >= radius
                hi = np.where(out, mid, hi)
                lo = np.where(out, lo, mid)
            s_cross = 0.5 * (lo + hi)
            xm, vm = rk4_step(metric, xc, vc, s_cross[:, None])
            vm = metric.unitize(xm, vm)
            xe[ci] = xm
            ve[ci] = vm
            tau[ci] += s_cross
            if n_int:
                fc = np.stack([f(xm, vm) for f in integrands], axis=-1)
                acc[ci] += 0.5 * s_cross[:, None] * (fprev[ci] + fc)
                fprev[ci] = fc
            if hist is not None:
                k = hist["k"][ci]
                hist["x"][k, ci] = xm
                hist["v"][k, ci] = vm
                hist["s"][k, ci] = tau[ci]
                if cum_hist is not None:
                    cum_hist[k, ci] = acc[ci, 0]
                hist["k"][ci] += 1
        # advance the non-crossing subset
        keep = ~crossed
        if np.any(keep):
            ki = idx[keep]
            x[ki] = xn[keep]
            v[ki] = vn[keep]
            tau[ki] += ds
            if n_int:
                fk = np.stack([f(xn[keep], vn[keep]) for f in integrands], axis=-1)
                acc[ki] += 0.5 * ds * (fprev[ki] + fk)
                fprev[ki] = fk
            if hist is not None:
                k = hist["k"][ki]
                hist["x"][k, ki] = xn[keep]
                hist["v"][k, ki] = vn[keep]
                hist["s"][k, ki] = tau[ki]
                if cum_hist is not None:
                    cum_hist[k, ki] = acc[ki, 0]
                hist["k"][ki] += 1
        active[idx[crossed]] = False

    # grazing test against the outward normal of the circle |x| = radius
    nu = xe / np.maximum(np.linalg.norm(xe, axis=-1, keepdims=True), 1e-300)
    g = metric.metric(xe)
    mu = np.abs(np.einsum("...ij,...i,...j->...", g, ve, nu))
    info = ExitInfo(tau=tau, x_exit=xe, v_exit=ve, transversal=mu > 1e-6)
    if n_int:
        info.integrals = acc
    if ksamples and n_int:
        # vectorized resample of the running integral onto a uniform table
        # over [0, tau]; history times are multiples of ds except the final
        # bisected step, handled by clamping the segment index.
        kk = hist["k"]
        q = tau[:, None] * np.linspace(0.0, 1.0, ksamples)[None, :]
        seg = np.minimum(np.floor(q / ds).astype(int), np.maximum(kk - 2, 0)[:, None])
        s_lo = seg * ds
        s_hi = np.where(seg == (kk - 2)[:, None], tau[:, None], (seg + 1) * ds)
        rows = np.arange(n)[:, None]
        c_lo = cum_hist[seg, rows]
        c_hi = cum_hist[np.minimum(seg + 1, (kk - 1)[:, None]), rows]
        w = np.where(s_hi > s_lo, (q - s_lo) / np.maximum(s_hi - s_lo, 1e-300), 0.0)
        info.cumtable = c_lo + w * (c_hi - c_lo)
    if record:
        kmax = int(hist["k"].max())
        info.samples_x = hist["x"][:kmax].transpose(1, 0, 2)
        info.samples_v = hist["v"][:kmax].transpose(1, 0, 2)
        info.samples_s = hist["s"][:kmax].transpose(1, 0)
        info.n_samples = hist["k"].copy()
        if n_int:
            info.samples_cum = cum_hist[:kmax].transpose(1, 0)
    return info


# ---------------------------------------------------------------------------
# Single-path API
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PhasePoint:
    """A point of the unit sphere bundle: position and g-unit direction."""

    x: np.ndarray
    theta: np.ndarray

    @classmethod
    def make(cls, metric, x, theta):
        x = np.asarray(x, dtype=float)
        theta = metric.unitize(x, np.asarray(theta, dtype=float))
        return cls(x=x, theta=theta)


@dataclasses.dataclass
class GeodesicPath:
    """Sampled unit-speed geodesic with entry/exit times relative to anchor."""

    s: np.ndarray
    xs: np.ndarray
    vs: np.ndarray
    tau_minus: float
    tau_plus: float
    exit_transversal: bool

    def to_rows(self):
        return np.column_stack([self.s, self.xs, self.vs])


def geodesic_trace(metric: MetricField, p: PhasePoint, direction="forward",
                   boundary="inner", ds=None) -> GeodesicPath:
    """Trace the geodesic through p until the requested boundary circle.

    `boundary` selects the stopping circle: "inner" for the domain M,
    "extended" for M~. Exit and entry times are returned relative to the
    anchor (tau_minus <= 0 <= tau_plus).
    """
    if ds is None:
        ds = default_step(metric)
    radius = metric.radius if boundary == "inner" else metric.outer_radius
    x = np.asarray(p.x, dtype=float)
    th = metric.unitize(x, np.asarray(p.theta, dtype=float))
    fwd = trace_to_boundary(metric, x[None], th[None], radius, ds=ds, record=True)
    bwd = trace_to_boundary(metric, x[None], -th[None], radius, ds=ds, record=True)
    tau_plus = float(fwd.tau[0])
    tau_minus = -float(bwd.tau[0])
    if direction == "forward":
        k = fwd.n_samples[0]
        s = fwd.samples_s[0, :k]
        xs = fwd.samples_x[0, :k]
        vs = fwd.samples_v[0, :k]
        transversal = bool(fwd.transversal[0])
    else:
        k = bwd.n_samples[0]
        s = -bwd.samples_s[0, :k]
        xs = bwd.samples_x[0, :k]
        vs = -bwd.samples_v[0, :k]
        transversal = bool(bwd.transversal[0])
    return GeodesicPath(s=s, xs=xs, vs=vs, tau_minus=tau_minus,
                        tau_plus=tau_plus, exit_transversal=transversal)


def exit_times(metric, x, theta, boundary="inner", ds=None):
    """Batched (tau_minus, tau_plus) for phase points on the chosen domain."""
    if ds is None:
        ds = default_step(metric)
    radius = metric.radius if boundary == "inner" else metric.outer_radius
    x = np.atleast_2d(np.asarray(x, float))
    theta = np.atleast_2d(np.asarray(theta, float))
    fwd = trace_to_boundary(metric, x, theta, radius, ds=ds)
    bwd = trace_to_boundary(metric, x, -theta, radius, ds=ds)
    return -bwd.tau, fwd.tau


# ---------------------------------------------------------------------------
# Parallel transport by two-point shooting
# ---------------------------------------------------------------------------


def _march_to_distance(metric, x0, v0, target, ds):
    """March a single geodesic until the euclidean distance from x0 reaches
    target; bisect the crossing. Returns (x, v, s)."""
    x = x0.copy()
    v = v0.copy()
    s = 0.0
    smax = 10.0 * 2.0 * metric.outer_radius
    while True:
        xn, vn = rk4_step(metric, x, v, ds)
        vn = metric.unitize(xn, vn)
        if np.linalg.norm(xn - x0) >= target:
            lo, hi = 0.0, ds
            for _ in range(48):
                mid = 0.5 * (lo + hi)
                xm, _ = rk4_step(metric, x, v, mid)
                if np.linalg.norm(xm - x0) >= target:
                    hi = mid
                else:
                    lo = mid
            sc = 0.5 * (lo + hi)
            xm, vm = rk4_step(metric, x, v, sc)
            return xm, metric.unitize(xm, vm), s + sc
        x, v, s = xn, vn, s + ds
        if s > smax:
            raise ConnectivityError("shooting march exceeded the arc-length cap")


def _shoot_angle(metric, x, y, ds, tol=1e-10, maxiter=100):
    """Launch angle at x of the geodesic hitting y, by bisection on the
    angular mismatch at the circle through y."""
    dxy = y - x
    target = np.linalg.norm(dxy)
    base = np.arctan2(dxy[1], dxy[0])

    def mismatch(alpha):
        v0 = metric.angle_to_vector(x, np.asarray(alpha))
        xm, _, _ = _march_to_distance(metric, x, v0, target, ds)
        d = xm - x
        a = np.arctan2(d[1], d[0]) - base
        return (a + np.pi) % (2.0 * np.pi) - np.pi

    width = 0.5
    lo, hi = base - width, base + width
    flo, fhi = mismatch(lo), mismatch(hi)
    tries = 0
    while flo * fhi > 0.0:
        width *= 1.6
        tries += 1
        if tries > 6:
            raise ConnectivityError("no sign change bracketing the target angle")
        lo, hi = base - width, base + width
        flo, fhi = mismatch(lo), mismatch(hi)
    it = 0
    while hi - lo > tol:
        it += 1
        if it > maxiter:
            raise ConnectivityError("angle bisection failed to converge")
        mid = 0.5 * (lo + hi)
        fm = mismatch(mid)
        if flo * fm <= 0.0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


def parallel_transport(metric: MetricField, theta, x, y, ds=None):
    """Parallel translation of theta from x to y along the connecting geodesic.

    The geodesic is found by shooting on the launch angle; the transport
    equation dV^i/ds + Gamma^i_jk v^j V^k = 0 is integrated along it with
    the same one-step scheme.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if ds is None:
        ds = default_step(metric)
    if np.linalg.norm(y - x) < 1e-14:
        return theta.copy()
    alpha = _shoot_angle(metric, x, y, ds)
    v = metric.angle_to_vector(x, np.asarray(alpha))
    target = np.linalg.norm(y - x)

    def transport_rhs(xc, vc, V):
        G = metric.christoffel(xc, check_domain=False)
        return -np.einsum("ijk,j,k->i", G, vc, V)

    V = theta.copy()
    xc, vc = x.copy(), v.copy()
    s = 0.0
    while True:
        xn, vn = rk4_step(metric, xc, vc, ds)
        step = ds
        finish = np.linalg.norm(xn - x) >= target
        if finish:
            lo, hi = 0.0, ds
            for _ in range(48):
                mid = 0.5 * (lo + hi)
                xm, _ = rk4_step(metric, xc, vc, mid)
                if np.linalg.norm(xm - x) >= target:
                    hi = mid
                else:
                    lo = mid
            step = 0.5 * (lo + hi)
        # RK4 for V along the step, with frozen-step geodesic updates
        k1 = transport_rhs(xc, vc, V)
        xh, vh = rk4_step(metric, xc, vc, 0.5 * step)
        k2 = transport_rhs(xh, vh, V + 0.5 * step * k1)
        k3 = transport_rhs(xh, vh, V + 0.5 * step * k2)
        xf, vf = rk4_step(metric, xc, vc, step)
        vf = metric.unitize(xf, vf)
        k4 = transport_rhs(xf, vf, V + step * k3)
        V = V + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        xc, vc = xf, vf
        s += step
        if finish:
            break
    return V


def simplicity_probe(metric: MetricField, n_pairs=20, seed=0, ds=None):
    """Check that random interior pairs are joined by exactly one geodesic.

    Scans the angular mismatch over a bracket around the euclidean launch
    direction and counts sign changes. Raises ConnectivityError when a pair
    admits none or several roots.
    """
    rng = np.random.default_rng(seed)
    if ds is None:
        ds = default_step(metric)
    R = metric.radius
    found = 0
    for _ in range(n_pairs):
        p = rng.uniform(-0.8 * R, 0.8 * R, size=2)
        q = rng.uniform(-0.8 * R, 0.8 * R, size=2)
        if np.linalg.norm(p - q) < 0.2 * R:
            continue
        dxy = q - p
        base = np.arctan2(dxy[1], dxy[0])
        target = np.linalg.norm(dxy)
        alphas = base + np.linspace(-0.9, 0.9, 25)
        vals = []
        for a in alphas:
            v0 = metric.angle_to_vector(p, np.asarray(a))
            xm, _, _ = _march_to_distance(metric, p, v0, target, ds)
            d = xm - p
            m = (np.arctan2(d[1], d[0]) - base + np.pi) % (2 * np.pi) - np.pi
            vals.append(m)
        vals = np.asarray(vals)
        sign_changes = int(np.sum(np.sign(vals[1:]) * np.sign(vals[:-1]) < 0))
        if sign_changes != 1:
            raise ConnectivityError(
                f"pair {p} -> {q}: {sign_changes} connecting geodesics in bracket"
            )
        found += 1
    return {"pairs_checked": found}


# ---------------------------------------------------------------------------
# Curvature characteristic
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class KplusReport:
    value: float
    hypothesis_ok: bool
    n_geodesics: int


def kplus_estimate(metric: MetricField, n_geodesics=256, ds=None) -> KplusReport:
    """sup over a boundary fan of int t K+(gamma(t)) dt, t from the entry.

    K+ is the positive part of the Gaussian curvature; the supremum below 1
    is the hypothesis under which the ray transform is stably invertible.
    """
    if ds is None:
        ds = default_step(metric)
    R = metric.radius
    n_b = max(8, int(np.sqrt(2.0 * n_geodesics)))
    n_a = max(4, n_geodesics // n_b)
    sb = np.linspace(0.0, 2.0 * np.pi, n_b, endpoint=False)
    xb = R * np.stack([np.cos(sb), np.sin(sb)], axis=-1)
    # inward angles, clear of grazing
    rel = np.linspace(-0.45 * np.pi, 0.45 * np.pi, n_a)
    X = np.repeat(xb, n_a, axis=0)
    inward = np.arctan2(-X[:, 1], -X[:, 0])
    A = inward + np.tile(rel, n_b)
    V = metric.angle_to_vector(X, A)
    V = metric.unitize(X, V)

    info = trace_to_boundary(metric, X, V, R, ds=ds, record=True)
    vals = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        k = info.n_samples[i]
        s = info.samples_s[i, :k]
        xs = info.samples_x[i, :k]
        kk = np.maximum(metric.gauss_curvature(xs), 0.0)
        vals[i] = np.trapezoid(s * kk, s)
    value = float(np.max(vals)) if vals.size else 0.0
    return KplusReport(value=value, hypothesis_ok=value < 1.0,
                       n_geodesics=int(X.shape[0]))
