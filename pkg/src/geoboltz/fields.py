"""Smooth profile builtins shared by metrics, coefficients and probes.

Everything here is a plain callable on point arrays of shape (..., 2),
returning shape (...,). Profiles used as conformal factors also expose
analytic gradient and Laplacian, which the geometry layer needs for
Christoffel symbols and Gaussian curvature.
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def smoothstep(u):
    """C^4 ramp: 0 for u <= 0, 1 for u >= 1, ninth-degree polynomial between."""
    u = np.clip(u, 0.0, 1.0)
    u5 = u ** 5
    return u5 * (126.0 + u * (-420.0 + u * (540.0 + u * (-315.0 + u * 70.0))))


def smoothstep_quintic(u):
    """C^2 ramp 10u^3 - 15u^4 + 6u^5, the cheap variant used for probe bumps."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10.0 + u * (-15.0 + 6.0 * u))


class RadialBump:
    """Compactly supported radial bump: amp * step(1 - r/radius).

    Exactly zero for |x - center| >= radius. The C^4 ramp keeps finite
    difference residual tests at their nominal order.
    """

    def __init__(self, amplitude, center=(0.0, 0.0), radius=0.5, order="c4"):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self._step = smoothstep if order == "c4" else smoothstep_quintic

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x - self.center, axis=-1)
        return self.amplitude * self._step(1.0 - r / self.radius)

    def supportadius(self):
        return self.radius


class GaussianBump:
    """amp * exp(-|x - c|^2 / w^2); not compactly supported, decays fast."""

    def __init__(self, amplitude, center=(0.0, 0.0), width=0.5):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.width = float(width)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        d2 = np.sum((x - self.center) ** 2, axis=-1)
        return self.amplitude * np.exp(-d2 / self.width ** 2)


class Constant:
    def __init__(self, value):
        self.value = float(value)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.value)


ZERO = Constant(0.0)


class ConformalProfile:
    """Scalar profile with analytic gradient and Laplacian."""

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def laplacian(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.value(x)


class GaussProfile(ConformalProfile):
    """phi = amp * exp(-|x - c|^2 / w^2)."""

    def __init__(self, amplitude=0.1, center=(0.0, 0.0), width=1.0):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.width = float(width)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        d2 = np.sum((x - self.center) ** 2, axis=-1)
        return self.amplitude * np.exp(-d2 / self.width ** 2)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        v = self.value(x)
        return v[..., None] * (-2.0 / self.width ** 2) * (x - self.center)

    def laplacian(self, x):
        x = np.asarray(x, dtype=float)
        d2 = np.sum((x - self.center) ** 2, axis=-1)
        v = self.value(x)
        w2 = self.width ** 2
        return v * (4.0 * d2 / w2 ** 2 - 4.0 / w2)


class RadialQuadraticProfile(ConformalProfile):
    """phi = coef * |x|^2; negative coef gives positive curvature."""

    def __init__(self, coef=-0.05):
        self.coef = float(coef)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.coef * np.sum(x ** 2, axis=-1)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * self.coef * x

    def laplacian(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], 4.0 * self.coef)


class CompactBumpProfile(ConformalProfile):
    """phi = amp * step(1 - r/radius), exactly zero for r >= radius.

    Keeping the support inside the boundary collar means the collar cutoff
    applied by the metric never touches it, so curvature stays mild and the
    ray-transform stability hypothesis is easy to satisfy.
    """

    def __init__(self, amplitude=-0.08, radius=0.6, center=(0.0, 0.0)):
        self.amplitude = float(amplitude)
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def _u(self, r):
        return 1.0 - r / self.radius

    def value(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x - self.center, axis=-1)
        return self.amplitude * smoothstep(self._u(r))

    def _dstep(self, u):
        uc = np.clip(u, 0.0, 1.0)
        inside = (u > 0.0) & (u < 1.0)
        return np.where(inside, 630.0 * uc ** 4 * (1.0 - uc) ** 4, 0.0)

    def _d2step(self, u):
        uc = np.clip(u, 0.0, 1.0)
        inside = (u > 0.0) & (u < 1.0)
        return np.where(
            inside, 2520.0 * uc ** 3 * (1.0 - uc) ** 3 * (1.0 - 2.0 * uc), 0.0
        )

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        r = np.linalg.norm(d, axis=-1)
        dphi_dr = -self.amplitude / self.radius * self._dstep(self._u(r))
        rhat = np.where(r[..., None] > 1e-300, d / np.maximum(r, 1e-300)[..., None], 0.0)
        return dphi_dr[..., None] * rhat

    def laplacian(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        r = np.linalg.norm(d, axis=-1)
        u = self._u(r)
        dphi_dr = -self.amplitude / self.radius * self._dstep(u)
        d2phi_dr2 = self.amplitude / self.radius ** 2 * self._d2step(u)
        rs = np.maximum(r, 1e-12)
        return d2phi_dr2 + dphi_dr / rs


class ZeroProfile(ConformalProfile):
    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x)

    def laplacian(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])


CONFORMAL_PROFILES = {
    "zero": ZeroProfile,
    "gauss": GaussProfile,
    "radial_quadratic": RadialQuadraticProfile,
    "bump": CompactBumpProfile,
}

SCALAR_BUILTINS = {
    "zero": lambda **kw: Constant(0.0),
    "constant": lambda value=1.0, **kw: Constant(value),
    "bump": lambda amplitude=1.0, center=(0.0, 0.0), radius=0.5, **kw: RadialBump(
        amplitude, center, radius
    ),
    "gauss": lambda amplitude=1.0, center=(0.0, 0.0), width=0.5, **kw: GaussianBump(
        amplitude, center, width
    ),
}


def make_scalar(name, **params):
    try:
        factory = SCALAR_BUILTINS[name]
    except KeyError:
        raise KeyError(f"unknown scalar builtin {name!r}; have {sorted(SCALAR_BUILTINS)}")
    return factory(**params)


def make_conformal_profile(name, **params):
    try:
        cls = CONFORMAL_PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown conformal profile {name!r}")
    return cls(**params)
