"""Discretization of the sphere bundle and its boundary, plus quadratures.

The spatial grid is uniform over the bounding box of the extended disk,
with exact per-cell coverage fractions of the inner disk used as quadrature
weights. Directions live on an equispaced circle identified through the
orthonormal frame of the metric; the angular measure is the trapezoid rule,
spectrally accurate for the smooth periodic integrands that appear here.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np

from .fields import TWO_PI
from .geometry import MetricField, trace_to_boundary


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Exact disk/cell coverage
# ---------------------------------------------------------------------------


def _arc_antiderivative(u, R):
    """Antiderivative of sqrt(R^2 - u^2) on [-R, R]."""
    u = np.clip(u, -R, R)
    return 0.5 * (u * np.sqrt(np.maximum(R * R - u * u, 0.0)) + R * R * np.arcsin(u / R))


def _disk_quadrant_area(x, y, R):
    """Area of {(u,v): u <= x, v <= y} inside the disk of radius R."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    X = np.clip(x, -R, R)
    F = lambda u: _arc_antiderivative(u, R)
    FmR = F(np.full_like(X, -R))

    out = np.zeros(np.broadcast(x, y).shape)
    full = y >= R
    empty = y <= -R
    mid = ~(full | empty)

    # y >= R: v-range is the whole vertical chord
    out = np.where(full, 2.0 * (F(X) - FmR), out)

    # |y| < R: split the u-range at +-w, w = sqrt(R^2 - y^2)
    ymid = np.where(mid, y, 0.0)
    w = np.sqrt(np.maximum(R * R - ymid * ymid, 0.0))

    def seg_full(u1, u2):
        u2c = np.maximum(u2, u1)
        return 2.0 * (F(u2c) - F(u1))

    def seg_mixed(u1, u2):
        u2c = np.maximum(u2, u1)
        return ymid * (u2c - u1) + (F(u2c) - F(u1))

    pos = mid & (ymid >= 0.0)
    neg = mid & (ymid < 0.0)
    # y >= 0: [ -R, min(X,-w) ] chord, [ -w, min(X,w) ] mixed, [ w, X ] chord
    a1 = seg_full(np.full_like(X, -R), np.minimum(X, -w))
    a2 = seg_mixed(-w, np.minimum(X, w))
    a3 = seg_full(w, X)
    out = np.where(pos, a1 + a2 + a3, out)
    # y < 0: only the mixed band contributes
    out = np.where(neg, seg_mixed(-w, np.minimum(X, w)), out)
    return out


def disk_cell_coverage(cx, cy, h, R):
    """Exact fraction of cell [cx-h/2, cx+h/2] x [cy-h/2, cy+h/2] in the disk."""
    a, b = cx - 0.5 * h, cx + 0.5 * h
    c, d = cy - 0.5 * h, cy + 0.5 * h
    area = (
        _disk_quadrant_area(b, d, R)
        - _disk_quadrant_area(a, d, R)
        - _disk_quadrant_area(b, c, R)
        + _disk_quadrant_area(a, c, R)
    )
    return np.clip(area / (h * h), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Phase grid
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class SpatialGrid:
    """Uniform grid over the extended box with disk coverage weights."""

    xs: np.ndarray
    ys: np.ndarray
    h: float
    nodes: np.ndarray        # (n_nodes, 2), every grid node
    frac: np.ndarray         # (n_nodes,) coverage fraction of the inner disk
    in_M: np.ndarray         # (n_nodes,) bool, node center inside the disk
    in_ext: np.ndarray       # inside the extended disk

    @classmethod
    def build(cls, metric: MetricField, n: int):
        Ro = metric.outer_radius
        xs = np.linspace(-Ro, Ro, n)
        h = xs[1] - xs[0]
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        frac = disk_cell_coverage(nodes[:, 0], nodes[:, 1], h, metric.radius)
        r = np.linalg.norm(nodes, axis=1)
        return cls(xs=xs, ys=xs.copy(), h=h, nodes=nodes, frac=frac,
                   in_M=r < metric.radius, in_ext=r < Ro)

    def index_of(self, pts):
        """Fractional grid coordinates of points, for interpolation."""
        fx = (pts[..., 0] - self.xs[0]) / self.h
        fy = (pts[..., 1] - self.ys[0]) / self.h
        return fx, fy


class PhaseGrid:
    """Nodes of the sphere bundle SM with quadrature weights.

    Quadrature nodes carry weight h^2 * coverage * sqrt(det g) * (2 pi / N);
    solver nodes are the subset whose cell center lies inside M. Directions
    are stored as frame angles; `unit_vectors` maps them to coordinates.
    """

    def __init__(self, metric: MetricField, n: int, n_theta: int):
        if n_theta % 2:
            raise ParameterError("n_theta must be even (direction reversal maps nodes)")
        self.metric = metric
        self.spatial = SpatialGrid.build(metric, n)
        self.n_theta = int(n_theta)
        self.angles = TWO_PI * np.arange(n_theta) / n_theta
        self.w_ang = TWO_PI / n_theta

        sp = self.spatial
        self.quad_mask = sp.frac > 0.0
        self.quad_nodes = sp.nodes[self.quad_mask]
        self.quad_w = (
            sp.h ** 2 * sp.frac[self.quad_mask] * metric.sqrt_det(self.quad_nodes)
        )
        self.solver_mask = sp.in_M
        self.solver_nodes = sp.nodes[self.solver_mask]
        self.solver_w = (
            sp.h ** 2 * sp.frac[self.solver_mask] * metric.sqrt_det(self.solver_nodes)
        )
        # full-grid -> solver index map (-1 outside)
        self.solver_id = np.full(sp.nodes.shape[0], -1, dtype=int)
        self.solver_id[self.solver_mask] = np.arange(self.solver_nodes.shape[0])
        self.n_solver = self.solver_nodes.shape[0]

    def unit_vectors(self, pts):
        """(n_pts, n_theta, 2) g-unit direction vectors at each point."""
        pts = np.atleast_2d(pts)
        a = self.angles[None, :]
        return self.metric.angle_to_vector(
            np.repeat(pts[:, None, :], self.n_theta, axis=1), np.broadcast_to(a, (pts.shape[0], self.n_theta))
        )

    def volume_weights(self, which="quad"):
        w = self.quad_w if which == "quad" else self.solver_w
        return w[:, None] * self.w_ang * np.ones((1, self.n_theta))

    def volume_integral(self, f: Callable):
        """Integral of f(x, theta) over SM with the dv^2 weights."""
        pts = self.quad_nodes
        dirs = self.unit_vectors(pts)
        P = np.repeat(pts[:, None, :], self.n_theta, axis=1)
        vals = f(P, dirs)
        return float(np.real(np.sum(vals * self.quad_w[:, None] * self.w_ang)))


# ---------------------------------------------------------------------------
# Boundary grid
# ---------------------------------------------------------------------------


class BoundaryGrid:
    """Nodes of the boundary bundles with the mu factor and time grid.

    Boundary points sit at half-offset arc positions so no direction of the
    equispaced angular fan is exactly grazing. The metric is the identity
    near the boundary by construction, so normals and angles are euclidean.
    """

    def __init__(self, metric: MetricField, n_b: int, n_theta: int,
                 T: float, n_t: int, grazing_floor=1e-6):
        self.metric = metric
        self.n_b = int(n_b)
        self.n_theta = int(n_theta)
        self.T = float(T)
        self.n_t = int(n_t)
        R = metric.radius
        self.perimeter = TWO_PI * R
        phi = TWO_PI * (np.arange(n_b) + 0.5) / n_b
        self.arcs = R * phi
        self.points = R * np.column_stack([np.cos(phi), np.sin(phi)])
        self.nu = self.points / R
        self.thetas = TWO_PI * np.arange(n_theta) / n_theta
        self.dirs = np.column_stack([np.cos(self.thetas), np.sin(self.thetas)])

        dot = self.nu @ self.dirs.T          # (n_b, n_theta), <theta, nu>
        self.mu = np.abs(dot)
        grazing = self.mu < grazing_floor
        self.incoming = (dot < 0.0) & ~grazing
        self.outgoing = (dot > 0.0) & ~grazing

        self.w_arc = self.perimeter / n_b
        w_ang = np.full((n_b, n_theta), TWO_PI / n_theta)
        # grazing weight redistributed evenly at the same boundary point
        ng = grazing.sum(axis=1)
        if np.any(ng):
            extra = ng * (TWO_PI / n_theta) / np.maximum(n_theta - ng, 1)
            w_ang += extra[:, None]
            w_ang[grazing] = 0.0
        self.w_ang = w_ang

        self.times = np.linspace(0.0, T, n_t + 1)
        self.dt = T / n_t
        self.w_t = np.full(n_t + 1, self.dt)
        self.w_t[0] *= 0.5
        self.w_t[-1] *= 0.5

        self.in_b, self.in_a = np.nonzero(self.incoming)
        self.out_b, self.out_a = np.nonzero(self.outgoing)

    def side_nodes(self, side):
        """(points, dirs, mu, weights) for one side of the boundary bundle."""
        b, a = (self.in_b, self.in_a) if side == "-" else (self.out_b, self.out_a)
        return (
            self.points[b],
            self.dirs[a],
            self.mu[b, a],
            self.w_arc * self.w_ang[b, a],
        )

    def measure(self, side):
        """Total mu-weighted measure of one boundary bundle side."""
        _, _, mu, w = self.side_nodes(side)
        return float(np.sum(mu * w))


# ---------------------------------------------------------------------------
# Santalo quadrature
# ---------------------------------------------------------------------------


def santalo_integrate(metric: MetricField, grid: PhaseGrid, bgrid: BoundaryGrid,
                      f: Callable, ds: Optional[float] = None):
    """Both sides of the Santalo identity for f on SM.

    volume side:   sum of f over the phase grid with dv^2 weights.
    boundary side: incoming-fan integral of int_0^tau f(flow_t) dt weighted
                   by mu and the boundary measure.
    """
    volume_side = grid.volume_integral(f)

    pts, dirs, mu, w = bgrid.side_nodes("-")
    if ds is None:
        ds = metric.h_x / 2.0
    info = trace_to_boundary(
        metric, pts, dirs, metric.radius, ds=ds,
        integrands=[lambda x, v: np.real(f(x, v))],
        smax=4.0 * metric.outer_radius,
    )
    ray_ints = info.integrals[:, 0]
    boundary_side = float(np.sum(ray_ints * mu * w))
    return volume_side, boundary_side


# ---------------------------------------------------------------------------
# Poisson kernel on the fibers
# ---------------------------------------------------------------------------


def poisson_kernel(xi, theta, h, metric: Optional[MetricField] = None, x=None):
    """Poisson kernel of the unit ball in the fiber, normalized to unit mass.

    P_h(xi, theta) = (1 - h^2) / (2 pi |h xi - theta|_g^2) for g-unit xi and
    theta at x. Integrates to 1 over the fiber circle for every h in (0, 1)
    and concentrates at theta = xi as h tends to 1.
    """
    h = float(h)
    if not (0.0 <= h < 1.0):
        raise ParameterError("poisson concentration h must lie in [0, 1)")
    xi = np.asarray(xi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    d = h * xi - theta
    if metric is None or x is None:
        n2 = np.sum(d * d, axis=-1)
    else:
        g = metric.metric(np.asarray(x, dtype=float))
        n2 = np.einsum("...ij,...i,...j->...", g, d, d)
    return (1.0 - h * h) / (TWO_PI * n2)


def poisson_kernel_angle(dalpha, h):
    """Same kernel expressed through the frame-angle difference."""
    h = float(h)
    if not (0.0 <= h < 1.0):
        raise ParameterError("poisson concentration h must lie in [0, 1)")
    return (1.0 - h * h) / (TWO_PI * (1.0 + h * h - 2.0 * h * np.cos(dalpha)))


def poisson_bound(h, n=2):
    """Upper bound 2 / (omega (1-h)^(n-1)) with omega the circle measure."""
    return 2.0 / (TWO_PI * (1.0 - h) ** (n - 1))
