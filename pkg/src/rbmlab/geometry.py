"""Manifolds with boundary used by the simulator.

Every geometry works in a fixed global chart.  The flat ones (half-line,
interval, half-space, disk) use the Euclidean chart; the hemisphere uses
ambient R^3 coordinates on the unit sphere, with frames stored as 3x2
matrices whose columns are orthonormal tangent vectors.

All methods are vectorised over leading axes: a point array has shape
``(..., D)`` and a frame array ``(..., D, d)`` where ``D`` is the chart
dimension and ``d`` the intrinsic dimension.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels

BOUNDARY_TOL = 1e-8
REORTHONORMALIZE_EVERY = 100
ORTHONORMALITY_TOL = 1e-8


class GeometryError(ValueError):
    """Base class for geometric precondition failures."""


class DomainError(GeometryError):
    """A point lies outside the manifold."""


class NotOnBoundaryError(GeometryError):
    """A boundary-only quantity was requested at an interior point."""


class StepTooLargeError(GeometryError):
    """An increment left the reach band of the domain; reduce dt."""


class DegenerateStepError(GeometryError):
    """Transport between (nearly) antipodal points is undefined."""


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


class Geometry:
    """Abstract manifold with boundary.

    Subclasses define ``name``, ``dim`` (intrinsic), ``chart_dim`` and
    ``reach`` and implement the chart-level primitives.
    """

    name: str = "geometry"
    dim: int = 1
    chart_dim: int = 1
    reach: float = math.inf
    flat: bool = True

    @property
    def reach_band(self) -> float:
        return 0.25 * self.reach

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"

    # --- chart primitives -------------------------------------------------
    def metric(self, x) -> np.ndarray:
        x = self._check_inside(x)
        eye = np.eye(self.chart_dim)
        return np.broadcast_to(eye, x.shape[:-1] + eye.shape).copy()

    def boundary_distance(self, x) -> np.ndarray:
        raise NotImplementedError

    def _normal(self, x) -> np.ndarray:
        raise NotImplementedError

    def _nearest_boundary_point(self, y) -> np.ndarray:
        raise NotImplementedError

    def default_start(self) -> tuple[np.ndarray, np.ndarray]:
        """A reference starting point and orthonormal frame."""
        raise NotImplementedError

    # --- checks -------------------------------------------------------------
    def _check_inside(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.chart_dim,):
            raise DomainError(f"{self.name}: expected points of dimension {self.chart_dim}, got shape {x.shape}")
        if np.any(self.boundary_distance(x) < -BOUNDARY_TOL):
            raise DomainError(f"{self.name}: point outside the domain")
        return x

    def _check_boundary(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(self.boundary_distance(x)) > BOUNDARY_TOL):
            raise NotOnBoundaryError(f"{self.name}: point is not on the boundary")
        return x

    def on_boundary(self, x, tol: float = BOUNDARY_TOL) -> np.ndarray:
        return np.abs(self.boundary_distance(x)) <= tol

    # --- boundary data ---------------------------------------------------------
    def inward_normal(self, x) -> np.ndarray:
        """Unit inward normal at boundary points."""
        return self._normal(self._check_boundary(x))

    def project_to_domain(self, y):
        """Discrete Skorokhod push.

        Returns ``(x, push)`` where ``x`` is ``y`` itself for interior
        points and the nearest boundary point otherwise; ``push`` is the
        distance moved along the inward normal.
        """
        y = np.asarray(y, dtype=float)
        dist = self.boundary_distance(y)
        if np.any(dist < -self.reach_band):
            raise StepTooLargeError(
                f"{self.name}: increment overshoots the boundary by {-dist.min():.4g} "
                f"> reach band {self.reach_band:.4g}; reduce dt"
            )
        outside = dist < 0.0
        push = np.where(outside, -dist, 0.0)
        if not np.any(outside):
            return y.copy(), push
        x = y.copy()
        x[outside] = self._nearest_boundary_point(y[outside])
        return x, push

    def frame_coordinates(self, x, u, w) -> np.ndarray:
        """Components of the tangent vector ``w`` in the frame ``u`` (u^{-1} w)."""
        g = self.metric(x)
        return np.einsum("...ai,...ab,...b->...i", u, g, w)

    def ricci_in_frame(self, x, u) -> np.ndarray:
        x = self._check_inside(x)
        u = np.asarray(u, dtype=float)
        return self._ricci_scalar(x)[..., None, None] * np.einsum("...ai,...aj->...ij", u, u)

    def _ricci_scalar(self, x):
        # Ric = kappa * g for every catalog geometry
        return np.zeros(np.shape(x)[:-1])

    def normal_projection_in_frame(self, x, u) -> np.ndarray:
        """``P_u = v v^T`` with ``v = u^{-1} N``."""
        x = self._check_boundary(x)
        v = self.frame_coordinates(x, u, self._normal(x))
        return v[..., :, None] * v[..., None, :]

    def second_fundamental_in_frame(self, x, u) -> np.ndarray:
        """``II_u(a, b) = II(pi au, pi bu)`` with ``II(X, Y) = -<nabla_X N, Y>``."""
        x = self._check_boundary(x)
        u = np.asarray(u, dtype=float)
        kappa = self._boundary_curvature(x)
        v = self.frame_coordinates(x, u, self._normal(x))
        tangential = np.eye(self.dim) - v[..., :, None] * v[..., None, :]
        return kappa[..., None, None] * _sym(tangential)

    def _boundary_curvature(self, x):
        # umbilic boundaries only: II = kappa * <., .> on the tangent space of the boundary
        return np.zeros(np.shape(x)[:-1])

    # --- motion ---------------------------------------------------------------
    def exp_step(self, x, u, xi) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + np.einsum("...ai,...i->...a", u, xi)

    def transport_frame(self, x_from, x_to, u) -> np.ndarray:
        return np.array(u, dtype=float, copy=True)

    def advance(self, x, u, xi):
        """Exponential move then projection back into M: ``(x_new, push)``."""
        return self.project_to_domain(self.exp_step(x, u, xi))

    def step(self, x, u, xi):
        """Full scheme step ``(x_new, push, u_new)`` for a batch of paths."""
        x_new, push = self.advance(x, u, xi)
        if self.flat:
            return x_new, push, u
        return x_new, push, self.transport_frame(x, x_new, u)

    def curvature_lower_bounds(self) -> tuple[float, float]:
        """``(min Ricci eigenvalue over M, min II eigenvalue over dM)``."""
        return 0.0, 0.0

    def reorthonormalize(self, x, u) -> np.ndarray:
        """Gram-Schmidt of the frame columns against the metric at ``x``."""
        u = np.asarray(u, dtype=float)
        q, r = np.linalg.qr(u)
        signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
        signs = np.where(signs == 0, 1.0, signs)
        return q * signs[..., None, :]

    def orthonormality_defect(self, x, u) -> np.ndarray:
        g = self.metric(x)
        gram = np.einsum("...ai,...ab,...bj->...ij", u, g, u)
        return np.max(np.abs(gram - np.eye(self.dim)), axis=(-1, -2))


def _unpack_drift(adapted):
    if adapted is None:
        return _kernels.DRIFT_NONE, 0.0, 0, 0
    mode, param, coord, slot = adapted
    return int(mode), float(param), int(coord), int(slot)


def _fast_1d(geom, lo, hi, x0, u0, db, adapted, eps, dt):
    P, n, _ = db.shape
    xs = np.empty((P, n + 1))
    dl = np.empty((P, n))
    mode, param, _, _ = _unpack_drift(adapted)
    worst = _kernels.reflect_paths_1d(
        np.ascontiguousarray(x0[:, 0]), np.ascontiguousarray(u0[:, 0, 0]), np.ascontiguousarray(db[:, :, 0]),
        lo, hi, geom.reach_band, mode, param, float(eps), float(dt), xs, dl,
    )
    if worst > geom.reach_band:
        raise StepTooLargeError(f"{geom.name}: overshoot {worst:.4g} > reach band {geom.reach_band:.4g}; reduce dt")
    return xs[:, :, None], None, dl


class HalfLine(Geometry):
    name = "halfline"
    dim = chart_dim = 1

    def boundary_distance(self, x):
        return np.asarray(x, dtype=float)[..., 0]

    def _normal(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def _nearest_boundary_point(self, y):
        return np.zeros_like(y)

    def default_start(self):
        return np.array([0.0]), np.eye(1)

    def advance(self, x, u, xi):
        y = x + u[..., 0] * xi
        return np.maximum(y, 0.0), np.maximum(-y, 0.0)[..., 0]

    def fast_paths(self, x0, u0, db, adapted=None, eps=0.0, dt=0.0):
        return _fast_1d(self, 0.0, math.inf, x0, u0, db, adapted, eps, dt)


class Interval(Geometry):
    """``[0, length]``; both endpoints are boundary."""

    name = "interval"
    dim = chart_dim = 1

    def __init__(self, length: float = 1.0):
        self.length = float(length)
        self.reach = self.length

    def boundary_distance(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        return np.minimum(x, self.length - x)

    def _normal(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 0.5 * self.length, 1.0, -1.0)

    def _nearest_boundary_point(self, y):
        return np.clip(y, 0.0, self.length)

    def default_start(self):
        return np.array([0.5 * self.length]), np.eye(1)

    def advance(self, x, u, xi):
        y = x + u[..., 0] * xi
        low, high = -y, y - self.length
        worst = max(low.max(initial=-np.inf), high.max(initial=-np.inf))
        if worst > self.reach_band:
            raise StepTooLargeError(f"interval: overshoot {worst:.4g} > reach band {self.reach_band:.4g}; reduce dt")
        push = (np.maximum(low, 0.0) + np.maximum(high, 0.0))[..., 0]
        return np.clip(y, 0.0, self.length), push

    def fast_paths(self, x0, u0, db, adapted=None, eps=0.0, dt=0.0):
        return _fast_1d(self, 0.0, self.length, x0, u0, db, adapted, eps, dt)


class HalfSpace(Geometry):
    """``{x in R^d : x_{d-1} >= 0}``."""

    def __init__(self, d: int = 3):
        if d < 1:
            raise ValueError("half-space dimension must be >= 1")
        self.dim = self.chart_dim = int(d)
        self.name = f"halfspace:{self.dim}"

    def boundary_distance(self, x):
        return np.asarray(x, dtype=float)[..., -1]

    def _normal(self, x):
        n = np.zeros_like(np.asarray(x, dtype=float))
        n[..., -1] = 1.0
        return n

    def _nearest_boundary_point(self, y):
        x = np.array(y, dtype=float, copy=True)
        x[..., -1] = 0.0
        return x

    def default_start(self):
        x0 = np.zeros(self.dim)
        x0[-1] = 0.5
        return x0, np.eye(self.dim)


class Disk(Geometry):
    """Closed unit disk in the plane.  Convex, boundary curvature +1."""

    name = "disk"
    dim = chart_dim = 2

    def __init__(self, radius: float = 1.0):
        self.radius = float(radius)
        self.reach = self.radius

    def boundary_distance(self, x):
        return self.radius - np.linalg.norm(np.asarray(x, dtype=float), axis=-1)

    def _normal(self, x):
        x = np.asarray(x, dtype=float)
        return -x / np.linalg.norm(x, axis=-1, keepdims=True)

    def _nearest_boundary_point(self, y):
        return self.radius * y / np.linalg.norm(y, axis=-1, keepdims=True)

    def _boundary_curvature(self, x):
        return np.full(np.shape(x)[:-1], 1.0 / self.radius)

    def curvature_lower_bounds(self):
        return 0.0, 1.0 / self.radius

    def default_start(self):
        return np.array([0.5 * self.radius, 0.0]), np.eye(2)

    def advance(self, x, u, xi):
        x = np.ascontiguousarray(x, dtype=float)
        if x.ndim != 2:
            return super().advance(x, u, xi)
        step = np.ascontiguousarray(np.einsum("...ai,...i->...a", u, xi))
        x_out = np.empty_like(x)
        push = np.empty(x.shape[0])
        worst = _kernels.disk_step(x, step, self.radius, self.reach_band, x_out, push)
        if worst > self.reach_band:
            raise StepTooLargeError(f"disk: overshoot {worst:.4g} > reach band {self.reach_band:.4g}; reduce dt")
        return x_out, push

    def fast_paths(self, x0, u0, db, adapted=None, eps=0.0, dt=0.0):
        P, n, _ = db.shape
        xs = np.empty((P, n + 1, 2))
        dl = np.empty((P, n))
        mode, param, coord, slot = _unpack_drift(adapted)
        worst = _kernels.disk_paths(
            np.ascontiguousarray(x0), np.ascontiguousarray(u0), np.ascontiguousarray(db),
            self.radius, self.reach_band, mode, param, coord, slot, float(eps), float(dt), xs, dl,
        )
        if worst > self.reach_band:
            raise StepTooLargeError(f"disk: overshoot {worst:.4g} > reach band {self.reach_band:.4g}; reduce dt")
        return xs, None, dl


def _cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


class Hemisphere(Geometry):
    """Upper unit hemisphere ``{|x| = 1, x_3 >= 0}`` in ambient coordinates.

    The boundary is the equator, a great circle, so II vanishes there.
    Boundary distance is the geodesic distance to the equator.
    """

    name = "hemisphere"
    dim = 2
    chart_dim = 3
    reach = 0.5 * math.pi
    flat = False

    def boundary_distance(self, x):
        x = np.asarray(x, dtype=float)
        z = x[..., 2] / np.linalg.norm(x, axis=-1)
        return np.arcsin(np.clip(z, -1.0, 1.0))

    def _check_inside(self, x):
        x = super()._check_inside(x)
        if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > 1e-8):
            raise DomainError("hemisphere: point is not on the unit sphere")
        return x

    def _normal(self, x):
        n = np.zeros_like(np.asarray(x, dtype=float))
        n[..., 2] = 1.0
        return n

    def _nearest_boundary_point(self, y):
        x = np.array(y, dtype=float, copy=True)
        x[..., 2] = 0.0
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(r < 1e-12):
            raise StepTooLargeError("hemisphere: nearest equator point is not unique at the south pole")
        return x / r

    def _ricci_scalar(self, x):
        return np.ones(np.shape(x)[:-1])

    def curvature_lower_bounds(self):
        return 1.0, 0.0

    def default_start(self):
        theta = 1.2
        x0 = np.array([math.sin(theta), 0.0, math.cos(theta)])
        u0 = np.array([[math.cos(theta), 0.0], [0.0, 1.0], [-math.sin(theta), 0.0]])
        return x0, u0

    def exp_step(self, x, u, xi):
        x = np.asarray(x, dtype=float)
        v = u @ xi[..., None]
        v = v[..., 0]
        speed = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
        if np.any(speed > 0.5 * math.pi):
            raise StepTooLargeError("hemisphere: geodesic step longer than pi/2; reduce dt")
        # sin(s)/s is smooth at 0
        sinc = np.sinc(speed / math.pi)
        y = np.cos(speed) * x + sinc * v
        return y / np.sqrt(np.sum(y * y, axis=-1, keepdims=True))

    def step(self, x, u, xi):
        x = np.ascontiguousarray(x, dtype=float)
        if x.ndim != 2:
            return super().step(x, u, xi)
        u = np.ascontiguousarray(u, dtype=float)
        xi = np.ascontiguousarray(xi, dtype=float)
        x_out = np.empty_like(x)
        u_out = np.empty_like(u)
        push = np.empty(x.shape[0])
        worst = _kernels.hemisphere_step(x, u, xi, x_out, u_out, push)
        if worst > self.reach_band:
            raise StepTooLargeError(f"hemisphere: overshoot {worst:.4g} > reach band {self.reach_band:.4g}; reduce dt")
        return x_out, push, u_out

    def fast_paths(self, x0, u0, db, adapted=None, eps=0.0, dt=0.0):
        P, n, _ = db.shape
        xs = np.empty((P, n + 1, 3))
        us = np.empty((P, n + 1, 3, 2))
        dl = np.empty((P, n))
        mode, param, coord, slot = _unpack_drift(adapted)
        worst = _kernels.hemisphere_paths(
            np.ascontiguousarray(x0), np.ascontiguousarray(u0), np.ascontiguousarray(db), self.reach_band,
            REORTHONORMALIZE_EVERY, mode, param, coord, slot, float(eps), float(dt), xs, us, dl,
        )
        if worst > self.reach_band:
            raise StepTooLargeError(f"hemisphere: overshoot {worst:.4g} > reach band {self.reach_band:.4g}; reduce dt")
        return xs, us, dl

    def transport_frame(self, x_from, x_to, u):
        """Parallel transport along the connecting great circle.

        Uses the rotation about ``a x b`` taking ``a`` to ``b``:
        ``R w = w + k x w + k x (k x w) / (1 + c)``.
        """
        a = np.asarray(x_from, dtype=float)
        b = np.asarray(x_to, dtype=float)
        u = np.asarray(u, dtype=float)
        c = np.sum(a * b, axis=-1)
        if np.any(c < -1.0 + 1e-9):
            raise DegenerateStepError("hemisphere: transport between antipodal points")
        k = _cross(a, b)[..., None, :]
        w = np.swapaxes(u, -1, -2)
        kw = _cross(k, w)
        out = w + kw + _cross(k, kw) / (1.0 + c)[..., None, None]
        return np.swapaxes(out, -1, -2)

    def reorthonormalize(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        u = u - x[..., :, None] * np.einsum("...a,...ai->...i", x, u)[..., None, :]
        return super().reorthonormalize(x, u)

    # graph chart over the open unit disk, used to cross-check intrinsic data
    @staticmethod
    def chart_embedding(p):
        p = np.asarray(p, dtype=float)
        return np.concatenate([p, np.sqrt(1.0 - np.sum(p * p, axis=-1, keepdims=True))], axis=-1)

    @staticmethod
    def chart_metric(p):
        """Metric of the graph chart ``p -> (p, sqrt(1 - |p|^2))``."""
        p = np.asarray(p, dtype=float)
        denom = 1.0 - np.sum(p * p, axis=-1)
        if np.any(denom <= 0):
            raise DomainError("hemisphere chart: |p| must be < 1")
        return np.eye(2) + p[..., :, None] * p[..., None, :] / denom[..., None, None]


GEOMETRY_NAMES = ("halfline", "interval", "halfspace:<d>", "disk", "hemisphere")


def make_geometry(name: str) -> Geometry:
    """Build a catalog geometry from its CLI/config name."""
    key = name.strip().lower()
    if key == "halfline":
        return HalfLine()
    if key == "interval":
        return Interval()
    if key == "disk":
        return Disk()
    if key == "hemisphere":
        return Hemisphere()
    if key.startswith("halfspace"):
        _, _, d = key.partition(":")
        try:
            return HalfSpace(int(d) if d else 3)
        except ValueError:
            pass
    raise ValueError(f"unknown geometry {name!r}; valid names: {', '.join(GEOMETRY_NAMES)}")
