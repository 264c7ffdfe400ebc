"""Convex planar domains, 2D conformal metrics, geodesic flow, and exit times.

Domains are either Euclidean (disk, ellipse) or a disk equipped with a
conformal metric g = e^{2c(x)} * (Euclidean).  Directions are parameterized
by an angle theta; the metric-unit vector is v = e^{-c(x)} (cos theta,
sin theta), so Euclidean domains use the plain unit vector.  Geodesics are
parameterized by metric arclength, which doubles as travel time for
unit-speed transport.

The flow on the unit sphere bundle in isothermal coordinates reduces to

    dx/ds     = e^{-c} (cos theta, sin theta)
    dtheta/ds = e^{-c} (-d1c * sin theta + d2c * cos theta)

integrated with classical RK4; boundary hits are refined by bisection on the
signed boundary function.  Euclidean domains use exact chord formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BOUNDARY_TOL",
    "TANGENTIAL_CUTOFF",
    "TRAPPING_FACTOR",
    "Domain",
    "DiskDomain",
    "EllipseDomain",
    "ConformalDomain",
    "PhasePoint",
    "RayPath",
    "InvalidDomainError",
    "OutsideDomainError",
    "TrappingError",
    "make_domain",
    "exit_times",
    "trace_geodesic",
    "boundary_measure_weight",
    "vertical_tau_derivative",
    "vertical_tau_derivatives",
]

# Bisection tolerance for refining boundary hits of traced geodesics.
BOUNDARY_TOL = 1e-10
# Boundary rays with |<nu, v>_g| below this are excluded from quadrature sets.
TANGENTIAL_CUTOFF = 1e-6
# Tracing aborts after this multiple of the domain diameter (trapping guard).
TRAPPING_FACTOR = 100.0

_DEFAULT_FLOW_STEP = 1e-2


class InvalidDomainError(ValueError):
    """Domain specification is malformed or violates convexity/trapping rules."""


class OutsideDomainError(ValueError):
    """A phase point's base position lies outside the closed domain."""


class TrappingError(RuntimeError):
    """A traced geodesic exceeded the arclength guard without exiting."""


@dataclass(frozen=True)
class PhasePoint:
    """A point of the unit sphere bundle: position plus direction angle."""

    x: np.ndarray
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(2))
        object.__setattr__(self, "theta", float(self.theta) % (2.0 * math.pi))


@dataclass(frozen=True)
class RayPath:
    """A sampled geodesic through a phase point, spanning [-tau_bwd, tau_fwd].

    ``s`` holds arclength parameters (s=0 at the launch point), ``points``
    the positions and ``thetas`` the direction angles along the curve.  The
    first node is the backward boundary hit and the last node the forward
    one, both refined onto the boundary.
    """

    s: np.ndarray
    points: np.ndarray
    thetas: np.ndarray
    tau_fwd: float
    tau_bwd: float


class Domain:
    """Base class for strictly convex planar domains with a conformal metric."""

    kind: str = "abstract"

    # --- metric -----------------------------------------------------------
    def conformal_factor(self, x: np.ndarray) -> np.ndarray:
        """c(x) with metric e^{2c} * Euclidean; zero for Euclidean domains."""
        return np.zeros(np.shape(x)[:-1])

    def conformal_gradient(self, x: np.ndarray) -> np.ndarray:
        """Euclidean gradient of c, shape (..., 2)."""
        return np.zeros(np.shape(x))

    @property
    def is_euclidean(self) -> bool:
        return True

    # --- boundary ---------------------------------------------------------
    def boundary_level(self, x: np.ndarray) -> np.ndarray:
        """Signed level function, negative inside, zero on the boundary."""
        raise NotImplementedError

    def outward_normal(self, x: np.ndarray) -> np.ndarray:
        """Euclidean unit outward normal at boundary points, shape (..., 2)."""
        raise NotImplementedError

    @property
    def boundary_length(self) -> float:
        """Euclidean arclength of the boundary curve."""
        raise NotImplementedError

    def boundary_point(self, ell: np.ndarray) -> np.ndarray:
        """Boundary point at Euclidean arclength parameter ell (mod length)."""
        raise NotImplementedError

    def boundary_arclength(self, x: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`boundary_point` for points on the boundary."""
        raise NotImplementedError

    def boundary_tangent(self, ell: np.ndarray) -> np.ndarray:
        """Euclidean unit tangent (d boundary_point / d ell), shape (..., 2)."""
        raise NotImplementedError

    def to_spec(self) -> dict:
        """A specification dict that :func:`make_domain` accepts."""
        return getattr(self, "_spec", {"kind": self.kind})

    # --- bulk -------------------------------------------------------------
    @property
    def area(self) -> float:
        """Riemannian area of the domain (equals Euclidean area when c=0)."""
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        """Supremum of geodesic lengths across the domain."""
        raise NotImplementedError

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        return self.boundary_level(x) <= tol

    # --- flow -------------------------------------------------------------
    def exit_forward(
        self, xs: np.ndarray, thetas: np.ndarray, step: float | None = None
    ) -> np.ndarray:
        """Forward exit times for batched phase points (positions (N,2))."""
        raise NotImplementedError

    def flow(
        self,
        xs: np.ndarray,
        thetas: np.ndarray,
        s: np.ndarray,
        step: float | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Geodesic flow: positions and angles after parameter advance s.

        ``s`` may be negative (backward flow) and must not exceed the exit
        times; results beyond the boundary are extrapolated geometrically for
        Euclidean domains and clamped by the caller otherwise.
        """
        raise NotImplementedError

    def unit_vector(self, xs: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        """Metric-unit velocity vector(s) e^{-c} (cos theta, sin theta)."""
        e = np.exp(-self.conformal_factor(xs))
        return np.stack([e * np.cos(thetas), e * np.sin(thetas)], axis=-1)


def _as_batch(xs: np.ndarray, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    return xs, thetas


class DiskDomain(Domain):
    """Euclidean disk of given radius centered at the origin."""

    kind = "disk"

    def __init__(self, radius: float = 1.0):
        if not np.isfinite(radius) or radius <= 0:
            raise InvalidDomainError(f"disk radius must be positive, got {radius}")
        self.radius = float(radius)

    def boundary_level(self, x):
        x = np.asarray(x, dtype=float)
        return np.hypot(x[..., 0], x[..., 1]) - self.radius

    def outward_normal(self, x):
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        return x / np.maximum(r, 1e-300)[..., None]

    @property
    def boundary_length(self) -> float:
        return 2.0 * math.pi * self.radius

    def boundary_point(self, ell):
        ang = np.asarray(ell, dtype=float) / self.radius
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def boundary_arclength(self, x):
        x = np.asarray(x, dtype=float)
        ang = np.arctan2(x[..., 1], x[..., 0]) % (2.0 * math.pi)
        return self.radius * ang

    def boundary_tangent(self, ell):
        ang = np.asarray(ell, dtype=float) / self.radius
        return np.stack([-np.sin(ang), np.cos(ang)], axis=-1)

    def to_spec(self) -> dict:
        return {"kind": "disk", "radius": self.radius}

    @property
    def area(self) -> float:
        return math.pi * self.radius**2

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def exit_forward(self, xs, thetas, step=None):
        xs, thetas = _as_batch(xs, thetas)
        u = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        xu = np.einsum("ij,ij->i", xs, u)
        disc = xu**2 + self.radius**2 - np.einsum("ij,ij->i", xs, xs)
        return -xu + np.sqrt(np.maximum(disc, 0.0))

    def flow(self, xs, thetas, s, step=None):
        xs, thetas = _as_batch(xs, thetas)
        s = np.broadcast_to(np.asarray(s, dtype=float), thetas.shape)
        u = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        return xs + s[..., None] * u, thetas.copy()


class EllipseDomain(Domain):
    """Euclidean ellipse x^2/a^2 + y^2/b^2 <= 1."""

    kind = "ellipse"
    _N_TABLE = 8192

    def __init__(self, a: float, b: float):
        if not (np.isfinite(a) and np.isfinite(b)) or a <= 0 or b <= 0:
            raise InvalidDomainError(f"ellipse semi-axes must be positive, got a={a}, b={b}")
        self.a = float(a)
        self.b = float(b)
        # Arclength table over the parameter angle psi -> (a cos psi, b sin psi).
        psi = np.linspace(0.0, 2.0 * math.pi, self._N_TABLE + 1)
        speed = np.hypot(self.a * np.sin(psi), self.b * np.cos(psi))
        dl = 0.5 * (speed[1:] + speed[:-1]) * np.diff(psi)
        self._psi_table = psi
        self._ell_table = np.concatenate([[0.0], np.cumsum(dl)])
        self._length = float(self._ell_table[-1])

    def boundary_level(self, x):
        x = np.asarray(x, dtype=float)
        return np.hypot(x[..., 0] / self.a, x[..., 1] / self.b) - 1.0

    def outward_normal(self, x):
        x = np.asarray(x, dtype=float)
        g = np.stack([x[..., 0] / self.a**2, x[..., 1] / self.b**2], axis=-1)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-300)

    @property
    def boundary_length(self) -> float:
        return self._length

    def boundary_point(self, ell):
        ell = np.asarray(ell, dtype=float) % self._length
        psi = np.interp(ell, self._ell_table, self._psi_table)
        return np.stack([self.a * np.cos(psi), self.b * np.sin(psi)], axis=-1)

    def boundary_arclength(self, x):
        x = np.asarray(x, dtype=float)
        psi = np.arctan2(x[..., 1] / self.b, x[..., 0] / self.a) % (2.0 * math.pi)
        return np.interp(psi, self._psi_table, self._ell_table)

    def boundary_tangent(self, ell):
        ell = np.asarray(ell, dtype=float) % self._length
        psi = np.interp(ell, self._ell_table, self._psi_table)
        t = np.stack([-self.a * np.sin(psi), self.b * np.cos(psi)], axis=-1)
        return t / np.linalg.norm(t, axis=-1, keepdims=True)

    def to_spec(self) -> dict:
        return {"kind": "ellipse", "a": self.a, "b": self.b}

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b

    @property
    def diameter(self) -> float:
        return 2.0 * max(self.a, self.b)

    def exit_forward(self, xs, thetas, step=None):
        xs, thetas = _as_batch(xs, thetas)
        u = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        sx = np.array([1.0 / self.a, 1.0 / self.b])
        xs_s = xs * sx
        u_s = u * sx
        A = np.einsum("ij,ij->i", u_s, u_s)
        B = np.einsum("ij,ij->i", xs_s, u_s)
        C = np.einsum("ij,ij->i", xs_s, xs_s) - 1.0
        disc = B**2 - A * C
        return (-B + np.sqrt(np.maximum(disc, 0.0))) / A

    def flow(self, xs, thetas, s, step=None):
        xs, thetas = _as_batch(xs, thetas)
        s = np.broadcast_to(np.asarray(s, dtype=float), thetas.shape)
        u = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        return xs + s[..., None] * u, thetas.copy()


class ConformalDomain(Domain):
    """Disk base equipped with the metric e^{2c(x)} * Euclidean.

    ``factor`` maps positions (..., 2) to c values (...,); ``gradient`` maps
    positions to the Euclidean gradient of c (..., 2).  If ``gradient`` is
    omitted it is approximated by central differences.
    """

    kind = "conformal"

    def __init__(
        self,
        radius: float,
        factor: Callable[[np.ndarray], np.ndarray],
        gradient: Callable[[np.ndarray], np.ndarray] | None = None,
        flow_step: float = _DEFAULT_FLOW_STEP,
        validate: bool = True,
    ):
        if not np.isfinite(radius) or radius <= 0:
            raise InvalidDomainError(f"disk radius must be positive, got {radius}")
        self.radius = float(radius)
        self._factor = factor
        if gradient is None:
            h = 1e-6
            ex = np.array([h, 0.0])
            ey = np.array([0.0, h])

            def gradient(x, _f=factor, _ex=ex, _ey=ey, _h=h):
                x = np.asarray(x, dtype=float)
                gx = (_f(x + _ex) - _f(x - _ex)) / (2 * _h)
                gy = (_f(x + _ey) - _f(x - _ey)) / (2 * _h)
                return np.stack([gx, gy], axis=-1)

        self._gradient = gradient
        self.flow_step = float(flow_step)
        c_probe = np.asarray(factor(np.zeros((1, 2))), dtype=float)
        if not np.all(np.isfinite(c_probe)):
            raise InvalidDomainError("conformal factor is not finite at the origin")
        self._area = self._compute_area()
        self._diameter = self._probe_diameter()
        if validate:
            self._validate_non_trapping()

    # metric ---------------------------------------------------------------
    def conformal_factor(self, x):
        return np.asarray(self._factor(np.asarray(x, dtype=float)), dtype=float)

    def conformal_gradient(self, x):
        return np.asarray(self._gradient(np.asarray(x, dtype=float)), dtype=float)

    @property
    def is_euclidean(self) -> bool:
        return False

    # boundary (shared with the disk) ---------------------------------------
    def boundary_level(self, x):
        x = np.asarray(x, dtype=float)
        return np.hypot(x[..., 0], x[..., 1]) - self.radius

    def outward_normal(self, x):
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        return x / np.maximum(r, 1e-300)[..., None]

    @property
    def boundary_length(self) -> float:
        return 2.0 * math.pi * self.radius

    def boundary_point(self, ell):
        ang = np.asarray(ell, dtype=float) / self.radius
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def boundary_arclength(self, x):
        x = np.asarray(x, dtype=float)
        ang = np.arctan2(x[..., 1], x[..., 0]) % (2.0 * math.pi)
        return self.radius * ang

    def boundary_tangent(self, ell):
        ang = np.asarray(ell, dtype=float) / self.radius
        return np.stack([-np.sin(ang), np.cos(ang)], axis=-1)

    def to_spec(self) -> dict:
        return getattr(self, "_spec",
                       {"kind": "conformal", "radius": self.radius, "factor": "custom"})

    @property
    def area(self) -> float:
        return self._area

    @property
    def diameter(self) -> float:
        return self._diameter

    def _compute_area(self) -> float:
        # Riemannian area = integral of e^{2c}; midpoint rule in polar cells.
        n_r, n_p = 256, 512
        r = (np.arange(n_r) + 0.5) * (self.radius / n_r)
        p = (np.arange(n_p) + 0.5) * (2.0 * math.pi / n_p)
        rr, pp = np.meshgrid(r, p, indexing="ij")
        pts = np.stack([rr * np.cos(pp), rr * np.sin(pp)], axis=-1)
        w = rr * (self.radius / n_r) * (2.0 * math.pi / n_p)
        return float(np.sum(np.exp(2.0 * self.conformal_factor(pts)) * w))

    def _probe_diameter(self) -> float:
        # Longest traced geodesic among boundary launches (coarse probe set).
        n = 48
        ell = np.linspace(0.0, self.boundary_length, n, endpoint=False)
        pts = self.boundary_point(ell)
        nrm = self.outward_normal(pts)
        # inward normal directions
        thetas = np.arctan2(-nrm[:, 1], -nrm[:, 0])
        guard = TRAPPING_FACTOR * 2.0 * self.radius * float(np.exp(
            np.max(self.conformal_factor(pts))
        ))
        taus = self._trace_exit(pts, thetas, self.flow_step, guard)[0]
        return float(np.max(taus))

    def _validate_non_trapping(self) -> None:
        rng = np.random.default_rng(7)
        n = 64
        xs = np.empty((n, 2))
        count = 0
        while count < n:
            cand = rng.uniform(-self.radius, self.radius, size=(n, 2))
            keep = cand[np.hypot(cand[:, 0], cand[:, 1]) < 0.95 * self.radius]
            take = min(n - count, len(keep))
            xs[count : count + take] = keep[:take]
            count += take
        thetas = rng.uniform(0.0, 2.0 * math.pi, size=n)
        guard = TRAPPING_FACTOR * self._diameter
        tf = self._trace_exit(xs, thetas, self.flow_step, guard)[0]
        tb = self._trace_exit(xs, (thetas + math.pi), self.flow_step, guard)[0]
        if not (np.all(np.isfinite(tf)) and np.all(np.isfinite(tb))):
            raise InvalidDomainError("conformal domain failed the non-trapping probe")

    # flow -------------------------------------------------------------------
    def _rk4_step(self, x, th, h):
        def deriv(x, th):
            e = np.exp(-self.conformal_factor(x))
            g = self.conformal_gradient(x)
            ct, st = np.cos(th), np.sin(th)
            dx = np.stack([e * ct, e * st], axis=-1)
            dth = e * (-g[..., 0] * st + g[..., 1] * ct)
            return dx, dth

        h = np.asarray(h, dtype=float)
        hx = h[..., None]
        k1x, k1t = deriv(x, th)
        k2x, k2t = deriv(x + 0.5 * hx * k1x, th + 0.5 * h * k1t)
        k3x, k3t = deriv(x + 0.5 * hx * k2x, th + 0.5 * h * k2t)
        k4x, k4t = deriv(x + hx * k3x, th + h * k3t)
        xn = x + (hx / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        tn = th + (h / 6.0) * (k1t + 2 * k2t + 2 * k3t + k4t)
        return xn, tn

    def _trace_exit(self, xs, thetas, step, guard):
        """March RK4 until the boundary is crossed; bisect the last step.

        Returns (tau, end_points, end_thetas).  Raises TrappingError if any
        ray survives past the guard arclength.
        """
        xs, thetas = _as_batch(xs, thetas)
        n = len(xs)
        x = xs.copy()
        th = thetas.copy()
        s = np.zeros(n)
        tau = np.full(n, np.nan)
        end_x = np.zeros((n, 2))
        end_th = np.zeros(n)
        active = np.ones(n, dtype=bool)
        # points launched outward on the boundary exit immediately
        lev0 = self.boundary_level(xs)
        on_b = lev0 > -BOUNDARY_TOL
        if np.any(on_b):
            nrm = self.outward_normal(xs[on_b])
            v = self.unit_vector(xs[on_b], thetas[on_b])
            out = np.einsum("ij,ij->i", nrm, v) > 0.0
            idx = np.flatnonzero(on_b)[out]
            tau[idx] = 0.0
            end_x[idx] = xs[idx]
            end_th[idx] = thetas[idx]
            active[idx] = False
        max_steps = int(math.ceil(guard / step)) + 2
        for _ in range(max_steps):
            if not np.any(active):
                break
            xa, ta = x[active], th[active]
            xn, tn = self._rk4_step(xa, ta, np.full(len(xa), step))
            crossed = self.boundary_level(xn) > 0.0
            if np.any(crossed):
                ci = np.flatnonzero(active)[crossed]
                lo = np.zeros(crossed.sum())
                hi = np.full(crossed.sum(), step)
                x_lo, t_lo = xa[crossed], ta[crossed]
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    xm, tm = self._rk4_step(x_lo, t_lo, mid)
                    inside = self.boundary_level(xm) <= 0.0
                    lo = np.where(inside, mid, lo)
                    hi = np.where(inside, hi, mid)
                    if np.all(hi - lo < BOUNDARY_TOL):
                        break
                hit = 0.5 * (lo + hi)
                xh, thh = self._rk4_step(x_lo, t_lo, hit)
                tau[ci] = s[ci] + hit
                end_x[ci] = xh
                end_th[ci] = thh
                keep = ~crossed
                new_active = active.copy()
                new_active[ci] = False
                x[active] = xn
                th[active] = tn
                s[active] += step
                active = new_active
                del keep
            else:
                x[active] = xn
                th[active] = tn
                s[active] += step
        if np.any(active):
            raise TrappingError(
                f"{int(active.sum())} geodesic(s) exceeded the trapping guard "
                f"({guard:.3g} arclength)"
            )
        return tau, end_x, end_th

    def exit_forward(self, xs, thetas, step=None):
        step = self.flow_step if step is None else float(step)
        guard = TRAPPING_FACTOR * self.diameter
        return self._trace_exit(xs, thetas, step, guard)[0]

    def exit_forward_full(self, xs, thetas, step=None):
        """Exit times together with boundary end points and end angles."""
        step = self.flow_step if step is None else float(step)
        guard = TRAPPING_FACTOR * self.diameter
        return self._trace_exit(xs, thetas, step, guard)

    def flow(self, xs, thetas, s, step=None):
        """Advance phase points by (possibly distinct) parameters s >= 0 or <= 0."""
        step = self.flow_step if step is None else float(step)
        xs, thetas = _as_batch(xs, thetas)
        s = np.asarray(s, dtype=float)
        if s.ndim == 0:
            s = np.full(len(xs), float(s))
        x = xs.copy()
        th = thetas.astype(float).copy()
        sign = np.where(s < 0, -1.0, 1.0)
        remaining = np.abs(s).copy()
        while True:
            h = np.minimum(remaining, step)
            act = h > 0
            if not np.any(act):
                break
            xn, tn = self._rk4_step(x[act], th[act], sign[act] * h[act])
            x[act] = xn
            th[act] = tn
            remaining[act] -= h[act]
        return x, th


_PRESET_FACTORS: dict[str, Callable[..., tuple[Callable, Callable]]] = {}


def _register_preset(name: str):
    def deco(fn):
        _PRESET_FACTORS[name] = fn
        return fn

    return deco


@_register_preset("zero")
def _factor_zero():
    return (lambda x: np.zeros(np.shape(x)[:-1]),
            lambda x: np.zeros(np.shape(x)))


@_register_preset("quadratic")
def _factor_quadratic(beta: float = 0.1):
    beta = float(beta)

    def c(x):
        x = np.asarray(x, dtype=float)
        return beta * (x[..., 0] ** 2 + x[..., 1] ** 2)

    def grad(x):
        x = np.asarray(x, dtype=float)
        return 2.0 * beta * x

    return c, grad


def make_domain(spec) -> Domain:
    """Build a validated :class:`Domain` from a specification.

    ``spec`` is a mapping with a ``kind`` key:

    - ``{"kind": "disk", "radius": r}``
    - ``{"kind": "ellipse", "a": a, "b": b}``
    - ``{"kind": "conformal", "radius": r, "factor": {"name": ..., ...}}``
      where ``factor`` may also be a callable (then ``gradient`` optionally
      accompanies it).

    Raises :class:`InvalidDomainError` for malformed parameters and
    :class:`TrappingError` if the non-trapping probe fails.
    """
    if isinstance(spec, Domain):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise InvalidDomainError(f"domain spec must be a dict with a 'kind': {spec!r}")
    kind = spec["kind"]
    if kind == "disk":
        return DiskDomain(radius=spec.get("radius", 1.0))
    if kind == "ellipse":
        if "a" not in spec or "b" not in spec:
            raise InvalidDomainError("ellipse spec requires semi-axes 'a' and 'b'")
        return EllipseDomain(a=spec["a"], b=spec["b"])
    if kind == "conformal":
        radius = spec.get("radius", 1.0)
        factor = spec.get("factor", {"name": "zero"})
        gradient = spec.get("gradient")
        serializable = None
        if isinstance(factor, dict):
            params = {k: v for k, v in factor.items() if k != "name"}
            name = factor.get("name", "zero")
            if name not in _PRESET_FACTORS:
                raise InvalidDomainError(
                    f"unknown conformal factor preset {name!r}; "
                    f"available: {sorted(_PRESET_FACTORS)}"
                )
            serializable = {"kind": "conformal", "radius": float(radius),
                            "factor": dict(factor)}
            factor, gradient = _PRESET_FACTORS[name](**params)
        elif not callable(factor):
            raise InvalidDomainError("conformal 'factor' must be a preset dict or callable")
        dom = ConformalDomain(
            radius=radius,
            factor=factor,
            gradient=gradient,
            flow_step=spec.get("flow_step", _DEFAULT_FLOW_STEP),
        )
        if serializable is not None:
            dom._spec = serializable
        return dom
    raise InvalidDomainError(f"unknown domain kind {kind!r}")


def _check_inside(dom: Domain, x: np.ndarray) -> None:
    if np.any(dom.boundary_level(x) > 1e-9):
        raise OutsideDomainError(f"point {x!r} lies outside the closed domain")


def exit_times(dom: Domain, p: PhasePoint, step: float | None = None) -> tuple[float, float]:
    """Forward and backward exit times (tau_fwd, tau_bwd) at a phase point.

    Both are nonnegative; the backward time vanishes on the incoming
    boundary half and the forward time on the outgoing half.
    """
    _check_inside(dom, p.x)
    tf = dom.exit_forward(p.x[None, :], np.array([p.theta]), step=step)[0]
    tb = dom.exit_forward(p.x[None, :], np.array([p.theta + math.pi]), step=step)[0]
    return float(tf), float(tb)


def trace_geodesic(dom: Domain, p: PhasePoint, step: float = 0.01) -> RayPath:
    """Sample the geodesic through ``p`` from its backward to forward exit.

    Nodes are spaced at most ``step`` apart in arclength with both endpoints
    refined onto the boundary (bisection for conformal metrics, exact chord
    intersection for Euclidean domains).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _check_inside(dom, p.x)
    tau_fwd, tau_bwd = exit_times(dom, p, step=min(step, _DEFAULT_FLOW_STEP))
    total = tau_fwd + tau_bwd
    n_seg = max(1, int(math.ceil(total / step)))
    s = np.linspace(-tau_bwd, tau_fwd, n_seg + 1)
    if dom.is_euclidean:
        u = np.array([math.cos(p.theta), math.sin(p.theta)])
        pts = p.x[None, :] + s[:, None] * u[None, :]
        return RayPath(s=s, points=pts, thetas=np.full_like(s, p.theta),
                       tau_fwd=tau_fwd, tau_bwd=tau_bwd)
    xs = np.repeat(p.x[None, :], len(s), axis=0)
    ths = np.full(len(s), p.theta)
    pts, angs = dom.flow(xs, ths, s, step=min(step, dom.flow_step))
    return RayPath(s=s, points=pts, thetas=angs, tau_fwd=tau_fwd, tau_bwd=tau_bwd)


def boundary_measure_weight(dom: Domain, p: PhasePoint) -> float:
    """|<nu(x), v>_g| at a boundary phase point (the density of d-xi).

    For conformal metrics the metric inner product of the unit normal and a
    unit direction reduces to the Euclidean cosine between them, so the
    weight is |cos| of the angle between the direction and the normal.
    """
    lev = float(dom.boundary_level(p.x))
    if abs(lev) > 1e-7 * max(1.0, dom.diameter):
        raise OutsideDomainError(f"point {p.x!r} is not on the boundary (level {lev:.2e})")
    nrm = dom.outward_normal(p.x)
    d = np.array([math.cos(p.theta), math.sin(p.theta)])
    return float(abs(np.dot(nrm, d)))


def vertical_tau_derivatives(
    dom: Domain, xs: np.ndarray, thetas: np.ndarray, fd_step: float = 1e-5
) -> np.ndarray:
    """Batched d(tau_bwd)/d(theta): closed form on disks, central FD otherwise."""
    xs, thetas = _as_batch(xs, thetas)
    if isinstance(dom, DiskDomain):
        r = np.hypot(xs[:, 0], xs[:, 1]) / dom.radius
        eta = np.arctan2(xs[:, 1], xs[:, 0])
        d = thetas - eta
        root = np.sqrt(np.maximum(1.0 - (r * np.sin(d)) ** 2, 0.0))
        out = np.full(len(xs), np.nan)
        ok = root > 0
        out[ok] = dom.radius * (-r[ok] * np.sin(d[ok])) * (
            1.0 + r[ok] * np.cos(d[ok]) / root[ok]
        )
        return out
    plus = dom.exit_forward(xs, thetas + fd_step + math.pi)
    minus = dom.exit_forward(xs, thetas - fd_step + math.pi)
    return (plus - minus) / (2.0 * fd_step)


def vertical_tau_derivative(
    dom: Domain, p: PhasePoint, fd_step: float = 1e-5
) -> float:
    """Vertical derivative of the backward exit time, d(tau_bwd)/d(theta).

    Closed form on disks; central finite differences of the exit time
    elsewhere.
    """
    _check_inside(dom, p.x)
    if isinstance(dom, DiskDomain):
        r = math.hypot(p.x[0], p.x[1]) / dom.radius
        eta = math.atan2(p.x[1], p.x[0])
        d = p.theta - eta
        root = math.sqrt(max(1.0 - r * r * math.sin(d) ** 2, 0.0))
        if root == 0.0:
            return float("nan")
        return dom.radius * (-r * math.sin(d)) * (1.0 + r * math.cos(d) / root)
    th = np.array([p.theta - fd_step + math.pi, p.theta + fd_step + math.pi])
    xs = np.repeat(p.x[None, :], 2, axis=0)
    tb = dom.exit_forward(xs, th)
    return float((tb[1] - tb[0]) / (2.0 * fd_step))
