"""Phase-space and space-time discretizations, quadrature, and time FFT.

The spatial mesh is a cell-centered polar grid on the (reference) disk,
mapped affinely for ellipses; cell weights are exact Euclidean areas times
the metric density e^{2c}, so the spatial weights integrate the area form of
the metric.  Directions use a uniform angle grid theta_k = 2 pi k / N_theta
(N_theta even, so reversing a direction is an index roll by N_theta/2).

Incoming boundary rays are sampled on a product chart (ell, alpha): ell is
Euclidean boundary arclength and alpha in (-pi/2, pi/2) the angle from the
inward normal; the ray-measure weight is cos(alpha) e^{c} dell dalpha.

Fields interpolate bilinearly in the polar indices (periodic in the polar
angle, signed-radius continuation through the disk center), and periodic-
linearly in theta.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import fft, ifft, next_fast_len

from raylight.geometry import (
    TANGENTIAL_CUTOFF,
    Domain,
    EllipseDomain,
    make_domain,
)

__all__ = [
    "GridError",
    "BoundaryRays",
    "PhaseGrid",
    "PhaseField",
    "SpacetimeField",
    "build_grid",
    "integrate_santalo",
    "time_fft",
    "save_field",
    "load_field",
]

_MIN_COUNT = 4


class GridError(ValueError):
    """Invalid grid counts or mismatched field shapes."""


@dataclass(frozen=True)
class BoundaryRays:
    """Incoming boundary-ray sampling in the (ell, alpha) product chart."""

    ell: np.ndarray  # (B,) arclength of the entry point
    alpha: np.ndarray  # (B,) angle from the inward normal
    points: np.ndarray  # (B, 2) entry positions
    thetas: np.ndarray  # (B,) direction angles of the entering rays
    weights: np.ndarray  # (B,) ray-measure weights cos(alpha) e^{c} dl da
    tau: np.ndarray  # (B,) forward exit times (chord lengths of the rays)
    n_ell: int
    n_alpha: int
    d_ell: float
    d_alpha: float

    def __len__(self) -> int:
        return len(self.ell)


@dataclass
class PhaseField:
    """Values on the sphere bundle, optionally with a leading time axis."""

    grid: "PhaseGrid"
    values: np.ndarray
    name: str = ""
    units: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        self.validate()

    def validate(self) -> None:
        shape = self.values.shape
        if shape[-2:] != (self.grid.n_x, self.grid.n_theta):
            raise GridError(
                f"phase field shape {shape} does not end in "
                f"({self.grid.n_x}, {self.grid.n_theta})"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError(f"phase field {self.name!r} contains non-finite values")


@dataclass
class SpacetimeField:
    """Scalar values on the time x space grid (no direction dependence)."""

    grid: "PhaseGrid"
    values: np.ndarray
    name: str = ""
    units: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        self.validate()

    def validate(self) -> None:
        shape = self.values.shape
        if shape[-1] != self.grid.n_x or (
            len(shape) >= 2 and shape[0] not in (self.grid.n_t, 1)
        ):
            raise GridError(
                f"space-time field shape {shape} does not match "
                f"(n_t={self.grid.n_t}, n_x={self.grid.n_x})"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError(f"space-time field {self.name!r} contains non-finite values")


class PhaseGrid:
    """Immutable product discretization of [0, T] x SM plus boundary rays."""

    def __init__(
        self,
        dom: Domain,
        T: float,
        n_t: int,
        n_x: int,
        n_theta: int,
        n_r: int | None = None,
        n_phi: int | None = None,
    ):
        if min(n_t, n_x, n_theta) < _MIN_COUNT:
            raise GridError(
                f"all counts must be >= {_MIN_COUNT}, "
                f"got n_t={n_t}, n_x={n_x}, n_theta={n_theta}"
            )
        if not (np.isfinite(T) and T > 0):
            raise GridError(f"horizon T must be positive, got {T}")
        if n_theta % 2:
            raise GridError(f"n_theta must be even (direction reversal), got {n_theta}")
        self.domain = dom
        self.T = float(T)
        self.n_t = int(n_t)
        self.t_nodes = np.linspace(0.0, self.T, self.n_t)
        self.dt = self.T / (self.n_t - 1)

        # --- spatial polar mesh (reference disk, mapped for ellipses) -----
        if isinstance(dom, EllipseDomain):
            self._axes = np.array([dom.a, dom.b])
            ref_radius = 1.0
            jac = dom.a * dom.b
        else:
            self._axes = np.array([1.0, 1.0])
            ref_radius = dom.radius
            jac = 1.0
        if n_r is None:
            n_r = max(2, int(round(math.sqrt(n_x / math.pi))))
        if n_phi is None:
            n_phi = max(4, n_x // n_r)
        if n_phi % 2:
            n_phi += 1
        self.n_r, self.n_phi = n_r, n_phi
        self.dr = ref_radius / n_r
        self.dphi = 2.0 * math.pi / n_phi
        self.r_nodes = (np.arange(n_r) + 0.5) * self.dr
        self.phi_nodes = (np.arange(n_phi) + 0.5) * self.dphi
        rr, pp = np.meshgrid(self.r_nodes, self.phi_nodes, indexing="ij")
        ref_xy = np.stack([rr * np.cos(pp), rr * np.sin(pp)], axis=-1)
        self.x_nodes = (ref_xy * self._axes).reshape(-1, 2)
        self.n_x = n_r * n_phi
        cell_area = (rr * self.dr * self.dphi).reshape(-1) * jac
        dens = np.exp(2.0 * dom.conformal_factor(self.x_nodes))
        self.x_weights = cell_area * dens

        # --- direction grid ------------------------------------------------
        self.n_theta = int(n_theta)
        self.dtheta = 2.0 * math.pi / n_theta
        self.theta_nodes = np.arange(n_theta) * self.dtheta

        # --- incoming boundary rays ----------------------------------------
        self.boundary = self._build_boundary_rays()

        if np.any(self.x_weights <= 0) or np.any(self.boundary.weights < 0):
            raise GridError("non-positive quadrature weights")
        if abs(self.x_weights.sum() - dom.area) > 5e-3 * dom.area:
            raise GridError(
                f"spatial weights sum {self.x_weights.sum():.6g} deviates from "
                f"area {dom.area:.6g} by more than 0.5%"
            )

    # ------------------------------------------------------------------
    def _build_boundary_rays(self) -> BoundaryRays:
        return boundary_ray_chart(self.domain, self.n_phi, self.n_theta)

    # --- indexing and interpolation ------------------------------------
    def phase_points(self) -> tuple[np.ndarray, np.ndarray]:
        """All (position, angle) node pairs, shapes (n_x*n_theta, 2) and (...,)."""
        xs = np.repeat(self.x_nodes, self.n_theta, axis=0)
        th = np.tile(self.theta_nodes, self.n_x)
        return xs, th

    def spatial_stencil(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """4-point bilinear stencil (flat spatial indices, weights) per query.

        Queries in the half-cell band beyond the outermost ring extrapolate
        linearly from the last two rings (capped at the rim), keeping the
        stencil second-order accurate all the way to the boundary; queries
        inside the innermost ring centers interpolate through the center via
        the antipodal column (signed-radius continuation).
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ref = xs / self._axes
        r = np.hypot(ref[:, 0], ref[:, 1])
        phi = np.arctan2(ref[:, 1], ref[:, 0]) % (2.0 * math.pi)

        j = phi / self.dphi - 0.5
        j0 = np.floor(j).astype(int)
        wj = j - j0
        j0 %= self.n_phi
        j1 = (j0 + 1) % self.n_phi

        a = r / self.dr - 0.5
        idx = np.empty((len(xs), 4), dtype=np.int64)
        w = np.empty((len(xs), 4))
        if self.n_r >= 2:
            above = a > self.n_r - 1
            i0 = np.where(above, self.n_r - 2,
                          np.clip(np.floor(a).astype(int), 0, self.n_r - 2))
            wr = np.where(above,
                          np.minimum(a, self.n_r - 0.5) - (self.n_r - 2),
                          np.clip(a - i0, 0.0, 1.0))
        else:
            i0 = np.zeros(len(xs), dtype=int)
            wr = np.zeros(len(xs))
        i1 = np.minimum(i0 + 1, self.n_r - 1)
        # interior / outer-clamp stencil
        idx[:, 0] = i0 * self.n_phi + j0
        idx[:, 1] = i0 * self.n_phi + j1
        idx[:, 2] = i1 * self.n_phi + j0
        idx[:, 3] = i1 * self.n_phi + j1
        w[:, 0] = (1 - wr) * (1 - wj)
        w[:, 1] = (1 - wr) * wj
        w[:, 2] = wr * (1 - wj)
        w[:, 3] = wr * wj
        # signed-radius continuation through the center
        below = a < 0.0
        if np.any(below):
            t = (r[below] / self.dr + 0.5)  # 1 at the first ring, 1/2 at center
            jb0, jb1, wjb = j0[below], j1[below], wj[below]
            half = self.n_phi // 2
            idx[below, 0] = jb0
            idx[below, 1] = jb1
            idx[below, 2] = (jb0 + half) % self.n_phi
            idx[below, 3] = (jb1 + half) % self.n_phi
            w[below, 0] = t * (1 - wjb)
            w[below, 1] = t * wjb
            w[below, 2] = (1 - t) * (1 - wjb)
            w[below, 3] = (1 - t) * wjb
        return idx, w

    def phase_stencil(
        self, xs: np.ndarray, thetas: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """8-point stencil over flattened (space, theta) indices."""
        sp_idx, sp_w = self.spatial_stencil(xs)
        th = np.asarray(thetas, dtype=float) % (2.0 * math.pi)
        k = th / self.dtheta
        k0 = np.floor(k).astype(int)
        wk = k - k0
        k0 %= self.n_theta
        k1 = (k0 + 1) % self.n_theta
        idx = np.empty((len(sp_idx), 8), dtype=np.int64)
        w = np.empty((len(sp_idx), 8))
        idx[:, :4] = sp_idx * self.n_theta + k0[:, None]
        idx[:, 4:] = sp_idx * self.n_theta + k1[:, None]
        w[:, :4] = sp_w * (1 - wk)[:, None]
        w[:, 4:] = sp_w * wk[:, None]
        return idx, w

    def interp_phase(self, F: np.ndarray, xs: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        """Interpolate F (..., n_x, n_theta) at phase points; returns (..., Q)."""
        idx, w = self.phase_stencil(xs, thetas)
        flat = np.asarray(F).reshape(*np.shape(F)[:-2], self.n_x * self.n_theta)
        return np.einsum("...qm,qm->...q", flat[..., idx], w)

    def interp_spatial(self, F: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Interpolate F (..., n_x) at positions; returns (..., Q)."""
        idx, w = self.spatial_stencil(xs)
        return np.einsum("...qm,qm->...q", np.asarray(F)[..., idx], w)

    def flip_theta(self, F: np.ndarray) -> np.ndarray:
        """Reverse all directions: theta -> theta + pi (exact index roll)."""
        return np.roll(F, self.n_theta // 2, axis=-1)

    def boundary_stencil(
        self, ell: np.ndarray, alpha: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """4-point stencil into the flattened (ell, alpha) boundary chart.

        Bilinear between chart midpoints: periodic in arclength, clamped at
        the ends of the aperture in alpha.
        """
        b = self.boundary
        ell = np.asarray(ell, dtype=float) % self.domain.boundary_length
        alpha = np.asarray(alpha, dtype=float)
        i = ell / b.d_ell - 0.5
        i0 = np.floor(i).astype(int)
        wi = i - i0
        i0 %= b.n_ell
        i1 = (i0 + 1) % b.n_ell
        j = (alpha + 0.5 * math.pi) / b.d_alpha - 0.5
        j0 = np.clip(np.floor(j).astype(int), 0, b.n_alpha - 1)
        j1 = np.minimum(j0 + 1, b.n_alpha - 1)
        wj = np.clip(j - j0, 0.0, 1.0)
        idx = np.stack(
            [i0 * b.n_alpha + j0, i0 * b.n_alpha + j1,
             i1 * b.n_alpha + j0, i1 * b.n_alpha + j1], axis=-1
        )
        w = np.stack(
            [(1 - wi) * (1 - wj), (1 - wi) * wj, wi * (1 - wj), wi * wj], axis=-1
        )
        return idx, w

    def interp_boundary(self, H: np.ndarray, ell: np.ndarray,
                        alpha: np.ndarray) -> np.ndarray:
        """Interpolate chart data H (..., n_ell, n_alpha) at (ell, alpha)."""
        idx, w = self.boundary_stencil(ell, alpha)
        b = self.boundary
        flat = np.asarray(H).reshape(*np.shape(H)[:-2], b.n_ell * b.n_alpha)
        return np.einsum("...qm,qm->...q", flat[..., idx], w)

    # --- integrals and norms --------------------------------------------
    def integrate_phase(self, F: np.ndarray):
        """Volume integral over SM with the measure e^{2c} dx dtheta."""
        val = np.einsum("xX,...xX->...", self.phase_weights(), np.asarray(F))
        return val.item() if val.ndim == 0 else val

    def phase_weights(self) -> np.ndarray:
        return self.x_weights[:, None] * self.dtheta * np.ones((1, self.n_theta))

    def norm_l2(self, F: np.ndarray) -> float:
        """Phase L2 norm; a leading time axis adds trapezoidal dt weights."""
        F = np.asarray(F)
        val = np.einsum("xX,...xX->...", self.phase_weights(), np.abs(F) ** 2)
        if val.ndim == 0:
            return float(np.sqrt(val.real))
        tw = np.full(self.n_t, self.dt)
        tw[0] = tw[-1] = 0.5 * self.dt
        return float(np.sqrt(np.sum(val.real * tw)))

    def norm_linf(self, F: np.ndarray) -> float:
        return float(np.max(np.abs(F)))


def boundary_ray_chart(dom: Domain, n_ell: int, n_alpha: int) -> BoundaryRays:
    """Incoming-ray chart over (arclength, incidence angle) cell midpoints.

    Weights carry the full influx measure cos(alpha) e^c dl dalpha; rays more
    tangential than the cutoff keep their chart slot with zero weight.  The
    outgoing chart at the same resolution is this one with reversed
    directions (thetas + pi), slot for slot.
    """
    if n_ell < 1 or n_alpha < 1:
        raise GridError("boundary chart needs at least one cell per axis")
    d_ell = dom.boundary_length / n_ell
    d_alpha = math.pi / n_alpha
    ell = (np.arange(n_ell) + 0.5) * d_ell
    alpha = -0.5 * math.pi + (np.arange(n_alpha) + 0.5) * d_alpha
    ee, aa = np.meshgrid(ell, alpha, indexing="ij")
    ee, aa = ee.ravel(), aa.ravel()
    pts = dom.boundary_point(ee)
    nrm = dom.outward_normal(pts)
    tng = dom.boundary_tangent(ee)
    dvec = -np.cos(aa)[:, None] * nrm + np.sin(aa)[:, None] * tng
    thetas = np.arctan2(dvec[:, 1], dvec[:, 0]) % (2.0 * math.pi)
    cfac = np.exp(dom.conformal_factor(pts))
    weights = np.cos(aa) * cfac * d_ell * d_alpha
    # near-tangential rays keep their chart slot but drop out of quadrature
    weights[np.cos(aa) < TANGENTIAL_CUTOFF] = 0.0
    # nudge entry points just inside so exit solvers accept them
    inner = pts - 1e-12 * max(1.0, dom.diameter) * nrm
    tau = dom.exit_forward(inner, thetas)
    return BoundaryRays(
        ell=ee, alpha=aa, points=pts, thetas=thetas,
        weights=weights, tau=tau,
        n_ell=n_ell, n_alpha=n_alpha, d_ell=d_ell, d_alpha=d_alpha,
    )


def build_grid(dom: Domain, T: float, N_t: int, N_x: int, N_theta: int) -> PhaseGrid:
    """Build the product grid; raises :class:`GridError` for invalid counts."""
    if not isinstance(dom, Domain):
        dom = make_domain(dom)
    return PhaseGrid(dom, T, N_t, N_x, N_theta)


def integrate_santalo(grid: PhaseGrid, F: np.ndarray | PhaseField) -> float | complex:
    """Integrate a fixed-time phase function by sweeping incoming boundary rays.

    Computes sum over rays of weight * int_0^tau F(flow(s)) ds with composite
    trapezoid sampling along each ray; equals the volume integral of F over
    the sphere bundle up to quadrature error.
    """
    if isinstance(F, PhaseField):
        F = F.values
    F = np.asarray(F)
    if F.shape != (grid.n_x, grid.n_theta):
        raise GridError(f"expected shape ({grid.n_x}, {grid.n_theta}), got {F.shape}")
    dom = grid.domain
    rays = grid.boundary
    ds = 0.5 * grid.dr * min(1.0, float(np.min(grid._axes)))
    tau = rays.tau
    B = len(rays)
    x = rays.points.copy()
    th = rays.thetas.copy()
    s = np.zeros(B)
    f_prev = grid.interp_phase(F, x, th)
    total = np.zeros((), dtype=np.result_type(F.dtype, float))
    n_steps = int(math.ceil(float(np.max(tau)) / ds)) + 1
    for _ in range(n_steps):
        h = np.minimum(ds, tau - s)
        act = h > 1e-15
        if not np.any(act):
            break
        if dom.is_euclidean:
            u = np.stack([np.cos(th[act]), np.sin(th[act])], axis=-1)
            x[act] = x[act] + h[act, None] * u
        else:
            x[act], th[act] = dom.flow(x[act], th[act], h[act])
        s[act] += h[act]
        f_next = f_prev.copy()
        f_next[act] = grid.interp_phase(F, x[act], th[act])
        total = total + np.sum(rays.weights[act] * h[act]
                               * 0.5 * (f_prev[act] + f_next[act]))
        f_prev = f_next
    if np.iscomplexobj(F):
        return complex(total)
    return float(total.real)


def time_fft(
    values: np.ndarray,
    dt: float,
    direction: str = "forward",
    t0: float = 0.0,
    n_time: int | None = None,
    pad_factor: int = 2,
) -> tuple[np.ndarray, np.ndarray] | np.ndarray:
    """Discrete approximation of the time Fourier transform along axis 0.

    Forward: values are samples on the uniform grid t_n = t0 + n dt, extended
    by zero beyond the samples.  Returns (eta, spectrum) where
    spectrum[k] = dt * sum_n values[n] e^{-i eta_k t_n} on a frequency grid of
    length >= pad_factor * n (angular frequencies).  Inverse: values is a
    spectrum as produced by the forward call; n_time recovers that many time
    samples.  inverse(forward(f)) equals f to machine precision.
    """
    values = np.asarray(values)
    if direction == "forward":
        n = values.shape[0]
        if n < 2:
            raise GridError("time_fft requires at least 2 time samples")
        n_pad = next_fast_len(max(int(pad_factor) * n, n))
        eta = 2.0 * math.pi * np.fft.fftfreq(n_pad, d=dt)
        spec = fft(values, n=n_pad, axis=0) * dt
        phase = np.exp(-1j * eta * t0)
        return eta, spec * phase.reshape((-1,) + (1,) * (values.ndim - 1))
    if direction == "inverse":
        n_pad = values.shape[0]
        eta = 2.0 * math.pi * np.fft.fftfreq(n_pad, d=dt)
        phase = np.exp(1j * eta * t0).reshape((-1,) + (1,) * (values.ndim - 1))
        full = ifft(values * phase, axis=0) / dt
        if n_time is None:
            return full
        return full[:n_time]
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def save_field(path: str | Path, field: PhaseField | SpacetimeField) -> None:
    """Write a field as raw (re, im) float64 pairs plus a text sidecar.

    ``path`` names the binary payload; the sidecar lives at ``path + '.meta'``.
    Values are row-major with ordering t-major, then x, then theta.
    """
    path = Path(path)
    vals = np.ascontiguousarray(field.values, dtype=np.complex128)
    pairs = np.empty(vals.shape + (2,), dtype="<f8")
    pairs[..., 0] = vals.real
    pairs[..., 1] = vals.imag
    path.write_bytes(pairs.tobytes())
    grid = field.grid
    meta = {
        "dims": "x".join(str(d) for d in vals.shape),
        "dt": repr(grid.dt),
        "T": repr(grid.T),
        "domain": json.dumps(grid.domain.to_spec()),
        "grid": json.dumps({"n_t": grid.n_t, "n_x": grid.n_x,
                            "n_theta": grid.n_theta, "n_r": grid.n_r,
                            "n_phi": grid.n_phi}),
        "kind": type(field).__name__,
        "name": field.name,
        "units": field.units,
        "ordering": "t-major, then x, then theta",
        "encoding": "little-endian float64 (re, im) pairs, row-major",
    }
    lines = [f"{k} = {v}" for k, v in meta.items()]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def load_field(path: str | Path, grid: PhaseGrid | None = None):
    """Read a field written by :func:`save_field`.

    If ``grid`` is omitted, one is rebuilt from the sidecar metadata.
    """
    path = Path(path)
    meta: dict[str, str] = {}
    for line in Path(str(path) + ".meta").read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            meta[k] = v
    shape = tuple(int(d) for d in meta["dims"].split("x"))
    raw = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape + (2,))
    vals = raw[..., 0] + 1j * raw[..., 1]
    if grid is None:
        g = json.loads(meta["grid"])
        dom = make_domain(json.loads(meta["domain"]))
        grid = PhaseGrid(dom, float(meta["T"]), g["n_t"], g["n_x"], g["n_theta"],
                         n_r=g.get("n_r"), n_phi=g.get("n_phi"))
    cls = PhaseField if meta.get("kind") == "PhaseField" else SpacetimeField
    return cls(grid=grid, values=vals, name=meta.get("name", ""),
               units=meta.get("units", ""))
