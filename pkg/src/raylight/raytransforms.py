"""Ray transforms over the incoming boundary chart and their regularized
inversion.

Static transform: for each incoming boundary ray, the attenuated integral
``int_0^tau S(gamma(s)) exp(-int_0^s omega) ds`` by trapezoidal quadrature
along the traced ray.  Time-dependent transform: the same integral applied
to a space-time integrand sampled at retarded times ``t + s``, evaluated
for every ``t`` on an extended lattice that covers one full traversal
before and after the field's time window.

Both transforms also exist in assembled sparse form (rays x spatial cells),
which is what the least-squares inversion consumes.  The time-dependent
inversion runs per temporal frequency: a DFT along the extended lattice
turns the retarded-time integral into a family of static problems with the
complex weight ``exp(i eta s) * W``, one per frequency; each retained slice
is solved independently and the solutions are transformed back.  Frequency
retention is by cumulative energy (default 99.9%) — high-frequency slices
carry rapidly oscillating attenuation and are increasingly ill-posed, so
dropping the empty ones is both a speedup and a regularizer.

The least-squares solver is conjugate gradients on the normal equations
(regularized), written against the operator's matvec/rmatvec so real and
complex slices share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from raylight.geometry import Domain
from raylight.grid import BoundaryRays, PhaseGrid, SpacetimeField

__all__ = [
    "Sinogram",
    "DiscreteRayOperator",
    "ConvergenceReport",
    "MemoryBudgetError",
    "RayQuadrature",
    "extended_time_nodes",
    "trace_rays",
    "xray_attenuated",
    "lightray_weighted",
    "assemble_operator",
    "invert_xray",
    "invert_lightray",
]


class MemoryBudgetError(RuntimeError):
    """Assembled operator would exceed the configured memory budget."""


@dataclass
class Sinogram:
    """Transform values over a boundary-ray chart.

    ``values`` is (n_rays,) for static transforms or (n_times, n_rays) for
    time-dependent ones, in which case ``t_nodes`` carries the (extended)
    time lattice.
    """

    rays: BoundaryRays
    values: np.ndarray
    weight_id: str = ""
    t_nodes: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.shape[-1] != len(self.rays):
            raise ValueError(
                f"sinogram last axis {self.values.shape} does not match "
                f"{len(self.rays)} rays"
            )
        if self.values.ndim == 2:
            if self.t_nodes is None or len(self.t_nodes) != self.values.shape[0]:
                raise ValueError("time-dependent sinogram needs matching t_nodes")
        elif self.values.ndim != 1:
            raise ValueError("sinogram values must be 1-d or 2-d")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def time_dependent(self) -> bool:
        return self.values.ndim == 2


@dataclass
class ConvergenceReport:
    """Least-squares iteration outcome."""

    converged: bool
    iterations: int
    rel_residual: float
    objective_history: np.ndarray
    message: str = ""


@dataclass
class RayQuadrature:
    """Traced quadrature samples for a ray family (flat over all samples).

    Each ray of length tau is split into ceil(tau/step) equal segments;
    samples sit at the segment endpoints with trapezoid weights.  The
    attenuation integral of omega accumulates along the trace, so the
    factor at arc s is exp(-int_0^s omega) without separate chord walks.
    """

    ray_index: np.ndarray      # (n_samples,) which ray
    xs: np.ndarray             # (n_samples, 2) positions
    thetas: np.ndarray         # (n_samples,) directions
    arcs: np.ndarray           # (n_samples,) arc length from entry
    trap_w: np.ndarray         # (n_samples,) trapezoid weights (sum = tau)
    atten: np.ndarray          # (n_samples,) exp(-int_0^s omega), possibly complex
    n_rays: int

    @property
    def factors(self) -> np.ndarray:
        """Quadrature weight times attenuation per sample."""
        return self.trap_w * self.atten


def trace_rays(dom: Domain, rays: BoundaryRays, omega: Callable | None = None,
               step: float | None = None, weight: Callable | None = None
               ) -> RayQuadrature:
    """March all rays from entry to exit, collecting quadrature samples.

    ``omega`` (function on position x direction, complex allowed)
    accumulates into the exponential attenuation; ``weight`` multiplies the
    attenuation pointwise.
    """
    if step is None:
        step = dom.diameter / 128.0
    tau = rays.tau
    n_seg = np.maximum(1, np.ceil(tau / step - 1e-9).astype(int))
    h = tau / n_seg
    n_rays = len(rays)
    inner = rays.points - 1e-12 * max(1.0, dom.diameter) * dom.outward_normal(rays.points)

    idx_parts, x_parts, th_parts, arc_parts, w_parts, at_parts = [], [], [], [], [], []
    x = inner.copy()
    th = rays.thetas.copy()
    ids = np.arange(n_rays)
    om_prev = None
    if omega is not None:
        om_prev = np.asarray(omega(x, th))
    integral = np.zeros(n_rays, dtype=complex if (
        om_prev is not None and np.iscomplexobj(om_prev)) else float)
    k = 0
    alive = np.ones(n_rays, dtype=bool)
    while np.any(alive):
        w = np.where((k == 0) | (k == n_seg), 0.5 * h, h)
        idx_parts.append(ids[alive])
        x_parts.append(x[alive])
        th_parts.append(th[alive])
        arc_parts.append((k * h)[alive])
        w_parts.append(w[alive])
        at_parts.append(np.exp(-integral[alive]))
        k += 1
        alive = n_seg >= k
        if not np.any(alive):
            break
        xa, ta = dom.flow(x[alive], th[alive], h[alive])
        x[alive] = xa
        th[alive] = ta
        if omega is not None:
            om_here = np.asarray(omega(xa, ta))
            integral[alive] = integral[alive] + 0.5 * h[alive] * (
                om_prev[alive] + om_here)
            om_next = om_prev.astype(integral.dtype, copy=True)
            om_next[alive] = om_here
            om_prev = om_next

    quad = RayQuadrature(
        ray_index=np.concatenate(idx_parts),
        xs=np.concatenate(x_parts),
        thetas=np.concatenate(th_parts),
        arcs=np.concatenate(arc_parts),
        trap_w=np.concatenate(w_parts),
        atten=np.concatenate(at_parts),
        n_rays=n_rays,
    )
    if weight is not None:
        quad.atten = quad.atten * np.asarray(weight(quad.xs, quad.thetas))
    return quad


def _bin_per_ray(values: np.ndarray, quad: RayQuadrature) -> np.ndarray:
    """Sum sample values into per-ray totals."""
    if np.iscomplexobj(values):
        re = np.bincount(quad.ray_index, weights=values.real, minlength=quad.n_rays)
        im = np.bincount(quad.ray_index, weights=values.imag, minlength=quad.n_rays)
        return re + 1j * im
    return np.bincount(quad.ray_index, weights=values, minlength=quad.n_rays)


def _sample_spatial(grid: PhaseGrid, S, quad: RayQuadrature) -> np.ndarray:
    if callable(S):
        return np.asarray(S(quad.xs))
    S = np.asarray(S)
    if S.shape != (grid.n_x,):
        raise ValueError(f"expected spatial field of shape ({grid.n_x},), got {S.shape}")
    return grid.interp_spatial(S, quad.xs)


def xray_attenuated(dom: Domain, grid: PhaseGrid, omega, S,
                    rays: BoundaryRays | None = None,
                    step: float | None = None) -> Sinogram:
    """Attenuated ray transform of a static spatial field.

    ``omega`` is a function on position x direction (or None); ``S`` is a
    sampled field (n_x,) interpolated along rays, or a callable evaluated
    exactly at the quadrature points.
    """
    rays = grid.boundary if rays is None else rays
    if step is None:
        step = grid.dt
    quad = trace_rays(dom, rays, omega=omega, step=step)
    vals = _sample_spatial(grid, S, quad)
    out = _bin_per_ray(quad.factors * vals, quad)
    return Sinogram(rays, out, weight_id="exp(-int omega)" if omega else "unit")


def extended_time_nodes(grid: PhaseGrid, pad: float = 0.0) -> tuple[np.ndarray, int]:
    """Uniform time lattice covering [-diam, T+diam] at the grid's dt.

    Returns (nodes, index of t=0).  The margin guarantees that every ray
    window [t, t+tau] intersecting the field's support is represented, so
    the circular convolution of the frequency-sliced form equals the linear
    one.
    """
    dt = grid.dt
    n_pad = int(math.ceil((grid.domain.diameter + pad) / dt - 1e-9)) + 1
    idx = np.arange(-n_pad, grid.n_t + n_pad)
    return idx * dt, n_pad


def lightray_weighted(dom: Domain, grid: PhaseGrid, W, S,
                      t_nodes: np.ndarray | None = None,
                      rays: BoundaryRays | None = None,
                      step: float | None = None,
                      omega=None) -> Sinogram:
    """Weighted transform along light rays: integrate ``S(t+s, gamma(s))``
    times the weight over each ray, for every launch time on the extended
    lattice.

    ``W`` is a pointwise weight on position x direction (or None);
    ``omega`` optionally adds the accumulated form exp(-int_0^s omega),
    which is how absorption-type weights enter.  ``S`` is a callable
    S(ts, xs) evaluated exactly, or an (n_t, n_x) array on the grid's
    [0, T] lattice, linearly interpolated in time and zero outside.
    """
    rays = grid.boundary if rays is None else rays
    if step is None:
        step = grid.dt
    if t_nodes is None:
        t_nodes, _ = extended_time_nodes(grid)
    t_nodes = np.asarray(t_nodes, dtype=float)
    quad = trace_rays(dom, rays, omega=omega, step=step, weight=W)
    factors = quad.factors

    values_cb = None
    if callable(S):
        values_cb = S
    else:
        arr = np.asarray(S.values if isinstance(S, SpacetimeField) else S)
        if arr.shape != (grid.n_t, grid.n_x):
            raise ValueError(
                f"expected space-time field ({grid.n_t}, {grid.n_x}), got {arr.shape}")
        idx4, w4 = grid.spatial_stencil(quad.xs)
        samp = arr[:, idx4]  # (n_t, n_samples, 4)
        s_cols = np.einsum("tsk,sk->ts", samp, w4)

    out = np.zeros((len(t_nodes), quad.n_rays),
                   dtype=complex if np.iscomplexobj(factors) else float)
    dt = grid.dt
    for i, t0 in enumerate(t_nodes):
        ts = t0 + quad.arcs
        if values_cb is not None:
            vals = np.asarray(values_cb(ts, quad.xs))
            if np.iscomplexobj(vals) and not np.iscomplexobj(out):
                out = out.astype(complex)
        else:
            a = ts / dt
            n0 = np.floor(a).astype(int)
            b = a - n0
            inside0 = (n0 >= 0) & (n0 <= grid.n_t - 1)
            inside1 = (n0 + 1 >= 0) & (n0 + 1 <= grid.n_t - 1)
            v0 = np.where(inside0, s_cols[np.clip(n0, 0, grid.n_t - 1),
                                          np.arange(len(ts))], 0.0)
            v1 = np.where(inside1, s_cols[np.clip(n0 + 1, 0, grid.n_t - 1),
                                          np.arange(len(ts))], 0.0)
            vals = (1.0 - b) * v0 + b * v1
        out[i] = _bin_per_ray(factors * vals, quad)
    wid = []
    if omega is not None:
        wid.append("exp(-int omega)")
    if W is not None:
        wid.append("pointwise W")
    return Sinogram(rays, out, weight_id="*".join(wid) or "unit", t_nodes=t_nodes)


@dataclass
class DiscreteRayOperator:
    """Sparse attenuated ray-quadrature operator: rays x spatial cells."""

    matrix: sp.csr_matrix
    rays: BoundaryRays
    weight_id: str = ""
    eta: float = 0.0
    step: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.matrix.conj().T @ y

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix @ np.ones(self.matrix.shape[1]))


def _operator_from_quadrature(grid: PhaseGrid, quad: RayQuadrature,
                              rays: BoundaryRays, factors: np.ndarray,
                              weight_id: str, eta: float, step: float
                              ) -> DiscreteRayOperator:
    idx4, w4 = grid.spatial_stencil(quad.xs)
    entries = factors[:, None] * w4
    rows = np.repeat(quad.ray_index, 4)
    cols = idx4.ravel()
    mat = sp.coo_matrix(
        (entries.ravel(), (rows, cols)),
        shape=(quad.n_rays, grid.n_x),
    ).tocsr()
    return DiscreteRayOperator(matrix=mat, rays=rays, weight_id=weight_id,
                               eta=eta, step=step)


def assemble_operator(dom: Domain, grid: PhaseGrid, omega=None, *,
                      weight=None, eta: float = 0.0,
                      rays: BoundaryRays | None = None,
                      step: float | None = None,
                      budget_mb: float = 600.0,
                      quad: RayQuadrature | None = None) -> DiscreteRayOperator:
    """Assemble the sparse transform matrix A[ray, cell].

    A row is the ray quadrature of the spatial interpolation stencils,
    weighted by exp(-int omega) * W * exp(i eta s); applying A to a sampled
    field reproduces the matrix-free transform.  ``quad`` allows reusing a
    traced geometry across frequency slices.
    """
    rays = grid.boundary if rays is None else rays
    if step is None:
        step = grid.dt
    n_samples_est = int(np.sum(np.maximum(
        1, np.ceil(rays.tau / step - 1e-9))) + len(rays))
    complex_entries = eta != 0.0
    bytes_per = 16 if complex_entries else 8
    est_mb = n_samples_est * 4 * (bytes_per + 12) / 1e6
    if est_mb > budget_mb:
        raise MemoryBudgetError(
            f"assembled operator needs ~{est_mb:.0f} MB > budget {budget_mb:.0f} MB; "
            "increase the budget, coarsen the ray step, or thin the ray set")
    if quad is None:
        quad = trace_rays(dom, rays, omega=omega, step=step, weight=weight)
    factors = quad.factors
    if eta != 0.0:
        factors = factors * np.exp(1j * eta * quad.arcs)
    wid = []
    if omega is not None:
        wid.append("exp(-int omega)")
    if weight is not None:
        wid.append("pointwise W")
    if eta != 0.0:
        wid.append(f"exp(i*{eta:.6g}*s)")
    return _operator_from_quadrature(grid, quad, rays, factors,
                                     "*".join(wid) or "unit", eta, step)


# ---------------------------------------------------------------------------
# regularized least squares (conjugate gradients on the normal equations)
# ---------------------------------------------------------------------------

def cgls(apply_A: Callable, apply_AH: Callable, b: np.ndarray, n_cols: int,
         reg: float = 0.0, tol: float = 1e-8, max_iter: int = 500
         ) -> tuple[np.ndarray, ConvergenceReport]:
    """Minimize ||A x - b||^2 + reg ||x||^2 from x = 0.

    Stops when the normal-equation residual ||A^H(Ax-b) + reg x|| drops
    below ``tol`` relative to its initial value.  The recorded objective
    history is monotone non-increasing (conjugate-gradient property of the
    positive semidefinite normal operator).
    """
    b = np.asarray(b)
    x = np.zeros(n_cols, dtype=b.dtype if np.iscomplexobj(b) else float)
    r = b.astype(x.dtype, copy=True)
    s = apply_AH(r)
    x = np.zeros(n_cols, dtype=s.dtype)
    gamma = float(np.vdot(s, s).real)
    gamma0 = gamma
    if gamma0 == 0.0:
        return x, ConvergenceReport(True, 0, 0.0, np.array([float(np.vdot(b, b).real)]),
                                    "zero right-hand side")
    p = s.copy()
    obj = [float(np.vdot(r, r).real)]
    it = 0
    for it in range(1, max_iter + 1):
        q = apply_A(p)
        delta = float(np.vdot(q, q).real) + reg * float(np.vdot(p, p).real)
        if delta <= 0.0:
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        obj.append(float(np.vdot(r, r).real) + reg * float(np.vdot(x, x).real))
        s = apply_AH(r) - reg * x
        gamma_new = float(np.vdot(s, s).real)
        if gamma_new <= (tol * tol) * gamma0:
            gamma = gamma_new
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    rel = math.sqrt(gamma / gamma0)
    converged = rel < tol
    return x, ConvergenceReport(converged, it, rel, np.asarray(obj),
                                "" if converged else "iteration cap reached")


def invert_xray(A: DiscreteRayOperator, data, reg: float = 1e-8, *,
                tol: float = 1e-8, max_iter: int = 500
                ) -> tuple[np.ndarray, ConvergenceReport]:
    """Regularized least-squares inversion of an assembled ray operator."""
    b = np.asarray(data.values if isinstance(data, Sinogram) else data)
    if b.shape != (A.shape[0],):
        raise ValueError(f"data shape {b.shape} does not match {A.shape[0]} rays")
    x, report = cgls(A.apply, A.apply_adjoint, b, A.shape[1],
                     reg=reg, tol=tol, max_iter=max_iter)
    if np.iscomplexobj(x) and not np.iscomplexobj(b):
        x = x.real
    return x, report


def invert_lightray(dom: Domain, grid: PhaseGrid, W, data: Sinogram,
                    reg: float = 1e-8, *, omega=None,
                    energy_fraction: float = 0.999,
                    step: float | None = None, tol: float = 1e-8,
                    max_iter: int = 500, budget_mb: float = 600.0
                    ) -> tuple[SpacetimeField, dict]:
    """Invert the weighted light-ray transform by frequency slicing.

    DFT the data along the extended time lattice; each temporal frequency
    eta yields a static problem with weight exp(i eta s) * W, solved by
    regularized least squares; the slice solutions transform back and the
    [0, T] window is returned.  Only frequencies carrying the requested
    cumulative energy fraction are solved (conjugate pairs solved once for
    real data).
    """
    if not data.time_dependent:
        raise ValueError("invert_lightray needs a time-dependent sinogram")
    t_nodes = np.asarray(data.t_nodes, dtype=float)
    dt = grid.dt
    steps = np.diff(t_nodes)
    if not np.allclose(steps, dt, rtol=0, atol=1e-9 * max(dt, 1.0)):
        raise ValueError("sinogram time lattice must be uniform at the grid's dt")
    i0 = int(round(-t_nodes[0] / dt))
    if i0 < 0 or i0 + grid.n_t > len(t_nodes):
        raise ValueError("sinogram time lattice does not cover [0, T]")
    if step is None:
        step = grid.dt

    V = np.asarray(data.values)
    n_ext = V.shape[0]
    D = np.fft.fft(V, axis=0)
    etas = 2.0 * math.pi * np.fft.fftfreq(n_ext, d=dt)
    energy = np.sum(np.abs(D) ** 2, axis=1)
    total = float(energy.sum())
    recon_hat = np.zeros((n_ext, grid.n_x), dtype=complex)
    report = {"retained": [], "reports": {}, "energy_fraction": 0.0,
              "total_slices": n_ext}
    if total == 0.0:
        vals = np.zeros((grid.n_t, grid.n_x))
        return SpacetimeField(grid, vals, name="lightray reconstruction"), report

    quad = trace_rays(dom, data.rays, omega=omega, step=step, weight=W)
    real_data = not np.iscomplexobj(V)
    # conjugate-pair shortcut: valid when data and ray weights are real,
    # since then the slice at -eta is the conjugate of the slice at +eta
    real_pairing = real_data and not np.iscomplexobj(quad.atten)
    half = n_ext // 2
    if real_pairing:
        groups = []
        for k in range(half + 1):
            partner = (-k) % n_ext
            if partner != k:
                groups.append((energy[k] + energy[partner], k, partner))
            else:
                groups.append((energy[k], k, None))
    else:
        groups = [(energy[k], k, None) for k in range(n_ext)]
    groups.sort(key=lambda g: -g[0])

    captured = 0.0
    target = energy_fraction * total
    for e, k, partner in groups:
        if captured >= target or e == 0.0:
            break
        A = assemble_operator(dom, grid, omega, weight=W, eta=float(etas[k]),
                              rays=data.rays, step=step, budget_mb=budget_mb,
                              quad=quad)
        xk, rep = cgls(A.apply, A.apply_adjoint, D[k].astype(complex),
                       grid.n_x, reg=reg, tol=tol, max_iter=max_iter)
        recon_hat[k] = xk
        report["retained"].append(int(k))
        report["reports"][int(k)] = rep
        if partner is not None:
            recon_hat[partner] = np.conj(xk)
            report["retained"].append(int(partner))
        captured += e
    report["energy_fraction"] = captured / total

    X = np.fft.ifft(recon_hat, axis=0)
    window = X[i0:i0 + grid.n_t]
    report["imag_max"] = float(np.max(np.abs(window.imag))) if real_data else 0.0
    vals = window.real if real_data else window
    return SpacetimeField(grid, np.ascontiguousarray(vals),
                          name="lightray reconstruction"), report
