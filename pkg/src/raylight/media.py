"""Coefficient sets (absorption, scattering kernel, nonlinearity) and the
admissibility checks used throughout the solvers.

A :class:`Medium` bundles three coefficient functions with their bound
constants:

- ``sigma(xs, thetas)``: absorption on the sphere bundle, real, >= 0;
- ``mu(xs, thetas, thetas_prime)``: scattering kernel on paired directions,
  real, >= 0 (use :class:`SeparableKernel` for product kernels so grid
  sampling stays cheap);
- ``q(ts, xs)``: the coefficient multiplying the degree-``m`` nonlinearity.

Two admissibility checks are provided.  ``validate_omega`` enforces the
subcritical scattering class: bounds 0 <= sigma <= sigma0, 0 <= mu <= mu0,
and both direction-slot integrals of mu dominated by sigma at every grid
sample.  ``validate_class_M`` checks the structural conditions used by the
Riemannian stationary-phase machinery: kernel symmetry in its direction
pair, and support excluded near the angles where the vertical derivative of
the backward exit time vanishes (the operational sufficient condition; the
cutoff defaults to 0.05 x diameter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from raylight.geometry import Domain, vertical_tau_derivatives
from raylight.grid import PhaseGrid

__all__ = [
    "Medium",
    "SeparableKernel",
    "OmegaReport",
    "ClassMReport",
    "make_medium",
    "validate_omega",
    "validate_class_M",
    "sigma_constant",
    "sigma_gaussian",
    "sigma_linear_clipped",
    "mu_isotropic",
    "mu_separable_subcritical",
    "mu_support_cutoff",
    "q_constant",
    "q_gaussian_bump",
    "q_sum_of_bumps",
]

KERNEL_SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class SeparableKernel:
    """Product kernel scale * factor(x, v) * factor(x, v')."""

    factor: Callable[[np.ndarray, np.ndarray], np.ndarray]
    scale: float = 1.0

    def __call__(self, xs, thetas, thetas_prime):
        return (
            self.scale
            * np.asarray(self.factor(xs, thetas))
            * np.asarray(self.factor(xs, thetas_prime))
        )

    def factor_grid(self, grid: PhaseGrid) -> np.ndarray:
        xs, th = grid.phase_points()
        return np.asarray(self.factor(xs, th)).reshape(grid.n_x, grid.n_theta)


@dataclass
class Medium:
    """Absorption, scattering, and nonlinearity coefficients with bounds."""

    sigma: Callable | None = None
    mu: Callable | None = None
    q: Callable | None = None
    m: int = 2
    sigma0: float = 0.0
    mu0: float = 0.0

    def __post_init__(self) -> None:
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"nonlinearity power m must be an integer >= 2, got {self.m}")
        self.m = int(self.m)
        if self.sigma0 < 0 or self.mu0 < 0:
            raise ValueError("bound constants must be nonnegative")

    # --- pointwise sampling -------------------------------------------------
    def sigma_at(self, xs: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self.sigma is None:
            return np.zeros(len(xs))
        return np.asarray(self.sigma(xs, np.asarray(thetas, dtype=float)), dtype=float)

    def q_at(self, ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self.q is None:
            return np.zeros(np.broadcast_shapes(np.shape(ts), (len(xs),)))
        return np.asarray(self.q(np.asarray(ts, dtype=float), xs), dtype=float)

    def mu_at(self, xs, thetas, thetas_prime) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self.mu is None:
            return np.zeros(len(xs))
        return np.asarray(self.mu(xs, thetas, thetas_prime), dtype=float)

    # --- grid sampling --------------------------------------------------
    def sigma_grid(self, grid: PhaseGrid) -> np.ndarray:
        """Absorption sampled on (n_x, n_theta) nodes."""
        xs, th = grid.phase_points()
        return self.sigma_at(xs, th).reshape(grid.n_x, grid.n_theta)

    def q_grid(self, grid: PhaseGrid) -> np.ndarray:
        """Nonlinearity coefficient sampled on (n_t, n_x) nodes."""
        if self.q is None:
            return np.zeros((grid.n_t, grid.n_x))
        tt = np.repeat(grid.t_nodes, grid.n_x)
        xx = np.tile(grid.x_nodes, (grid.n_t, 1))
        return self.q_at(tt, xx).reshape(grid.n_t, grid.n_x)

    def mu_kernel(self, grid: PhaseGrid) -> np.ndarray:
        """Scattering kernel sampled as (n_x, n_theta, n_theta)."""
        if self.mu is None:
            return np.zeros((grid.n_x, grid.n_theta, grid.n_theta))
        if isinstance(self.mu, SeparableKernel):
            g = self.mu.factor_grid(grid)
            return self.mu.scale * np.einsum("xa,xb->xab", g, g)
        xs = np.repeat(grid.x_nodes, grid.n_theta**2, axis=0)
        ta = np.tile(np.repeat(grid.theta_nodes, grid.n_theta), grid.n_x)
        tb = np.tile(grid.theta_nodes, grid.n_x * grid.n_theta)
        vals = self.mu_at(xs, ta, tb)
        return vals.reshape(grid.n_x, grid.n_theta, grid.n_theta)


@dataclass(frozen=True)
class OmegaReport:
    """Outcome of the subcritical-class check with worst-case diagnostics."""

    passed: bool
    details: dict

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class ClassMReport:
    """Structural kernel check: symmetry and support away from turning angles."""

    symmetric: bool
    support_ok: bool
    details: dict

    @property
    def passed(self) -> bool:
        return self.symmetric and self.support_ok

    def __bool__(self) -> bool:
        return self.passed


def make_medium(
    sigma=None,
    mu=None,
    q=None,
    m: int = 2,
    sigma0: float | None = None,
    mu0: float | None = None,
    grid: PhaseGrid | None = None,
) -> Medium:
    """Assemble a :class:`Medium`, inferring bound constants when a grid is given.

    ``sigma``/``mu``/``q`` may be callables (standard signatures), numeric
    constants, or None.  Missing ``sigma0``/``mu0`` are taken as grid maxima
    when ``grid`` is provided, else from constant inputs, else zero.
    """
    sig_const = isinstance(sigma, (int, float))
    mu_const = isinstance(mu, (int, float))
    if sig_const:
        sigma = sigma_constant(float(sigma)) if sigma else None
    if mu_const:
        mu = mu_isotropic(float(mu)) if mu else None
    if isinstance(q, (int, float)):
        q = q_constant(float(q)) if q else None
    med = Medium(sigma=sigma, mu=mu, q=q, m=m, sigma0=0.0, mu0=0.0)
    if sigma0 is None:
        sigma0 = float(np.max(med.sigma_grid(grid))) if grid is not None else (
            float(np.max(med.sigma_at(np.zeros((1, 2)), np.zeros(1)))) if sigma else 0.0
        )
    if mu0 is None:
        mu0 = float(np.max(med.mu_kernel(grid))) if grid is not None else (
            float(np.max(med.mu_at(np.zeros((1, 2)), np.zeros(1), np.zeros(1))))
            if mu else 0.0
        )
    med.sigma0 = float(sigma0)
    med.mu0 = float(mu0)
    return med


def validate_omega(med: Medium, grid: PhaseGrid) -> OmegaReport:
    """Check the subcritical class on every grid sample.

    Requires 0 <= sigma <= sigma0 and 0 <= mu <= mu0 pointwise, and both
    direction-slot integrals of the kernel (uniform angular rule) dominated
    by sigma.  Violations are reported, not raised.
    """
    sig = med.sigma_grid(grid)
    ker = med.mu_kernel(grid)
    dth = grid.dtheta
    out_int = ker.sum(axis=2) * dth  # integral over the second slot
    in_int = ker.sum(axis=1) * dth  # integral over the first slot
    tol = 1e-12 * max(1.0, med.sigma0)
    checks = {
        "sigma_nonneg": float(sig.min()),
        "sigma_bound_margin": float(med.sigma0 - sig.max()),
        "mu_nonneg": float(ker.min()),
        "mu_bound_margin": float(med.mu0 - ker.max()),
        "outgoing_margin": float((sig - out_int).min()),
        "incoming_margin": float((sig - in_int).min()),
    }
    passed = (
        checks["sigma_nonneg"] >= -tol
        and checks["sigma_bound_margin"] >= -tol
        and checks["mu_nonneg"] >= -tol
        and checks["mu_bound_margin"] >= -tol
        and checks["outgoing_margin"] >= -tol
        and checks["incoming_margin"] >= -tol
    )
    worst = np.unravel_index(np.argmin(sig - out_int), sig.shape)
    checks["worst_sample"] = {
        "x": grid.x_nodes[worst[0]].tolist(),
        "theta": float(grid.theta_nodes[worst[1]]),
    }
    return OmegaReport(passed=passed, details=checks)


def validate_class_M(
    med: Medium, dom: Domain, grid: PhaseGrid, cutoff: float | None = None
) -> ClassMReport:
    """Structural check for the stationary-phase kernel class (2D only).

    ``symmetric``: the kernel equals its direction-swapped version to 1e-12.
    ``support_ok``: the kernel vanishes in its second direction slot wherever
    the vertical derivative of the backward exit time is below ``cutoff``
    (default 0.05 x diameter).
    """
    if grid.x_nodes.shape[1] != 2:
        raise ValueError("class check requires a two-dimensional domain")
    if cutoff is None:
        cutoff = 0.05 * dom.diameter
    ker = med.mu_kernel(grid)
    asym = float(np.max(np.abs(ker - np.swapaxes(ker, 1, 2))))
    symmetric = asym < KERNEL_SYMMETRY_TOL

    xs = np.repeat(grid.x_nodes, grid.n_theta, axis=0)
    th = np.tile(grid.theta_nodes, grid.n_x)
    vtd = np.abs(vertical_tau_derivatives(dom, xs, th)).reshape(
        grid.n_x, grid.n_theta
    )
    vtd = np.nan_to_num(vtd, nan=0.0)  # turning angles themselves count as small
    near_zero = vtd < cutoff  # (n_x, n_theta') mask on the second slot
    offending = np.abs(ker) * near_zero[:, None, :]
    worst_val = float(offending.max())
    support_ok = worst_val == 0.0
    wi = np.unravel_index(np.argmax(offending), offending.shape)
    details = {
        "max_asymmetry": asym,
        "cutoff": float(cutoff),
        "worst_support_value": worst_val,
        "worst_support_sample": {
            "x": grid.x_nodes[wi[0]].tolist(),
            "theta": float(grid.theta_nodes[wi[1]]),
            "theta_prime": float(grid.theta_nodes[wi[2]]),
        },
    }
    return ClassMReport(symmetric=symmetric, support_ok=support_ok, details=details)


# --------------------------------------------------------------------------
# coefficient presets
# --------------------------------------------------------------------------

def sigma_constant(value: float):
    """sigma identically equal to ``value``."""
    value = float(value)

    def fn(xs, thetas):
        return np.full(len(np.atleast_2d(xs)), value)

    return fn


def sigma_gaussian(amplitude: float, center=(0.0, 0.0), width: float = 0.3,
                   floor: float = 0.0):
    """Radially symmetric absorption bump, optionally on a constant floor."""
    c = np.asarray(center, dtype=float)
    amplitude, width, floor = float(amplitude), float(width), float(floor)

    def fn(xs, thetas):
        xs = np.atleast_2d(xs)
        r2 = np.sum((xs - c) ** 2, axis=-1)
        return floor + amplitude * np.exp(-r2 / (2 * width**2))

    return fn


def sigma_linear_clipped(base: float = 1.0, slope: float = 0.5):
    """sigma(x, v) = max(base + slope * x_1, 0)."""

    def fn(xs, thetas):
        xs = np.atleast_2d(xs)
        return np.maximum(base + slope * xs[:, 0], 0.0)

    return fn


def mu_isotropic(value: float):
    """Direction-independent kernel mu = value."""
    value = float(value)

    def fn(xs, thetas, thetas_prime):
        shape = np.broadcast_shapes(
            (len(np.atleast_2d(xs)),), np.shape(thetas), np.shape(thetas_prime)
        )
        return np.full(shape, value)

    return fn


def mu_separable_subcritical(sigma_fn, sigma_max: float, fraction: float = 0.9):
    """Product kernel fraction * sigma(x,v) sigma(x,v') / (2 pi sigma_max).

    Both slot integrals are then at most fraction * sigma, so the subcritical
    check passes by construction.
    """
    scale = fraction / (2.0 * math.pi * float(sigma_max))
    return SeparableKernel(factor=sigma_fn, scale=scale)


def mu_support_cutoff(dom: Domain, scale: float, threshold: float | None = None,
                      ramp: float = 2.0):
    """Symmetric kernel supported away from turning angles.

    The factor is a smooth ramp of |d tau_bwd / d theta|: zero at or below
    ``threshold`` (default 0.05 x diameter, matching the class check) and one
    beyond ``ramp * threshold`` (smoothstep between), so the kernel vanishes
    in both slots wherever the vertical derivative is small.
    """
    threshold = 0.05 * dom.diameter if threshold is None else float(threshold)
    hi = ramp * threshold

    def factor(xs, thetas):
        v = np.abs(vertical_tau_derivatives(dom, xs, thetas))
        v = np.nan_to_num(v, nan=0.0)
        t = np.clip((v - threshold) / (hi - threshold), 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)

    return SeparableKernel(factor=factor, scale=float(scale))


def q_constant(value: float):
    value = float(value)

    def fn(ts, xs):
        shape = np.broadcast_shapes(np.shape(ts), (len(np.atleast_2d(xs)),))
        return np.full(shape, value)

    return fn


def q_gaussian_bump(amplitude: float, center=(0.0, 0.0), width: float = 0.3):
    """Static spatial bump q(t, x) = amplitude * exp(-|x-c|^2 / 2 width^2)."""
    c = np.asarray(center, dtype=float)

    def fn(ts, xs):
        xs = np.atleast_2d(xs)
        r2 = np.sum((xs - c) ** 2, axis=-1)
        vals = amplitude * np.exp(-r2 / (2 * width**2))
        return np.broadcast_to(vals, np.broadcast_shapes(np.shape(ts), vals.shape)).copy()

    return fn


def q_sum_of_bumps(bumps):
    """Sum of static spatial bumps: iterable of (amplitude, center, width)."""
    fns = [q_gaussian_bump(a, c, w) for a, c, w in bumps]

    def fn(ts, xs):
        total = fns[0](ts, xs)
        for f in fns[1:]:
            total = total + f(ts, xs)
        return total

    return fn
