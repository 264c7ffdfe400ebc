"""Oscillatory transport probes: carried boundary pulse times chord
attenuation, plus a solved remainder.

A pulse prescribed on the incoming boundary and carried along rays is an
exact solution of the scattering-free linear equation once multiplied by the
chord attenuation: the retarded entry time is constant along trajectories,
a unit-speed carrier ``exp(i lam (t - phase))`` rides with it, and the
attenuation factor absorbs the absorption term.  Redistribution breaks
exactness; the correction ("remainder") solves the same linear equation with
the redistributed leading term as source and zero data.  As the carrier
frequency grows, the fiber integral of the oscillating leading term averages
out and the remainder fades — the probe approaches a pure one-ray signal,
which is what the inversion stage exploits.

Two carrier phases are available: ``"euclidean"`` (t - x.v, constant along
straight rays only) and ``"riemannian"`` (t - backward exit time, constant
along any geodesic flow, so it also works on the conformally scaled
domains).  With the riemannian phase the fiber average only decays when the
kernel avoids the turning directions where the vertical derivative of the
exit time vanishes (the structural class checked by
``media.validate_class_M``); on that class the decay follows an
integration-by-parts rate of one power of the frequency, which
``decay_scan`` measures from the scattered-source norms.

Fiber integrals of the oscillatory leading term use a dedicated fine
angular midpoint rule (``n_fine`` points), independent of the field grid,
so the probe source stays accurate at frequencies the fiber grid alone
could not resolve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from raylight.geometry import ConformalDomain, Domain
from raylight.grid import PhaseField, PhaseGrid
from raylight.media import Medium, SeparableKernel, validate_class_M
from raylight.sweep import RaySweep
from raylight.transport import (
    FIXED_POINT_TOL,
    MAX_ITERATIONS,
    BoundaryData,
    solve_adjoint,
    solve_linear,
    pde_residual,
)

__all__ = [
    "BoundaryPulse",
    "GoProbe",
    "DecayTable",
    "ProbeWorkspace",
    "ClassMViolationError",
    "make_pulse",
    "default_lambdas",
    "theta_sigma",
    "build_go",
    "incoming_trace",
    "probe_residual",
    "decay_scan",
]

PHASE_KINDS = ("euclidean", "riemannian")
DEFAULT_N_FINE = 480


class ClassMViolationError(ValueError):
    """Raised when a riemannian-phase probe is requested for a kernel that
    fails the turning-direction support check."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


def _bump(s: np.ndarray) -> np.ndarray:
    """Smooth compactly supported bump: exp(1 - 1/(1-s^2)) on |s|<1, else 0."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    t = np.where(inside, 1.0 - s * s, 1.0)
    return np.where(inside, np.exp(1.0 - 1.0 / t), 0.0)


@dataclass(frozen=True)
class BoundaryPulse:
    """Smooth compactly supported pulse on (time) x (incoming chart).

    Product of three bumps: in time around ``t_center``, in boundary
    arclength around ``ell_center`` (periodic distance), and in the incoming
    angle around ``alpha_center``.  Peak value is ``amplitude``; the support
    is the product of the three open width intervals.
    """

    boundary_length: float
    t_center: float
    t_width: float
    ell_center: float
    ell_width: float
    alpha_center: float = 0.0
    alpha_width: float = 1.2
    amplitude: float = 1.0

    def time_profile(self, ts) -> np.ndarray:
        return _bump((np.asarray(ts, dtype=float) - self.t_center) / self.t_width)

    def chart_profile(self, ells, alphas) -> np.ndarray:
        L = self.boundary_length
        d_ell = (np.asarray(ells, dtype=float) - self.ell_center + 0.5 * L) % L - 0.5 * L
        a = (np.asarray(alphas, dtype=float) - self.alpha_center) / self.alpha_width
        return self.amplitude * _bump(d_ell / self.ell_width) * _bump(a)

    def __call__(self, ts, ells, alphas) -> np.ndarray:
        return self.time_profile(ts) * self.chart_profile(ells, alphas)

    @property
    def sup_norm(self) -> float:
        return float(abs(self.amplitude))


def make_pulse(grid: PhaseGrid, **overrides) -> BoundaryPulse:
    """Default pulse scaled to the grid: supported strictly inside (0, T)
    in time (so probes vanish at t=0) and away from grazing angles."""
    T = float(grid.t_nodes[-1])
    L = grid.domain.boundary_length
    params = dict(
        boundary_length=L,
        t_center=0.4 * T,
        t_width=0.3 * T,
        ell_center=0.0,
        ell_width=0.25 * L,
        alpha_center=0.0,
        alpha_width=1.2,
        amplitude=1.0,
    )
    params.update(overrides)
    return BoundaryPulse(**params)


def default_lambdas(dom: Domain) -> list[float]:
    """Frequency ladder {10,20,40,80,160} scaled by the domain diameter."""
    return [v / dom.diameter for v in (10.0, 20.0, 40.0, 80.0, 160.0)]


# ---------------------------------------------------------------------------
# chord attenuation
# ---------------------------------------------------------------------------

def theta_sigma(med: Medium | None, grid: PhaseGrid, sign: float = 1.0,
                nodes: tuple[np.ndarray, np.ndarray] | None = None):
    """Attenuation exp(-sign * integral of sigma over the backward chord).

    Constant along the flow up to one factor of the absorption: the
    transport derivative of its log is -sign * sigma (the flow
    finite-difference oracle).  Returns a time-independent
    :class:`PhaseField` with (n_x, n_theta) values on grid nodes, or a flat
    vector for custom ``nodes``.
    """
    sig_fn = med.sigma_at if (med is not None and med.sigma is not None) else None
    sw = RaySweep(grid, sig_fn, nodes=nodes, mode="geometry")
    vals = sw.chord_attenuation(float(sign))
    if nodes is None:
        return PhaseField(grid, vals.reshape(grid.n_x, grid.n_theta),
                          name="chord attenuation")
    return vals


# ---------------------------------------------------------------------------
# probe assembly
# ---------------------------------------------------------------------------

@dataclass
class GoProbe:
    """Assembled probe: analytic leading term plus solved remainder."""

    lam: float
    phi: Callable
    phase_kind: str
    adjoint: bool
    leading: PhaseField
    remainder: PhaseField
    report: dict = field(default_factory=dict)

    @property
    def field(self) -> PhaseField:
        return PhaseField(
            self.leading.grid,
            self.leading.values + self.remainder.values,
            name="probe",
        )


class ProbeWorkspace:
    """Shared chord geometry and attenuation tables for one (medium, grid).

    Holds a geometry-only sweep over the grid phase nodes (exit times, entry
    chart, attenuation both signs) plus a second one over the fine fiber
    rule used for the oscillatory redistribution integral.  Building it once
    amortizes the ray walks across the frequencies of a scan; solver sweeps
    for the remainder equation are cached here too.
    """

    def __init__(self, med: Medium, grid: PhaseGrid, n_fine: int = DEFAULT_N_FINE):
        self.med = med
        self.grid = grid
        self.n_fine = int(n_fine)
        sig_fn = med.sigma_at if med.sigma is not None else None
        self._sig_fn = sig_fn
        self.node_sweep = RaySweep(grid, sig_fn, mode="geometry")
        self.theta_fine = (np.arange(self.n_fine) + 0.5) * 2.0 * math.pi / self.n_fine
        self.w_fine = 2.0 * math.pi / self.n_fine
        xs_f = np.repeat(grid.x_nodes, self.n_fine, axis=0)
        th_f = np.tile(self.theta_fine, grid.n_x)
        self.fine_sweep = RaySweep(grid, sig_fn, nodes=(xs_f, th_f), mode="geometry")
        self._solver_sweep = None
        self._solver_sweep_rev = None

    def solver_sweep(self) -> RaySweep:
        if self._solver_sweep is None:
            self._solver_sweep = RaySweep(self.grid, self._sig_fn, mode="auto")
        return self._solver_sweep

    def reversed_solver_sweep(self) -> RaySweep:
        if self._solver_sweep_rev is None:
            med = self.med
            rev = None
            if med.sigma is not None:
                def rev(xs, th):
                    return med.sigma_at(xs, np.asarray(th) + math.pi)
            self._solver_sweep_rev = RaySweep(self.grid, rev, mode="auto")
        return self._solver_sweep_rev


def _carrier_phase(sweep: RaySweep, phase_kind: str) -> np.ndarray:
    """Per-node constant part of the carrier phase (t plus this value)."""
    if phase_kind == "euclidean":
        u = np.stack([np.cos(sweep.nodes_theta), np.sin(sweep.nodes_theta)], axis=-1)
        return -np.einsum("ij,ij->i", sweep.nodes_x, u)
    return -sweep.tau


def _pulse_parts(phi, sweep: RaySweep):
    """(time_fn, chart values at the sweep's entry points)."""
    if isinstance(phi, BoundaryPulse):
        return phi.time_profile, phi.chart_profile(sweep.entry_ell, sweep.entry_alpha)
    return None, None


def leading_values_at(med: Medium, grid: PhaseGrid, lam: float, phi,
                      phase_kind: str, ts, *, sign: float = 1.0,
                      sweep: RaySweep | None = None) -> np.ndarray:
    """Leading-order probe values at arbitrary phase nodes and times.

    Evaluates the boundary pulse carried along the backward chord, times the
    chord attenuation at the given sign and the oscillatory carrier.
    ``sweep`` selects the evaluation nodes (default: the grid phase nodes);
    scalar ``ts`` returns shape (n_nodes,), a vector gives (len(ts), n_nodes).
    """
    if sweep is None:
        sig_fn = med.sigma_at if med.sigma is not None else None
        sweep = RaySweep(grid, sig_fn, mode="geometry")
    node_factor = sweep.chord_attenuation(sign) * np.exp(
        1j * lam * _carrier_phase(sweep, phase_kind)
    )
    ts_arr = np.atleast_1d(np.asarray(ts, dtype=float))
    time_fn, chart = _pulse_parts(phi, sweep)
    if time_fn is not None:
        env = time_fn(ts_arr[:, None] - sweep.tau[None, :]) * chart[None, :]
    else:
        env = np.asarray(
            phi(ts_arr[:, None] - sweep.tau[None, :], sweep.entry_ell[None, :],
                sweep.entry_alpha[None, :])
        )
    vals = env * node_factor[None, :] * np.exp(1j * lam * ts_arr)[:, None]
    if np.asarray(ts).ndim == 0:
        return vals[0]
    return vals


def _leading_values(ws: ProbeWorkspace, lam: float, phi, phase_kind: str,
                    sign: float) -> np.ndarray:
    """Leading term on the grid: pulse carried along rays, times carrier,
    times chord attenuation.  Shape (n_t, n_x, n_theta), complex."""
    g = ws.grid
    vals = leading_values_at(ws.med, g, lam, phi, phase_kind, g.t_nodes,
                             sign=sign, sweep=ws.node_sweep)
    return vals.reshape(g.n_t, g.n_x, g.n_theta)


def _generic_kernel_fine(med: Medium, grid: PhaseGrid, theta_fine: np.ndarray,
                         adjoint: bool) -> np.ndarray:
    """Kernel sampled at (x, grid angle, fine angle), slots swapped for the
    adjoint redistribution.  Chunked over space to bound memory."""
    nx, na, nf = grid.n_x, grid.n_theta, len(theta_fine)
    out = np.empty((nx, na, nf))
    chunk = max(1, int(4e6 // (na * nf)))
    for lo in range(0, nx, chunk):
        hi = min(lo + chunk, nx)
        xs = np.repeat(grid.x_nodes[lo:hi], na * nf, axis=0)
        ta = np.repeat(np.tile(grid.theta_nodes, hi - lo), nf)
        tb = np.tile(theta_fine, (hi - lo) * na)
        if adjoint:
            vals = med.mu_at(xs, tb, ta)
        else:
            vals = med.mu_at(xs, ta, tb)
        out[lo:hi] = vals.reshape(hi - lo, na, nf)
    return out


def _scatter_source(ws: ProbeWorkspace, lam: float, phi, phase_kind: str,
                    sign: float, adjoint: bool) -> np.ndarray | None:
    """Redistribution of the leading term on the fine fiber rule.

    Returns the full source field (n_t, n_x, n_theta), complex: carrier in
    time times the fiber integral of kernel x pulse x attenuation x
    oscillation.  None when the medium has no kernel.
    """
    med, g = ws.med, ws.grid
    if med.mu is None:
        return None
    sw = ws.fine_sweep
    nx, nf = g.n_x, ws.n_fine
    tau = sw.tau.reshape(nx, nf)
    core = (
        ws.w_fine
        * sw.chord_attenuation(sign)
        * np.exp(1j * lam * _carrier_phase(sw, phase_kind))
    ).reshape(nx, nf)
    time_fn, chart = _pulse_parts(phi, sw)
    if chart is not None:
        core = core * chart.reshape(nx, nf)
    t = g.t_nodes
    ell_f = sw.entry_ell.reshape(nx, nf)
    alpha_f = sw.entry_alpha.reshape(nx, nf)

    def envelope(tn):
        if time_fn is not None:
            return time_fn(tn - tau)
        return np.asarray(phi(tn - tau, ell_f, alpha_f))

    if isinstance(med.mu, SeparableKernel):
        g_grid = med.mu.factor_grid(g)
        g_fine = np.asarray(med.mu.factor(sw.nodes_x, sw.nodes_theta)).reshape(nx, nf)
        core_s = core * g_fine
        ct = np.empty((g.n_t, nx), dtype=complex)
        for n, tn in enumerate(t):
            ct[n] = (core_s * envelope(tn)).sum(axis=1)
        S = med.mu.scale * g_grid[None, :, :] * ct[:, :, None]
    else:
        mu_fine = _generic_kernel_fine(med, g, ws.theta_fine, adjoint)
        S = np.empty((g.n_t, nx, g.n_theta), dtype=complex)
        for n, tn in enumerate(t):
            S[n] = np.einsum("xaj,xj->xa", mu_fine, core * envelope(tn))
    S *= np.exp(1j * lam * t)[:, None, None]
    return S


def build_go(med: Medium, grid: PhaseGrid, lam: float, phi=None, *,
             adjoint: bool = False, phase_kind: str | None = None,
             n_fine: int = DEFAULT_N_FINE, workspace: ProbeWorkspace | None = None,
             tol: float = FIXED_POINT_TOL, max_iter: int = MAX_ITERATIONS,
             diagnostics: dict | None = None) -> GoProbe:
    """Build an oscillatory probe at carrier frequency ``lam``.

    The leading term is evaluated analytically along precomputed chords
    (pulse at the retarded entry time, carrier, chord attenuation with sign
    flipped for adjoint probes).  The remainder solves the linear (or
    adjoint) equation with the finely-quadratured redistribution of the
    leading term as source and zero data, so the assembled probe satisfies
    the homogeneous equation and the remainder vanishes on the data
    surfaces.  Riemannian-phase probes with scattering require the kernel
    to pass the turning-direction support check.
    """
    if lam == 0:
        raise ValueError("carrier frequency must be nonzero")
    if phase_kind is None:
        phase_kind = (
            "riemannian" if isinstance(grid.domain, ConformalDomain) else "euclidean"
        )
    if phase_kind not in PHASE_KINDS:
        raise ValueError(f"unknown phase kind {phase_kind!r}")
    if phi is None:
        phi = make_pulse(grid)
    if workspace is None or workspace.med is not med or workspace.grid is not grid:
        workspace = ProbeWorkspace(med, grid, n_fine=n_fine)
    if phase_kind == "riemannian" and med.mu is not None:
        rep = validate_class_M(med, grid.domain, grid)
        if not rep:
            raise ClassMViolationError(
                "riemannian-phase probes need a kernel vanishing near the "
                "turning directions (symmetric, supported where the vertical "
                "exit-time derivative is bounded away from zero); "
                f"check details: {rep.details}",
                report=rep,
            )

    sign = -1.0 if adjoint else 1.0
    lead_vals = _leading_values(workspace, lam, phi, phase_kind, sign)
    leading = PhaseField(grid, lead_vals, name="probe leading term")
    diag = {} if diagnostics is None else diagnostics
    S = _scatter_source(workspace, lam, phi, phase_kind, sign, adjoint)
    if S is None:
        rem_vals = np.zeros_like(lead_vals)
        k_norm = 0.0
    else:
        k_norm = grid.norm_l2(S)
        if adjoint:
            rem = solve_adjoint(
                med, S, None, None, grid,
                sweep_reversed=workspace.reversed_solver_sweep(),
                tol=tol, max_iter=max_iter, diagnostics=diag,
            )
        else:
            rem = solve_linear(
                med, S, BoundaryData(), grid,
                sweep=workspace.solver_sweep(),
                tol=tol, max_iter=max_iter, diagnostics=diag,
            )
        rem_vals = rem.values
    remainder = PhaseField(grid, rem_vals, name="probe remainder")

    sup_phi = phi.sup_norm if isinstance(phi, BoundaryPulse) else float(
        np.max(np.abs(_pulse_probe_values(phi, grid)))
    )
    rem_sup = float(np.max(np.abs(rem_vals)))
    report = {
        "lam": float(lam),
        "phase_kind": phase_kind,
        "adjoint": bool(adjoint),
        "remainder_sup": rem_sup,
        "remainder_l2": grid.norm_l2(rem_vals),
        "scattered_source_l2": float(k_norm),
        "pulse_sup": sup_phi,
        "sup_bound_ratio": (
            rem_sup / (med.sigma0 * sup_phi)
            if med.sigma0 > 0 and sup_phi > 0 else 0.0
        ),
    }
    diag.update(report)
    return GoProbe(
        lam=float(lam), phi=phi, phase_kind=phase_kind, adjoint=bool(adjoint),
        leading=leading, remainder=remainder, report=report,
    )


def _pulse_probe_values(phi, grid: PhaseGrid) -> np.ndarray:
    """Sample a generic pulse callable on a modest chart for its sup."""
    b = grid.boundary
    ts = np.linspace(grid.t_nodes[0], grid.t_nodes[-1], 64)
    return np.asarray(phi(ts[:, None], b.ell[None, :], b.alpha[None, :]))


def incoming_trace(grid: PhaseGrid, lam: float, phi, phase_kind: str) -> Callable:
    """Exact incoming-boundary trace of the probe (its remainder vanishes
    there), as a broadcasting callable for the solver's data slot.

    On the incoming boundary the backward exit time is zero, so the pulse
    and the attenuation are taken at face value; only the euclidean carrier
    keeps a position-dependent phase.
    """
    dom = grid.domain
    if phase_kind == "riemannian":
        def trace(ts, ells, alphas):
            return np.asarray(phi(ts, ells, alphas)) * np.exp(
                1j * lam * np.asarray(ts)
            )
        return trace

    def trace(ts, ells, alphas):
        ells = np.asarray(ells, dtype=float)
        alphas = np.asarray(alphas, dtype=float)
        x = dom.boundary_point(ells)
        nrm = dom.outward_normal(x)
        tng = dom.boundary_tangent(ells)
        d = -np.cos(alphas)[..., None] * nrm + np.sin(alphas)[..., None] * tng
        xv = np.einsum("...i,...i->...", x, d)
        return np.asarray(phi(ts, ells, alphas)) * np.exp(
            1j * lam * (np.asarray(ts) - xv)
        )

    return trace


def probe_residual(med: Medium, probe: GoProbe, *, n_sample: int = 4096,
                   seed: int = 0) -> float:
    """Upwind residual of the assembled probe in its own equation.

    Forward probes are checked directly against the linear transport
    equation.  Adjoint probes go through the time-reversal involution
    (conjugate, flip time and direction), which carries them to a forward
    problem with direction-reversed absorption and a slot-swapped,
    direction-reversed kernel.
    """
    grid = probe.leading.grid
    vals = probe.leading.values + probe.remainder.values
    if not probe.adjoint:
        med_lin = Medium(sigma=med.sigma, mu=med.mu, q=None, m=med.m,
                         sigma0=med.sigma0, mu0=med.mu0)
        return pde_residual(med_lin, PhaseField(grid, vals), grid,
                            n_sample=n_sample, seed=seed)
    w = np.conj(grid.flip_theta(vals[::-1]))
    sig_rev = None
    if med.sigma is not None:
        def sig_rev(xs, th):
            return med.sigma_at(xs, np.asarray(th) + math.pi)
    mu_rev = None
    if med.mu is not None:
        def mu_rev(xs, ta, tb):
            return med.mu_at(xs, np.asarray(tb) + math.pi, np.asarray(ta) + math.pi)
    med_rev = Medium(sigma=sig_rev, mu=mu_rev, q=None, m=med.m,
                     sigma0=med.sigma0, mu0=med.mu0)
    return pde_residual(med_rev, PhaseField(grid, w), grid,
                        n_sample=n_sample, seed=seed)


# ---------------------------------------------------------------------------
# decay diagnostics
# ---------------------------------------------------------------------------

@dataclass
class DecayTable:
    """Remainder and scattered-source norms along a frequency ladder."""

    lambdas: np.ndarray
    remainder_norms: np.ndarray
    source_norms: np.ndarray
    phase_kind: str

    def _pick(self, which: str) -> np.ndarray:
        if which in ("remainder", "r"):
            return self.remainder_norms
        if which in ("source", "k", "scattered"):
            return self.source_norms
        raise ValueError(f"unknown norm column {which!r}")

    def slope(self, which: str = "remainder") -> float:
        """Log-log fitted decay rate; NaN when any norm vanishes."""
        vals = self._pick(which)
        if np.any(vals <= 0):
            return float("nan")
        return float(np.polyfit(np.log(self.lambdas), np.log(vals), 1)[0])

    def fraction_decreasing(self, which: str = "remainder") -> float:
        vals = self._pick(which)
        steps = np.diff(vals)
        return float(np.mean(steps < 0)) if len(steps) else float("nan")

    def step_slopes(self, which: str = "remainder") -> np.ndarray:
        """Per-step log-log slopes (NaN for the first row and zero norms)."""
        vals = self._pick(which)
        out = np.full(len(vals), np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.log(vals[1:] / vals[:-1])
            out[1:] = ratio / np.log(self.lambdas[1:] / self.lambdas[:-1])
        return out

    def write_csv(self, path) -> None:
        slopes = self.step_slopes("remainder")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "remainder_l2", "scattered_source_l2", "step_slope"])
            for lam, rn, kn, sl in zip(
                self.lambdas, self.remainder_norms, self.source_norms, slopes
            ):
                w.writerow([f"{lam:.10g}", f"{rn:.10e}", f"{kn:.10e}",
                            "" if np.isnan(sl) else f"{sl:.6f}"])


def decay_scan(med: Medium, grid: PhaseGrid, lambdas: Sequence[float] | None = None,
               phi=None, phase_kind: str | None = None, *,
               n_fine: int = DEFAULT_N_FINE, tol: float = FIXED_POINT_TOL,
               max_iter: int = MAX_ITERATIONS,
               workspace: ProbeWorkspace | None = None) -> DecayTable:
    """Probe the remainder decay along a ladder of carrier frequencies.

    Builds one probe per frequency (chord tables and solver operators are
    shared through the workspace) and records the remainder and
    scattered-source norms.  The ladder must contain at least two distinct
    values spanning a factor of eight.
    """
    if lambdas is None:
        lambdas = default_lambdas(grid.domain)
    lambdas = np.asarray(sorted(float(v) for v in lambdas))
    if len(lambdas) < 2 or len(np.unique(lambdas)) != len(lambdas):
        raise ValueError("need at least two distinct frequencies")
    if lambdas[-1] < 8.0 * lambdas[0] - 1e-12:
        raise ValueError("frequency ladder must span at least a factor of 8")
    if phase_kind is None:
        phase_kind = (
            "riemannian" if isinstance(grid.domain, ConformalDomain) else "euclidean"
        )
    if phi is None:
        phi = make_pulse(grid)
    if workspace is None:
        workspace = ProbeWorkspace(med, grid, n_fine=n_fine)
    r_norms, k_norms = [], []
    for lam in lambdas:
        probe = build_go(
            med, grid, lam, phi, phase_kind=phase_kind, n_fine=n_fine,
            workspace=workspace, tol=tol, max_iter=max_iter,
        )
        r_norms.append(probe.report["remainder_l2"])
        k_norms.append(probe.report["scattered_source_l2"])
    return DecayTable(
        lambdas=lambdas,
        remainder_norms=np.asarray(r_norms),
        source_norms=np.asarray(k_norms),
        phase_kind=phase_kind,
    )
