"""Recovery of the power-absorption coefficient and interior sources.

The measurement map (final-time field plus outgoing boundary trace) is
probed with small boundary data; divided differences across a scale ladder
isolate the leading nonlinear coefficient of the response.  Pairing that
coefficient's measurement against transported boundary profiles collapses,
by the boundary-fibered volume rule, to weighted light-ray integrals of the
unknown along sharply windowed chords; inverting the ray transform (or a
conjugate-gradient pass on the linearized measurement map) returns the
coefficient on the space-time grid.  Time-flipping the outgoing trace of a
source-driven run reduces interior-source recovery to the same transform.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Domain
from .go import leading_values_at
from .grid import (
    BoundaryRays,
    PhaseField,
    PhaseGrid,
    SpacetimeField,
    boundary_ray_chart,
)
from .media import Medium
from .raytransforms import (
    Sinogram,
    cgls,
    extended_time_nodes,
    invert_lightray,
)
from .sweep import RaySweep
from .transport import (
    FIXED_POINT_TOL,
    MAX_ITERATIONS,
    BoundaryData,
    Measurement,
    solve_adjoint,
    solve_and_measure,
    solve_linear,
)

__all__ = [
    "EpsilonLadder",
    "IdentityReport",
    "LinearizationResult",
    "MonotonicityCertificate",
    "OrderingError",
    "ProbePlan",
    "StageError",
    "carrier_probe_data",
    "default_probe_plan",
    "difference_stencil",
    "extract_lightray_data",
    "finite_diff_linearize",
    "identity_residual",
    "make_ladder",
    "make_measurement_family",
    "monotonicity_check",
    "reconstruct_q",
    "reconstruct_source",
    "scale_boundary_data",
]

DEFAULT_EPSILON = 1e-2
DEFAULT_KAPPA = 4
DEFAULT_LAMBDA_DIAM = 160.0


class StageError(RuntimeError):
    """Pipeline failure annotated with the stage that produced it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class OrderingError(ValueError):
    """The claimed coefficient ordering fails on the grid."""


# ---------------------------------------------------------------------------
# divided differences along a scale ladder
# ---------------------------------------------------------------------------

def difference_stencil(order: int) -> np.ndarray:
    """Coefficients c_k of the forward difference of the given order.

    sum_k c_k f(k eps) = eps^order f^(order)(0) + O(eps^(order+1)), with
    c_k = (-1)^(order-k) * binom(order, k).
    """
    order = int(order)
    if order < 1:
        raise ValueError("difference order must be a positive integer")
    k = np.arange(order + 1)
    return ((-1.0) ** (order - k)) * np.array(
        [math.comb(order, int(kk)) for kk in k], dtype=float
    )


@dataclass(frozen=True)
class EpsilonLadder:
    """Descending sequence of probing scales for divided differences."""

    epsilons: tuple

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("ladder needs positive scales")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("ladder scales must be strictly decreasing")
        object.__setattr__(self, "epsilons", eps)

    @property
    def top(self) -> float:
        return self.epsilons[0]

    @property
    def bottom(self) -> float:
        return self.epsilons[-1]

    def validate(self, delta: float, order: int) -> None:
        """Every stencil evaluation k*eps (k <= order) must stay within the
        small-data radius delta."""
        if order * self.top > delta * (1.0 + 1e-12):
            raise ValueError(
                f"top scale {self.top:.3g} times stencil reach {order} "
                f"exceeds the small-data radius {delta:.3g}"
            )


def make_ladder(delta: float, order: int, rungs: int = 4,
                ratio: float = 0.5) -> EpsilonLadder:
    """Ladder whose top rung saturates the small-data radius: eps_0 =
    delta / order, then geometric decay."""
    if delta <= 0:
        raise ValueError("small-data radius must be positive")
    if not 0 < ratio < 1:
        raise ValueError("ladder ratio must lie in (0, 1)")
    if rungs < 1:
        raise ValueError("ladder needs at least one rung")
    top = delta / int(order)
    return EpsilonLadder(tuple(top * ratio**j for j in range(rungs)))


def scale_boundary_data(bd: BoundaryData, scale: float) -> BoundaryData:
    """Multiply both data components by a scalar (callables are wrapped)."""
    s = float(scale)

    def _scaled(h):
        if h is None:
            return None
        if callable(h):
            return lambda *args: s * np.asarray(h(*args))
        return s * h

    return BoundaryData(h0=_scaled(bd.h0), h_minus=_scaled(bd.h_minus),
                        delta_bound=bd.delta_bound)


@dataclass
class LinearizationResult:
    """Per-rung divided-difference estimates of a response coefficient."""

    order: int
    epsilons: tuple
    fields: list          # PhaseField per rung (same rung order as epsilons)
    measurements: list    # Measurement per rung

    @property
    def field(self) -> PhaseField:
        return self.fields[-1]

    @property
    def measurement(self) -> Measurement:
        return self.measurements[-1]


def finite_diff_linearize(med: Medium, bd: BoundaryData, ladder: EpsilonLadder,
                          grid: PhaseGrid, *, order: int | None = None,
                          tol: float = FIXED_POINT_TOL,
                          max_iter: int = MAX_ITERATIONS) -> LinearizationResult:
    """Estimate the Taylor coefficient of the data-to-solution map at zero.

    ``order=1`` returns the linearized field (first derivative); ``order=m``
    returns the leading nonlinear coefficient, the field driven by the
    lagged power of the linearization.  Each rung applies the divided
    difference  sum_k c_k f(k eps) / (eps^order order!)  to both the interior
    field and its measurement; solves are shared between rungs that need the
    same scale.
    """
    order = med.m if order is None else int(order)
    if order < 1:
        raise ValueError("linearization order must be >= 1")
    if bd.delta_bound is not None:
        ladder.validate(bd.delta_bound, order)
    coeffs = difference_stencil(order)
    cache: dict[float, tuple] = {}

    def run(scale: float):
        if scale not in cache:
            fld, meas = solve_and_measure(
                med, scale_boundary_data(bd, scale), grid,
                tol=tol, max_iter=max_iter)
            cache[scale] = (fld.values, meas)
        return cache[scale]

    fields, measurements = [], []
    fact = math.factorial(order)
    for eps in ladder.epsilons:
        den = eps**order * fact
        acc_f = None
        acc_T = None
        acc_out = None
        for k in range(1, order + 1):
            vals, meas = run(k * eps)
            c = coeffs[k]
            acc_f = c * vals if acc_f is None else acc_f + c * vals
            acc_T = c * meas.final if acc_T is None else acc_T + c * meas.final
            acc_out = (c * meas.outgoing if acc_out is None
                       else acc_out + c * meas.outgoing)
        fields.append(PhaseField(grid, acc_f / den,
                                 name=f"order-{order} coefficient"))
        measurements.append(Measurement(final=acc_T / den,
                                        outgoing=acc_out / den))
    return LinearizationResult(order=order, epsilons=ladder.epsilons,
                               fields=fields, measurements=measurements)


# ---------------------------------------------------------------------------
# the pairing identity between interior products and measured traces
# ---------------------------------------------------------------------------

@dataclass
class IdentityReport:
    lhs: complex
    rhs: complex
    gap: float
    boundary_term: complex
    final_term: complex


def _time_weights(grid: PhaseGrid) -> np.ndarray:
    tw = np.full(grid.n_t, grid.dt)
    tw[0] = tw[-1] = 0.5 * grid.dt
    return tw


def _outgoing_trace_of(field: PhaseField, grid: PhaseGrid) -> np.ndarray:
    """Interpolate a phase field at the outgoing chart nodes, per time."""
    b = grid.boundary
    out = np.empty((grid.n_t, len(b.points)), dtype=field.values.dtype)
    th_out = b.thetas + np.pi
    for n in range(grid.n_t):
        out[n] = grid.interp_phase(field.values[n], b.points, th_out)
    return out


def identity_residual(med1: Medium, med2: Medium, u: PhaseField,
                      u0: PhaseField, grid: PhaseGrid, *,
                      u0_outgoing: np.ndarray | None = None,
                      u0_final: np.ndarray | None = None,
                      tol: float = FIXED_POINT_TOL,
                      max_iter: int = MAX_ITERATIONS) -> IdentityReport:
    """Check the pairing identity linking the coefficient difference to data.

    lhs: the interior pairing  -int (q1-q2) u^m conj(u0)  over space-time.
    rhs: solve the linear problem driven by  -(q1-q2) u^m  with zero data
    and pair its measurement with u0 on the outgoing boundary and at the
    final time.  The two media must share absorption and redistribution;
    only the power coefficient may differ.  Exact traces of u0 can be
    passed explicitly (transported probes know them in closed form);
    otherwise the outgoing trace is interpolated from the grid.
    """
    if med1.m != med2.m:
        raise ValueError("media disagree on the power exponent")
    if med1.sigma is not med2.sigma or med1.mu is not med2.mu:
        raise ValueError(
            "identity pairing requires identical absorption and "
            "redistribution; only the power coefficient may differ")
    m = med1.m
    q1 = med1.q_grid(grid)
    q2 = med2.q_grid(grid)
    dq = np.broadcast_to(q1, (grid.n_t, grid.n_x)) - np.broadcast_to(
        q2, (grid.n_t, grid.n_x))

    pw = grid.phase_weights()
    tw = _time_weights(grid)
    um = u.values**m
    integrand = dq[:, :, None] * um * np.conj(u0.values)
    lhs = -complex(np.einsum("t,txa,xa->", tw, integrand, pw, optimize=True))

    med_lin = Medium(sigma=med1.sigma, mu=med1.mu, q=None, m=m,
                     sigma0=med1.sigma0, mu0=med1.mu0)
    S = -dq[:, :, None] * um
    _, meas = solve_and_measure(med_lin, None, grid, S=S,
                                tol=tol, max_iter=max_iter)

    b = grid.boundary
    if u0_outgoing is None:
        u0_outgoing = _outgoing_trace_of(u0, grid)
    u0_out = np.asarray(u0_outgoing).reshape(grid.n_t, -1)
    if u0_final is None:
        u0_final = u0.values[-1]
    w_out = meas.outgoing.reshape(grid.n_t, -1)
    boundary_term = complex(np.einsum(
        "t,tc,c,tc->", tw, w_out, b.weights, np.conj(u0_out), optimize=True))
    final_term = complex(np.einsum(
        "xa,xa->", meas.final * pw, np.conj(np.asarray(u0_final))))
    rhs = boundary_term + final_term
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return IdentityReport(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs) / scale,
                          boundary_term=boundary_term, final_term=final_term)


# ---------------------------------------------------------------------------
# probing plans and simulated measurement families
# ---------------------------------------------------------------------------

@dataclass
class ProbePlan:
    """Where and how to read off ray data from the measurement map.

    ``rays`` are the chords the output is sampled along (entry chart
    coordinates); ``t_nodes`` the launch-time lattice (uniform); ``lam``
    the probing frequency; ``kappa`` the width, in measurement-chart cells,
    of the ray-selection window; ``zeta`` the launch-time window width.
    """

    rays: BoundaryRays
    t_nodes: np.ndarray
    lam: float
    kappa: float = DEFAULT_KAPPA
    zeta: float | None = None
    phase_kind: str = "riemannian"

    def __post_init__(self):
        self.t_nodes = np.asarray(self.t_nodes, dtype=float)

    def validate(self, grid: PhaseGrid) -> None:
        if self.lam <= 0:
            raise ValueError("probing frequency must be positive")
        if self.phase_kind != "riemannian":
            raise ValueError("ray extraction supports the riemannian carrier")
        if self.kappa < 1:
            raise ValueError("ray window must span at least one chart cell")
        steps = np.diff(self.t_nodes)
        if len(steps) and not np.allclose(steps, steps[0], rtol=0,
                                          atol=1e-9 * max(grid.dt, 1.0)):
            raise ValueError("launch-time lattice must be uniform")
        zeta = self.resolved_zeta(grid)
        if zeta < grid.dt - 1e-12:
            raise ValueError("time window narrower than the grid step")
        b = grid.boundary
        margin = 0.5 * self.kappa * b.d_alpha
        if np.any(np.abs(self.rays.alpha) > 0.5 * math.pi - margin):
            raise ValueError(
                "output rays too close to tangential for the chosen window")

    def resolved_zeta(self, grid: PhaseGrid) -> float:
        return 2.0 * grid.dt if self.zeta is None else float(self.zeta)


def default_probe_plan(grid: PhaseGrid, *, rays: BoundaryRays | None = None,
                       t_nodes: np.ndarray | None = None,
                       lam: float | None = None,
                       kappa: float = DEFAULT_KAPPA,
                       zeta: float | None = None) -> ProbePlan:
    """Full-chart plan on the extended launch lattice at the default
    frequency (fixed number of oscillations across the domain)."""
    if rays is None:
        b = grid.boundary
        rays = boundary_ray_chart(grid.domain, max(b.n_ell, 64),
                                  max(b.n_alpha, 48))
    if t_nodes is None:
        t_nodes, _ = extended_time_nodes(grid)
    if lam is None:
        lam = DEFAULT_LAMBDA_DIAM / grid.domain.diameter
    return ProbePlan(rays=rays, t_nodes=np.asarray(t_nodes, dtype=float),
                     lam=float(lam), kappa=kappa, zeta=zeta)


def _unit_chart(ts, ells, alphas):
    return np.ones(np.broadcast_shapes(np.shape(ts), np.shape(ells),
                                       np.shape(alphas)))


def carrier_probe_data(med: Medium, grid: PhaseGrid, lam: float,
                       phase_kind: str = "riemannian") -> BoundaryData:
    """Unit-amplitude oscillatory probe covering the whole incoming boundary.

    The incoming trace carries the plain carrier; the initial slice is the
    same wave already transported into the domain (attenuated and phase
    delayed by the backward chord), so the probe is a single modulated
    state with no switch-on transient.
    """
    sig = med.sigma_at if med.sigma is not None else None

    def h_minus(ts, ells, alphas):
        shape = np.broadcast_shapes(np.shape(ts), np.shape(ells),
                                    np.shape(alphas))
        return np.broadcast_to(np.exp(1j * lam * np.asarray(ts)), shape)

    def h0(xs, thetas):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        sw = RaySweep(grid, sig, nodes=(xs, np.asarray(thetas, dtype=float)),
                      mode="geometry")
        return leading_values_at(med, grid, lam, _unit_chart, phase_kind,
                                 0.0, sweep=sw)

    if phase_kind == "riemannian":
        return BoundaryData(h0=h0, h_minus=h_minus)
    raise ValueError("carrier probes support the riemannian phase")


def make_measurement_family(med: Medium, grid: PhaseGrid, *,
                            noise: float = 0.0, seed: int = 0,
                            tol: float = FIXED_POINT_TOL,
                            max_iter: int = MAX_ITERATIONS):
    """Simulated measurement family: (data, scale, key) -> Measurement.

    Each call runs the full measurement map on the scaled data.  Optional
    noise perturbs every output entry independently per call, at the given
    level relative to the component's root-mean-square, with a generator
    seeded reproducibly from (seed, key).
    """

    def family(bd: BoundaryData, scale: float, key: str | None = None
               ) -> Measurement:
        _, meas = solve_and_measure(med, scale_boundary_data(bd, scale), grid,
                                    tol=tol, max_iter=max_iter)
        if noise <= 0:
            return meas
        tag = zlib.crc32(repr((seed, key)).encode()) & 0xFFFFFFFF
        rng = np.random.default_rng((seed, tag))

        def perturb(arr):
            rms = float(np.sqrt(np.mean(np.abs(arr) ** 2)))
            if rms == 0.0:
                return arr
            if np.iscomplexobj(arr):
                z = rng.standard_normal(arr.shape) + 1j * rng.standard_normal(
                    arr.shape)
                return arr + noise * rms * z / math.sqrt(2.0)
            return arr + noise * rms * rng.standard_normal(arr.shape)

        return Measurement(final=perturb(meas.final),
                           outgoing=perturb(meas.outgoing))

    return family


# ---------------------------------------------------------------------------
# ray-data extraction from the measurement family
# ---------------------------------------------------------------------------

def _bump(u: np.ndarray) -> np.ndarray:
    """Smooth unit-height bump on (-1, 1): cos^2(pi u / 2).

    Its integral over the support is exactly 1 when divided by the
    half-width; sampled on any lattice of spacing half-width/k (integer k)
    the rectangle sum is exactly 1 as well (raised-cosine partition), so
    no discrete mass correction is needed.
    """
    u = np.asarray(u)
    out = np.zeros(u.shape)
    inside = np.abs(u) < 1.0
    out[inside] = np.cos(0.5 * math.pi * u[inside]) ** 2
    return out


def _bump_cdf(u: np.ndarray) -> np.ndarray:
    uu = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    return 0.5 * (uu + 1.0) + np.sin(math.pi * uu) / (2.0 * math.pi)


def _bump_cell_avg(u: np.ndarray, h: float) -> np.ndarray:
    """Average of the bump over [u-h, u+h]: mass-preserving cell smearing.

    Used where the window is sampled at isolated chord times whose spacing
    is comparable to the window width; averaging over the cell extent keeps
    the quadrature mass exact while suppressing sampling noise.
    """
    if h <= 1e-12:
        return _bump(u)
    return (_bump_cdf(u + h) - _bump_cdf(u - h)) / (2.0 * h)


def _wrap(delta: np.ndarray, period: float) -> np.ndarray:
    return (np.asarray(delta) + 0.5 * period) % period - 0.5 * period


def _stencil_measurements(family, bd: BoundaryData, eps: float, m: int,
                          key_prefix: str) -> tuple[np.ndarray, np.ndarray]:
    """Divided-difference (final, outgoing) of the family at one rung."""
    coeffs = difference_stencil(m)
    den = eps**m * math.factorial(m)
    acc_T = None
    acc_out = None
    for k in range(1, m + 1):
        meas = family(bd, k * eps, f"{key_prefix}:k={k}")
        c = coeffs[k]
        acc_T = c * meas.final if acc_T is None else acc_T + c * meas.final
        acc_out = (c * meas.outgoing if acc_out is None
                   else acc_out + c * meas.outgoing)
    return acc_T / den, acc_out / den


def extract_lightray_data(family, med_ref: Medium, plan: ProbePlan,
                          grid: PhaseGrid, *,
                          ladder: EpsilonLadder | None = None,
                          diagnostics: dict | None = None
                          ) -> tuple[Sinogram, dict]:
    """Read weighted light-ray integrals of the power coefficient off the
    measurement family.

    One oscillatory probe covers the whole incoming boundary; divided
    differences across the scale ladder isolate the leading nonlinear
    response, whose measurement is paired against a transported window
    (frequency-matched carrier, chart bump of width kappa cells around each
    output ray, launch-time bump of width zeta).  The boundary-fibered
    volume rule collapses the pairing to
        integral of  q(t0 + s, chord(s)) exp(-(m-1) int sigma)  ds
    per (launch time t0, chord), up to window and stencil error.  The
    reference medium supplies absorption, redistribution, and the exponent;
    its own power coefficient is irrelevant (the family is differenced at
    zero data).
    """
    plan.validate(grid)
    m = med_ref.m
    lam = float(plan.lam)
    eta = m * lam
    zeta = plan.resolved_zeta(grid)
    if ladder is None:
        ladder = EpsilonLadder((DEFAULT_EPSILON,))
    eps = ladder.bottom

    bd_probe = carrier_probe_data(med_ref, grid, lam, plan.phase_kind)
    w_fin, w_out = _stencil_measurements(
        family, bd_probe, eps, m, f"carrier:lam={lam:g}:eps={eps:g}")

    b = grid.boundary
    n_t = grid.n_t
    dt = grid.dt
    tg = grid.t_nodes
    tw = _time_weights(grid)
    sig = med_ref.sigma_at if med_ref.sigma is not None else None

    # outgoing chart geometry: full chords, reversal chart, growth weight
    # (node directions are the radiation directions, so the sweep reads the
    # absorption at the direction of travel)
    tsw = RaySweep(grid, sig, nodes=(b.points, b.thetas + np.pi),
                   mode="geometry")
    tau_c = tsw.tau
    theta_minus_c = tsw.chord_attenuation(-1.0)
    rev_ell, rev_alpha = tsw.entry_ell, tsw.entry_alpha

    # node geometry for the final-time pairing
    nsw = RaySweep(grid, sig, mode="geometry")
    tau_z = nsw.tau
    theta_minus_z = nsw.chord_attenuation(-1.0)
    ent_ell, ent_alpha = nsw.entry_ell, nsw.entry_alpha

    w_out2 = np.asarray(w_out).reshape(n_t, -1)
    B = (tw[:, None] * w_out2
         * np.exp(-1j * eta * (tg[:, None] - tau_c[None, :]))
         * theta_minus_c[None, :])

    t0 = plan.t_nodes
    M = len(t0)
    # per-chart-cell correlation with the launch-time window: the window of
    # cell c sits at times near t0 + tau_c
    n_taps = int(math.ceil(2.0 * zeta / dt)) + 3
    G = np.zeros((M, len(tau_c)), dtype=complex)
    base = np.floor((t0[:, None] + tau_c[None, :] - zeta) / dt).astype(int)
    cols = np.arange(len(tau_c))
    for d in range(n_taps):
        j = base + d
        ok = (j >= 0) & (j < n_t)
        jj = np.clip(j, 0, n_t - 1)
        chi = _bump((jj * dt - tau_c[None, :] - t0[:, None]) / zeta) / zeta
        G += np.where(ok, B[jj, cols[None, :]] * chi, 0.0)

    # final-time pairing ingredients per phase node
    pw = grid.phase_weights().ravel()
    fin_core = (pw * np.asarray(w_fin).ravel() * theta_minus_z
                * np.exp(-1j * eta * (tg[-1] - tau_z)))
    fin_center = tg[-1] - tau_z  # t0 at which node z's window is centered

    # uniform launch lattice arithmetic for the scatter windows; the window
    # is cell-averaged along the chord coordinate (unit-speed, so the cell
    # extent in time equals the spatial node spacing)
    dt0 = float(t0[1] - t0[0]) if M > 1 else dt
    w_cell = math.sqrt(grid.domain.area / grid.n_x)
    h_fin = 0.5 * w_cell / zeta
    i_lo = np.floor((fin_center - zeta - 0.5 * w_cell - t0[0]) / dt0).astype(int)
    n_taps0 = int(math.ceil((2.0 * zeta + w_cell) / dt0)) + 3

    hl = 0.5 * plan.kappa * b.d_ell
    ha = 0.5 * plan.kappa * b.d_alpha
    L = grid.domain.boundary_length

    rays = plan.rays
    n_rays = len(rays)
    values = np.zeros((M, n_rays), dtype=complex)
    patch_sizes = []
    for ib in range(n_rays):
        lb, ab = rays.ell[ib], rays.alpha[ib]
        # discrete window mass over the measurement chart's own coordinates
        P_norm = _bump(_wrap(b.ell - lb, L) / hl) * _bump((b.alpha - ab) / ha)
        Z = float(np.sum(P_norm * b.weights))
        if Z <= 0.0:
            raise StageError(
                "extraction",
                f"ray {ib} has no quadrature mass under its chart window")
        # boundary pairing reads the window through the reversal chart
        P_rev = _bump(_wrap(rev_ell - lb, L) / hl) * _bump(
            (rev_alpha - ab) / ha)
        cells = np.flatnonzero((P_rev > 0.0) & (b.weights > 0.0))
        patch_sizes.append(len(cells))
        acc = G[:, cells] @ (P_rev[cells] * b.weights[cells] / Z)

        # final-time pairing over phase nodes whose entry chart is in view
        P_fin = _bump(_wrap(ent_ell - lb, L) / hl) * _bump(
            (ent_alpha - ab) / ha)
        nodes = np.flatnonzero(P_fin > 0.0)
        if len(nodes):
            contrib = fin_core[nodes] * (P_fin[nodes] / Z)
            fin_acc = np.zeros(M, dtype=complex)
            for d in range(n_taps0):
                i = i_lo[nodes] + d
                ok = (i >= 0) & (i < M)
                if not np.any(ok):
                    continue
                ii = i[ok]
                chi = _bump_cell_avg(
                    (fin_center[nodes[ok]] - t0[ii]) / zeta, h_fin) / zeta
                np.add.at(fin_acc, ii, contrib[ok] * chi)
            acc = acc + fin_acc
        values[:, ib] = -acc

    weight_id = f"exp(-{m - 1} int sigma)" if sig is not None else "unit"
    sino = Sinogram(rays, values, weight_id=weight_id, t_nodes=t0)
    report = {
        "lam": lam, "eta": eta, "zeta": zeta, "kappa": plan.kappa,
        "epsilon": eps, "family_calls": m,
        "patch_cells_mean": float(np.mean(patch_sizes)),
        "imag_fraction": float(
            np.linalg.norm(values.imag) / max(np.linalg.norm(values), 1e-300)),
    }
    if diagnostics is not None:
        diagnostics.update(report)
    return sino, report


# ---------------------------------------------------------------------------
# coefficient reconstruction
# ---------------------------------------------------------------------------

def _power_weight_rate(med: Medium):
    """Attenuation rate whose accumulated form weights the extracted rays."""
    if med.sigma is None:
        return None
    m = med.m

    def omega(xs, th):
        return (m - 1) * med.sigma_at(xs, th)

    return omega


def _staggered_pulse_probes(grid: PhaseGrid, n_probes: int):
    """Real, nonnegative incoming pulses staggered in entry point and time."""
    from .go import BoundaryPulse

    L = grid.domain.boundary_length
    T = grid.t_nodes[-1]
    probes = []
    n_pos = max(2, int(math.ceil(n_probes / 2)))
    for j in range(n_probes):
        pos = (j % n_pos) / n_pos
        frac = (j // n_pos + 0.5) / max(1, math.ceil(n_probes / n_pos))
        probes.append(BoundaryPulse(
            boundary_length=L,
            t_center=(0.1 + 0.5 * frac) * T,
            t_width=0.35 * T,
            ell_center=pos * L,
            ell_width=0.45 * L,
            alpha_width=0.45 * math.pi,
        ))
    return probes


def reconstruct_q(family, med_ref: Medium, grid: PhaseGrid, *,
                  mode: str = "direct", plan: ProbePlan | None = None,
                  ladder: EpsilonLadder | None = None, reg: float = 1e-8,
                  n_probes: int = 6, max_iter: int = 60, tol: float = 1e-7,
                  energy_fraction: float = 0.999,
                  diagnostics: dict | None = None
                  ) -> tuple[SpacetimeField, dict]:
    """Recover the power coefficient on the space-time grid.

    ``mode="go"`` extracts windowed light-ray data with one oscillatory
    probe and inverts the weighted ray transform.  ``mode="direct"`` probes
    with a few smooth real pulses, isolates the leading nonlinear response
    by divided differences, and runs conjugate-gradient least squares on
    the linear map from the coefficient to those responses, using the
    adjoint transport solve for the transpose.  The reference medium
    supplies absorption and redistribution; the recovered coefficient is
    the deviation from a zero reference.
    """
    if mode not in ("direct", "go"):
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    report: dict = {"mode": mode}
    if ladder is None:
        ladder = EpsilonLadder((DEFAULT_EPSILON,))
    m = med_ref.m

    if mode == "go":
        if plan is None:
            plan = default_probe_plan(grid)
        try:
            sino, ext_rep = extract_lightray_data(
                family, med_ref, plan, grid, ladder=ladder)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - annotate the stage
            raise StageError("extraction", str(exc)) from exc
        report["extraction"] = ext_rep
        data = Sinogram(sino.rays, sino.values.real,
                        weight_id=sino.weight_id, t_nodes=sino.t_nodes)
        try:
            fld, inv_rep = invert_lightray(
                grid.domain, grid, None, data, reg, omega=_power_weight_rate(
                    med_ref), energy_fraction=energy_fraction,
                tol=tol, max_iter=max_iter)
        except Exception as exc:  # noqa: BLE001
            raise StageError("inversion", str(exc)) from exc
        report["inversion"] = {
            "energy_fraction": inv_rep.get("energy_fraction"),
            "retained_slices": len(inv_rep.get("retained", [])),
            "imag_max": inv_rep.get("imag_max"),
        }
        out = SpacetimeField(grid, fld.values, name="power coefficient")
        if diagnostics is not None:
            diagnostics.update(report)
        return out, report

    # direct mode: conjugate gradients on the linearized measurement map
    med_lin = Medium(sigma=med_ref.sigma, mu=med_ref.mu, q=None, m=m,
                     sigma0=med_ref.sigma0, mu0=med_ref.mu0)
    try:
        pulses = _staggered_pulse_probes(grid, n_probes)
        probe_fields = []
        probe_data = []
        for p, phi in enumerate(pulses):
            def trace(ts, ells, alphas, _phi=phi):
                return _phi(ts, ells, alphas)

            bd = BoundaryData(h_minus=trace)
            u = solve_linear(med_lin, None, bd, grid)
            probe_fields.append(np.ascontiguousarray(u.values.real))
            probe_data.append(_stencil_measurements(
                family, bd, ladder.bottom, m, f"pulse:{p}:eps={ladder.bottom:g}"))
    except Exception as exc:  # noqa: BLE001
        raise StageError("probing", str(exc)) from exc

    b = grid.boundary
    tw = _time_weights(grid)
    pw = grid.phase_weights()
    sq_out = np.sqrt(tw[:, None] * b.weights[None, :])
    sq_fin = np.sqrt(pw)
    vw = tw[:, None] * grid.x_weights[None, :]
    sq_v = np.sqrt(vw)
    n_out = grid.n_t * len(b.points)
    n_fin = grid.n_x * grid.n_theta
    n_cols = grid.n_t * grid.n_x

    def pack(meas_fin, meas_out):
        return np.concatenate([
            (np.asarray(meas_out).reshape(grid.n_t, -1).real * sq_out).ravel(),
            (np.asarray(meas_fin).real * sq_fin).ravel(),
        ])

    rhs = np.concatenate([pack(fin, out) for fin, out in probe_data])

    powers = [u**m for u in probe_fields]

    def apply_A(x):
        q = (x.reshape(grid.n_t, grid.n_x) / sq_v)
        cols = []
        for um in powers:
            S = -q[:, :, None] * um
            _, meas = solve_and_measure(med_lin, None, grid, S=S)
            cols.append(pack(meas.final, meas.outgoing))
        return np.concatenate(cols)

    def apply_AH(r):
        out = np.zeros((grid.n_t, grid.n_x))
        for p, um in enumerate(powers):
            blk = r[p * (n_out + n_fin):(p + 1) * (n_out + n_fin)]
            g_out = (blk[:n_out].reshape(grid.n_t, -1) * sq_out).reshape(
                grid.n_t, b.n_ell, b.n_alpha)
            g_fin = blk[n_out:].reshape(grid.n_x, grid.n_theta) * sq_fin
            u0 = solve_adjoint(med_lin, None, g_fin, g_out, grid)
            pair = -(um * u0.values.real).sum(axis=2) * grid.dtheta
            out += pair
        return (out / sq_v).ravel()

    try:
        x, cg_rep = cgls(apply_A, apply_AH, rhs, n_cols, reg=reg,
                         tol=tol, max_iter=max_iter)
    except Exception as exc:  # noqa: BLE001
        raise StageError("inversion", str(exc)) from exc
    q_vals = (x.reshape(grid.n_t, grid.n_x) / sq_v)
    report["inversion"] = {
        "iterations": getattr(cg_rep, "iterations", None),
        "converged": getattr(cg_rep, "converged", None),
        "probes": n_probes,
    }
    out = SpacetimeField(grid, np.ascontiguousarray(q_vals),
                         name="power coefficient")
    if diagnostics is not None:
        diagnostics.update(report)
    return out, report


# ---------------------------------------------------------------------------
# interior source recovery
# ---------------------------------------------------------------------------

def reconstruct_source(meas: Measurement, med: Medium, grid: PhaseGrid, *,
                       reg: float = 1e-8, tol: float = 1e-8,
                       max_iter: int = 500,
                       energy_fraction: float = 0.999,
                       diagnostics: dict | None = None
                       ) -> tuple[SpacetimeField, dict]:
    """Recover an isotropic interior source from its measurement.

    For the scattering-free linear problem with zero boundary and initial
    data, the outgoing trace read backwards in time is exactly the weighted
    light-ray transform of the time-reversed source: the trace at a chart
    slot integrates the source along that slot's chord with the absorption
    accumulated in the direction of travel.  Rows of the extended launch
    lattice beyond the measured window are synthesized by flowing the
    final-time slice backwards (the source no longer acts there), and the
    transform is inverted slice by slice; undoing the time reversal returns
    the source.  Requires a purely absorbing medium and a source vanishing
    near the final time.
    """
    if med.mu is not None:
        raise ValueError("source recovery requires a redistribution-free medium")
    if med.q is not None:
        raise ValueError("source recovery addresses the linear problem; "
                         "remove the power coefficient from the medium")
    meas.validate(grid)
    b = grid.boundary
    dom = grid.domain
    n_t, dt = grid.n_t, grid.dt
    t_nodes, i0 = extended_time_nodes(grid)
    M = len(t_nodes)
    out2 = np.asarray(meas.outgoing).reshape(n_t, -1)
    D = np.zeros((M, len(b.points)),
                 dtype=np.result_type(out2, np.asarray(meas.final)))

    # measured rows: launch time t0 in [0, T] reads the trace at T - t0
    for i in range(i0, min(i0 + n_t, M)):
        D[i] = out2[n_t - 1 - (i - i0)]

    # synthesized rows: t0 < 0 flows the final slice back along each chord
    sig_flip = None
    if med.sigma is not None:
        def sig_flip(xs, th):
            return med.sigma_at(xs, np.asarray(th) + math.pi)

    x = b.points.copy()
    th = b.thetas.copy()
    final = np.asarray(meas.final)
    integral = np.zeros(len(b.points))
    sig_prev = (sig_flip(x, th) if sig_flip is not None
                else np.zeros(len(b.points)))
    for j in range(1, i0 + 1):
        alive = j * dt < b.tau
        if not np.any(alive):
            break
        xa, ta = dom.flow(x[alive], th[alive], dt)
        x[alive] = xa
        th[alive] = ta
        if sig_flip is not None:
            sig_here = sig_flip(xa, ta)
            integral[alive] += 0.5 * dt * (sig_prev[alive] + sig_here)
            sig_next = sig_prev.copy()
            sig_next[alive] = sig_here
            sig_prev = sig_next
        row = np.zeros(len(b.points), dtype=D.dtype)
        row[alive] = grid.interp_phase(
            final, x[alive], th[alive] + np.pi) * np.exp(-integral[alive])
        D[i0 - j] = row

    sino = Sinogram(b, D, weight_id="exp(-int sigma, direction of travel)",
                    t_nodes=t_nodes)
    flipped, inv_rep = invert_lightray(
        dom, grid, None, sino, reg, omega=sig_flip,
        energy_fraction=energy_fraction, tol=tol, max_iter=max_iter)
    values = np.ascontiguousarray(np.asarray(flipped.values)[::-1])
    report = {
        "energy_fraction": inv_rep.get("energy_fraction"),
        "retained_slices": len(inv_rep.get("retained", [])),
        "imag_max": inv_rep.get("imag_max"),
        "synthesized_rows": int(i0),
    }
    if diagnostics is not None:
        diagnostics.update(report)
    return (SpacetimeField(grid, values, name="interior source"), report)


# ---------------------------------------------------------------------------
# ordering certificate
# ---------------------------------------------------------------------------

@dataclass
class MonotonicityCertificate:
    """Signed pairings certifying the ordering of two power coefficients."""

    ordered: bool
    integrals: np.ndarray
    locator_time_index: int
    locator_space_index: int
    locator_time: float
    locator_position: np.ndarray
    density: np.ndarray = field(repr=False, default=None)


def monotonicity_check(med1: Medium, med2: Medium, grid: PhaseGrid, *,
                       probes=None, tol: float = 1e-12
                       ) -> MonotonicityCertificate:
    """Certify that a pointwise-ordered pair of power coefficients orders
    the probe pairings, and locate where the difference concentrates.

    For each nonnegative boundary profile, the transported profile F pairs
    with the coefficient difference as
        I = int (q2 - q1) F^(m+1) exp(-(m-1) int sigma)  over space-time,
    which is nonnegative whenever q1 <= q2.  The locator returns the grid
    cell maximizing the probe-summed pairing density.  Raises
    :class:`OrderingError` if the claimed ordering fails on the grid.
    """
    if med1.m != med2.m:
        raise ValueError("media disagree on the power exponent")
    if med1.sigma is not med2.sigma or med1.mu is not med2.mu:
        raise ValueError("ordering certificate requires shared absorption "
                         "and redistribution")
    m = med1.m
    q1 = np.broadcast_to(med1.q_grid(grid), (grid.n_t, grid.n_x))
    q2 = np.broadcast_to(med2.q_grid(grid), (grid.n_t, grid.n_x))
    dq = q2 - q1
    floor = -tol * max(1.0, float(np.abs(q2).max()), float(np.abs(q1).max()))
    if dq.min() < floor:
        raise OrderingError(
            f"claimed ordering fails on {(dq < floor).mean():.1%} of cells "
            f"(worst violation {dq.min():.3g})")

    if probes is None:
        from .go import BoundaryPulse

        L = grid.domain.boundary_length
        T = grid.t_nodes[-1]
        probes = [
            BoundaryPulse(boundary_length=L,
                          t_center=(0.18 + 0.64 * (jt + 0.5) / 4) * T,
                          t_width=0.3 * T,
                          ell_center=(je / 6) * L, ell_width=0.4 * L,
                          alpha_width=0.45 * math.pi)
            for jt in range(4) for je in range(6)
        ]

    nsw = RaySweep(grid, None, mode="geometry")
    sig_sweep = RaySweep(grid, med1.sigma_at, mode="geometry") \
        if med1.sigma is not None else None
    weight = (sig_sweep.chord_attenuation(1.0) ** (m - 1)
              if sig_sweep is not None else np.ones(nsw.n_nodes))

    tw = _time_weights(grid)
    pw = grid.phase_weights()
    integrals = []
    density = np.zeros((grid.n_t, grid.n_x))
    for phi in probes:
        F = leading_values_at(med1, grid, 0.0, phi, "riemannian",
                              grid.t_nodes, sweep=nsw).real
        core = (F ** (m + 1) * weight[None, :]).reshape(
            grid.n_t, grid.n_x, grid.n_theta)
        fiber = (core * pw[None, :, :]).sum(axis=2)
        integrals.append(float(np.sum(tw[:, None] * dq * fiber)))
        density += fiber
    density *= dq
    integrals = np.asarray(integrals)
    scale = max(float(np.abs(integrals).max()), 1e-300)
    ordered = bool(integrals.min() >= -1e-10 * scale)
    flat = int(np.argmax(density))
    it, ix = np.unravel_index(flat, density.shape)
    return MonotonicityCertificate(
        ordered=ordered, integrals=integrals,
        locator_time_index=int(it), locator_space_index=int(ix),
        locator_time=float(grid.t_nodes[it]),
        locator_position=grid.x_nodes[ix].copy(),
        density=density,
    )
