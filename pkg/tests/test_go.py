"""Tests for the oscillatory probe builder (go module)."""

import math

import numpy as np
import pytest

from raylight.geometry import make_domain
from raylight.grid import PhaseGrid
from raylight.media import (
    Medium,
    make_medium,
    mu_isotropic,
    mu_support_cutoff,
    validate_class_M,
)
from raylight.go import (
    BoundaryPulse,
    ClassMViolationError,
    ProbeWorkspace,
    build_go,
    decay_scan,
    default_lambdas,
    incoming_trace,
    leading_values_at,
    make_pulse,
    probe_residual,
    theta_sigma,
)
from raylight.sweep import RaySweep
from raylight.transport import BoundaryData, pde_residual, solve_linear

DISK = make_domain({"kind": "disk", "radius": 1.0})
LENS = make_domain({"kind": "conformal", "radius": 1.0,
                    "factor": {"name": "quadratic", "beta": 0.1}})


def sigma_half(xs, thetas):
    return 0.5 * np.ones(len(np.atleast_2d(xs)))


def sigma_gauss(xs, thetas):
    xs = np.atleast_2d(xs)
    return 0.8 * np.exp(-(xs[:, 0] ** 2 + xs[:, 1] ** 2) / 0.5)


def linear_residual(med, field, grid, *, n_sample=2000, seed=3):
    """PDE residual of a field in the linear equation (power term off)."""
    lin = Medium(sigma=med.sigma, mu=med.mu, q=None, m=med.m,
                 sigma0=med.sigma0, mu0=med.mu0)
    return pde_residual(lin, field, grid, n_sample=n_sample, seed=seed)


class TestChordAttenuation:
    def test_no_absorption_gives_unity(self):
        g = PhaseGrid(DISK, 1.0, 17, 128, 8)
        th = theta_sigma(None, g)
        assert np.max(np.abs(th.values - 1.0)) == 0.0

    def test_unit_absorption_matches_exit_time_exponential(self):
        g = PhaseGrid(DISK, 1.0, 33, 128, 8)
        med = make_medium(sigma=lambda xs, t: np.ones(len(np.atleast_2d(xs))),
                          grid=g)
        # center of the unit disk: backward chord length 1 in any direction
        val = theta_sigma(med, g, nodes=(np.zeros((1, 2)), np.array([0.7])))
        assert abs(val[0] - math.exp(-1.0)) < 1e-12
        # everywhere: constant absorption integrates exactly to the chord length
        from raylight.sweep import RaySweep
        sw = RaySweep(g, None, mode="geometry")
        tau = sw.tau.reshape(g.n_x, g.n_theta)
        th = theta_sigma(med, g)
        assert np.max(np.abs(th.values - np.exp(-tau))) < 1e-12

    def test_sign_flip_gives_reciprocal(self):
        g = PhaseGrid(DISK, 1.0, 33, 128, 8)
        med = make_medium(sigma=sigma_gauss, grid=g)
        plus = theta_sigma(med, g, sign=1.0)
        minus = theta_sigma(med, g, sign=-1.0)
        assert np.max(np.abs(plus.values * minus.values - 1.0)) < 1e-12

    @pytest.mark.parametrize("dom", [DISK, LENS], ids=["disk", "lens"])
    def test_flow_derivative_of_log_equals_absorption(self, dom):
        # Central difference of log(attenuation) along the flow recovers
        # -sigma at the default ray step.
        g = PhaseGrid(dom, 2.0, 128, 64, 8)
        med = make_medium(sigma=sigma_gauss, grid=g)
        rng = np.random.default_rng(5)
        r = 0.7 * np.sqrt(rng.uniform(0.05, 1.0, 20))
        ang = rng.uniform(0, 2 * math.pi, 20)
        xs = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
        th = rng.uniform(0, 2 * math.pi, 20)
        h = g.dt
        xp, tp = dom.flow(xs, th, h)
        xm, tm = dom.flow(xs, th, -h)
        lp = np.log(theta_sigma(med, g, nodes=(xp, tp)))
        lm = np.log(theta_sigma(med, g, nodes=(xm, tm)))
        fd = (lp - lm) / (2.0 * h)
        assert np.max(np.abs(fd + sigma_gauss(xs, th))) < 1e-3


class TestBoundaryPulse:
    def test_support_and_peak(self):
        g = PhaseGrid(DISK, 2.0, 17, 64, 8)
        phi = make_pulse(g)
        T = 2.0
        # vanishes at t=0 and t=T, peaks at the center
        assert phi(0.0, 0.0, 0.0) == 0.0
        assert phi(T, 0.0, 0.0) == 0.0
        assert phi(0.4 * T, 0.0, 0.0) == pytest.approx(1.0)
        assert phi.sup_norm == 1.0

    def test_arclength_wraps_periodically(self):
        L = DISK.boundary_length
        phi = BoundaryPulse(boundary_length=L, t_center=0.5, t_width=0.4,
                            ell_center=0.0, ell_width=0.5)
        a = phi(0.5, 0.1, 0.0)
        b = phi(0.5, L + 0.1, 0.0)
        c = phi(0.5, 0.1 - L, 0.0)
        assert a == pytest.approx(b) and a == pytest.approx(c)
        assert a > 0.0

    def test_smooth_compact_support(self):
        L = DISK.boundary_length
        phi = BoundaryPulse(boundary_length=L, t_center=0.5, t_width=0.2,
                            ell_center=1.0, ell_width=0.5, alpha_width=0.8)
        assert phi(0.29, 1.0, 0.0) == 0.0
        assert phi(0.5, 1.0, 0.81) == 0.0
        assert phi(0.5, 1.51 + 1.0, 0.0) == 0.0
        assert phi(0.5, 1.0, 0.0) > 0.0


class TestLeadingValuesAt:
    def test_matches_probe_leading_on_grid(self):
        g = PhaseGrid(DISK, 1.0, 17, 128, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        pr = build_go(med, g, 25.0, n_fine=40, phase_kind="riemannian")
        vals = leading_values_at(med, g, 25.0, pr.phi, "riemannian", g.t_nodes)
        assert vals.shape == (g.n_t, g.n_x * g.n_theta)
        assert np.allclose(
            vals.reshape(pr.leading.values.shape), pr.leading.values
        )

    def test_scalar_time_is_a_row(self):
        g = PhaseGrid(DISK, 1.0, 17, 64, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        phi = make_pulse(g)
        row = leading_values_at(med, g, 18.0, phi, "riemannian", 0.37)
        both = leading_values_at(
            med, g, 18.0, phi, "riemannian", np.array([0.37, 0.8])
        )
        assert row.shape == (g.n_x * g.n_theta,)
        assert np.array_equal(row, both[0])

    def test_entry_nodes_reproduce_incoming_trace(self):
        """On the incoming boundary the leading term IS the supplied trace."""
        g = PhaseGrid(DISK, 1.0, 17, 64, 16)
        med = make_medium(sigma=sigma_gauss, grid=g)
        b = g.boundary
        nrm = DISK.outward_normal(b.points)
        sw = RaySweep(g, med.sigma_at,
                      nodes=(b.points - 1e-9 * nrm, b.thetas), mode="geometry")
        phi = make_pulse(g)
        lam = 30.0
        tr = incoming_trace(g, lam, phi, "riemannian")
        for t0 in (0.3, 0.62):
            vals = leading_values_at(
                med, g, lam, phi, "riemannian", t0, sweep=sw
            )
            expect = np.asarray(tr(t0, b.ell, b.alpha))
            assert np.abs(vals - expect.ravel()).max() < 1e-6


class TestBuildProbe:
    def test_zero_frequency_rejected(self):
        g = PhaseGrid(DISK, 1.0, 17, 64, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        with pytest.raises(ValueError):
            build_go(med, g, 0.0)

    def test_unknown_phase_kind_rejected(self):
        g = PhaseGrid(DISK, 1.0, 17, 64, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        with pytest.raises(ValueError):
            build_go(med, g, 10.0, phase_kind="parabolic")

    def test_no_scattering_remainder_is_zero(self):
        g = PhaseGrid(DISK, 1.0, 33, 128, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        pr = build_go(med, g, 20.0, n_fine=60)
        assert np.all(pr.remainder.values == 0.0)
        assert pr.report["scattered_source_l2"] == 0.0

    @pytest.mark.parametrize("phase_kind", ["euclidean", "riemannian"])
    def test_free_transport_identity(self, phase_kind):
        # sigma = mu = 0: pulse times carrier alone solves the equation, and
        # the probe reproduces the direct simulation from its boundary trace.
        g = PhaseGrid(DISK, 1.0, 33, 256, 16)
        med = make_medium(grid=g)
        pr = build_go(med, g, 20.0, phase_kind=phase_kind, n_fine=60)
        res = probe_residual(med, pr, n_sample=2000, seed=3)
        trace = incoming_trace(g, 20.0, pr.phi, phase_kind)
        f = solve_linear(med, None, BoundaryData(h_minus=trace), g)
        res_dir = linear_residual(med, f, g)
        assert res <= 5.0 * res_dir
        sup = np.max(np.abs(f.values))
        assert np.max(np.abs(pr.field.values - f.values)) < 1e-10 * max(sup, 1.0)

    def test_probe_residual_within_5x_of_direct_solve(self):
        # sigma=0.5, isotropic kernel, lam=20: assembled probe passes the
        # same discrete residual check as the solver's own solution.
        g = PhaseGrid(DISK, 1.0, 33, 256, 16)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.05), grid=g)
        pr = build_go(med, g, 20.0, n_fine=240)
        res = probe_residual(med, pr, n_sample=2000, seed=3)
        trace = incoming_trace(g, 20.0, pr.phi, "euclidean")
        f = solve_linear(med, None, BoundaryData(h_minus=trace), g)
        res_dir = linear_residual(med, f, g)
        assert res <= 5.0 * res_dir
        # the probe is also close to the direct solution field itself
        diff = np.max(np.abs(pr.field.values - f.values))
        assert diff < 0.05 * np.max(np.abs(f.values))

    def test_remainder_vanishes_on_data_surfaces(self):
        # zero initial slice exactly; the incoming-boundary trace (sampled
        # through interpolation that reaches half a cell inside, where
        # grazing chords already carry O(sqrt(cell)) of source) shrinks
        # under spatial refinement.
        ratios = []
        for nx in (256, 1024):
            g = PhaseGrid(DISK, 1.0, 33, nx, 16)
            med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.05), grid=g)
            pr = build_go(med, g, 20.0, n_fine=240)
            r = pr.remainder.values
            assert np.max(np.abs(r[0])) == 0.0
            b = g.boundary
            worst = max(
                np.max(np.abs(g.interp_phase(r[n], b.points, b.thetas)))
                for n in (8, 16, 24)
            )
            ratios.append(worst / np.max(np.abs(r)))
        assert ratios[1] <= 0.75 * ratios[0]
        assert ratios[1] <= 0.35

    def test_separable_and_generic_kernel_paths_agree(self):
        g = PhaseGrid(DISK, 1.0, 17, 128, 12)
        ker = mu_isotropic(0.05)
        med_fast = make_medium(sigma=sigma_half, mu=ker, grid=g)
        med_slow = make_medium(sigma=sigma_half,
                               mu=lambda xs, ta, tb: ker(xs, ta, tb), grid=g)
        a = build_go(med_fast, g, 15.0, n_fine=90)
        b = build_go(med_slow, g, 15.0, n_fine=90)
        assert np.max(np.abs(a.leading.values - b.leading.values)) == 0.0
        assert np.max(np.abs(a.remainder.values - b.remainder.values)) < 1e-12

    def test_workspace_reuse_matches_fresh_build(self):
        g = PhaseGrid(DISK, 1.0, 17, 128, 12)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.05), grid=g)
        ws = ProbeWorkspace(med, g, n_fine=90)
        a = build_go(med, g, 15.0, workspace=ws, n_fine=90)
        b = build_go(med, g, 15.0, n_fine=90)
        assert np.max(np.abs(a.field.values - b.field.values)) < 1e-13


class TestAdjointProbe:
    def test_adjoint_probe_satisfies_adjoint_equation(self):
        # eta = m * lam probe for the adjoint equation; checked through the
        # time/direction-reversal involution against a forward baseline
        # at the same frequency.
        g = PhaseGrid(DISK, 1.0, 33, 256, 16)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.05), grid=g)
        lam_base = 20.0
        eta = med.m * lam_base
        pra = build_go(med, g, eta, adjoint=True, n_fine=240)
        prf = build_go(med, g, eta, n_fine=240)
        res_a = probe_residual(med, pra, n_sample=2000, seed=3)
        res_f = probe_residual(med, prf, n_sample=2000, seed=3)
        assert res_a <= 5.0 * res_f

    def test_adjoint_slot_swap_with_asymmetric_kernel(self):
        # a slot-asymmetric kernel distinguishes K from K*; the adjoint
        # probe must still satisfy its own equation.
        g = PhaseGrid(DISK, 1.0, 33, 192, 16)

        def mu_fn(xs, ta, tb):
            base = 0.02 * (1.0 + 0.5 * np.cos(np.asarray(ta) - np.asarray(tb) + 0.7))
            return base * np.ones(len(np.atleast_2d(xs)))

        med = make_medium(sigma=sigma_half, mu=mu_fn, grid=g)
        pra = build_go(med, g, 20.0, adjoint=True, n_fine=180)
        prf = build_go(med, g, 20.0, n_fine=180)
        res_a = probe_residual(med, pra, n_sample=2000, seed=3)
        res_f = probe_residual(med, prf, n_sample=2000, seed=3)
        assert res_a <= 5.0 * res_f

    def test_adjoint_attenuation_uses_opposite_sign(self):
        g = PhaseGrid(DISK, 1.0, 33, 128, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        fwd = build_go(med, g, 12.0, n_fine=60)
        adj = build_go(med, g, 12.0, adjoint=True, n_fine=60)
        # same pulse, opposite attenuation: |adjoint| >= |forward| pointwise
        af = np.abs(fwd.leading.values)
        aa = np.abs(adj.leading.values)
        mask = af > 1e-14
        assert np.all(aa[mask] >= af[mask] * (1.0 - 1e-12))


class TestClassMGate:
    def test_isotropic_kernel_rejected_for_riemannian_phase(self):
        g = PhaseGrid(LENS, 1.0, 17, 128, 8)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.02), grid=g)
        with pytest.raises(ClassMViolationError):
            build_go(med, g, 10.0, phase_kind="riemannian")

    def test_turning_cutoff_kernel_accepted(self):
        g = PhaseGrid(LENS, 1.0, 17, 128, 8)
        ker = mu_support_cutoff(LENS, 0.05)
        med = make_medium(sigma=sigma_half, mu=ker, grid=g)
        assert validate_class_M(med, LENS, g)
        pr = build_go(med, g, 10.0, phase_kind="riemannian", n_fine=90)
        assert np.isfinite(pr.report["remainder_l2"])

    def test_euclidean_phase_needs_no_kernel_restriction(self):
        g = PhaseGrid(DISK, 1.0, 17, 128, 8)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.02), grid=g)
        pr = build_go(med, g, 10.0, phase_kind="euclidean", n_fine=90)
        assert np.isfinite(pr.report["remainder_l2"])


class TestDecayScan:
    def test_ladder_validation(self):
        g = PhaseGrid(DISK, 1.0, 17, 64, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        with pytest.raises(ValueError):
            decay_scan(med, g, [10.0])
        with pytest.raises(ValueError):
            decay_scan(med, g, [10.0, 20.0, 40.0])
        with pytest.raises(ValueError):
            decay_scan(med, g, [10.0, 10.0, 80.0])

    def test_no_scattering_gives_zero_table(self):
        g = PhaseGrid(DISK, 1.0, 17, 64, 8)
        med = make_medium(sigma=sigma_half, grid=g)
        tab = decay_scan(med, g, [5.0, 10.0, 20.0, 40.0], n_fine=30)
        assert np.all(tab.remainder_norms == 0.0)
        assert np.all(tab.source_norms == 0.0)
        assert math.isnan(tab.slope("remainder"))

    def test_euclidean_remainder_decays(self, tmp_path):
        # frequency ladder {10..160}/diameter on an absorbing, isotropically
        # redistributing disk medium: remainder norms fall monotonically and
        # end below 0.3x their starting value; the uniform sup bound holds
        # with a constant that never grows along the ladder.
        g = PhaseGrid(DISK, 1.6, 81, 512, 24)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.05), grid=g)
        lams = default_lambdas(DISK)
        tab = decay_scan(med, g, lams, n_fine=480)
        assert tab.fraction_decreasing("remainder") == 1.0
        assert tab.remainder_norms[-1] < 0.3 * tab.remainder_norms[0]
        assert tab.slope("remainder") < -0.5
        # scattered source follows the stationary-phase rate ~ -1/2
        assert tab.slope("source") < -0.35
        csv_path = tmp_path / "decay.csv"
        tab.write_csv(csv_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0].split(",") == [
            "lambda", "remainder_l2", "scattered_source_l2", "step_slope"]
        assert len(lines) == 1 + len(lams)

    def test_sup_norm_bound_holds_uniformly(self):
        # reported constant in |r| <= C * sigma0 * |phi| stays below a fixed
        # modest value and does not grow with frequency (the measured tight
        # constant actually decreases, consistent with an upper bound that
        # is uniform in frequency).
        g = PhaseGrid(DISK, 1.6, 81, 384, 16)
        med = make_medium(sigma=sigma_half, mu=mu_isotropic(0.05), grid=g)
        ws = ProbeWorkspace(med, g, n_fine=320)
        cs = []
        for lam in (5.0, 20.0, 80.0):
            pr = build_go(med, g, lam, workspace=ws, n_fine=320)
            cs.append(pr.report["sup_bound_ratio"])
        assert max(cs) <= 1.0
        assert cs[-1] <= 1.2 * cs[0]

    def test_riemannian_scan_rate_and_decay(self):
        # conformally scaled disk with a turning-direction-cutoff kernel:
        # scattered-source norms decay with log-log slope <= -0.8 (one
        # integration by parts in the fiber) and the remainder ends below
        # 0.3x its starting value.
        g = PhaseGrid(LENS, 1.6, 65, 256, 16)
        ker = mu_support_cutoff(LENS, 0.05)
        med = make_medium(sigma=sigma_half, mu=ker, grid=g)
        tab = decay_scan(med, g, default_lambdas(LENS),
                         phase_kind="riemannian", n_fine=320)
        assert tab.phase_kind == "riemannian"
        assert tab.slope("source") <= -0.8
        assert tab.fraction_decreasing("remainder") == 1.0
        assert tab.remainder_norms[-1] < 0.3 * tab.remainder_norms[0]
