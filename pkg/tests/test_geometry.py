"""Unit tests for domains, exit times, geodesic tracing, and boundary weights."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raylight.geometry import (
    ConformalDomain,
    DiskDomain,
    EllipseDomain,
    InvalidDomainError,
    OutsideDomainError,
    PhasePoint,
    boundary_measure_weight,
    exit_times,
    make_domain,
    trace_geodesic,
    vertical_tau_derivative,
)


def polar_backward_exit(r, eta, theta):
    """Independent oracle: backward exit time on the unit disk in polar form."""
    d = theta - eta
    return r * np.cos(d) + np.sqrt(1.0 - (r * np.sin(d)) ** 2)


def polar_backward_exit_dtheta(r, eta, theta):
    """Oracle for the theta-derivative of the backward exit time (unit disk)."""
    d = theta - eta
    root = np.sqrt(1.0 - (r * np.sin(d)) ** 2)
    return -r * np.sin(d) * (1.0 + r * np.cos(d) / root)


def random_interior(rng, n, radius=1.0, rmax=0.999):
    r = radius * rmax * np.sqrt(rng.uniform(0.0, 1.0, n))
    eta = rng.uniform(0.0, 2.0 * math.pi, n)
    return r, eta


class TestDiskExitTimes:
    def test_matches_polar_closed_form(self):
        rng = np.random.default_rng(42)
        dom = DiskDomain(1.0)
        r, eta = random_interior(rng, 1000)
        theta = rng.uniform(0.0, 2.0 * math.pi, 1000)
        xs = np.stack([r * np.cos(eta), r * np.sin(eta)], axis=-1)
        tb = dom.exit_forward(xs, theta + math.pi)
        expected = polar_backward_exit(r, eta, theta)
        assert np.max(np.abs(tb - expected)) < 1e-8

    def test_reversal_identity(self):
        rng = np.random.default_rng(3)
        dom = DiskDomain(1.0)
        for _ in range(200):
            r, eta = random_interior(rng, 1)
            x = np.array([r[0] * math.cos(eta[0]), r[0] * math.sin(eta[0])])
            th = rng.uniform(0.0, 2.0 * math.pi)
            tf, tb = exit_times(dom, PhasePoint(x, th))
            tf_rev, tb_rev = exit_times(dom, PhasePoint(x, th + math.pi))
            assert abs(tf - tb_rev) < 1e-10
            assert abs(tb - tf_rev) < 1e-10

    def test_center_exit_is_radius(self):
        dom = DiskDomain(2.5)
        tf, tb = exit_times(dom, PhasePoint(np.zeros(2), 1.234))
        assert abs(tf - 2.5) < 1e-12 and abs(tb - 2.5) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(
        r=st.floats(0.0, 0.99),
        eta=st.floats(0.0, 2 * math.pi),
        theta=st.floats(0.0, 2 * math.pi),
        frac=st.floats(0.05, 0.95),
    )
    def test_backward_time_advances_along_flow(self, r, eta, theta, frac):
        # Flowing forward by s increases the backward exit time by exactly s.
        dom = DiskDomain(1.0)
        x = np.array([r * math.cos(eta), r * math.sin(eta)])
        tf, tb = exit_times(dom, PhasePoint(x, theta))
        s = frac * tf
        x2 = x + s * np.array([math.cos(theta), math.sin(theta)])
        _, tb2 = exit_times(dom, PhasePoint(x2, theta))
        assert abs(tb2 - (tb + s)) < 1e-9


class TestVerticalDerivative:
    def test_disk_closed_form_vs_finite_difference(self):
        rng = np.random.default_rng(11)
        dom = DiskDomain(1.0)
        r, eta = random_interior(rng, 300, rmax=0.95)
        theta = rng.uniform(0.0, 2.0 * math.pi, 300)
        xs = np.stack([r * np.cos(eta), r * np.sin(eta)], axis=-1)
        h = 1e-4
        fd = (
            dom.exit_forward(xs, theta + h + math.pi)
            - dom.exit_forward(xs, theta - h + math.pi)
        ) / (2 * h)
        for i in range(300):
            got = vertical_tau_derivative(dom, PhasePoint(xs[i], theta[i]))
            assert abs(got - fd[i]) < 1e-5
            oracle = polar_backward_exit_dtheta(r[i], eta[i], theta[i])
            assert abs(got - oracle) < 1e-10

    def test_ellipse_vs_implicit_differentiation(self):
        # Oracle: differentiate the quadratic exit equation A t^2 + 2 B t + C =0
        # implicitly in the angle; package value uses central differences.
        dom = EllipseDomain(1.3, 0.8)
        rng = np.random.default_rng(5)
        sx = np.array([1 / 1.3, 1 / 0.8])
        for _ in range(100):
            x = rng.uniform(-1.0, 1.0, 2) * np.array([1.3, 0.8]) * 0.9
            if dom.boundary_level(x) > -0.05:
                continue
            theta = rng.uniform(0.0, 2.0 * math.pi)
            phi = theta + math.pi  # backward exit = forward exit at flipped angle
            u = np.array([math.cos(phi), math.sin(phi)])
            du = np.array([-math.sin(phi), math.cos(phi)])
            xs_, us_, dus_ = x * sx, u * sx, du * sx
            A, B, C = us_ @ us_, xs_ @ us_, xs_ @ xs_ - 1.0
            tau = (-B + math.sqrt(B * B - A * C)) / A
            dA, dB = 2 * us_ @ dus_, xs_ @ dus_
            oracle = -(dA * tau**2 + 2 * dB * tau) / (2 * A * tau + 2 * B)
            got = vertical_tau_derivative(dom, PhasePoint(x, theta))
            assert abs(got - oracle) < 1e-6


class TestEllipse:
    def test_exit_point_on_boundary(self):
        dom = EllipseDomain(1.3, 0.8)
        rng = np.random.default_rng(9)
        for _ in range(200):
            x = rng.uniform(-1.0, 1.0, 2) * np.array([1.3, 0.8]) * 0.9
            if dom.boundary_level(x) > -1e-3:
                continue
            th = rng.uniform(0.0, 2.0 * math.pi)
            tf, tb = exit_times(dom, PhasePoint(x, th))
            u = np.array([math.cos(th), math.sin(th)])
            assert abs(dom.boundary_level(x + tf * u)) < 1e-10
            assert abs(dom.boundary_level(x - tb * u)) < 1e-10

    def test_boundary_chart_roundtrip(self):
        dom = EllipseDomain(1.3, 0.8)
        ell = np.linspace(0.0, dom.boundary_length, 257)[:-1]
        pts = dom.boundary_point(ell)
        back = dom.boundary_arclength(pts)
        assert np.max(np.abs(back - ell)) < 1e-6
        assert np.max(np.abs(dom.boundary_level(pts))) < 1e-12

    def test_circumference_against_quadrature(self):
        from scipy.integrate import quad

        a, b = 1.3, 0.8
        dom = EllipseDomain(a, b)
        ref, _ = quad(
            lambda t: math.hypot(a * math.sin(t), b * math.cos(t)), 0, 2 * math.pi
        )
        assert abs(dom.boundary_length - ref) < 1e-6


class TestConformal:
    def test_zero_factor_recovers_chords(self):
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0, "factor": {"name": "zero"}}
        )
        disk = DiskDomain(1.0)
        rng = np.random.default_rng(21)
        r, eta = random_interior(rng, 40, rmax=0.9)
        theta = rng.uniform(0.0, 2.0 * math.pi, 40)
        xs = np.stack([r * np.cos(eta), r * np.sin(eta)], axis=-1)
        got = dom.exit_forward(xs, theta)
        ref = disk.exit_forward(xs, theta)
        assert np.max(np.abs(got - ref)) < 1e-9

    def test_forward_backward_retrace(self):
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0,
             "factor": {"name": "quadratic", "beta": 0.1}}
        )
        rng = np.random.default_rng(33)
        r, eta = random_interior(rng, 15, rmax=0.85)
        theta = rng.uniform(0.0, 2.0 * math.pi, 15)
        xs = np.stack([r * np.cos(eta), r * np.sin(eta)], axis=-1)
        tau_f, x_end, th_end = dom.exit_forward_full(xs, theta)
        tau_b = dom.exit_forward(xs, theta + math.pi)
        # Reverse from the forward hit: total length and far endpoint match.
        tau_rev, x_far, _ = dom.exit_forward_full(x_end, th_end + math.pi)
        _, x_back, _ = dom.exit_forward_full(xs, theta + math.pi)
        assert np.max(np.abs(tau_rev - (tau_f + tau_b))) < 1e-6
        assert np.max(np.linalg.norm(x_far - x_back, axis=-1)) < 1e-6

    def test_exit_time_step_self_convergence(self):
        dom = ConformalDomain(
            1.0,
            factor=lambda x: 0.1 * (x[..., 0] ** 2 + x[..., 1] ** 2),
            gradient=lambda x: 0.2 * np.asarray(x, dtype=float),
            validate=False,
        )
        xs = np.array([[0.3, -0.2], [0.0, 0.5], [-0.45, 0.1]])
        th = np.array([0.7, 2.9, 4.4])
        ref = dom.exit_forward(xs, th, step=5e-3)
        errs = []
        for h in (0.16, 0.08, 0.04):
            errs.append(np.max(np.abs(dom.exit_forward(xs, th, step=h) - ref)))
        rate1 = math.log2(errs[0] / errs[1])
        rate2 = math.log2(errs[1] / errs[2])
        assert min(rate1, rate2) > 3.0  # fourth-order integrator

    def test_straightness_of_radial_rays(self):
        # Radially symmetric factor: rays through the center stay straight.
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0,
             "factor": {"name": "quadratic", "beta": 0.1}}
        )
        path = trace_geodesic(dom, PhasePoint(np.zeros(2), 0.3), step=0.01)
        along = np.stack([np.cos(0.3) * np.ones(len(path.s)),
                          np.sin(0.3) * np.ones(len(path.s))], axis=-1)
        cross = path.points[:, 0] * along[:, 1] - path.points[:, 1] * along[:, 0]
        assert np.max(np.abs(cross)) < 1e-8
        assert np.max(np.abs((path.thetas - 0.3 + math.pi) % (2 * math.pi) - math.pi)) < 1e-8

    def test_metric_length_of_radial_chord(self):
        # Along a diameter, arclength = int e^{c} dl; check total exit length.
        from scipy.integrate import quad

        beta = 0.1
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0,
             "factor": {"name": "quadratic", "beta": beta}}
        )
        tf, tb = exit_times(dom, PhasePoint(np.zeros(2), 0.0))
        ref, _ = quad(lambda t: math.exp(beta * t * t), 0.0, 1.0)
        assert abs(tf - ref) < 1e-7 and abs(tb - ref) < 1e-7


class TestTraceGeodesic:
    def test_endpoints_and_spacing(self):
        dom = DiskDomain(1.0)
        p = PhasePoint(np.array([0.2, -0.4]), 1.9)
        path = trace_geodesic(dom, p, step=0.03)
        assert abs(path.s[0] + path.tau_bwd) < 1e-12
        assert abs(path.s[-1] - path.tau_fwd) < 1e-12
        assert np.max(np.diff(path.s)) <= 0.03 + 1e-12
        assert abs(dom.boundary_level(path.points[0])) < 1e-9
        assert abs(dom.boundary_level(path.points[-1])) < 1e-9

    def test_conformal_path_stays_inside(self):
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0,
             "factor": {"name": "quadratic", "beta": 0.1}}
        )
        p = PhasePoint(np.array([0.3, 0.1]), 2.2)
        path = trace_geodesic(dom, p, step=0.02)
        assert np.all(dom.boundary_level(path.points) < 1e-6)
        assert abs(dom.boundary_level(path.points[0])) < 1e-6
        assert abs(dom.boundary_level(path.points[-1])) < 1e-6


class TestBoundaryWeightAndValidation:
    def test_disk_weight_is_cosine_to_normal(self):
        dom = DiskDomain(1.0)
        p = PhasePoint(np.array([1.0, 0.0]), 3 * math.pi / 4)
        assert abs(boundary_measure_weight(dom, p) - math.sqrt(0.5)) < 1e-12

    def test_weight_requires_boundary_point(self):
        dom = DiskDomain(1.0)
        with pytest.raises(OutsideDomainError):
            boundary_measure_weight(dom, PhasePoint(np.array([0.5, 0.0]), 0.0))

    def test_make_domain_rejects_bad_specs(self):
        with pytest.raises(InvalidDomainError):
            make_domain({"kind": "disk", "radius": -1.0})
        with pytest.raises(InvalidDomainError):
            make_domain({"kind": "ellipse", "a": 1.0})
        with pytest.raises(InvalidDomainError):
            make_domain({"kind": "warp"})
        with pytest.raises(InvalidDomainError):
            make_domain({"kind": "conformal", "factor": {"name": "nope"}})
        with pytest.raises(InvalidDomainError):
            make_domain("disk")

    def test_exit_times_rejects_outside_points(self):
        dom = DiskDomain(1.0)
        with pytest.raises(OutsideDomainError):
            exit_times(dom, PhasePoint(np.array([1.5, 0.0]), 0.0))

    def test_area_and_diameter(self):
        assert abs(DiskDomain(2.0).area - 4 * math.pi) < 1e-12
        assert abs(DiskDomain(2.0).diameter - 4.0) < 1e-12
        assert abs(EllipseDomain(1.3, 0.8).area - math.pi * 1.04) < 1e-12
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0,
             "factor": {"name": "quadratic", "beta": 0.1}}
        )
        ref_area = 2 * math.pi * (math.exp(0.2) - 1.0) / 0.4
        assert abs(dom.area - ref_area) < 1e-4
        assert dom.diameter > 2.0  # stretched relative to the Euclidean disk
