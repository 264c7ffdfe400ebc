"""Unit tests for grids, quadrature, field storage, and the time FFT."""

import math

import numpy as np
import pytest

from raylight.geometry import DiskDomain, make_domain
from raylight.grid import (
    GridError,
    PhaseField,
    SpacetimeField,
    boundary_ray_chart,
    build_grid,
    integrate_santalo,
    load_field,
    save_field,
    time_fft,
)


@pytest.fixture(scope="module")
def disk_grid():
    return build_grid(DiskDomain(1.0), T=2.0, N_t=16, N_x=2048, N_theta=64)


def smooth_phase_field(grid, rng):
    """Random band-limited positive test function on the sphere bundle."""
    xs, th = grid.x_nodes, grid.theta_nodes
    F = np.full((grid.n_x, grid.n_theta), 3.0)
    for _ in range(4):
        k = rng.normal(size=2)
        ph = rng.uniform(0, 2 * math.pi, 2)
        amp = rng.uniform(0.2, 1.0)
        F += amp * np.outer(
            np.sin(xs @ k + ph[0]), 1.0 + 0.5 * np.cos(th + ph[1])
        )
    return F


class TestBuildGrid:
    def test_counts_validation(self):
        dom = DiskDomain(1.0)
        with pytest.raises(GridError):
            build_grid(dom, 2.0, 1, 256, 16)
        with pytest.raises(GridError):
            build_grid(dom, 2.0, 8, 3, 16)
        with pytest.raises(GridError):
            build_grid(dom, 2.0, 8, 256, 2)
        with pytest.raises(GridError):
            build_grid(dom, -1.0, 8, 256, 16)
        with pytest.raises(GridError):
            build_grid(dom, 2.0, 8, 256, 15)  # odd angle count

    def test_spatial_weights_sum_to_area(self, disk_grid):
        assert abs(disk_grid.x_weights.sum() - math.pi) < 5e-3 * math.pi

    def test_angular_weights_sum_exactly(self, disk_grid):
        assert abs(disk_grid.n_theta * disk_grid.dtheta - 2 * math.pi) < 1e-14

    def test_time_grid(self, disk_grid):
        assert disk_grid.t_nodes[0] == 0.0
        assert disk_grid.t_nodes[-1] == pytest.approx(2.0)
        assert np.allclose(np.diff(disk_grid.t_nodes), disk_grid.dt)

    def test_boundary_ray_weights_positive_incoming(self, disk_grid):
        b = disk_grid.boundary
        assert np.all(b.weights > 0)
        nrm = disk_grid.domain.outward_normal(b.points)
        d = np.stack([np.cos(b.thetas), np.sin(b.thetas)], axis=-1)
        assert np.all(np.einsum("ij,ij->i", nrm, d) < 0)  # strictly incoming
        # weights integrate d-xi: total = perimeter * int cos(alpha) = 2 pi * 2
        assert b.weights.sum() == pytest.approx(4 * math.pi, rel=1e-3)

    def test_standalone_chart_matches_grid_boundary(self, disk_grid):
        b = disk_grid.boundary
        chart = boundary_ray_chart(disk_grid.domain, b.n_ell, b.n_alpha)
        for name in ("ell", "alpha", "points", "thetas", "weights", "tau"):
            assert np.array_equal(getattr(chart, name), getattr(b, name)), name
        assert (chart.n_ell, chart.n_alpha) == (b.n_ell, b.n_alpha)

    def test_standalone_chart_custom_resolution(self):
        dom = DiskDomain(1.0)
        chart = boundary_ray_chart(dom, 48, 40)
        assert len(chart.ell) == 48 * 40
        assert chart.weights.sum() == pytest.approx(4 * math.pi, rel=1e-3)
        with pytest.raises(GridError):
            boundary_ray_chart(dom, 0, 8)


class TestSantalo:
    def test_constant_field_closed_form(self, disk_grid):
        F = np.ones((disk_grid.n_x, disk_grid.n_theta))
        assert integrate_santalo(disk_grid, F) == pytest.approx(2 * math.pi**2, rel=1e-9)

    def test_zero_field(self, disk_grid):
        F = np.zeros((disk_grid.n_x, disk_grid.n_theta))
        assert integrate_santalo(disk_grid, F) == 0.0

    def test_backward_exit_time_integrand(self, disk_grid):
        g = disk_grid
        xs = np.repeat(g.x_nodes, g.n_theta, axis=0)
        th = np.tile(g.theta_nodes, g.n_x)
        tau_b = g.domain.exit_forward(xs, th + math.pi).reshape(g.n_x, g.n_theta)
        vol = g.integrate_phase(tau_b)
        san = integrate_santalo(g, tau_b)
        assert abs(vol - san) < 0.01 * abs(vol)

    def test_twenty_random_smooth_fields(self, disk_grid):
        rng = np.random.default_rng(2026)
        for _ in range(20):
            F = smooth_phase_field(disk_grid, rng)
            vol = disk_grid.integrate_phase(F)
            san = integrate_santalo(disk_grid, F)
            assert abs(vol - san) < 0.01 * abs(vol)

    def test_conformal_domain_identity(self):
        dom = make_domain(
            {"kind": "conformal", "radius": 1.0,
             "factor": {"name": "quadratic", "beta": 0.1}}
        )
        g = build_grid(dom, T=2.0, N_t=8, N_x=512, N_theta=32)
        rng = np.random.default_rng(5)
        F = smooth_phase_field(g, rng)
        vol = g.integrate_phase(F)
        san = integrate_santalo(g, F)
        assert abs(vol - san) < 0.01 * abs(vol)

    def test_ellipse_domain_identity(self):
        g = build_grid(make_domain({"kind": "ellipse", "a": 1.3, "b": 0.8}),
                       T=2.0, N_t=8, N_x=1024, N_theta=32)
        rng = np.random.default_rng(6)
        F = smooth_phase_field(g, rng)
        assert abs(g.integrate_phase(F) - integrate_santalo(g, F)) < 0.01 * abs(
            g.integrate_phase(F)
        )

    def test_shape_mismatch_raises(self, disk_grid):
        with pytest.raises(GridError):
            integrate_santalo(disk_grid, np.ones((3, 3)))


class TestInterpolation:
    def test_reproduces_node_values(self, disk_grid):
        g = disk_grid
        rng = np.random.default_rng(1)
        F = rng.normal(size=(g.n_x, g.n_theta))
        take = rng.integers(0, g.n_x, 200)
        kk = rng.integers(0, g.n_theta, 200)
        got = g.interp_phase(F, g.x_nodes[take], g.theta_nodes[kk])
        assert np.max(np.abs(got - F[take, kk])) < 1e-12

    def test_smooth_function_accuracy(self, disk_grid):
        g = disk_grid
        def f(x, th):
            return np.sin(2 * x[:, 0] - x[:, 1]) * (1 + 0.5 * np.cos(th))
        xs, th = g.phase_points()
        F = f(xs, th).reshape(g.n_x, g.n_theta)
        rng = np.random.default_rng(3)
        r = 0.97 * np.sqrt(rng.uniform(0, 1, 500))
        ang = rng.uniform(0, 2 * math.pi, 500)
        q = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
        qth = rng.uniform(0, 2 * math.pi, 500)
        got = g.interp_phase(F, q, qth)
        assert np.max(np.abs(got - f(q, qth))) < 0.02

    def test_continuity_across_center(self, disk_grid):
        g = disk_grid
        xs, th = g.phase_points()
        F = (xs[:, 0] + 2 * xs[:, 1] + 3).reshape(g.n_x, g.n_theta) * np.ones(
            (1, g.n_theta)
        )
        eps = 1e-9
        a = g.interp_phase(F, np.array([[eps, 0.0]]), np.array([0.3]))
        b = g.interp_phase(F, np.array([[-eps, 0.0]]), np.array([0.3]))
        assert abs(a - b) < 1e-6

    def test_theta_periodicity(self, disk_grid):
        g = disk_grid
        rng = np.random.default_rng(8)
        F = rng.normal(size=(g.n_x, g.n_theta))
        pts = np.tile(g.x_nodes[100], (5, 1))
        th = rng.uniform(0, 2 * math.pi, 5)
        assert np.allclose(
            g.interp_phase(F, pts, th), g.interp_phase(F, pts, th + 2 * math.pi)
        )

    def test_flip_theta_involution_and_shift(self, disk_grid):
        g = disk_grid
        rng = np.random.default_rng(9)
        F = rng.normal(size=(g.n_x, g.n_theta))
        assert np.array_equal(g.flip_theta(g.flip_theta(F)), F)
        k = 7
        assert np.allclose(
            g.flip_theta(F)[:, k], F[:, (k + g.n_theta // 2) % g.n_theta]
        )


class TestNorms:
    def test_monotone_under_domination(self, disk_grid):
        rng = np.random.default_rng(4)
        F = rng.normal(size=(disk_grid.n_x, disk_grid.n_theta))
        G = F * rng.uniform(1.0, 2.0, size=F.shape)
        assert disk_grid.norm_l2(F) <= disk_grid.norm_l2(G)
        assert disk_grid.norm_linf(F) <= disk_grid.norm_linf(G)

    def test_l2_of_constant(self, disk_grid):
        F = 2.0 * np.ones((disk_grid.n_x, disk_grid.n_theta))
        # ||F||^2 = 4 * area * 2 pi
        assert disk_grid.norm_l2(F) == pytest.approx(
            math.sqrt(4 * math.pi * 2 * math.pi), rel=1e-9
        )


class TestTimeFFT:
    def test_roundtrip_identity(self):
        rng = np.random.default_rng(12)
        f = rng.normal(size=(33, 5)) + 1j * rng.normal(size=(33, 5))
        eta, spec = time_fft(f, dt=0.05, t0=-0.4)
        back = time_fft(spec, dt=0.05, direction="inverse", t0=-0.4, n_time=33)
        assert np.max(np.abs(back - f)) < 1e-12

    def test_delta_pulse_spectrum(self):
        n, dt = 64, 0.1
        f = np.zeros(n)
        n0 = 17
        f[n0] = 1.0
        eta, spec = time_fft(f, dt=dt)
        assert np.allclose(np.abs(spec), dt, atol=1e-13)  # flat magnitude
        expected = dt * np.exp(-1j * eta * n0 * dt)  # linear phase
        assert np.max(np.abs(spec - expected)) < 1e-12

    def test_gaussian_pulse_analytic_transform(self):
        T, n = 8.0, 513
        t = np.linspace(0, T, n)
        dt = t[1] - t[0]
        s = 0.5
        f = np.exp(-((t - T / 2) ** 2) / (2 * s**2))
        eta, spec = time_fft(f, dt=dt)
        analytic = s * math.sqrt(2 * math.pi) * np.exp(-(s**2) * eta**2 / 2) * np.exp(
            -1j * eta * T / 2
        )
        assert np.max(np.abs(spec - analytic)) < 1e-6

    def test_parseval_with_documented_normalization(self):
        rng = np.random.default_rng(13)
        n, dt = 50, 0.07
        f = rng.normal(size=n) + 1j * rng.normal(size=n)
        eta, spec = time_fft(f, dt=dt)
        d_eta = eta[1] - eta[0]
        lhs = np.sum(np.abs(spec) ** 2) * d_eta / (2 * math.pi)
        rhs = dt * np.sum(np.abs(f) ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_zero_padding_at_least_double(self):
        f = np.ones(40)
        eta, spec = time_fft(f, dt=0.1)
        assert len(eta) >= 80

    def test_bad_direction(self):
        with pytest.raises(ValueError):
            time_fft(np.ones(8), 0.1, direction="sideways")


class TestFieldIO:
    def test_phase_field_roundtrip(self, disk_grid, tmp_path):
        rng = np.random.default_rng(21)
        vals = rng.normal(size=(4, disk_grid.n_x, disk_grid.n_theta)) + 1j * rng.normal(
            size=(4, disk_grid.n_x, disk_grid.n_theta)
        )
        fld = PhaseField(disk_grid, vals, name="test", units="1")
        p = tmp_path / "field.bin"
        save_field(p, fld)
        # reload with the grid handed over and with the grid rebuilt
        back = load_field(p, grid=disk_grid)
        assert np.array_equal(back.values, vals)
        rebuilt = load_field(p)
        assert np.array_equal(rebuilt.values, vals)
        assert rebuilt.grid.n_x == disk_grid.n_x
        assert isinstance(back, PhaseField)

    def test_binary_layout(self, disk_grid, tmp_path):
        vals = np.arange(disk_grid.n_x, dtype=float)[None, :] * (1 + 2j)
        vals = np.repeat(vals, disk_grid.n_t, axis=0)
        fld = SpacetimeField(disk_grid, vals, name="layout")
        p = tmp_path / "st.bin"
        save_field(p, fld)
        raw = np.frombuffer(p.read_bytes(), dtype="<f8")
        assert raw.size == 2 * vals.size  # (re, im) pairs
        assert raw[0] == 0.0 and raw[1] == 0.0
        assert raw[2] == 1.0 and raw[3] == 2.0  # x index 1, re then im
        meta = (tmp_path / "st.bin.meta").read_text()
        assert "t-major, then x, then theta" in meta
        assert "little-endian" in meta

    def test_validation_rejects_bad_fields(self, disk_grid):
        with pytest.raises(GridError):
            PhaseField(disk_grid, np.ones((3, 3)))
        bad = np.ones((disk_grid.n_x, disk_grid.n_theta))
        bad[0, 0] = np.nan
        with pytest.raises(GridError):
            PhaseField(disk_grid, bad)
        with pytest.raises(GridError):
            SpacetimeField(disk_grid, np.ones((7, disk_grid.n_x + 1)))
