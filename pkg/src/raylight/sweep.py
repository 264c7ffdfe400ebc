"""Discrete characteristic sweeps for attenuating transport.

For a set of phase nodes (grid nodes by default, or boundary exit points for
trace evaluation) this module tabulates the backward geodesic of every node
and turns the Duhamel solution formula

    f(t, x, v) = [traced-back data] e^{-int sigma}
                 + int_0^{min(t, tau_bwd)} e^{-int_0^s sigma} S(t-s, flow(-s)) ds

into lagged sparse operations.  The key discretization lock is ray step =
time step: sampling the ray at s_k = k dt makes every retarded time t_n - s_k
land exactly on the time grid, so the source integral is a sum over lags of
sparse interpolation matrices applied to earlier source slices, plus a
boundary-remainder ("tail") term at s = tau_bwd that is linear between the
two bracketing time slices.  Early times (t_n < tau_bwd) truncate the rule
at s = t_n, which only re-weights the s = t_n node and always multiplies the
t = 0 source slice.

Two execution modes share one marching routine:

- ``matrix``: per-lag CSR matrices are assembled once; applications and
  their exact transposes (needed by least-squares inversion) are sparse
  matmuls.  Memory scales with (number of nodes) x (chord steps).
- ``stream``: nothing is stored; each application re-marches the rays and
  accumulates, keeping memory at O(nodes) — used for large default grids.

Attenuation integrals use the same trapezoid nodes with sigma evaluated
exactly at flow points (no spatial interpolation of sigma).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import sparse

from raylight.geometry import ConformalDomain, Domain
from raylight.grid import PhaseGrid

__all__ = ["RaySweep"]

_MATRIX_BUDGET_MB = 600.0


def _is_complex_datum(datum, probe) -> bool:
    if datum is None:
        return False
    if callable(datum):
        return bool(np.iscomplexobj(probe(datum)))
    return bool(np.iscomplexobj(datum))


class RaySweep:
    """Backward-ray tables plus the discrete Duhamel source operator.

    Parameters
    ----------
    grid:
        The phase grid supplying time nodes, interpolation stencils, and the
        boundary chart.
    sigma_fn:
        Vectorized absorption callable ``sigma(xs, thetas)`` or None for 0.
    nodes:
        Optional ``(positions (N,2), angles (N,))`` pair.  Defaults to all
        grid phase nodes in field-flattening order.
    mode:
        ``"matrix"``, ``"stream"``, or ``"auto"`` (matrix when the estimated
        footprint fits the budget).
    """

    def __init__(
        self,
        grid: PhaseGrid,
        sigma_fn: Callable | None = None,
        nodes: tuple[np.ndarray, np.ndarray] | None = None,
        mode: str = "auto",
        matrix_budget_mb: float = _MATRIX_BUDGET_MB,
    ):
        self.grid = grid
        dom: Domain = grid.domain
        self.dom = dom
        self.sigma_fn = sigma_fn
        if nodes is None:
            xs, th = grid.phase_points()
            self.on_grid_nodes = True
        else:
            xs = np.atleast_2d(np.asarray(nodes[0], dtype=float))
            th = np.asarray(nodes[1], dtype=float)
            self.on_grid_nodes = False
        self.nodes_x = xs
        self.nodes_theta = th % (2.0 * math.pi)
        self.n_nodes = len(xs)
        self.dt = grid.dt
        self.n_t = grid.n_t

        # --- backward exit data ------------------------------------------
        # nudge on-boundary nodes inward so exit solvers pick the full chord
        lev = dom.boundary_level(xs)
        xq = xs.copy()
        onb = lev > -1e-12
        if np.any(onb):
            xq[onb] -= 1e-12 * dom.outward_normal(xs[onb])
        if isinstance(dom, ConformalDomain):
            tau, entry_x, end_th = dom.exit_forward_full(xq, self.nodes_theta + math.pi)
            entry_theta = (end_th + math.pi) % (2.0 * math.pi)
        else:
            tau = dom.exit_forward(xq, self.nodes_theta + math.pi)
            u = np.stack([np.cos(self.nodes_theta), np.sin(self.nodes_theta)], axis=-1)
            entry_x = xs - tau[:, None] * u
            entry_theta = self.nodes_theta.copy()
        self.tau = tau
        self.entry_x = entry_x
        self.entry_theta = entry_theta
        self.entry_ell = dom.boundary_arclength(entry_x)
        nrm = dom.outward_normal(entry_x)
        tng = dom.boundary_tangent(self.entry_ell)
        d = np.stack([np.cos(entry_theta), np.sin(entry_theta)], axis=-1)
        self.entry_alpha = np.arctan2(
            np.einsum("ij,ij->i", d, tng), -np.einsum("ij,ij->i", d, nrm)
        )

        k_true = np.ceil(tau / self.dt - 1e-12).astype(int) - 1
        self.K = np.maximum(k_true, 0)
        self.delta = tau - self.K * self.dt
        self.K_eff = np.minimum(self.K, self.n_t - 1)
        self.k_max = int(self.K_eff.max())
        self.sigma_entry = self._sigma(entry_x, entry_theta)

        est_nnz = 8 * 3 * float(np.sum(self.K_eff + 2.0))
        if mode == "auto":
            mode = "matrix" if est_nnz * 12.0 < matrix_budget_mb * 1e6 else "stream"
        if mode not in ("matrix", "stream", "geometry"):
            raise ValueError(f"unknown sweep mode {mode!r}")
        self.mode = mode

        # Theta (total ray attenuation) is produced by the first march.
        self.Theta = np.zeros(self.n_nodes)
        self._E_at_K = np.zeros(self.n_nodes)
        self._conv = None
        self._g0 = None
        self._h0 = None
        self._chord_integral = None
        if mode == "matrix":
            self._assemble_matrices()
        elif mode == "stream":
            self._march(lambda *a: None)  # fills Theta / _E_at_K

    def _require_solver_mode(self) -> None:
        if self.mode == "geometry":
            raise RuntimeError(
                "this sweep was built in geometry-only mode (exit data and "
                "chord attenuation); rebuild with mode='auto'/'matrix'/"
                "'stream' to run transport quadratures"
            )

    # ------------------------------------------------------------------
    def _sigma(self, xs, th):
        if self.sigma_fn is None:
            return np.zeros(len(xs))
        return np.asarray(self.sigma_fn(xs, th), dtype=float)

    def _march(self, visit):
        """Walk all backward rays at parameters s_k = k dt in lockstep.

        Calls ``visit(k, act, idxs, E, x, th)`` at each step, where ``act``
        marks nodes with K_eff >= k, ``idxs = flatnonzero(act)``, ``E`` is the
        attenuation factor at s_k for active nodes, and ``(x, th)`` their flow
        phase points.  Finalizes ``Theta`` and the attenuation at s = K dt.
        """
        conformal = isinstance(self.dom, ConformalDomain)
        n = self.n_nodes
        E = np.ones(n)
        x = self.nodes_x.copy()
        th_rev = (self.nodes_theta + math.pi) % (2.0 * math.pi)
        sig_prev = self._sigma(x, self.nodes_theta)
        for k in range(self.k_max + 1):
            act = self.K_eff >= k
            if k > 0:
                if conformal:
                    xa, ta = self.dom.flow(x[act], th_rev[act], self.dt)
                    x[act] = xa
                    th_rev[act] = ta
                else:
                    u = np.stack([np.cos(th_rev[act]), np.sin(th_rev[act])], axis=-1)
                    x[act] = x[act] + self.dt * u
                th_here = (th_rev[act] + math.pi) % (2.0 * math.pi)
                sig_here = self._sigma(x[act], th_here)
                E[act] = E[act] * np.exp(
                    -0.5 * self.dt * (sig_prev[act] + sig_here)
                )
                sig_prev[act] = sig_here
            idxs = np.flatnonzero(act)
            th_phase = (th_rev[idxs] + math.pi) % (2.0 * math.pi)
            visit(k, act, idxs, E[idxs], x[idxs], th_phase)
            fin = idxs[self.K_eff[idxs] == k]
            if len(fin):
                self._E_at_K[fin] = E[fin]
                uncapped = fin[self.K[fin] == self.K_eff[fin]]
                if len(uncapped):
                    self.Theta[uncapped] = self._E_at_K[uncapped] * np.exp(
                        -0.5 * self.delta[uncapped]
                        * (sig_prev[uncapped] + self.sigma_entry[uncapped])
                    )

    # ------------------------------------------------------------------
    def chord_attenuation(self, sign: float = 1.0) -> np.ndarray:
        """Attenuation over the full backward chord, exp(-sign * int sigma).

        Unlike ``Theta``, which the transport marches only finalize for rays
        whose chord fits inside the time window, this walks every ray all the
        way to its entry point (same trapezoid rule, same flow), so it is
        defined for every node.  The line integral is cached, making the
        opposite sign free.
        """
        if self._chord_integral is None:
            conformal = isinstance(self.dom, ConformalDomain)
            I = np.zeros(self.n_nodes)
            x = self.nodes_x.copy()
            th_rev = (self.nodes_theta + math.pi) % (2.0 * math.pi)
            sig_prev = self._sigma(x, self.nodes_theta)
            for k in range(1, int(self.K.max()) + 1):
                act = self.K >= k
                if conformal:
                    xa, ta = self.dom.flow(x[act], th_rev[act], self.dt)
                    x[act] = xa
                    th_rev[act] = ta
                else:
                    u = np.stack(
                        [np.cos(th_rev[act]), np.sin(th_rev[act])], axis=-1
                    )
                    x[act] = x[act] + self.dt * u
                th_here = (th_rev[act] + math.pi) % (2.0 * math.pi)
                sig_here = self._sigma(x[act], th_here)
                I[act] += 0.5 * self.dt * (sig_prev[act] + sig_here)
                sig_prev[act] = sig_here
            I += 0.5 * self.delta * (sig_prev + self.sigma_entry)
            self._chord_integral = I
        return np.exp(-float(sign) * self._chord_integral)

    # ------------------------------------------------------------------
    def _tail_weights(self):
        """(Ta, Tb) weights of the boundary-remainder term, zero when unused."""
        r = self.delta / self.dt
        base = 0.5 * self.delta * self.Theta
        usable = self.K <= self.n_t - 2
        ta = np.where(usable, base * (1.0 - r), 0.0)
        tb = np.where(usable, base * r, 0.0)
        return ta, tb

    def _assemble_matrices(self):
        qsrc = self.grid.n_x * self.grid.n_theta
        lag_rows = [[] for _ in range(min(self.k_max, self.n_t - 1) + 2)]
        lag_cols = [[] for _ in lag_rows]
        lag_vals = [[] for _ in lag_rows]
        g0_rows = [[] for _ in range(self.k_max + 1)]
        g0_cols = [[] for _ in g0_rows]
        g0_vals = [[] for _ in g0_rows]
        h0_rows = [[] for _ in range(self.k_max + 1)]
        h0_cols = [[] for _ in h0_rows]
        h0_vals = [[] for _ in h0_rows]

        def visit(k, act, idxs, E, x, th):
            idx, w = self.grid.phase_stencil(x, th)
            kk = self.K[idxs]
            omega = (
                0.5 * self.dt * (k > 0)
                + 0.5 * self.dt * (kk > k)
                + 0.5 * self.delta[idxs] * (kk == k)
            )
            rows = np.repeat(idxs, 8)
            cols = idx.ravel()
            lag_rows[k].append(rows)
            lag_cols[k].append(cols)
            lag_vals[k].append((w * (omega * E)[:, None]).ravel())
            # initial-slice truncation corrections
            cw = np.where(kk > k, -0.5 * self.dt, -0.5 * self.delta[idxs]) * E
            g0_rows[k].append(rows)
            g0_cols[k].append(cols)
            g0_vals[k].append((w * cw[:, None]).ravel())
            # traced-back initial data weights
            h0_rows[k].append(rows)
            h0_cols[k].append(cols)
            h0_vals[k].append((w * E[:, None]).ravel())

        self._march(visit)

        ta, tb = self._tail_weights()
        has_tail = np.flatnonzero((ta > 0) | (tb > 0))
        if len(has_tail):
            eidx, ew = self.grid.phase_stencil(
                self.entry_x[has_tail], self.entry_theta[has_tail]
            )
            for j_local, j in enumerate(has_tail):
                k = self.K[j]
                rows = np.full(8, j)
                cols = eidx[j_local]
                if ta[j] > 0:
                    lag_rows[k].append(rows)
                    lag_cols[k].append(cols)
                    lag_vals[k].append(ta[j] * ew[j_local])
                    g0_rows[k].append(rows)
                    g0_cols[k].append(cols)
                    g0_vals[k].append(-ta[j] * ew[j_local])
                if tb[j] > 0 and k + 1 < len(lag_rows):
                    lag_rows[k + 1].append(rows)
                    lag_cols[k + 1].append(cols)
                    lag_vals[k + 1].append(tb[j] * ew[j_local])

        def build(rows, cols, vals):
            out = []
            for r, c, v in zip(rows, cols, vals):
                if r:
                    m = sparse.csr_matrix(
                        (np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                        shape=(self.n_nodes, qsrc),
                    )
                else:
                    m = None
                out.append(m)
            return out

        self._conv = build(lag_rows, lag_cols, lag_vals)
        self._g0 = build(g0_rows, g0_cols, g0_vals)
        self._h0 = build(h0_rows, h0_cols, h0_vals)

    # ------------------------------------------------------------------
    def apply_source(self, G: np.ndarray) -> np.ndarray:
        """Duhamel source integral for a phase source G (n_t, n_x, n_theta).

        Returns the integral evaluated at all nodes and times, shape
        (n_t, n_nodes).  Sources are zero before t=0; the rule truncates at
        s = t for early times and applies the boundary remainder beyond the
        chord.
        """
        self._require_solver_mode()
        G2 = np.asarray(G).reshape(self.n_t, -1)
        out_dtype = np.result_type(G2.dtype, float)
        if self.mode == "matrix":
            F = np.zeros((self.n_t, self.n_nodes), dtype=out_dtype)
            for L, M in enumerate(self._conv):
                if M is not None and L <= self.n_t - 1:
                    F[L:] += (M @ G2[: self.n_t - L].T).T
            g0 = G2[0]
            for n, C in enumerate(self._g0):
                if C is not None:
                    F[n] += C @ g0
            return F

        # stream: node-major layout makes the per-step gathers contiguous
        GT = np.ascontiguousarray(G2.T, dtype=out_dtype)
        FT = np.zeros((self.n_nodes, self.n_t), dtype=out_dtype)

        def visit(k, act, idxs, E, x, th):
            idx, w = self.grid.phase_stencil(x, th)
            nt = self.n_t - k
            acc = w[:, 0:1] * GT[idx[:, 0], :nt]
            for m in range(1, 8):
                acc += w[:, m : m + 1] * GT[idx[:, m], :nt]
            kk = self.K[idxs]
            # weight for times past the step: half steps at both rule ends
            # (s=0 and, when k reaches the chord cut, the remainder delta/2)
            if k > 0:
                w_full = np.where(kk == k, 0.5 * (self.dt + self.delta[idxs]),
                                  self.dt) * E
                FT[idxs, k] += 0.5 * self.dt * E * acc[:, 0]
            else:
                w_full = np.where(kk == 0, 0.5 * self.delta[idxs],
                                  0.5 * self.dt) * E
            FT[idxs, k + 1 :] += w_full[:, None] * acc[:, 1:]

        self._march(visit)
        self._add_tail_stream(FT, GT)
        return FT.T.copy()

    def _add_tail_stream(self, FT, GT):
        ta, tb = self._tail_weights()
        has_tail = np.flatnonzero((ta > 0) | (tb > 0))
        if not len(has_tail):
            return
        eidx, ew = self.grid.phase_stencil(
            self.entry_x[has_tail], self.entry_theta[has_tail]
        )
        gent = ew[:, 0:1] * GT[eidx[:, 0]]
        for m in range(1, 8):
            gent += ew[:, m : m + 1] * GT[eidx[:, m]]
        kk = self.K[has_tail]
        for k in np.unique(kk):
            sel = np.flatnonzero(kk == k)
            jj = has_tail[sel]
            FT[jj, k + 1 :] += (
                ta[jj][:, None] * gent[sel, 1 : self.n_t - k]
                + tb[jj][:, None] * gent[sel, : self.n_t - k - 1]
            )

    def apply_source_T(self, F: np.ndarray) -> np.ndarray:
        """Exact transpose of :meth:`apply_source` (matrix mode only)."""
        self._require_solver_mode()
        if self.mode != "matrix":
            raise RuntimeError("transpose application requires matrix mode")
        F = np.asarray(F)
        qsrc = self.grid.n_x * self.grid.n_theta
        G = np.zeros((self.n_t, qsrc), dtype=np.result_type(F.dtype, float))
        for L, M in enumerate(self._conv):
            if M is not None and L <= self.n_t - 1:
                G[: self.n_t - L] += (M.T @ F[L:].T).T
        for n, C in enumerate(self._g0):
            if C is not None:
                G[0] += C.T @ F[n]
        return G.reshape(self.n_t, self.grid.n_x, self.grid.n_theta)

    # ------------------------------------------------------------------
    def data_term(self, h0, h_minus) -> np.ndarray:
        """Traced-back data contribution, shape (n_t, n_nodes).

        Before the chord is exhausted the ray reads attenuated initial data;
        afterwards it reads the incoming boundary value at the retarded entry
        time.  Each datum may be an array or a callable:

        - ``h0``: array on (n_x, n_theta), interpolated at backtracked phase
          points; or a callable ``h0(xs (N,2), thetas (N,))`` evaluated there
          exactly.
        - ``h_minus``: array on (n_t, n_ell, n_alpha) in the incoming chart,
          interpolated in the chart and linear between the two bracketing
          time slices; or a broadcasting callable ``h_minus(ts, ells,
          alphas)`` evaluated at the exact retarded times.
        """
        self._require_solver_mode()
        cplx = _is_complex_datum(h0, lambda f: f(self.nodes_x[:1], self.nodes_theta[:1]))
        cplx = cplx or _is_complex_datum(
            h_minus, lambda f: f(np.zeros(1), self.entry_ell[:1], self.entry_alpha[:1])
        )
        D = np.zeros((self.n_t, self.n_nodes), dtype=complex if cplx else float)
        if h0 is not None:
            if callable(h0):
                def visit(k, act, idxs, E, x, th):
                    D[k, idxs] += E * np.asarray(h0(x, th))

                self._march(visit)
            elif self.mode == "matrix":
                h0f = np.asarray(h0).reshape(-1)
                for n, H in enumerate(self._h0):
                    if H is not None and n <= self.n_t - 1:
                        D[n] += H @ h0f
            else:
                def visit(k, act, idxs, E, x, th):
                    D[k, idxs] += E * self.grid.interp_phase(np.asarray(h0), x, th)

                self._march(visit)
        if h_minus is not None:
            tg = self.grid.t_nodes
            if callable(h_minus):
                for k in range(self.n_t - 1):
                    sel = np.flatnonzero(self.K == k)
                    if not len(sel):
                        continue
                    ts = np.maximum(tg[k + 1 :, None] - self.tau[sel][None, :], 0.0)
                    vals = h_minus(
                        ts, self.entry_ell[sel][None, :], self.entry_alpha[sel][None, :]
                    )
                    D[k + 1 :, sel] += self.Theta[sel] * np.asarray(vals)
            else:
                hb = np.asarray(h_minus)
                Hb = self.grid.interp_boundary(hb, self.entry_ell, self.entry_alpha)
                r = self.delta / self.dt
                for k in range(self.n_t - 1):
                    sel = np.flatnonzero(self.K == k)
                    if not len(sel):
                        continue
                    D[k + 1 :, sel] += self.Theta[sel] * (
                        (1.0 - r[sel]) * Hb[1 : self.n_t - k][:, sel]
                        + r[sel] * Hb[: self.n_t - k - 1][:, sel]
                    )
        return D

    # ------------------------------------------------------------------
    def nonlinear_path_coef(self, q_fn: Callable | None, m: int) -> np.ndarray:
        """Per-node quadrature of q E^{1-m} along the backward ray.

        Returns coef with shape (n_t, n_nodes) such that the lagged power
        source -q f^m, evaluated on the traced-back data field D alone,
        contributes exactly  -coef[n, j] * D[n, j]**m  to the Duhamel
        integral at node j and time t_n.  Uses the identity
        D(t_n - s_k, flow(-s_k)) = D[n, j] / E_k, with q evaluated at the
        exact retarded times, so time-dependent coefficients never pass
        through grid interpolation on this path.
        """
        self._require_solver_mode()
        if q_fn is None:
            return np.zeros((self.n_t, self.n_nodes))
        nt = self.n_t
        tg = self.grid.t_nodes
        expo = 1 - int(m)
        CO = np.zeros((self.n_nodes, nt))

        def visit(k, act, idxs, E, x, th):
            nt_k = nt - k
            if nt_k <= 0:
                return
            raw = np.asarray(q_fn(tg[:nt_k, None], x), dtype=float)
            vals = np.broadcast_to(raw, (nt_k, len(idxs))) * E[None, :] ** expo
            kk = self.K[idxs]
            if k > 0:
                # the s = t_n truncation end (n == k) takes a half step
                CO[idxs, k] += 0.5 * self.dt * vals[0]
                if nt_k > 1:
                    w_full = np.where(
                        kk == k, 0.5 * (self.dt + self.delta[idxs]), self.dt
                    )
                    CO[idxs, k + 1 :] += w_full[:, None] * vals[1:].T
            elif nt_k > 1:
                w0 = np.where(kk == 0, 0.5 * self.delta[idxs], 0.5 * self.dt)
                CO[idxs, 1:] += w0[:, None] * vals[1:].T

        self._march(visit)
        # beyond the chord: the entry remainder, at the exact retarded time
        sel = np.flatnonzero(self.K <= self.n_t - 2)
        if len(sel):
            tail_w = 0.5 * self.delta[sel] * self.Theta[sel] ** float(expo)
            for k in np.unique(self.K[sel]):
                jj = sel[self.K[sel] == k]
                if k + 1 >= nt:
                    continue
                ts_ret = np.maximum(tg[k + 1 :, None] - self.tau[jj][None, :], 0.0)
                q_ent = np.asarray(q_fn(ts_ret, self.entry_x[jj]), dtype=float)
                q_ent = np.broadcast_to(q_ent, (nt - k - 1, len(jj)))
                CO[jj, k + 1 :] += (tail_w[self.K[sel] == k] * q_ent).T
        return np.ascontiguousarray(CO.T)
