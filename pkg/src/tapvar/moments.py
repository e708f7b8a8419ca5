"""Deterministic moments of the optimally controlled diffusion.

The diffusion attached to a solved chain is, on an interval with constant
coefficient lam, the Doob transform of the driftless scaled Brownian motion
by exp(lam * Phi); its one-step transition from x (lower time) to y across a
substep with variance sigma^2 is

    p(y | x) = phi_sigma(y - x) exp(lam [Phi_up(y) - Phi_lo(x)]),

which is exactly normalized by the Cole-Hopf identity.  The marginal law is
therefore pushed forward level by level on the grid: one Gaussian quadrature
per target point applied to rho * exp(-lam Phi_lo), followed by the
exp(lam Phi_up) tilt.  All of it runs in log space, so large coefficients
cannot overflow.

The sweep yields E u(s), E u(s)^2 and E v(s) at every substep boundary,
where u = dPhi/dx and v = d2Phi/dx2 along the path.  These drive the
analytic gradients of the variational objectives, the stationarity profile
E u(s)^2 - s, and the temperature-derivative identities; the stochastic path
sampler is validated against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pde import PdeSolution, _gh_order_for, _gh_rule

__all__ = ["MomentProfile", "forward_moments"]

_LOG_FLOOR = -1e30


@dataclass(frozen=True)
class MomentProfile:
    """Moments at every substep boundary, ordered by increasing time.

    `t` runs from the left endpoint of the solve up to 1; `e_u`, `e_u2`,
    `e_v` are the path moments of the first and second space derivatives.
    `level_t` / `level_e_*` restrict to the stored measure breakpoints.
    `cell_*` hold, per user interval j, the substep-resolved pieces needed
    for exact integration against xi'': cell_dxi[j][c] is the xi' increment
    of cell c and cell_f[j] the e_u2 values at its endpoints.
    """

    t: np.ndarray
    e_u: np.ndarray
    e_u2: np.ndarray
    e_v: np.ndarray
    level_t: np.ndarray
    level_e_u: np.ndarray
    level_e_u2: np.ndarray
    level_e_v: np.ndarray
    cell_dxi: list
    cell_f: list


def _interp_log_density(grid_x, h, logrho, X):
    """Cubic interpolation of a log-density; off-grid values drop to -inf."""
    n = len(grid_x)
    ti = (X - grid_x[0]) / h
    j = np.clip(np.floor(ti).astype(np.int64), 1, n - 3)
    r = ti - j
    r2 = r * r
    out = (
        -r * (r - 1) * (r - 2) / 6.0 * logrho[j - 1]
        + (r2 - 1) * (r - 2) / 2.0 * logrho[j]
        - r * (r + 1) * (r - 2) / 2.0 * logrho[j + 1]
        + r * (r2 - 1) / 6.0 * logrho[j + 2]
    )
    outside = (X < grid_x[0]) | (X > grid_x[-1])
    if outside.any():
        out = np.where(outside, _LOG_FLOOR, out)
    return out


def _log_gauss(u):
    return -0.5 * u * u - 0.9189385332046727


def forward_moments(sol: PdeSolution, points, weights=None) -> MomentProfile:
    """Sweep the tilted path law started at time q from the given points.

    `points` may be a scalar (degenerate start) or an array of starting
    values with `weights` (a mixture start, used when the initial condition
    is itself distributed, e.g. one path ensemble per atom of a spin law).
    """
    chain = sol._chain
    if chain is None:
        raise ValueError("moments need a quadrature solution (not finite-difference)")
    grid = chain.grid
    x = grid.x
    scale = sol.scale

    pts = np.atleast_1d(np.asarray(points, dtype=float)) / scale
    if weights is None:
        wts = np.full(len(pts), 1.0 / len(pts))
    else:
        wts = np.asarray(weights, dtype=float)

    p0 = chain.level_pos[0]
    if p0 == 0:
        raise ValueError("degenerate solve: no intervals below the boundary")

    # Moments at the starting position are exact.
    rows_lo = chain.rows_at(p0)
    _, u0, w0 = rows_lo.evaluate(pts)
    times = [chain.substeps[p0 - 1].t_lo]
    e_u = [float(np.sum(wts * u0))]
    e_u2 = [float(np.sum(wts * u0 * u0))]
    e_v = [float(np.sum(wts * w0))]

    logrho = None
    positions = list(range(p0 - 1, -1, -1))
    for pos in positions:
        step = chain.substeps[pos]
        sigma = math.sqrt(step.sig2)
        lam = step.lam
        order = step.order if step.order > 0 else min(256, max(64, _gh_order_for(lam * sigma, 1e-10)))
        z, logw, _ = _gh_rule(order)
        rows_up = chain.rows_at(pos)
        if pos == 0:
            v_up, u_up, w_up = rows_up.evaluate(x)
        else:
            v_up, u_up, w_up = rows_up.V, rows_up.U, rows_up.W
        if logrho is None:
            # First push: rho is a finite mixture, transition density exact.
            v_lo_pts, _, _ = chain.rows_at(pos + 1).evaluate(pts)
            terms = (
                np.log(wts)[None, :]
                + _log_gauss((x[:, None] - pts[None, :]) / sigma)
                - math.log(sigma)
                + lam * (v_up[:, None] - v_lo_pts[None, :])
            )
            logrho = _logsumexp(terms, axis=1)
        else:
            rows_lo = chain.rows_at(pos + 1)
            log_tilde = logrho - lam * rows_lo.V
            X = x[:, None] + sigma * z[None, :]
            vals = _interp_log_density(x, grid.h, log_tilde, X)
            logrho = _logsumexp(vals + logw[None, :], axis=1) + lam * v_up

        m = logrho.max()
        rho = np.exp(logrho - m)
        mass = rho.sum()
        times.append(step.t_hi)
        e_u.append(float(rho @ u_up / mass))
        e_u2.append(float(rho @ (u_up * u_up) / mass))
        e_v.append(float(rho @ w_up / mass))

    t_arr = np.asarray(times)
    e_u_arr = np.asarray(e_u)
    e_u2_arr = np.asarray(e_u2)
    e_v_arr = np.asarray(e_v) / scale

    # Position of each time in the sweep output, for level extraction.
    pos_index = {p0: 0}
    for i, pos in enumerate(positions):
        pos_index[pos] = i + 1
    lvl_idx = [pos_index[chain.level_pos[i]] for i in range(len(sol.levels))]
    cell_dxi, cell_f = [], []
    model = chain.model
    for j in range(len(sol.levels) - 1):
        lo_pos, hi_pos = chain.level_pos[j], chain.level_pos[j + 1]
        dxi, fvals = [], []
        for pos in range(lo_pos - 1, hi_pos - 1, -1):
            step = chain.substeps[pos]
            dxi.append(model.xi(step.t_hi, 1) - model.xi(step.t_lo, 1))
            fvals.append((e_u2_arr[pos_index[pos + 1]], e_u2_arr[pos_index[pos]]))
        cell_dxi.append(np.asarray(dxi))
        cell_f.append(np.asarray(fvals))
    return MomentProfile(
        t=t_arr,
        e_u=e_u_arr,
        e_u2=e_u2_arr,
        e_v=e_v_arr,
        level_t=np.asarray(sol.levels),
        level_e_u=e_u_arr[lvl_idx],
        level_e_u2=e_u2_arr[lvl_idx],
        level_e_v=e_v_arr[lvl_idx],
        cell_dxi=cell_dxi,
        cell_f=cell_f,
    )


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    m = np.maximum(m, _LOG_FLOOR)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out
