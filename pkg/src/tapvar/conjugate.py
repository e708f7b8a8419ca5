"""Concave conjugates of the solved functionals and their minimizers.

Lambda(q, a) = inf_x (Phi(q, x) - a x).  The solutions are strictly convex
in x with slope range inside [-1, 1], so for |a| < 1 the infimum is attained
at the unique root of d/dx Phi(q, x) = a, found by safeguarded Newton with a
bisection bracket.  For |a| at the clip threshold the minimizer runs off to
infinity and the closed forms take over:

    positive temperature:  (beta^2/2) int_q^1 xi'' zeta ds
    zero temperature:      (1/2) int_q^1 xi'' gamma ds  (+ atom shift)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixtures import ExtendedMeasure, StepCDF, StepGamma
from .pde import NumericalError, PdeSolution

__all__ = ["ConjugateResult", "lambda_beta", "lambda_inf", "conjugate_duality_check"]

ETA_CLIP = 1e-6
NEWTON_TOL = 1e-12


@dataclass(frozen=True)
class ConjugateResult:
    value: float
    minimizer: float  # +-inf when the closed form was used
    converged: bool
    iterations: int


def _solver_rows(sol: PdeSolution, level: int):
    rows = sol._level_rows(level)
    return rows, rows.grid.x1


def batch_conjugate(
    sol: PdeSolution, a, level: int = 0, eta_clip: float = ETA_CLIP, closed_pm1: float | None = None
):
    """(Lambda(q, a_i), minimizer_i, iterations) for an array of slopes.

    Works in solver coordinates and rescales: with rows storing
    (1/scale) Phi(t, scale y), inf_x (Phi - ax) = scale * inf_y (row - ay).
    The q-level atom shift for extended measures is included.  closed_pm1
    overrides the |a| -> 1 closed form (used when the solution object does
    not carry its measure).
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if np.any(np.abs(a) > 1 + 1e-12):
        raise ValueError("slopes must lie in [-1, 1]")
    a = np.clip(a, -1.0, 1.0)
    rows, y_hi = _solver_rows(sol, level)
    scale = sol.scale

    lam_out = np.empty_like(a)
    psi_out = np.empty_like(a)
    iters = 0

    closed = np.abs(a) > 1.0 - eta_clip
    if closed.any():
        lam_out[closed] = _closed_form_pm1(sol) if closed_pm1 is None else closed_pm1
        psi_out[closed] = np.sign(a[closed]) * np.inf

    open_idx = np.where(~closed)[0]
    if len(open_idx):
        aa = a[open_idx]
        lo = np.full(len(aa), -y_hi)
        hi = np.full(len(aa), y_hi)
        _, u_lo, _ = rows.evaluate(lo)
        _, u_hi, _ = rows.evaluate(hi)
        if np.any(u_lo > aa) or np.any(u_hi < aa):
            raise NumericalError("slope target not bracketed; enlarge x_max")
        y = np.arctanh(np.clip(aa, -0.999999, 0.999999))
        np.clip(y, lo, hi, out=y)
        for it in range(200):
            _, u, w = rows.evaluate(y)
            r = u - aa
            done = np.abs(r) <= NEWTON_TOL
            iters = it + 1
            if done.all():
                break
            hi = np.where(r > 0, np.minimum(hi, y), hi)
            lo = np.where(r < 0, np.maximum(lo, y), lo)
            y_new = y - r / np.maximum(w, 1e-300)
            bad = ~np.isfinite(y_new) | (y_new <= lo) | (y_new >= hi)
            y_new = np.where(bad, 0.5 * (lo + hi), y_new)
            y = np.where(done, y, y_new)
        v, _, _ = rows.evaluate(y)
        if level == 0 and sol.atom_shift:
            v = v + sol.atom_shift / scale
        lam_out[open_idx] = scale * (v - aa * y)
        psi_out[open_idx] = scale * y
    return lam_out, psi_out, iters


def _closed_form_pm1(sol: PdeSolution) -> float:
    """Lambda(q, +-1): the drift term alone survives the infimum."""
    measure = sol.measure
    if sol.mode == "positive":
        zeta: StepCDF = measure
        return 0.5 * sol.beta**2 * zeta.integral_against(sol.model, "ddxi")
    gamma = measure.gamma if isinstance(measure, ExtendedMeasure) else measure
    return 0.5 * gamma.integral_against(sol.model, "ddxi") + sol.atom_shift


def lambda_beta(sol: PdeSolution, a: float, eta_clip: float = ETA_CLIP) -> ConjugateResult:
    """Concave conjugate of the positive-temperature solution at level q."""
    if sol.mode != "positive":
        raise ValueError("lambda_beta needs a positive-temperature solution")
    return _single(sol, a, eta_clip)


def lambda_inf(sol: PdeSolution, a: float, eta_clip: float = ETA_CLIP) -> ConjugateResult:
    """Concave conjugate of the zero-temperature solution at level q."""
    if sol.mode != "zero":
        raise ValueError("lambda_inf needs a zero-temperature solution")
    return _single(sol, a, eta_clip)


def _single(sol, a, eta_clip) -> ConjugateResult:
    lam, psi, iters = batch_conjugate(sol, np.array([a]), eta_clip=eta_clip)
    finite = np.isfinite(psi[0])
    return ConjugateResult(float(lam[0]), float(psi[0]), True, iters if finite else 0)


def conjugate_duality_check(sol: PdeSolution, xs=None, n_a: int = 401) -> float:
    """Sup-norm residual of the double conjugate Phi(q,x) = sup_a (Lambda + ax).

    The sup is taken over a dense slope grid plus the analytically optimal
    slope a* = dPhi/dx(q, x) for each sample point.
    """
    if xs is None:
        xs = np.linspace(-3.0, 3.0, 25)
    xs = np.asarray(xs, dtype=float)
    a_grid = np.linspace(-1.0, 1.0, n_a)
    lam_grid, _, _ = batch_conjugate(sol, a_grid)
    a_star = np.asarray(sol.dx(0, xs))
    lam_star, _, _ = batch_conjugate(sol, a_star)
    direct = np.asarray(sol.value(0, xs))
    recon_grid = np.max(lam_grid[None, :] + np.outer(xs, a_grid), axis=1)
    recon = np.maximum(recon_grid, lam_star + a_star * xs)
    return float(np.max(np.abs(direct - recon)))
