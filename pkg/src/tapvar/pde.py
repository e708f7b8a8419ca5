"""Backward parabolic solves for the free-energy functionals.

Two equations share one engine.  At inverse temperature beta the unknown
solves, backward from t = 1 with boundary log 2cosh x,

    dPhi/dt = -(beta^2 xi''(t)/2) (Phi_xx + zeta(t) Phi_x^2),

and at zero temperature, backward from boundary |x|,

    dTheta/dt = -(xi''(t)/2) (Theta_xx + gamma(t) Theta_x^2).

On an interval where the coefficient function equals a constant lam, the
substitution W = exp(lam * Phi) turns the equation into a heat equation, so
one interval is solved exactly by a Gaussian log-moment step

    Phi(t, x) = (1/lam) log E exp(lam * Phi(t', x + sigma Z)),
    sigma^2 = Laplacian coefficient integrated over [t, t'],

with plain averaging when lam = 0.  Splitting an interval into substeps with
the same lam is exact (heat semigroup), so substeps are inserted freely to
keep the per-step Gauss-Hermite quadrature in its accurate regime.  First
derivatives come from the tilted quadrature weights and second derivatives
from the tilted mean curvature plus lam times the tilted variance of the
slope; nothing is finite-differenced off the value grid.

Large beta is handled in rescaled coordinates y = x / beta, where the
positive-temperature solve becomes a zero-temperature-type solve with
coefficient beta * zeta and boundary |y| + (1/beta) log(1 + exp(-2 beta |y|)).
Steps leaving the |x|-type boundaries use exact error-function formulas (plus
a narrow correction integral for the rescaled boundary), because quadrature
through the kink would lose the spectral accuracy the rest of the scheme has.

A deliberately independent finite-difference discretization of the same
equation (diffusion implicit, nonlinearity explicit) is provided for
cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import gammaln, log_ndtr, ndtr

from .mixtures import ExtendedMeasure, MixtureSpec, StepCDF, StepGamma

__all__ = [
    "GridConfig",
    "PdeSolution",
    "NumericalError",
    "solve_phi",
    "solve_theta",
    "solve_phi_fd",
    "scaling_check",
    "control_lower_bound",
    "theta_envelope",
]

_LOG_SQRT_2PI = 0.9189385332046727


class NumericalError(RuntimeError):
    """A solve failed for numerical reasons (diagnostics in the message)."""


@dataclass(frozen=True)
class GridConfig:
    """Discretization knobs shared by the solvers.

    x_max=None picks the half-width automatically: 4 + 4 beta sqrt(xi'(1))
    at positive temperature, and 4 + 4 sqrt(xi'(1)) plus the drift margin
    xi''(1) * (total coefficient mass) for zero-temperature-type solves,
    floored at 10.  Spacing defaults to x_max / n_half and is refined when
    large coefficient values create features narrower than the grid step.
    """

    x_max: float | None = None
    n_half: int = 2048
    gh_order: int = 40
    gh_eps: float = 1e-13
    max_gh_order: int = 384
    step_budget: float = 4.0  # max lam * sigma per substep
    sigma_step: float = 1.0  # max sigma per substep
    kink_budget: float = 1.5  # max (row sharpness) * sigma per substep
    beta_scaled_threshold: float = 4.0
    max_n_half: int = 16384
    fd_tol: float = 1e-4
    fd_dt: float | None = None


# ---------------------------------------------------------------------------
# Gauss-Hermite rules (probabilists' convention: E f(Z) = sum w_j f(z_j))


@lru_cache(maxsize=64)
def _gh_rule(order: int):
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    z = nodes * math.sqrt(2.0)
    w = weights / math.sqrt(math.pi)
    return z, np.log(w), w


def _gh_order_for(a: float, eps: float) -> int:
    """Smallest n with (a^2/2)^n / n! <= eps * exp(a^2/2), the leading error
    of an n-point rule applied to E exp(aZ)."""
    if a <= 0:
        return 2
    c = a * a / 2.0
    target = math.log(eps) + c
    lo, hi = 2, 4096
    while lo < hi:
        mid = (lo + hi) // 2
        if mid * math.log(c) - gammaln(mid + 1) <= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


# ---------------------------------------------------------------------------
# Row containers and interpolation


class _Grid:
    __slots__ = ("x", "x0", "x1", "h", "n")

    def __init__(self, x_max: float, n_half: int):
        self.n = 2 * n_half + 1
        self.x = np.linspace(-x_max, x_max, self.n)
        self.x0 = -x_max
        self.x1 = x_max
        self.h = x_max / n_half


class _ExactRows:
    """Boundary rows known in closed form everywhere."""

    __slots__ = ("fv", "fu", "fw")

    def __init__(self, fv, fu, fw):
        self.fv, self.fu, self.fw = fv, fu, fw

    def evaluate(self, X):
        return self.fv(X), self.fu(X), self.fw(X)

    def on_grid(self, grid: _Grid) -> "_GridRows":
        return _GridRows(grid, self.fv(grid.x), self.fu(grid.x), self.fw(grid.x))


class _GridRows:
    """Rows sampled on the grid: value and slope interpolated with cubic
    Hermite (using the next derivative row as slope data), curvature with a
    4-point stencil.  Beyond the grid all rows continue linearly/constantly,
    which is exact up to the exponentially small residual curvature at the
    edges."""

    __slots__ = ("grid", "V", "U", "W")

    def __init__(self, grid: _Grid, V, U, W):
        self.grid, self.V, self.U, self.W = grid, V, U, W

    def evaluate(self, X):
        g = self.grid
        ti = (X - g.x0) / g.h
        i = np.floor(ti).astype(np.int64)
        np.clip(i, 0, g.n - 2, out=i)
        s = ti - i
        h = g.h

        s2 = s * s
        h01 = s2 * (3.0 - 2.0 * s)
        h00 = 1.0 - h01
        h11 = s2 * (s - 1.0)
        h10 = h11 + s * (1.0 - s)

        V0, V1 = self.V[i], self.V[i + 1]
        U0, U1 = self.U[i], self.U[i + 1]
        W0, W1 = self.W[i], self.W[i + 1]
        Fv = h00 * V0 + h01 * V1 + h * (h10 * U0 + h11 * U1)
        Fu = h00 * U0 + h01 * U1 + h * (h10 * W0 + h11 * W1)
        Fw = W0 + s * (W1 - W0)

        below = X < g.x0
        above = X > g.x1
        if below.any():
            Fv = np.where(below, self.V[0] + self.U[0] * (X - g.x0), Fv)
            Fu = np.where(below, self.U[0], Fu)
            Fw = np.where(below, 0.0, Fw)
        if above.any():
            Fv = np.where(above, self.V[-1] + self.U[-1] * (X - g.x1), Fv)
            Fu = np.where(above, self.U[-1], Fu)
            Fw = np.where(above, 0.0, Fw)
        return Fv, Fu, Fw

    def on_grid(self, grid: _Grid) -> "_GridRows":
        assert grid is self.grid
        return self


# ---------------------------------------------------------------------------
# One quadrature step and the analytic boundary steps


def _gh_step(upper, lam: float, sig2: float, grid: _Grid, order: int) -> _GridRows:
    z, logw, w = _gh_rule(order)
    sigma = math.sqrt(sig2)
    X = grid.x[:, None] + sigma * z[None, :]
    Fv, Fu, Fw = upper.evaluate(X)
    if lam == 0.0:
        return _GridRows(grid, Fv @ w, Fu @ w, Fw @ w)
    G = lam * Fv + logw[None, :]
    M = G.max(axis=1)
    P = np.exp(G - M[:, None])
    S = P.sum(axis=1)
    V = (M + np.log(S)) / lam
    P /= S[:, None]
    U = np.einsum("ij,ij->i", P, Fu)
    EU2 = np.einsum("ij,ij->i", P, Fu * Fu)
    EW = np.einsum("ij,ij->i", P, Fw)
    W = EW + lam * (EU2 - U * U)
    return _GridRows(grid, V, U, W)


def _phi_pdf(u):
    return np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def _log_phi_pdf(u):
    return -0.5 * u * u - _LOG_SQRT_2PI


def _abs_boundary_step(x, lam: float, sig2: float):
    """Exact step from boundary |x|.

    E exp(lam |x + sigma Z|) in error-function form; the slope is tanh of
    half the log-ratio of the two tilted tails, and the curvature adds the
    Gaussian density picked up at the kink.
    """
    sigma = math.sqrt(sig2)
    u = x / sigma
    if lam == 0.0:
        V = x * (2 * ndtr(u) - 1) + 2 * sigma * _phi_pdf(u)
        U = 2 * ndtr(u) - 1
        W = 2 * _phi_pdf(u) / sigma
        return V, U, W
    t_plus = lam * x + log_ndtr(u + lam * sigma)
    t_minus = -lam * x + log_ndtr(-u + lam * sigma)
    log_a = lam * lam * sig2 / 2.0 + np.logaddexp(t_plus, t_minus)
    V = log_a / lam
    U = np.tanh(0.5 * (t_plus - t_minus))
    W = lam * (1.0 - U * U) + 2.0 * np.exp(_log_phi_pdf(u) - math.log(sigma) - log_a)
    return V, U, W


@lru_cache(maxsize=8)
def _panel_rule(n: int):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def _scaled_logcosh_boundary_step(x, lam: float, sig2: float, beta: float):
    """Step from the rescaled boundary |y| + (1/beta) log(1 + exp(-2 beta |y|)).

    Exact |y| part plus a correction integral supported on |u| <= 30/beta
    where exp(lam r(u)) - 1 is nonnegligible.  Derivatives of the correction
    come from differentiating the Gaussian kernel, so the narrow boundary
    curvature is never sampled.
    """
    sigma = math.sqrt(sig2)
    u_max = 30.0 / beta
    nodes, weights = _panel_rule(32)
    u_pos = 0.5 * u_max * (nodes + 1.0)
    u_all = np.concatenate([-u_pos[::-1], u_pos])
    w_all = np.concatenate([weights[::-1], weights]) * (0.5 * u_max)
    du = u_all[None, :] - x[:, None]
    log_kernel = _log_phi_pdf(du / sigma) - math.log(sigma)
    k1 = du / sig2
    k2 = du * du / sig2**2 - 1.0 / sig2

    u_abs = np.abs(u_all)
    r = np.log1p(np.exp(-2.0 * beta * u_abs)) / beta

    if lam == 0.0:
        base_v, base_u, base_w = _abs_boundary_step(x, 0.0, sig2)
        contrib = w_all[None, :] * r[None, :] * np.exp(log_kernel)
        return (
            base_v + contrib.sum(axis=1),
            base_u + (contrib * k1).sum(axis=1),
            base_w + (contrib * k2).sum(axis=1),
        )

    un = x / sigma
    t_plus = lam * x + log_ndtr(un + lam * sigma)
    t_minus = -lam * x + log_ndtr(-un + lam * sigma)
    log_a0 = lam * lam * sig2 / 2.0 + np.logaddexp(t_plus, t_minus)
    u0 = np.tanh(0.5 * (t_plus - t_minus))

    log_corr = np.log(np.expm1(lam * r))
    expo = lam * u_abs[None, :] + log_corr[None, :] + log_kernel - log_a0[:, None]
    base = w_all[None, :] * np.exp(expo)
    r0 = base.sum(axis=1)
    r1 = (base * k1).sum(axis=1)
    r2 = (base * k2).sum(axis=1)

    V = (log_a0 + np.log1p(r0)) / lam
    U = (u0 + r1 / lam) / (1.0 + r0)
    a2_over_a0 = lam * lam + 2.0 * lam * np.exp(_log_phi_pdf(un) - math.log(sigma) - log_a0) + r2
    W = a2_over_a0 / (lam * (1.0 + r0)) - lam * U * U
    return V, U, W


# ---------------------------------------------------------------------------
# The solve chain


@dataclass
class _SubStep:
    lam: float
    sig2: float
    order: int
    lower: _GridRows
    t_hi: float
    t_lo: float


@dataclass
class _Chain:
    kind: str
    beta: float | None
    grid: _Grid
    boundary: _ExactRows
    substeps: list
    level_pos: list  # per user level: row position (0 = boundary row)
    model: MixtureSpec | None = None

    def rows_at(self, pos: int):
        return self.boundary if pos == 0 else self.substeps[pos - 1].lower


def _substep_plan(lam: float, sig2: float, sharp: float, cfg: GridConfig):
    """Split an interval so each substep's quadrature stays accurate.

    Three constraints: the exponent slope lam*sigma per substep (error model
    of the rule on exponentials), the plain sigma (features of the smooth
    boundary), and sharp*sigma, where `sharp` is the inverse width of the
    narrowest feature the rows above carry (kinks created by large
    coefficients sharpen the rows; quadrature nodes must land inside them).
    """
    sigma = math.sqrt(sig2)
    m = max(
        1,
        math.ceil((lam * sigma / cfg.step_budget) ** 2),
        math.ceil((sigma / cfg.sigma_step) ** 2),
        math.ceil((sharp * sigma / cfg.kink_budget) ** 2),
    )
    sub_sig2 = sig2 / m
    order = max(cfg.gh_order, _gh_order_for(lam * math.sqrt(sub_sig2), cfg.gh_eps))
    return m, sub_sig2, min(order, cfg.max_gh_order)


def _boundary_rows(kind: str, beta) -> _ExactRows:
    if kind == "logcosh":
        return _ExactRows(
            lambda X: np.abs(X) + np.log1p(np.exp(-2.0 * np.abs(X))),
            np.tanh,
            lambda X: 1.0 / np.cosh(np.minimum(np.abs(X), 350.0)) ** 2,
        )
    if kind == "abs":
        return _ExactRows(np.abs, np.sign, lambda X: np.zeros_like(X))
    if kind == "scaled_logcosh":
        b = float(beta)
        return _ExactRows(
            lambda X: np.abs(X) + np.log1p(np.exp(-2.0 * b * np.abs(X))) / b,
            lambda X: np.tanh(b * X),
            lambda X: b / np.cosh(np.minimum(b * np.abs(X), 350.0)) ** 2,
        )
    raise ValueError(f"unknown boundary kind {kind!r}")


def _chain_sharpness(chain: _Chain, upto_pos: int) -> float:
    """Inverse width of the narrowest row feature among the first upto_pos
    substeps: coefficient-induced kinks scale like 1/lam, an analytic first
    step with tiny variance leaves 1/sigma features."""
    sharp = 1.0
    for s in chain.substeps[:upto_pos]:
        sharp = max(sharp, s.lam)
        if s.order == 0:  # analytic boundary step
            sharp = max(sharp, 1.0 / math.sqrt(s.sig2))
    return sharp


def _subdivide_times(model: MixtureSpec, t_lo: float, t_hi: float, m: int):
    """Times splitting [t_lo, t_hi] into m cells of equal xi' increment."""
    if m == 1:
        return [t_hi, t_lo]
    from scipy.optimize import brentq

    g_lo, g_hi = model.xi(t_lo, 1), model.xi(t_hi, 1)
    out = [t_hi]
    for i in range(m - 1, 0, -1):
        target = g_lo + (g_hi - g_lo) * i / m
        out.append(brentq(lambda s: model.xi(s, 1) - target, t_lo, t_hi, xtol=1e-14))
    out.append(t_lo)
    return out


def _extend_chain(chain: _Chain, levels, lams, sig2s, from_level: int, cfg: GridConfig) -> None:
    """Append steps for user intervals from_level-1, ..., 0 in place."""
    pos = chain.level_pos[from_level]
    current = chain.rows_at(pos)
    sharp = _chain_sharpness(chain, pos)
    for j in range(from_level - 1, -1, -1):
        lam, sig2 = float(lams[j]), float(sig2s[j])
        if sig2 < -1e-14:
            raise NumericalError(f"negative step variance on interval {j}")
        if sig2 <= 1e-300:
            # xi' flat across the interval: no evolution.
            chain.level_pos[j] = pos
            continue
        if pos == 0 and chain.kind in ("abs", "scaled_logcosh"):
            if chain.kind == "abs":
                V, U, W = _abs_boundary_step(chain.grid.x, lam, sig2)
            else:
                V, U, W = _scaled_logcosh_boundary_step(chain.grid.x, lam, sig2, chain.beta)
            current = _GridRows(chain.grid, V, U, W)
            chain.substeps.append(_SubStep(lam, sig2, 0, current, levels[j + 1], levels[j]))
            sharp = max(sharp, lam, 1.0 / math.sqrt(sig2))
            pos += 1
        else:
            sharp = max(sharp, lam)
            m, sub_sig2, order = _substep_plan(lam, sig2, sharp, cfg)
            times = _subdivide_times(chain.model, levels[j], levels[j + 1], m)
            for i in range(m):
                current = _gh_step(current, lam, sub_sig2, chain.grid, order)
                chain.substeps.append(
                    _SubStep(lam, sub_sig2, order, current, times[i], times[i + 1])
                )
                pos += 1
        chain.level_pos[j] = pos


def _solve_chain(kind, beta, levels, lams, sig2s, grid, cfg, model) -> _Chain:
    k = len(levels) - 1
    chain = _Chain(
        kind=kind,
        beta=beta,
        grid=grid,
        boundary=_boundary_rows(kind, beta),
        substeps=[],
        level_pos=[0] * (k + 1),
        model=model,
    )
    _extend_chain(chain, levels, lams, sig2s, k, cfg)
    return chain


def _resolve_below(chain: _Chain, levels, lams, sig2s, from_level: int, cfg: GridConfig) -> _Chain:
    """New chain with levels below from_level recomputed (rows above reused)."""
    keep_pos = chain.level_pos[from_level]
    new = _Chain(
        kind=chain.kind,
        beta=chain.beta,
        grid=chain.grid,
        boundary=chain.boundary,
        substeps=list(chain.substeps[:keep_pos]),
        level_pos=list(chain.level_pos),
        model=chain.model,
    )
    _extend_chain(new, levels, lams, sig2s, from_level, cfg)
    return new


# ---------------------------------------------------------------------------
# Public solution object


@dataclass
class PdeSolution:
    """Immutable evaluable solution at the stored t-levels.

    Rows live in solver coordinates; scale > 1 means the stored rows are
    (1/scale) * Phi(t, scale y) and the accessors undo the rescaling, so
    value/dx/dxx always refer to the original variable.  For an extended
    zero-temperature measure the atom shift delta xi''(1)/2 applies to the
    q-level values only (the boundary row stays |x|).
    """

    mode: str
    beta: float | None
    model: MixtureSpec
    measure: object
    levels: np.ndarray
    scale: float
    atom_shift: float
    method: str
    _chain: _Chain | None = field(default=None, repr=False)
    _rows: list | None = field(default=None, repr=False)

    @property
    def x_grid(self) -> np.ndarray:
        return self._grid().x * self.scale

    def _grid(self) -> _Grid:
        return self._chain.grid if self._chain is not None else self._rows[0].grid

    def _level_rows(self, i: int) -> _GridRows:
        if self._chain is not None:
            rows = self._chain.rows_at(self._chain.level_pos[i])
            if isinstance(rows, _ExactRows):
                rows = rows.on_grid(self._chain.grid)
            return rows
        return self._rows[i]

    def level_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.levels - t)))
        if abs(self.levels[i] - t) > 1e-9:
            raise ValueError(f"t={t} is not a stored level")
        return i

    def value(self, i: int, x):
        v, _, _ = self._level_rows(i).evaluate(np.asarray(x, dtype=float) / self.scale)
        v = v * self.scale
        if i == 0 and self.atom_shift:
            v = v + self.atom_shift
        return v

    def dx(self, i: int, x):
        _, u, _ = self._level_rows(i).evaluate(np.asarray(x, dtype=float) / self.scale)
        return u

    def dxx(self, i: int, x):
        _, _, w = self._level_rows(i).evaluate(np.asarray(x, dtype=float) / self.scale)
        return w / self.scale

    def grid_rows(self, i: int):
        """(x, value, dx, dxx) arrays at level i in original coordinates."""
        rows = self._level_rows(i)
        x = rows.grid.x * self.scale
        v = rows.V * self.scale
        if i == 0 and self.atom_shift:
            v = v + self.atom_shift
        return x, v, rows.U, rows.W / self.scale

    def to_npz(self, path) -> None:
        arrays = {"levels": self.levels, "x": self.x_grid}
        for i in range(len(self.levels)):
            _, v, u, w = self.grid_rows(i)
            arrays[f"value_{i}"] = v
            arrays[f"dx_{i}"] = u
            arrays[f"dxx_{i}"] = w
        np.savez_compressed(
            path,
            mode=self.mode,
            beta=-1.0 if self.beta is None else self.beta,
            scale=self.scale,
            atom_shift=self.atom_shift,
            method=self.method,
            **arrays,
        )


# ---------------------------------------------------------------------------
# Entry points


def _auto_x_max(kind, model: MixtureSpec, beta, total_mass, cfg: GridConfig) -> float:
    if cfg.x_max is not None:
        return cfg.x_max
    dxi1 = math.sqrt(model.xi(1.0, 1))
    if kind == "logcosh":
        return max(10.0, 4.0 + 4.0 * beta * dxi1)
    margin = model.xi(1.0, 2) * total_mass
    return max(10.0, 4.0 + 4.0 * dxi1) + margin


def _make_grid(kind, model, beta, total_mass, lam_max, cfg: GridConfig) -> _Grid:
    x_max = _auto_x_max(kind, model, beta, total_mass, cfg)
    h = x_max / cfg.n_half
    if lam_max > 0:
        h = min(h, 1.0 / (4.0 * lam_max))
    n_half = min(cfg.max_n_half, max(cfg.n_half, math.ceil(x_max / h)))
    return _Grid(x_max, n_half)


def _interval_sig2(model: MixtureSpec, levels, factor: float):
    dxi = model.xi(np.asarray(levels), 1)
    return factor * np.diff(dxi)


def _merge_levels(measure_t, extra_levels):
    if extra_levels is None:
        return np.asarray(measure_t, dtype=float)
    lv = np.union1d(np.asarray(measure_t, dtype=float), np.asarray(extra_levels, dtype=float))
    if lv[0] < measure_t[0] - 1e-12 or lv[-1] > 1 + 1e-12:
        raise ValueError("extra levels outside [q, 1]")
    return lv


def solve_phi(
    model: MixtureSpec,
    beta: float,
    zeta: StepCDF,
    cfg: GridConfig | None = None,
    extra_levels=None,
) -> PdeSolution:
    """Solve the positive-temperature equation for a step c.d.f. on [q, 1]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    cfg = cfg or GridConfig()
    levels = _merge_levels(zeta.t, extra_levels)
    vals = np.asarray(zeta(0.5 * (levels[:-1] + levels[1:])), dtype=float)
    if beta > cfg.beta_scaled_threshold:
        kind = "scaled_logcosh"
        lams = beta * vals
        sig2s = _interval_sig2(model, levels, 1.0)
        total_mass = float(np.sum(lams * np.diff(levels)))
        scale = beta
    else:
        kind = "logcosh"
        lams = vals
        sig2s = _interval_sig2(model, levels, beta * beta)
        total_mass = 0.0
        scale = 1.0
    grid = _make_grid(kind, model, beta, total_mass, float(lams.max(initial=0.0)), cfg)
    chain = _solve_chain(kind, beta, levels, lams, sig2s, grid, cfg, model)
    return PdeSolution(
        mode="positive",
        beta=beta,
        model=model,
        measure=zeta,
        levels=levels,
        scale=scale,
        atom_shift=0.0,
        method="cole-hopf",
        _chain=chain,
    )


def solve_theta(
    model: MixtureSpec,
    nu: StepGamma | ExtendedMeasure,
    cfg: GridConfig | None = None,
    extra_levels=None,
) -> PdeSolution:
    """Solve the zero-temperature equation for gamma (plus optional atom at 1)."""
    cfg = cfg or GridConfig()
    gamma = nu.gamma if isinstance(nu, ExtendedMeasure) else nu
    delta = nu.delta if isinstance(nu, ExtendedMeasure) else 0.0
    levels = _merge_levels(gamma.t, extra_levels)
    vals = np.asarray(gamma(0.5 * (levels[:-1] + levels[1:])), dtype=float)
    sig2s = _interval_sig2(model, levels, 1.0)
    grid = _make_grid("abs", model, None, gamma.integral(), float(vals.max(initial=0.0)), cfg)
    chain = _solve_chain("abs", None, levels, vals, sig2s, grid, cfg, model)
    return PdeSolution(
        mode="zero",
        beta=None,
        model=model,
        measure=nu,
        levels=levels,
        scale=1.0,
        atom_shift=0.5 * delta * model.xi(1.0, 2),
        method="cole-hopf",
        _chain=chain,
    )


def _tail_integral(model: MixtureSpec, gamma: StepGamma, t: float) -> float:
    """int_t^1 xi''(s) gamma(s) ds, exact for step gamma."""
    total = 0.0
    for a, b, v in zip(gamma.t[:-1], gamma.t[1:], gamma.v):
        lo = max(a, t)
        if lo < b:
            total += v * (model.xi(b, 1) - model.xi(lo, 1))
    return total


def control_lower_bound(model: MixtureSpec, gamma: StepGamma, t: float, x: float) -> float:
    """|x| + (1/2) int_t^1 xi'' gamma ds: the constant-sign-control bound."""
    if t < gamma.q - 1e-12 or t > 1 + 1e-12:
        raise ValueError("t outside [q, 1]")
    return abs(x) + 0.5 * _tail_integral(model, gamma, t)


def theta_envelope(model: MixtureSpec, gamma: StepGamma, t: float, x):
    """(lower, upper) envelope for the zero-temperature solution at (t, x)."""
    half_i = 0.5 * _tail_integral(model, gamma, t)
    lo = np.abs(x) + half_i
    hi = lo + math.sqrt(max(model.xi(1.0, 1) - model.xi(t, 1), 0.0))
    return lo, hi


def scaling_check(
    model: MixtureSpec,
    beta: float,
    zeta: StepCDF,
    xs=None,
    cfg: GridConfig | None = None,
):
    """Residuals of the temperature-rescaling sandwich.

    Solves the zero-temperature equation with coefficient beta * zeta and the
    positive-temperature one with zeta, then checks at sample points that

        Theta(q, x) <= (1/beta) Phi(q, beta x) <= Theta(q, x) + log(2)/beta.

    Returns (lower_residual, upper_residual): nonnegative violations.
    """
    cfg = cfg or GridConfig()
    if xs is None:
        xs = np.linspace(-6.0, 6.0, 41)
    xs = np.asarray(xs, dtype=float)
    sol_phi = solve_phi(model, beta, zeta, cfg)
    sol_theta = solve_theta(model, zeta.scaled(beta), cfg)
    phi_side = sol_phi.value(0, beta * xs) / beta
    theta_side = sol_theta.value(0, xs)
    res_lower = float(np.max(np.maximum(0.0, theta_side - phi_side)))
    res_upper = float(np.max(np.maximum(0.0, phi_side - theta_side - math.log(2.0) / beta)))
    return res_lower, res_upper


# ---------------------------------------------------------------------------
# Independent finite-difference route


def solve_phi_fd(
    model: MixtureSpec,
    beta: float,
    zeta: StepCDF,
    cfg: GridConfig | None = None,
) -> PdeSolution:
    """Semi-implicit finite-difference solve of the positive-temperature
    equation: Crank-Nicolson diffusion, explicit (Heun-corrected) square
    nonlinearity, frozen slopes +-tanh(x_max) at the edges.  Derivatives are
    central differences of the value grid; nothing is shared with the
    quadrature route.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    cfg = cfg or GridConfig()
    x_max = cfg.x_max or max(10.0, 4.0 + 4.0 * beta * math.sqrt(model.xi(1.0, 1)))
    grid = _Grid(x_max, cfg.n_half)
    x, h, n = grid.x, grid.h, grid.n

    phi = np.abs(x) + np.log1p(np.exp(-2.0 * np.abs(x)))
    slope_hi = math.tanh(x_max)

    levels = np.asarray(zeta.t, dtype=float)
    k = len(levels) - 1
    vals = np.asarray(zeta(0.5 * (levels[:-1] + levels[1:])), dtype=float)
    rows = [None] * (k + 1)
    rows[k] = phi.copy()

    diff_max = 0.5 * beta * beta * model.xi(1.0, 2)
    if cfg.fd_dt is not None:
        dt_target = cfg.fd_dt
    else:
        # Bound for the explicit nonlinearity; diffusion is unconditionally
        # stable under Crank-Nicolson.
        dt_target = min(1e-3, 0.5 * h / max(diff_max, 1e-12))

    for j in range(k - 1, -1, -1):
        t_hi, t_lo = levels[j + 1], levels[j]
        v = vals[j]
        span = t_hi - t_lo
        steps = max(8, math.ceil(span / dt_target))
        dt = span / steps
        t = t_hi
        for _ in range(steps):
            diff = 0.5 * beta * beta * model.xi(t - 0.5 * dt, 2)
            r = diff * dt / (h * h)
            phi_x = _fd_gradient(phi, h, slope_hi)
            nonlin = diff * v * phi_x * phi_x
            pred = _cn_step(phi, nonlin, r, dt, h, slope_hi)
            phi_x2 = _fd_gradient(pred, h, slope_hi)
            nonlin = 0.5 * (nonlin + diff * v * phi_x2 * phi_x2)
            phi = _cn_step(phi, nonlin, r, dt, h, slope_hi)
            if not np.all(np.isfinite(phi)):
                raise NumericalError(
                    f"finite-difference solve diverged at t={t:.4f}; "
                    f"retry with fd_dt < {dt / 4:.2e}"
                )
            t -= dt
        rows[j] = phi.copy()

    grid_rows = []
    for j in range(k + 1):
        vj = rows[j]
        u = _fd_gradient(vj, h, slope_hi)
        w = np.empty(n)
        w[1:-1] = (vj[2:] - 2 * vj[1:-1] + vj[:-2]) / (h * h)
        w[0] = w[1]
        w[-1] = w[-2]
        grid_rows.append(_GridRows(grid, vj, u, w))
    return PdeSolution(
        mode="positive",
        beta=beta,
        model=model,
        measure=zeta,
        levels=levels,
        scale=1.0,
        atom_shift=0.0,
        method="finite-difference",
        _rows=grid_rows,
    )


def _fd_gradient(phi, h, slope_hi):
    g = np.empty_like(phi)
    g[1:-1] = (phi[2:] - phi[:-2]) / (2 * h)
    g[0] = -slope_hi
    g[-1] = slope_hi
    return g


def _cn_step(phi, nonlin, r, dt, h, slope_hi):
    """Crank-Nicolson step; ghost nodes eliminated using the frozen edge
    slopes on both the explicit and implicit halves."""
    n = len(phi)
    rhs = np.empty(n)
    rhs[1:-1] = phi[1:-1] + 0.5 * r * (phi[2:] - 2 * phi[1:-1] + phi[:-2]) + dt * nonlin[1:-1]
    rhs[0] = phi[0] + r * (phi[1] - phi[0]) + 2 * r * h * slope_hi + dt * nonlin[0]
    rhs[-1] = phi[-1] + r * (phi[-2] - phi[-1]) + 2 * r * h * slope_hi + dt * nonlin[-1]
    ab = np.zeros((3, n))
    ab[0, 1:] = -0.5 * r
    ab[1, :] = 1 + r
    ab[2, :-1] = -0.5 * r
    ab[0, 1] = -r
    ab[2, -2] = -r
    return solve_banded((1, 1), ab, rhs)
