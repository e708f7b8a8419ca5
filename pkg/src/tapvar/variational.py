"""Evaluation and minimization of the free-energy functionals.

The positive-temperature functional over c.d.f.s zeta on [q, 1] is

    int Lambda(q, a) dmu(a) - (beta^2/2) int_q^1 s xi''(s) zeta(s) ds,

its zero-temperature analogue replaces beta^2 zeta by gamma and drops the
prefactor; the ground-state and free-energy functionals are the mu = delta_0
specializations.  All are minimized over step values on a fixed breakpoint
grid by projected gradient descent (pool-adjacent-violators projection, box
clipping, Barzilai-Borwein steps with Armijo backtracking, multi-start).

Gradients use the envelope identity: the derivative of the objective in the
coefficient value on interval j equals

    factor * int_{I_j} xi''(s) (F(s) - s) ds,

where F(s) is the second moment of the slope of the solution along the
tilted diffusion started from the conjugate minimizers of the atoms of mu
(atoms in the |a| -> 1 closed-form regime ride at slope one and contribute
F = 1).  A one-sided finite-difference gradient over the step values is kept
as an independent cross-check and can be selected per call.

Beyond the threshold temperature, the search runs directly over the rescaled
coefficient gamma = beta * zeta (bounded by beta), which keeps the numerics
in the zero-temperature regime where the solver is accurate and fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conjugate import ETA_CLIP, batch_conjugate
from .mixtures import (
    ExtendedMeasure,
    MixtureSpec,
    SpinLaw,
    StepCDF,
    StepGamma,
    d1_distance,
    project_monotone,
)
from .moments import forward_moments
from .pde import (
    GridConfig,
    PdeSolution,
    _interval_sig2,
    _make_grid,
    _resolve_below,
    _solve_chain,
    solve_phi,
    solve_theta,
)

__all__ = [
    "MinimizeConfig",
    "VariationalResult",
    "StationarityReport",
    "parisi_value",
    "minimize_parisi",
    "ground_state_value",
    "minimize_ground_state",
    "tap_value_beta",
    "minimize_tap_beta",
    "tap_value_inf",
    "minimize_tap_inf",
    "dparisi_dbeta",
    "dtap_dbeta",
    "dphi_dbeta",
    "parisi_stationarity",
]


@dataclass(frozen=True)
class MinimizeConfig:
    restarts: int = 3
    max_iters: int = 120
    pg_tol: float = 1e-6
    fd_step: float = 1e-5
    seed: int = 0
    gamma_start: float = 8.0
    gamma_doublings: int = 5
    use_fd_gradient: bool = False
    grid: GridConfig = field(default_factory=lambda: GridConfig(n_half=1024))


@dataclass(frozen=True)
class VariationalResult:
    measure: object
    value: float
    grad_norm: float
    restarts_agreement: float
    trace: tuple
    evaluations: int
    converged: bool


@dataclass(frozen=True)
class StationarityReport:
    breakpoints: np.ndarray
    pointwise: np.ndarray  # E u(t_j)^2 - t_j
    interval_integrals: np.ndarray  # int_{I_j} xi'' zeta (E u^2 - s) ds
    weighted_total: float


# ---------------------------------------------------------------------------
# Objective over step values on a fixed breakpoint grid


class _StepObjective:
    """mode 'pos': values are zeta in [0, 1]; 'pos_scaled': values are
    gamma = beta * zeta in [0, beta]; 'zero': values are gamma >= 0."""

    def __init__(self, model, mu: SpinLaw, t_grid, mode, beta, box_hi, grid_cfg: GridConfig):
        self.model = model
        self.mode = mode
        self.beta = beta
        self.t = np.asarray(t_grid, dtype=float)
        self.a = mu.a
        self.w = mu.w
        self.box_hi = box_hi
        self.cfg = grid_cfg
        self.pen_cells = np.array(
            [model.xi_int_s_ddxi(b) - model.xi_int_s_ddxi(a) for a, b in zip(self.t[:-1], self.t[1:])]
        )
        self.dxi_cells = model.xi(self.t[1:], 1) - model.xi(self.t[:-1], 1)
        if mode == "pos":
            self.kind, self.scale = "logcosh", 1.0
            self.sig2s = _interval_sig2(model, self.t, beta * beta)
            self.pen_factor = 0.5 * beta * beta
            self.grad_factor = 0.5 * beta * beta
        elif mode == "pos_scaled":
            self.kind, self.scale = "scaled_logcosh", beta
            self.sig2s = _interval_sig2(model, self.t, 1.0)
            self.pen_factor = 0.5 * beta
            self.grad_factor = 0.5 * beta
        elif mode == "zero":
            self.kind, self.scale = "abs", 1.0
            self.sig2s = _interval_sig2(model, self.t, 1.0)
            self.pen_factor = 0.5
            self.grad_factor = 0.5
        else:
            raise ValueError(mode)
        total_mass = 0.0 if mode == "pos" else box_hi * (1.0 - self.t[0])
        self.grid = _make_grid(
            self.kind, model, beta, total_mass, box_hi if mode != "pos" else 1.0, grid_cfg
        )
        self.evaluations = 0

    def _solution(self, chain) -> PdeSolution:
        return PdeSolution(
            mode="positive" if self.mode.startswith("pos") else "zero",
            beta=self.beta,
            model=self.model,
            measure=None,
            levels=self.t,
            scale=self.scale,
            atom_shift=0.0,
            method="cole-hopf",
            _chain=chain,
        )

    def _chain(self, v):
        self.evaluations += 1
        return _solve_chain(
            self.kind, self.beta, self.t, v, self.sig2s, self.grid, self.cfg, self.model
        )

    def _value_from_chain(self, chain, v):
        sol = self._solution(chain)
        closed = self.pen_factor * float(np.sum(v * self.dxi_cells))
        lam, psi, _ = batch_conjugate(sol, self.a, closed_pm1=closed)
        pen = self.pen_factor * float(np.sum(v * self.pen_cells))
        return float(np.sum(self.w * lam)) - pen, sol, psi

    def value(self, v) -> float:
        val, _, _ = self._value_from_chain(self._chain(v), v)
        return val

    def value_and_grad(self, v):
        chain = self._chain(v)
        val, sol, psi = self._value_from_chain(chain, v)
        if np.any(~np.isfinite(psi)):
            open_mask = np.isfinite(psi)
            w_pm = float(np.sum(self.w[~open_mask]))
        else:
            open_mask = np.ones(len(psi), dtype=bool)
            w_pm = 0.0
        grad = np.empty(len(v))
        if open_mask.any():
            prof = forward_moments(sol, psi[open_mask], self.w[open_mask] / (1.0 - w_pm))
            for j in range(len(v)):
                if len(prof.cell_dxi[j]) == 0:
                    grad[j] = 0.0
                    continue
                f_mid = 0.5 * (prof.cell_f[j][:, 0] + prof.cell_f[j][:, 1])
                f_mid = (1.0 - w_pm) * f_mid + w_pm
                grad[j] = self.grad_factor * (
                    float(np.sum(f_mid * prof.cell_dxi[j])) - self.pen_cells[j]
                )
        else:
            # all atoms in the closed-form regime: F == 1
            grad = self.grad_factor * (self.dxi_cells - self.pen_cells)
        return val, grad

    def value_and_grad_fd(self, v, h):
        base_chain = self._chain(v)
        val, _, _ = self._value_from_chain(base_chain, v)
        grad = np.empty(len(v))
        for j in range(len(v)):
            vj = v.copy()
            if v[j] + h <= self.box_hi:
                vj[j] = v[j] + h
                sign = 1.0
            else:
                vj[j] = v[j] - h
                sign = -1.0
            self.evaluations += 1
            chain_j = _resolve_below(base_chain, self.t, vj, self.sig2s, j + 1, self.cfg)
            val_j, _, _ = self._value_from_chain(chain_j, vj)
            grad[j] = sign * (val_j - val) / h
        return val, grad


# ---------------------------------------------------------------------------
# Projected gradient with PAV projection


def _project(v, hi):
    return project_monotone(v, 0.0, hi)


def _pg_minimize(obj: _StepObjective, v0, cfg: MinimizeConfig):
    """Accelerated projected gradient (FISTA with backtracking and function
    restart) over the monotone box.  Convergence is tested on the gradient
    mapping at the extrapolation point; the trace keeps accepted values, so
    it is monotone by the restart rule."""
    import math

    hi = obj.box_hi
    grad_fn = (
        (lambda vv: obj.value_and_grad_fd(vv, cfg.fd_step))
        if cfg.use_fd_gradient
        else obj.value_and_grad
    )
    v = _project(np.asarray(v0, dtype=float), hi)
    f_v, g = grad_fn(v)
    trace = [f_v]
    lip = max(1.0, float(np.max(np.abs(g))))
    y, f_y, g_y = v, f_v, g
    momentum = 1.0
    converged = False
    for _ in range(cfg.max_iters):
        mapping = float(np.max(np.abs(y - _project(y - g_y, hi))))
        if mapping <= cfg.pg_tol * max(1.0, abs(f_v)):
            converged = True
            break
        dn = 0.0
        f_cand = f_y
        cand = y
        for _bt in range(50):
            cand = _project(y - g_y / lip, hi)
            d = cand - y
            dn = float(d @ d)
            if dn == 0.0:
                break
            f_cand = obj.value(cand)
            if f_cand <= f_y + float(g_y @ d) + 0.5 * lip * dn:
                break
            lip *= 2.0
        if dn == 0.0:
            converged = True
            v, f_v = cand, f_cand
            break
        if f_cand > f_v:
            # acceleration overshot: restart the momentum from the best point
            momentum = 1.0
            y = v
            f_y, g_y = grad_fn(y)
            continue
        momentum_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
        y = _project(cand + ((momentum - 1.0) / momentum_new) * (cand - v), hi)
        momentum = momentum_new
        v, f_v = cand, f_cand
        f_y, g_y = grad_fn(y)
        trace.append(f_v)
        lip *= 0.9
    v, f_v, polished = _lbfgsb_polish(obj, grad_fn, v, f_v, hi, cfg)
    if polished:
        trace.append(f_v)
    _, g_final = grad_fn(v)
    pg = float(np.max(np.abs(v - _project(v - g_final, hi))))
    return v, f_v, pg, trace, converged or polished


def _lbfgsb_polish(obj, grad_fn, v, f_v, hi, cfg: MinimizeConfig):
    """Box-constrained quasi-Newton polish.  Near the optimum the monotone
    cone is normally inactive, so L-BFGS-B pins the nearly flat coordinates
    (tail step values) far more tightly than first-order steps; the result
    is projected back onto the cone and kept only if it does not lose."""
    from scipy.optimize import minimize as _scipy_minimize

    res = _scipy_minimize(
        grad_fn,
        v,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, hi)] * len(v),
        options={"maxiter": 80, "ftol": 1e-14, "gtol": cfg.pg_tol * 1e-2},
    )
    cand = _project(res.x, hi)
    if not np.array_equal(cand, res.x):
        f_cand = obj.value(cand)
    else:
        f_cand = float(res.fun)
    if f_cand <= f_v + 1e-12 * max(1.0, abs(f_v)):
        return cand, f_cand, True
    return v, f_v, False


def _starts(k, scale, cfg: MinimizeConfig):
    rng = np.random.default_rng(cfg.seed)
    base = [
        np.full(k, 0.5 * scale),
        np.linspace(0.05, 0.95, k) * scale,
    ]
    while len(base) < cfg.restarts:
        base.append(np.sort(rng.uniform(0.0, scale, size=k)))
    return base[: max(cfg.restarts, 1)]


def _run_multistart(obj_factory, k, hi, cfg: MinimizeConfig, make_measure):
    obj = obj_factory(hi)
    start_scale = hi if hi <= 1.0 else min(hi, 4.0)
    results = []
    for v0 in _starts(k, start_scale, cfg):
        v, f, pg, trace, conv = _pg_minimize(obj, v0, cfg)
        results.append((f, tuple(v), pg, trace, conv))
    results.sort(key=lambda r: (r[0], r[1]))
    measures = [make_measure(np.asarray(r[1])) for r in results]
    agreement = 0.0
    for i in range(len(measures)):
        for j in range(i + 1, len(measures)):
            agreement = max(agreement, d1_distance(measures[i], measures[j]))
    best = results[0]
    return (
        VariationalResult(
            measure=measures[0],
            value=best[0],
            grad_norm=best[2],
            restarts_agreement=agreement,
            trace=tuple(best[3]),
            evaluations=obj.evaluations,
            converged=best[4],
        ),
        np.asarray(best[1]),
    )


def _adaptive_gamma(obj_factory, k, cfg: MinimizeConfig, make_measure, hi_cap=np.inf):
    hi = min(cfg.gamma_start, hi_cap)
    for _ in range(cfg.gamma_doublings + 1):
        result, v = _run_multistart(obj_factory, k, hi, cfg, make_measure)
        if float(np.max(v)) <= 0.95 * hi or hi >= hi_cap:
            return result
        hi = min(2.0 * hi, hi_cap)
    return result


# ---------------------------------------------------------------------------
# Value functions


def parisi_value(model: MixtureSpec, beta: float, zeta: StepCDF, grid: GridConfig | None = None):
    """Phi(0,0) minus the quadratic penalty, for zeta on [0, 1]."""
    if abs(zeta.q) > 1e-12:
        raise ValueError("the free-energy functional needs zeta on [0, 1]")
    sol = solve_phi(model, beta, zeta, grid)
    pen = 0.5 * beta * beta * zeta.integral_against(model, "s_ddxi")
    return float(sol.value(0, 0.0)) - pen


def ground_state_value(model: MixtureSpec, nu, grid: GridConfig | None = None):
    """Theta_nu(0,0) - (1/2) [int s xi'' gamma ds + xi''(1) delta].

    The atom enters both the solution value (+delta xi''(1)/2) and the
    penalty (-delta xi''(1)/2), so the total does not depend on delta; both
    terms are computed explicitly rather than cancelled by hand.
    """
    nu = nu if isinstance(nu, ExtendedMeasure) else ExtendedMeasure(nu, 0.0)
    if abs(nu.q) > 1e-12:
        raise ValueError("the ground-state functional needs gamma on [0, 1]")
    sol = solve_theta(model, nu, grid)
    pen = 0.5 * nu.gamma.integral_against(model, "s_ddxi") + 0.5 * model.xi(1.0, 2) * nu.delta
    return float(sol.value(0, 0.0)) - pen


def tap_value_beta(
    model: MixtureSpec, beta: float, mu: SpinLaw, zeta: StepCDF, grid: GridConfig | None = None
):
    """int Lambda(q, a) dmu - (beta^2/2) int_q^1 s xi'' zeta ds."""
    q = mu.q
    if q >= 1.0 - 1e-12:
        return 0.0
    if abs(zeta.q - q) > 1e-9:
        raise ValueError(f"zeta left endpoint {zeta.q} does not match mu self-overlap {q}")
    sol = solve_phi(model, beta, zeta, grid)
    lam, _, _ = batch_conjugate(sol, mu.a)
    pen = 0.5 * beta * beta * zeta.integral_against(model, "s_ddxi")
    return float(np.sum(mu.w * lam)) - pen


def tap_value_inf(model: MixtureSpec, mu: SpinLaw, nu, grid: GridConfig | None = None):
    """int Lambda_nu(q, a) dmu - (1/2) int_q^1 s xi'' gamma ds - (1/2) xi''(1) delta.

    The atom contributes +delta xi''(1)/2 through every Lambda_nu and
    -delta xi''(1)/2 through the penalty, so the total is delta-free; both
    sides are evaluated explicitly.
    """
    nu = nu if isinstance(nu, ExtendedMeasure) else ExtendedMeasure(nu, 0.0)
    q = mu.q
    if q >= 1.0 - 1e-12:
        return 0.0
    if abs(nu.q - q) > 1e-9:
        raise ValueError(f"gamma left endpoint {nu.q} does not match mu self-overlap {q}")
    sol = solve_theta(model, nu, grid)
    lam, _, _ = batch_conjugate(sol, mu.a)
    pen = 0.5 * nu.gamma.integral_against(model, "s_ddxi") + 0.5 * model.xi(1.0, 2) * nu.delta
    return float(np.sum(mu.w * lam)) - pen


# ---------------------------------------------------------------------------
# Minimizations


def minimize_parisi(model: MixtureSpec, beta: float, k: int = 32, cfg: MinimizeConfig | None = None):
    """Minimize the free-energy functional over step c.d.f.s on a uniform grid."""
    return minimize_tap_beta(model, beta, SpinLaw.delta(0.0), k, cfg)


def minimize_ground_state(model: MixtureSpec, k: int = 32, cfg: MinimizeConfig | None = None):
    """Minimize the ground-state functional over step gamma on a uniform grid."""
    return minimize_tap_inf(model, SpinLaw.delta(0.0), k, cfg)


def minimize_tap_beta(
    model: MixtureSpec, beta: float, mu: SpinLaw, k: int = 32, cfg: MinimizeConfig | None = None
):
    cfg = cfg or MinimizeConfig()
    q = mu.q
    if q >= 1.0 - 1e-12:
        raise ValueError("mu is concentrated on {-1, 1}: the functional is identically 0")
    t_grid = np.linspace(q, 1.0, k + 1)
    scaled = beta > cfg.grid.beta_scaled_threshold

    if not scaled:
        def factory(hi):
            return _StepObjective(model, mu, t_grid, "pos", beta, 1.0, cfg.grid)

        result, _ = _run_multistart(
            factory, k, 1.0, cfg, lambda v: StepCDF(t_grid, np.minimum(v, 1.0))
        )
        return result

    def factory(hi):
        return _StepObjective(model, mu, t_grid, "pos_scaled", beta, hi, cfg.grid)

    return _adaptive_gamma(
        factory,
        k,
        cfg,
        lambda v: StepCDF(t_grid, np.minimum(v / beta, 1.0)),
        hi_cap=beta,
    )


def minimize_tap_inf(
    model: MixtureSpec, mu: SpinLaw, k: int = 32, cfg: MinimizeConfig | None = None
):
    cfg = cfg or MinimizeConfig()
    q = mu.q
    if q >= 1.0 - 1e-12:
        raise ValueError("mu is concentrated on {-1, 1}: the functional is identically 0")
    t_grid = np.linspace(q, 1.0, k + 1)

    def factory(hi):
        return _StepObjective(model, mu, t_grid, "zero", None, hi, cfg.grid)

    return _adaptive_gamma(factory, k, cfg, lambda v: StepGamma(t_grid, v))


# ---------------------------------------------------------------------------
# Temperature derivatives and stationarity diagnostics


def dparisi_dbeta(
    model: MixtureSpec,
    beta: float,
    k: int = 32,
    cfg: MinimizeConfig | None = None,
    fd_step: float = 1e-3,
):
    """d/dbeta of the minimized free-energy functional: the formula
    beta int_0^1 xi' zeta* ds against a centered finite difference."""
    cfg = cfg or MinimizeConfig()
    best = minimize_parisi(model, beta, k, cfg)
    zeta = best.measure
    formula = beta * zeta.integral_against(model, "dxi")
    lo = minimize_parisi(model, beta - fd_step, k, cfg).value
    hi = minimize_parisi(model, beta + fd_step, k, cfg).value
    return {"formula": formula, "fd": (hi - lo) / (2 * fd_step), "zeta": zeta, "value": best.value}


def dtap_dbeta(
    model: MixtureSpec,
    beta: float,
    mu: SpinLaw,
    k: int = 32,
    cfg: MinimizeConfig | None = None,
    fd_step: float = 1e-3,
):
    """d/dbeta of the minimized TAP functional:
    beta int_q^1 (xi'(s) - xi'(q)) zeta_{beta,mu}(s) ds, compared with a
    centered finite difference and bounded by the zero-temperature value."""
    if np.max(np.abs(mu.a)) >= 1.0 - 1e-12:
        raise ValueError("the derivative formula needs mu supported inside (-1, 1)")
    cfg = cfg or MinimizeConfig()
    best = minimize_tap_beta(model, beta, mu, k, cfg)
    zeta = best.measure
    formula = beta * zeta.integral_against(model, "dxi_minus_dxi_q")
    lo = minimize_tap_beta(model, beta - fd_step, mu, k, cfg).value
    hi = minimize_tap_beta(model, beta + fd_step, mu, k, cfg).value
    tap_inf = minimize_tap_inf(model, mu, k, cfg).value
    return {
        "formula": formula,
        "fd": (hi - lo) / (2 * fd_step),
        "tap_inf": tap_inf,
        "zeta": zeta,
    }


def dphi_dbeta(
    model: MixtureSpec,
    beta: float,
    zeta: StepCDF,
    x: float,
    grid: GridConfig | None = None,
    fd_step: float = 1e-4,
):
    """d/dbeta of the solution at (q, x):
    beta (xi'(1) - xi'(q) - int (xi'(s) - xi'(q)) E u(s)^2 dzeta(s)),
    with dzeta the probability measure of the step c.d.f. (atoms at the
    breakpoints and at 1).  Returns the formula and a centered difference.
    """
    sol = solve_phi(model, beta, zeta, grid)
    prof = forward_moments(sol, x)
    q = zeta.q
    locs, masses = zeta.atoms()
    acc = 0.0
    for loc, mass in zip(locs, masses):
        i = sol.level_index(loc)
        acc += mass * (model.xi(loc, 1) - model.xi(q, 1)) * prof.level_e_u2[i]
    formula = beta * (model.xi(1.0, 1) - model.xi(q, 1) - acc)
    lo = float(solve_phi(model, beta - fd_step, zeta, grid).value(0, x))
    hi = float(solve_phi(model, beta + fd_step, zeta, grid).value(0, x))
    return {"formula": formula, "fd": (hi - lo) / (2 * fd_step)}


def parisi_stationarity(
    model: MixtureSpec, beta: float, zeta: StepCDF, grid: GridConfig | None = None
) -> StationarityReport:
    """Profile s -> E u(s)^2 - s at the breakpoints plus the xi''-weighted
    interval integrals whose total must vanish at an optimum."""
    sol = solve_phi(model, beta, zeta, grid)
    prof = forward_moments(sol, 0.0)
    pointwise = prof.level_e_u2 - sol.levels
    vals = np.asarray(zeta(0.5 * (zeta.t[:-1] + zeta.t[1:])))
    integrals = np.empty(len(zeta.v))
    for j in range(len(zeta.v)):
        if len(prof.cell_dxi[j]) == 0:
            integrals[j] = 0.0
            continue
        f_mid = 0.5 * (prof.cell_f[j][:, 0] + prof.cell_f[j][:, 1])
        pen_j = model.xi_int_s_ddxi(zeta.t[j + 1]) - model.xi_int_s_ddxi(zeta.t[j])
        integrals[j] = vals[j] * (float(np.sum(f_mid * prof.cell_dxi[j])) - pen_j)
    return StationarityReport(
        breakpoints=np.asarray(zeta.t),
        pointwise=pointwise,
        interval_integrals=integrals,
        weighted_total=float(np.sum(integrals)),
    )
