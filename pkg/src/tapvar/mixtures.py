"""Model mixtures, step-function order parameters, and spin laws.

The mixture xi(s) = sum_p c_p s^p (c_p >= 0) fixes the covariance structure of
the model.  Order parameters are monotone step functions on [q, 1]: cumulative
distribution functions (values in [0, 1]) at positive temperature and
nonnegative nondecreasing functions at zero temperature, optionally extended
by an atom of mass delta at s = 1.  Spin laws are probability measures on
[-1, 1] given by atoms, with self-overlap q = int a^2 dmu.

Everything here is immutable after construction and pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "MixtureSpec",
    "StepCDF",
    "StepGamma",
    "ExtendedMeasure",
    "SpinLaw",
    "xi_eval",
    "empirical_law",
    "project_monotone",
    "d1_distance",
    "load_mixture",
    "load_measure",
    "load_spin_law",
]

MAX_DEGREE = 32


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MixtureSpec:
    """Sparse polynomial mixture: coeffs is a list of (p, c_p) with c_p >= 0."""

    coeffs: tuple

    def __post_init__(self):
        cleaned = []
        seen = set()
        for p, c in self.coeffs:
            p = int(p)
            c = float(c)
            if p < 1 or p > MAX_DEGREE:
                raise ValueError(f"degree p={p} outside [1, {MAX_DEGREE}]")
            if p in seen:
                raise ValueError(f"duplicate degree p={p}")
            if c < 0:
                raise ValueError(f"coefficient for p={p} is negative")
            seen.add(p)
            if c > 0:
                cleaned.append((p, c))
        if not cleaned:
            raise ValueError("mixture needs at least one positive coefficient")
        cleaned.sort()
        object.__setattr__(self, "coeffs", tuple(cleaned))

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> "MixtureSpec":
        return cls(tuple((int(p), float(c)) for p, c in pairs))

    def xi(self, s, order: int = 0):
        """Evaluate xi, xi' or xi'' at s (scalar or array) in [0, 1]."""
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < -1e-12) or np.any(s_arr > 1 + 1e-12):
            raise ValueError("xi is only defined on [0, 1]")
        s_arr = np.clip(s_arr, 0.0, 1.0)
        out = np.zeros_like(s_arr)
        for p, c in self.coeffs:
            if order == 0:
                out += c * s_arr**p
            elif order == 1:
                out += c * p * s_arr ** (p - 1)
            elif order == 2:
                if p >= 2:
                    out += c * p * (p - 1) * s_arr ** (p - 2)
            else:
                raise ValueError("order must be 0, 1 or 2")
        return out if out.ndim else float(out)

    def xi_int_s_ddxi(self, t) -> float:
        """int_0^t s xi''(s) ds = sum_p c_p (p-1) t^p (exact)."""
        t = float(t)
        return float(sum(c * (p - 1) * t**p for p, c in self.coeffs))

    @property
    def max_degree(self) -> int:
        return self.coeffs[-1][0]

    def to_dict(self) -> dict:
        return {"coeffs": [[p, c] for p, c in self.coeffs]}


def xi_eval(model: MixtureSpec, s: float, order: int = 0) -> float:
    """xi(s), xi'(s) or xi''(s) by exact polynomial evaluation."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s={s} outside [0, 1]")
    return float(model.xi(s, order))


class _StepFunction:
    """Right-continuous step function on [q, 1]: value v[j] on [t[j], t[j+1])."""

    t: np.ndarray
    v: np.ndarray

    def __init__(self, t, v):
        t = _frozen_array(t)
        v = _frozen_array(v)
        if t.ndim != 1 or v.ndim != 1 or len(t) != len(v) + 1:
            raise ValueError("need len(t) == len(v) + 1")
        if len(v) < 1:
            raise ValueError("need at least one step")
        if np.any(np.diff(t) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not (-1e-12 <= t[0] and abs(t[-1] - 1.0) <= 1e-12):
            raise ValueError("breakpoints must span [q, 1] with t[-1] = 1")
        if np.any(np.diff(v) < -1e-12):
            raise ValueError("values must be nondecreasing")
        self.t = t
        self.v = v

    @property
    def q(self) -> float:
        return float(self.t[0])

    @property
    def k(self) -> int:
        return len(self.v)

    def __call__(self, s):
        """Value at s; s = 1 returns the last step value."""
        idx = np.clip(np.searchsorted(self.t, s, side="right") - 1, 0, self.k - 1)
        return self.v[idx]

    def with_values(self, v):
        return type(self)(self.t, v)

    def restrict(self, q_new: float):
        """Restriction to [q_new, 1]; q_new becomes the new left endpoint."""
        if q_new < self.q - 1e-12 or q_new >= 1.0:
            raise ValueError("q_new outside [q, 1)")
        keep = self.t > q_new + 1e-15
        t_new = np.concatenate([[q_new], self.t[keep]])
        first = np.searchsorted(self.t, q_new, side="right") - 1
        first = min(max(first, 0), self.k - 1)
        v_new = self.v[first:]
        return type(self)(t_new, v_new)

    def integral(self) -> float:
        """int_q^1 f(s) ds (exact)."""
        return float(np.sum(self.v * np.diff(self.t)))

    def integral_against(self, model: MixtureSpec, weight: str) -> float:
        """Exact int_q^1 w(s) f(s) ds for w in {"ddxi", "s_ddxi", "dxi", "dxi_minus_dxi_q"}."""
        t = self.t
        if weight == "ddxi":
            cell = model.xi(t[1:], 1) - model.xi(t[:-1], 1)
        elif weight == "s_ddxi":
            cell = np.array(
                [model.xi_int_s_ddxi(b) - model.xi_int_s_ddxi(a) for a, b in zip(t[:-1], t[1:])]
            )
        elif weight == "dxi":
            cell = model.xi(t[1:], 0) - model.xi(t[:-1], 0)
        elif weight == "dxi_minus_dxi_q":
            dxi_q = model.xi(self.q, 1)
            cell = (model.xi(t[1:], 0) - model.xi(t[:-1], 0)) - dxi_q * np.diff(t)
        else:
            raise ValueError(f"unknown weight {weight!r}")
        return float(np.sum(self.v * cell))

    def to_dict(self) -> dict:
        return {"q": self.q, "t": self.t.tolist(), "v": self.v.tolist()}

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.v, other.v)
        )

    def __repr__(self):
        return f"{type(self).__name__}(q={self.q}, k={self.k})"


class StepCDF(_StepFunction):
    """Element of the c.d.f. family on [q, 1]: nondecreasing steps with values in [0, 1].

    As a probability measure on [q, 1] it carries atoms v[0] at q,
    v[j] - v[j-1] at the interior breakpoints, and 1 - v[-1] at s = 1.
    """

    def __init__(self, t, v):
        super().__init__(t, v)
        if np.any(self.v < -1e-12) or np.any(self.v > 1 + 1e-12):
            raise ValueError("StepCDF values must lie in [0, 1]")
        self.v = _frozen_array(np.clip(self.v, 0.0, 1.0))

    @classmethod
    def constant(cls, value: float, q: float = 0.0) -> "StepCDF":
        return cls([q, 1.0], [value])

    @classmethod
    def uniform_grid(cls, values, q: float = 0.0) -> "StepCDF":
        values = np.asarray(values, dtype=float)
        return cls(np.linspace(q, 1.0, len(values) + 1), values)

    def atoms(self):
        """(locations, masses) of the induced probability measure on [q, 1]."""
        locs = self.t.copy()
        masses = np.concatenate([[self.v[0]], np.diff(self.v), [1.0 - self.v[-1]]])
        keep = masses > 1e-15
        return locs[keep], masses[keep]

    def support_top(self) -> float:
        """Largest growth point of the c.d.f. (the classical q_EA when applied to a minimizer)."""
        locs, _ = self.atoms()
        return float(locs[-1]) if len(locs) else self.q

    def scaled(self, factor: float) -> "StepGamma":
        return StepGamma(self.t, factor * self.v)


class StepGamma(_StepFunction):
    """Nondecreasing nonnegative step function on [q, 1] with finite integral."""

    def __init__(self, t, v):
        super().__init__(t, v)
        if np.any(self.v < -1e-12):
            raise ValueError("StepGamma values must be nonnegative")
        self.v = _frozen_array(np.maximum(self.v, 0.0))

    @classmethod
    def constant(cls, value: float, q: float = 0.0) -> "StepGamma":
        return cls([q, 1.0], [value])

    @classmethod
    def uniform_grid(cls, values, q: float = 0.0) -> "StepGamma":
        values = np.asarray(values, dtype=float)
        return cls(np.linspace(q, 1.0, len(values) + 1), values)


@dataclass(frozen=True)
class ExtendedMeasure:
    """gamma plus an atom of mass delta at s = 1."""

    gamma: StepGamma
    delta: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    @property
    def q(self) -> float:
        return self.gamma.q

    def to_dict(self) -> dict:
        d = self.gamma.to_dict()
        d["delta"] = self.delta
        return d


@dataclass(frozen=True)
class SpinLaw:
    """Probability measure on [-1, 1] as weighted atoms; q = int a^2 dmu."""

    a: np.ndarray
    w: np.ndarray
    m: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        a = _frozen_array(self.a)
        w = _frozen_array(self.w)
        if a.ndim != 1 or w.shape != a.shape or len(a) == 0:
            raise ValueError("atoms and weights must be equal-length 1-d arrays")
        if np.any(np.abs(a) > 1 + 1e-12):
            raise ValueError("atoms must lie in [-1, 1]")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "a", _frozen_array(np.clip(a, -1.0, 1.0)))
        object.__setattr__(self, "w", w)

    @classmethod
    def from_vector(cls, m) -> "SpinLaw":
        m = np.asarray(m, dtype=float)
        if m.ndim != 1 or len(m) == 0:
            raise ValueError("m must be a nonempty vector")
        if np.any(np.abs(m) > 1 + 1e-12):
            raise ValueError("entries of m must lie in [-1, 1]")
        a, counts = np.unique(m, return_counts=True)
        return cls(a, counts / len(m), m=_frozen_array(m))

    @classmethod
    def from_atoms(cls, a, w) -> "SpinLaw":
        return cls(np.asarray(a, dtype=float), np.asarray(w, dtype=float))

    @classmethod
    def delta(cls, a: float) -> "SpinLaw":
        return cls(np.array([float(a)]), np.array([1.0]))

    @property
    def q(self) -> float:
        return float(np.sum(self.w * self.a**2))

    def binned(self, n_atoms: int) -> "SpinLaw":
        """Equal-mass binning to at most n_atoms atoms (preserves mean per bin)."""
        if len(self.a) <= n_atoms:
            return self
        order = np.argsort(self.a)
        a, w = self.a[order], self.w[order]
        cw = np.cumsum(w)
        edges = np.linspace(0.0, 1.0, n_atoms + 1)[1:-1]
        idx = np.searchsorted(cw, edges, side="left")
        groups = np.split(np.arange(len(a)), idx + 1)
        out_a, out_w = [], []
        for g in groups:
            if len(g) == 0:
                continue
            mass = w[g].sum()
            out_a.append(float(np.sum(a[g] * w[g]) / mass))
            out_w.append(float(mass))
        out_w = np.asarray(out_w)
        return SpinLaw(np.asarray(out_a), out_w / out_w.sum())

    def to_dict(self) -> dict:
        if self.m is not None:
            return {"m": self.m.tolist()}
        return {"a": self.a.tolist(), "w": self.w.tolist()}


def empirical_law(m) -> SpinLaw:
    """Empirical measure of a vector in [-1, 1]^N; q = ||m||^2 / N."""
    return SpinLaw.from_vector(m)


def project_monotone(values, lower: float = -np.inf, upper: float = np.inf) -> np.ndarray:
    """Euclidean projection onto {nondecreasing} followed by clipping to [lower, upper].

    Pool-adjacent-violators with block merging; idempotent.
    """
    y = np.asarray(values, dtype=float)
    if y.ndim != 1:
        raise ValueError("expected a 1-d vector")
    n = len(y)
    if n == 0:
        return y.copy()
    # Each block keeps (mean, weight); merge while the last two violate order.
    means = np.empty(n)
    weights = np.empty(n)
    sizes = np.empty(n, dtype=int)
    top = -1
    for i in range(n):
        top += 1
        means[top], weights[top], sizes[top] = y[i], 1.0, 1
        while top > 0 and means[top - 1] > means[top]:
            w = weights[top - 1] + weights[top]
            means[top - 1] = (weights[top - 1] * means[top - 1] + weights[top] * means[top]) / w
            weights[top - 1] = w
            sizes[top - 1] += sizes[top]
            top -= 1
    out = np.repeat(means[: top + 1], sizes[: top + 1])
    return np.clip(out, lower, upper)


def d1_distance(g: _StepFunction, h: _StepFunction) -> float:
    """Exact int_q^1 |g - h| ds over merged breakpoints."""
    if abs(g.q - h.q) > 1e-12:
        raise ValueError(f"left endpoints differ: {g.q} vs {h.q}")
    t = np.union1d(g.t, h.t)
    mid = 0.5 * (t[:-1] + t[1:])
    return float(np.sum(np.abs(g(mid) - h(mid)) * np.diff(t)))


def load_mixture(path_or_dict) -> MixtureSpec:
    d = _as_dict(path_or_dict)
    return MixtureSpec.from_pairs(d["coeffs"])


def load_measure(path_or_dict, kind: str = "auto"):
    """Measure JSON {"q":, "t":, "v":, "delta":} -> StepCDF, StepGamma or ExtendedMeasure."""
    d = _as_dict(path_or_dict)
    t = d.get("t")
    v = d.get("v")
    if t is None or v is None:
        raise ValueError("measure JSON needs 't' and 'v'")
    if "q" in d and abs(d["q"] - t[0]) > 1e-12:
        raise ValueError("'q' does not match t[0]")
    delta = float(d.get("delta", 0.0))
    if kind == "cdf":
        return StepCDF(t, v)
    if kind == "gamma":
        return StepGamma(t, v)
    gamma = StepGamma(t, v)
    if kind == "extended" or delta > 0 or "delta" in d:
        return ExtendedMeasure(gamma, delta)
    return gamma


def load_spin_law(path_or_dict) -> SpinLaw:
    d = _as_dict(path_or_dict)
    if "m" in d:
        return SpinLaw.from_vector(d["m"])
    return SpinLaw.from_atoms(d["a"], d["w"])


def _as_dict(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        return path_or_dict
    with open(path_or_dict) as fh:
        return json.load(fh)
