"""Dropout alterations and the per-step dropout optimisers.

A dropout matrix ``d`` scales every class-to-class transfer probability:
``b_uv -> d_uv * b_uv``. ``d_uv = 1`` leaves the pair untouched and
``d_uv = 0`` blocks it. At each step the optimisers pick ``d`` to minimise
the expected number of new false-content receivers while keeping the
expected true-content front at least ``alpha * |I_t|``.

Three problems are solved here:

* ``solve_lp``      linearised objective and constraint (small infected front);
* ``solve_soft``    weighted trade-off used when the LP is infeasible;
* ``solve_convex``  exponential (large-N) expectations, solved to a KKT point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import SbmModel

BRANCH_LP, BRANCH_SOFT, BRANCH_CONVEX, BRANCH_NONE = "lp", "soft-lp", "convex", "none"


class InfeasibleError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DropoutMatrix:
    """Per-class-pair survival factors, ``d[u, v]`` for transfers u -> v."""

    d: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"dropout matrix must be square, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("dropout entries must lie in [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @classmethod
    def ones(cls, k: int) -> "DropoutMatrix":
        return cls(np.ones((k, k)))

    @property
    def k(self) -> int:
        return self.d.shape[0]


def as_dropout(d) -> np.ndarray:
    return d.d if isinstance(d, DropoutMatrix) else DropoutMatrix(d).d


@dataclass(frozen=True, eq=False)
class StepCounts:
    """Per-class susceptible counts |S_t^v| and infected counts |I_t^u|."""

    s_counts: np.ndarray
    i_counts: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s_counts, dtype=float)
        i = np.asarray(self.i_counts, dtype=float)
        if s.shape != i.shape or s.ndim != 1:
            raise ValueError("s_counts and i_counts must be vectors of equal length")
        if s.min() < 0 or i.min() < 0:
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "s_counts", s)
        object.__setattr__(self, "i_counts", i)

    @property
    def i_total(self) -> float:
        return float(self.i_counts.sum())

    @property
    def k(self) -> int:
        return self.s_counts.size

    def pair_weights(self) -> np.ndarray:
        """``|I^u| * |S^v|`` as a (k, k) array indexed [u, v]."""
        return np.outer(self.i_counts, self.s_counts)


@dataclass(frozen=True, eq=False)
class SolverReport:
    d_star: np.ndarray
    objective: float
    constraint_value: float
    branch: str
    kkt_residual: float | None = None
    multiplier: float | None = None
    iterations: int | None = None
    lp_objective: float | None = None
    lp_disagrees: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "d_star", as_dropout(self.d_star))
        if not (math.isfinite(self.objective) and math.isfinite(self.constraint_value)):
            raise ValueError("solver report values must be finite")

    def to_json(self) -> dict:
        out = {"d": self.d_star.tolist(), "objective": self.objective,
               "constraint": self.constraint_value, "branch": self.branch}
        if self.kkt_residual is not None:
            out["kkt_residual"] = self.kkt_residual
        if self.lp_objective is not None:
            out["lp_objective"] = self.lp_objective
            out["lp_disagrees"] = self.lp_disagrees
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SolverReport":
        return cls(np.asarray(obj["d"]), obj["objective"], obj["constraint"], obj["branch"],
                   obj.get("kkt_residual"), lp_objective=obj.get("lp_objective"),
                   lp_disagrees=obj.get("lp_disagrees", False))


def apply_dropout(model: SbmModel, d) -> SbmModel:
    d = as_dropout(d)
    if d.shape != model.block.shape:
        raise ValueError(f"dropout is {d.shape}, model block is {model.block.shape}")
    return model.with_block(d * model.block)


def _check(counts: StepCounts, *mats) -> list[np.ndarray]:
    out = []
    for m in mats:
        m = np.asarray(m, dtype=float)
        if m.shape != (counts.k, counts.k):
            raise ValueError(f"matrix of shape {m.shape} does not match k={counts.k}")
        out.append(m)
    return out


def expected_next_infected_exact(counts: StepCounts, block, d) -> float:
    """sum_v |S^v| (1 - prod_u (1 - d_uv b_uv) ** |I^u|)."""
    block, d = _check(counts, block, as_dropout(d))
    p = d * block
    n = counts.i_counts
    with np.errstate(divide="ignore"):
        log_escape = n[:, None] * np.log1p(-p)
    log_escape[n == 0, :] = 0.0
    return float(counts.s_counts @ -np.expm1(log_escape.sum(axis=0)))


def _hazards(counts: StepCounts, block, d) -> np.ndarray:
    """z_v = sum_u |I^u| d_uv b_uv."""
    return counts.i_counts @ (d * block)


def expected_next_infected_asymptotic(counts: StepCounts, block, d) -> float:
    """sum_v |S^v| (1 - exp(-sum_u |I^u| d_uv b_uv))."""
    block, d = _check(counts, block, as_dropout(d))
    return float(counts.s_counts @ -np.expm1(-_hazards(counts, block, d)))


def expected_next_infected_linear(counts: StepCounts, block, d) -> float:
    """sum_{u,v} |S^v| |I^u| d_uv b_uv, the first-order version of the above."""
    block, d = _check(counts, block, as_dropout(d))
    return float((counts.pair_weights() * d * block).sum())


def feasibility_convex(counts: StepCounts, b_plus, alpha: float) -> bool:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    (b_plus,) = _check(counts, b_plus)
    return expected_next_infected_asymptotic(counts, b_plus, np.ones_like(b_plus)) >= alpha * counts.i_total


def feasibility_lp(counts: StepCounts, b_plus, alpha: float) -> bool:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    (b_plus,) = _check(counts, b_plus)
    return float((counts.pair_weights() * b_plus).sum()) >= alpha * counts.i_total


def solve_lp(counts: StepCounts, b_minus, b_plus, alpha: float) -> SolverReport:
    """Exact solution of the linearised problem by continuous-knapsack greedy.

    Coordinates with zero false-content cost are opened first (free); the
    rest are opened in increasing cost/benefit order, lexicographic (u, v)
    on ties, and the last one is opened only as far as the constraint needs.
    """
    b_minus, b_plus = _check(counts, b_minus, b_plus)
    if not feasibility_lp(counts, b_plus, alpha):
        raise InfeasibleError("LP infeasible: true-content front cannot reach alpha * |I_t| "
                              "even without dropout; use solve_soft")
    w = counts.pair_weights()
    benefit = w * b_plus
    cost = w * b_minus
    target = alpha * counts.i_total
    k = counts.k
    d = np.zeros((k, k))
    free = cost == 0
    d[free] = 1.0
    got = float(benefit[free].sum())
    if got < target:
        cand = [(cost[u, v] / benefit[u, v], u, v) for u in range(k) for v in range(k)
                if cost[u, v] > 0 and benefit[u, v] > 0]
        for _, u, v in sorted(cand):
            need = target - got
            if benefit[u, v] >= need:
                d[u, v] = min(1.0, need / benefit[u, v])
                got = target
                break
            d[u, v] = 1.0
            got += benefit[u, v]
    return SolverReport(d, float((cost * d).sum()), float((benefit * d).sum()), BRANCH_LP)


def solve_soft(counts: StepCounts, b_minus, b_plus, lam: float) -> SolverReport:
    """Minimise sum |S^v||I^u| d_uv (b-_uv - lam b+_uv) over the box.

    Separable: d_uv = 0 where false-content cost outweighs the weighted
    true-content gain, 1 otherwise (ties keep the transfer).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    b_minus, b_plus = _check(counts, b_minus, b_plus)
    coef = b_minus - lam * b_plus
    d = (coef <= 0).astype(float)
    w = counts.pair_weights()
    return SolverReport(d, float((w * coef * d).sum()), float((w * b_plus * d).sum()), BRANCH_SOFT)


def _column_argmin(w: np.ndarray, a: np.ndarray, s: float, mu: float) -> np.ndarray:
    """argmin_x  w.x + mu * s * exp(-a.x)  over x in [0, 1]^k  (w, a >= 0).

    For a fixed total hazard z = a.x the cheapest fill is a fractional
    knapsack in w/a order; along that path the marginal cost is piecewise
    constant and the marginal gain mu*s*exp(-z) decreasing, so the optimum is
    found segment by segment in closed form.
    """
    x = np.zeros(w.size)
    dead = a == 0
    x[dead & (w == 0)] = 1.0
    zero = ~dead & (w == 0)
    x[zero] = 1.0
    z = float(a[zero].sum())
    if mu <= 0 or s <= 0:
        return x
    order = sorted(np.flatnonzero(~dead & (w > 0)), key=lambda u: (w[u] / a[u], u))
    for u in order:
        r = w[u] / a[u]
        z_star = math.log(mu * s / r)
        if z_star <= z:
            break
        if z_star >= z + a[u]:
            x[u] = 1.0
            z += a[u]
        else:
            x[u] = (z_star - z) / a[u]
            break
    return x


def solve_convex(counts: StepCounts, b_minus, b_plus, alpha: float, tolerance: float = 1e-6,
                 max_iter: int = 10_000, compare_lp: bool = True) -> SolverReport:
    """Exponential-expectation problem, solved to a KKT point.

    The objective sum_v |S^v| (1 - exp(-z_v^-)) is concave in d while the
    constraint set {g(d) >= alpha |I|} is convex. Each outer iteration
    replaces the objective by its tangent plane (a global over-estimate, so
    the true objective never increases) and solves the resulting convex
    problem exactly: bisection on the single constraint multiplier, with a
    closed-form minimiser of the Lagrangian per receiver column.

    The KKT residual is measured on gradients normalised to unit max-norm.
    """
    b_minus, b_plus = _check(counts, b_minus, b_plus)
    if not feasibility_convex(counts, b_plus, alpha):
        raise InfeasibleError("convex problem infeasible: no dropout reaches alpha * |I_t|")
    k = counts.k
    n, s = counts.i_counts, counts.s_counts
    target = alpha * counts.i_total
    a_minus = n[:, None] * b_minus
    a_plus = n[:, None] * b_plus

    def f(d):
        return float(s @ -np.expm1(-(a_minus * d).sum(axis=0)))

    def g(d):
        return float(s @ -np.expm1(-(a_plus * d).sum(axis=0)))

    def grad_f(d):
        return a_minus * (s * np.exp(-(a_minus * d).sum(axis=0)))[None, :]

    def grad_g(d):
        return a_plus * (s * np.exp(-(a_plus * d).sum(axis=0)))[None, :]

    def inner(w, mu):
        return np.column_stack([_column_argmin(w[:, v], a_plus[:, v], s[v], mu) for v in range(k)])

    def linearised(w):
        x = inner(w, 0.0)
        if g(x) >= target:
            return x, 0.0
        lo, hi = 0.0, 1.0
        while g(inner(w, hi)) < target:
            lo, hi = hi, hi * 2.0
            if hi > 1e300:
                raise ConvergenceError("multiplier bracket diverged")
        for _ in range(300):
            mid = 0.5 * (lo + hi) if lo == 0.0 else math.sqrt(lo * hi)
            if not lo < mid < hi:
                break
            if g(inner(w, mid)) >= target:
                hi = mid
            else:
                lo = mid
        return inner(w, hi), hi

    def kkt(d, mu):
        gf, gg = grad_f(d), grad_g(d)
        scale = max(float(np.abs(gf).max()), mu * float(np.abs(gg).max()), 1e-300)
        lag = (gf - mu * gg) / scale
        stat = float(np.abs(d - np.clip(d - lag, 0.0, 1.0)).max())
        cscale = max(target, 1.0)
        primal = max(0.0, target - g(d)) / cscale
        comp = mu * abs(g(d) - target) / scale
        return max(stat, primal, comp)

    d = np.ones((k, k))
    mu = 0.0
    res = math.inf
    for it in range(1, max_iter + 1):
        d_new, mu = linearised(grad_f(d))
        step = float(np.abs(d_new - d).max())
        d = d_new
        res = kkt(d, mu)
        if res <= tolerance and step <= max(tolerance, 1e-12):
            break
    else:
        raise ConvergenceError(f"solve_convex did not converge in {max_iter} iterations "
                               f"(KKT residual {res:.3g})")
    report = dict(d_star=d, objective=f(d), constraint_value=g(d), branch=BRANCH_CONVEX,
                  kkt_residual=res, multiplier=mu, iterations=it)
    if compare_lp and feasibility_lp(counts, b_plus, alpha):
        lp = solve_lp(counts, b_minus, b_plus, alpha)
        gap = abs(report["objective"] - lp.objective)
        report["lp_objective"] = lp.objective
        report["lp_disagrees"] = gap > 0.05 * max(report["objective"], lp.objective, 1e-12)
    return SolverReport(**report)


def lemma1_bound(samples_of_i_t: Sequence[float], alpha: float, lam: float, horizon: int) -> tuple[float, float]:
    """Monte Carlo estimate (and standard error) of E[exp(-lam |I_T| / alpha^T)].

    This upper-bounds the probability that the infected front dies out by
    time T when every step up to T kept the true-content constraint.
    """
    x = np.asarray(samples_of_i_t, dtype=float)
    if x.size == 0:
        raise ValueError("need at least one sample of |I_T|")
    if lam < 0 or alpha <= 0 or horizon < 1:
        raise ValueError("need lam >= 0, alpha > 0, T >= 1")
    vals = np.exp(-lam * x / alpha ** horizon)
    se = float(vals.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(vals.mean()), se
