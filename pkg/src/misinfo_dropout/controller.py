"""Per-content control loops.

Each step observes (S_t, I_t), asks a policy for a dropout matrix computed
on the model networks, and lets an observer advance the "real" network one
step under that dropout. Observers:

* ``SbmObserver``            one SIR step on the altered real SBM (default);
* ``PairedUniformObserver``  shared per-pair uniforms, for coupled comparisons;
* ``TreeReplayObserver``     replays a recorded propagation tree, dropping each
                             recorded transfer with the current dropout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cascade import INFECTED, SUSCEPTIBLE, CascadeRecord, SirState, advance, record_from_states, sir_step
from .dropout import (BRANCH_NONE, SolverReport, StepCounts, apply_dropout, feasibility_convex,
                      feasibility_lp, solve_convex, solve_lp, solve_soft)
from .fit import ContentModelPair
from .graph import Partition, SbmModel

SOLVERS = ("lp", "convex")

Policy = Callable[[StepCounts], SolverReport]
Observer = Callable[[SirState, np.ndarray, np.random.Generator], SirState]


@dataclass(frozen=True)
class ControlConfig:
    alpha: float = 1.5
    lam: float = 1.0
    solver: str = "lp"
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")

    @property
    def name(self) -> str:
        return f"alpha={self.alpha:g},lambda={self.lam:g},{self.solver}"


# ---- policies --------------------------------------------------------------

def lp_policy(models: ContentModelPair, alpha: float, lam: float) -> Policy:
    """LP when its feasibility test passes, softened LP otherwise."""
    bm, bp = models.b_minus, models.b_plus

    def policy(counts: StepCounts) -> SolverReport:
        if feasibility_lp(counts, bp, alpha):
            return solve_lp(counts, bm, bp, alpha)
        return solve_soft(counts, bm, bp, lam)
    return policy


def convex_policy(models: ContentModelPair, alpha: float, lam: float, tolerance: float = 1e-6) -> Policy:
    """Exponential-expectation problem when feasible, softened LP otherwise."""
    bm, bp = models.b_minus, models.b_plus

    def policy(counts: StepCounts) -> SolverReport:
        if feasibility_convex(counts, bp, alpha):
            return solve_convex(counts, bm, bp, alpha, tolerance)
        return solve_soft(counts, bm, bp, lam)
    return policy


def fixed_policy(d, branch: str = "fixed") -> Policy:
    d = np.asarray(d, dtype=float)

    def policy(counts: StepCounts) -> SolverReport:
        return SolverReport(d, 0.0, 0.0, branch)
    return policy


def no_control(k: int) -> Policy:
    return fixed_policy(np.ones((k, k)), BRANCH_NONE)


# ---- observers -------------------------------------------------------------

class SbmObserver:
    def __init__(self, real_model: SbmModel):
        self.real_model = real_model

    def __call__(self, state, d, rng):
        return sir_step(state, apply_dropout(self.real_model, d), rng)


class PairedUniformObserver:
    """Transfer i -> j at step t succeeds iff U[i, j] < d_uv * b_uv.

    Runs sharing ``uniforms`` are coupled: with smaller dropout factors, every
    successful transfer is also successful in the less restricted run.
    """

    def __init__(self, real_model: SbmModel, uniforms: np.ndarray):
        n = real_model.n_total
        if uniforms.shape != (n, n):
            raise ValueError("uniforms must be N x N")
        self.real_model = real_model
        self.uniforms = uniforms

    def __call__(self, state, d, rng):
        c = self.real_model.partition.class_of
        inf = state.nodes(INFECTED)
        sus = state.nodes(SUSCEPTIBLE)
        if inf.size == 0 or sus.size == 0:
            return advance(state, np.empty(0, dtype=np.int64))
        thr = (d * self.real_model.block)[c[inf][:, None], c[sus][None, :]]
        hit = (self.uniforms[np.ix_(inf, sus)] < thr).any(axis=0)
        return advance(state, sus[hit])


class TreeReplayObserver:
    """Replays a recorded cascade; each recorded transfer survives with prob d_uv."""

    def __init__(self, partition: Partition, tree: np.ndarray):
        tree = np.asarray(tree, dtype=np.int64).reshape(-1, 2)
        order = np.argsort(tree[:, 0], kind="stable")
        self.parents = tree[order, 0]
        self.children = tree[order, 1]
        self.class_of = partition.class_of

    def __call__(self, state, d, rng):
        inf = state.nodes(INFECTED)
        lo = np.searchsorted(self.parents, inf, side="left")
        hi = np.searchsorted(self.parents, inf, side="right")
        idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if inf.size else np.empty(0, int)
        idx = idx.astype(np.int64)
        par, kid = self.parents[idx], self.children[idx]
        keep = state.status[kid] == SUSCEPTIBLE
        par, kid = par[keep], kid[keep]
        survive = rng.random(kid.size) < d[self.class_of[par], self.class_of[kid]]
        kid = kid[survive]
        kid = np.unique(kid)
        return advance(state, kid)


# ---- control loop ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlledRunRecord:
    cascade: CascadeRecord
    reports: tuple[SolverReport, ...]

    @property
    def branches(self) -> list[str]:
        return [r.branch for r in self.reports]

    @property
    def dropouts(self) -> list[np.ndarray]:
        return [r.d_star for r in self.reports]

    @property
    def r_infinity(self) -> int:
        return self.cascade.r_infinity

    def to_json(self) -> dict:
        out = self.cascade.to_json()
        out["reports"] = [r.to_json() for r in self.reports]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ControlledRunRecord":
        return cls(CascadeRecord.from_json(obj), tuple(SolverReport.from_json(r) for r in obj["reports"]))


def run_controlled(policy: Policy, observer: Observer, partition: Partition, seeds: Iterable[int],
                   rng: np.random.Generator, max_steps: int = 200, m: int = 1,
                   label: str | None = None) -> ControlledRunRecord:
    seeds = list(seeds)
    state = SirState.initial(partition.n_total, seeds, m)
    states, reports = [state], []
    while not state.terminal and state.t < max_steps:
        counts = StepCounts(*state.counts(partition))
        report = policy(counts)
        reports.append(report)
        state = observer(state, report.d_star, rng)
        states.append(state)
    return ControlledRunRecord(record_from_states(states, partition, seeds, label), tuple(reports))


def _check_partitions(models: ContentModelPair, real_model: SbmModel) -> None:
    if models.partition != real_model.partition:
        raise ValueError("model networks and real network use different partitions")


def make_policy(models: ContentModelPair, config: ControlConfig) -> Policy:
    if config.solver == "convex":
        return convex_policy(models, config.alpha, config.lam)
    return lp_policy(models, config.alpha, config.lam)


def run_algorithm1(models: ContentModelPair, real_model: SbmModel, seeds, config: ControlConfig,
                   rng: np.random.Generator, observer: Observer | None = None) -> ControlledRunRecord:
    """Generic loop; the per-step problem is solved by ``config.solver``."""
    _check_partitions(models, real_model)
    observer = SbmObserver(real_model) if observer is None else observer
    return run_controlled(make_policy(models, config), observer, real_model.partition, seeds, rng,
                          config.max_steps)


def run_algorithm2(models: ContentModelPair, real_model: SbmModel, seeds, config: ControlConfig,
                   rng: np.random.Generator, observer: Observer | None = None) -> ControlledRunRecord:
    """LP with the softened LP as fallback whenever the LP is infeasible."""
    _check_partitions(models, real_model)
    observer = SbmObserver(real_model) if observer is None else observer
    return run_controlled(lp_policy(models, config.alpha, config.lam), observer, real_model.partition,
                          seeds, rng, config.max_steps)


def empirical_branching_ratios(record) -> list[float]:
    """|I_{t+1}| / |I_t| over consecutive steps with a non-empty front."""
    cascade = record.cascade if isinstance(record, ControlledRunRecord) else record
    totals = cascade.infected_totals
    if totals.size < 2:
        raise ValueError("need at least two steps to form a branching ratio")
    return [float(totals[t + 1] / totals[t]) for t in range(totals.size - 1) if totals[t] > 0]


def write_runs_jsonl(runs: Sequence[ControlledRunRecord], path) -> None:
    with Path(path).open("w") as fh:
        for run in runs:
            fh.write(json.dumps(run.to_json()) + "\n")
