"""Discrete-time SIR propagation of one content item.

Transmission is simulated at block level: a susceptible node ``j`` in class
``v`` facing ``n_u`` infected nodes of class ``u`` is infected with
probability ``1 - prod_u (1 - b_uv) ** n_u``. This has the same law as
per-edge sampling on the SBM.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import DirectedGraphInstance, Partition, SbmModel, class_counts

SUSCEPTIBLE, INFECTED, REMOVED = 0, 1, 2


@dataclass(frozen=True, eq=False)
class SirState:
    """S/I/R split of the node set at time ``t``.

    ``status`` holds one of SUSCEPTIBLE/INFECTED/REMOVED per node and ``age``
    the number of steps a node has been infected (-1 when not infected).
    ``parent`` is only tracked when requested and records, for every reached
    non-seed node, the node it received the content from.
    """

    t: int
    status: np.ndarray
    age: np.ndarray
    m: int = 1
    parent: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, n_total: int, seeds, m: int = 1, track: bool = False) -> "SirState":
        if m < 1:
            raise ValueError("infectious period m must be >= 1")
        seeds = np.unique(np.asarray(list(seeds), dtype=np.int64))
        if seeds.size and (seeds.min() < 0 or seeds.max() >= n_total):
            raise IndexError("seed node out of range")
        status = np.zeros(n_total, dtype=np.int8)
        status[seeds] = INFECTED
        age = np.full(n_total, -1, dtype=np.int64)
        age[seeds] = 0
        parent = np.full(n_total, -1, dtype=np.int64) if track else None
        return cls(0, status, age, m, parent)

    @property
    def n_total(self) -> int:
        return int(self.status.size)

    def nodes(self, which: int) -> np.ndarray:
        return np.flatnonzero(self.status == which)

    @property
    def susceptible(self) -> frozenset[int]:
        return frozenset(self.nodes(SUSCEPTIBLE).tolist())

    @property
    def infected(self) -> frozenset[int]:
        return frozenset(self.nodes(INFECTED).tolist())

    @property
    def removed(self) -> frozenset[int]:
        return frozenset(self.nodes(REMOVED).tolist())

    @property
    def infected_age(self) -> dict[int, int]:
        idx = self.nodes(INFECTED)
        return dict(zip(idx.tolist(), self.age[idx].tolist()))

    @property
    def terminal(self) -> bool:
        return not np.any(self.status == INFECTED)

    def counts(self, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
        """Per-class (susceptible, infected) counts."""
        return (class_counts(partition, self.nodes(SUSCEPTIBLE)),
                class_counts(partition, self.nodes(INFECTED)))


def advance(state: SirState, newly_infected: np.ndarray, parents: np.ndarray | None = None) -> SirState:
    """Age and retire the current infected set, then add ``newly_infected``."""
    status = state.status.copy()
    age = state.age.copy()
    inf = state.status == INFECTED
    retire = inf & (age >= state.m - 1)
    status[retire] = REMOVED
    age[retire] = -1
    age[inf & ~retire] += 1
    newly_infected = np.asarray(newly_infected, dtype=np.int64)
    if np.any(state.status[newly_infected] != SUSCEPTIBLE):
        raise ValueError("only susceptible nodes can become infected")
    status[newly_infected] = INFECTED
    age[newly_infected] = 0
    parent = state.parent
    if parent is not None:
        parent = parent.copy()
        if parents is not None:
            parent[newly_infected] = parents
    return SirState(state.t + 1, status, age, state.m, parent)


def _log_escape(block: np.ndarray, n_inf: np.ndarray) -> np.ndarray:
    """log P(no transmission reaches a class-v node), for every v."""
    with np.errstate(divide="ignore"):
        terms = n_inf[:, None] * np.log1p(-block)
    terms[n_inf == 0, :] = 0.0
    return terms.sum(axis=0)


def infection_probabilities(model: SbmModel, n_inf: np.ndarray) -> np.ndarray:
    """Per receiver class, probability that a susceptible node gets infected."""
    return -np.expm1(_log_escape(model.block, np.asarray(n_inf, dtype=float)))


def sir_step(state: SirState, model: SbmModel, rng: np.random.Generator) -> SirState:
    part = model.partition
    if state.n_total != part.n_total:
        raise ValueError("state and model disagree on N")
    inf = state.nodes(INFECTED)
    sus = state.nodes(SUSCEPTIBLE)
    if inf.size == 0:
        return advance(state, np.empty(0, dtype=np.int64))
    n_inf = np.bincount(part.class_of[inf], minlength=part.k)
    sus_class = part.class_of[sus]
    if state.parent is None:
        q = infection_probabilities(model, n_inf)
        hit = rng.random(sus.size) < q[sus_class]
        return advance(state, sus[hit])

    # Parent-tracking path: per infector class, the number of successful
    # transfers into each susceptible node is Binomial(n_u, b_uv). A node is
    # infected iff it receives at least one; its parent is a uniformly chosen
    # successful sender.
    hits = rng.binomial(n_inf[:, None], model.block[:, sus_class])
    total = hits.sum(axis=0)
    got = total > 0
    new = sus[got]
    if new.size == 0:
        return advance(state, new)
    cum = np.cumsum(hits[:, got], axis=0)
    pick = rng.random(new.size) * total[got]
    u_par = (cum <= pick[None, :]).sum(axis=0)
    by_class = [inf[part.class_of[inf] == u] for u in range(part.k)]
    parents = np.empty(new.size, dtype=np.int64)
    for u in np.unique(u_par):
        sel = u_par == u
        parents[sel] = rng.choice(by_class[u], size=int(sel.sum()))
    return advance(state, new, parents)


def instance_step(state: SirState, instance: DirectedGraphInstance) -> SirState:
    """One step on a fixed realised graph: every live edge out of I_t transmits."""
    inf = state.nodes(INFECTED)
    targets = instance.successors_of(inf)
    new = targets[state.status[targets] == SUSCEPTIBLE]
    parents = None
    if state.parent is not None and new.size:
        # smallest infected predecessor, for a deterministic tree
        inf_set = set(inf.tolist())
        parents = np.array([min(i for i in _predecessors(instance, j) if i in inf_set) for j in new])
    return advance(state, new, parents)


def _predecessors(instance: DirectedGraphInstance, j: int) -> np.ndarray:
    return instance.edges[instance.edges[:, 1] == j, 0]


@dataclass(frozen=True, eq=False)
class CascadeRecord:
    """Trajectory of one content item.

    ``steps[t]`` is the per-class count vector |I_t^u|; the last row is the
    all-zero vector when the cascade died out. ``tree`` lists (parent, child)
    transfers when the run tracked them.
    """

    seeds: tuple[int, ...]
    steps: np.ndarray
    r_infinity: int
    label: str | None = None
    tree: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.ndim != 2:
            raise ValueError("steps must be a (T, k) array of class counts")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "r_infinity", int(self.r_infinity))
        if self.tree is not None:
            object.__setattr__(self, "tree", np.asarray(self.tree, dtype=np.int64).reshape(-1, 2))

    @property
    def per_step_infected(self) -> list[np.ndarray]:
        return list(self.steps)

    @property
    def terminated_at(self) -> int:
        return len(self.steps) - 1

    @property
    def infected_totals(self) -> np.ndarray:
        return self.steps.sum(axis=1)

    @property
    def k(self) -> int:
        return self.steps.shape[1]

    def with_label(self, label: str | None) -> "CascadeRecord":
        return replace(self, label=label)

    def to_json(self) -> dict:
        obj = {"seeds": list(self.seeds), "steps": self.steps.tolist(), "r_inf": self.r_infinity}
        if self.label is not None:
            obj["label"] = self.label
        if self.tree is not None:
            obj["tree"] = self.tree.tolist()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "CascadeRecord":
        steps = obj["steps"]
        if not steps:
            raise ValueError("cascade record has no steps")
        tree = obj.get("tree")
        return cls(obj["seeds"], steps, obj["r_inf"], obj.get("label"),
                   None if tree is None else np.asarray(tree, dtype=np.int64))


def record_from_states(states: Sequence[SirState], partition: Partition, seeds,
                       label: str | None = None) -> CascadeRecord:
    steps = np.array([class_counts(partition, s.nodes(INFECTED)) for s in states])
    last = states[-1]
    r_inf = int(np.count_nonzero(last.status != SUSCEPTIBLE))
    tree = None
    if last.parent is not None:
        child = np.flatnonzero(last.parent >= 0)
        tree = np.column_stack([last.parent[child], child])
    return CascadeRecord(tuple(sorted(int(s) for s in seeds)), steps, r_inf, label, tree)


def run_cascade(model: SbmModel, seeds: Iterable[int], m: int = 1,
                rng: np.random.Generator | None = None, max_steps: int | None = None,
                track: bool = False) -> CascadeRecord:
    """Iterate sir_step from I_0 = seeds until no node is infected."""
    rng = np.random.default_rng() if rng is None else rng
    seeds = list(seeds)
    state = SirState.initial(model.n_total, seeds, m, track)
    states = [state]
    limit = model.n_total * m + 1 if max_steps is None else max_steps
    while not state.terminal and state.t < limit:
        state = sir_step(state, model, rng)
        states.append(state)
    return record_from_states(states, model.partition, seeds)


def run_cascade_on_instance(instance: DirectedGraphInstance, partition: Partition,
                            seeds: Iterable[int], m: int = 1, track: bool = False) -> CascadeRecord:
    """Deterministic cascade on a fixed graph (live-edge view of the same process when m = 1)."""
    if instance.n_total != partition.n_total:
        raise ValueError("instance and partition disagree on N")
    seeds = list(seeds)
    state = SirState.initial(partition.n_total, seeds, m, track)
    states = [state]
    while not state.terminal:
        state = instance_step(state, instance)
        states.append(state)
    return record_from_states(states, partition, seeds)


@dataclass(frozen=True)
class CascadeStats:
    mean: float
    mean_se: float
    low_fraction: float
    low_se: float
    n: int


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


def cascade_statistics(records: Sequence[CascadeRecord], n_total: int,
                       low_below: float | None = None, normalize: bool = True) -> CascadeStats:
    """Mean (optionally normalised) cascade size and fraction of low cascades.

    A cascade is "low" when R_inf < ``low_below`` (default N/10).
    """
    if not records:
        raise ValueError("cascade_statistics needs at least one record")
    r = np.array([rec.r_infinity for rec in records], dtype=float)
    low = (r < (n_total / 10 if low_below is None else low_below)).astype(float)
    size = r / n_total if normalize else r
    return CascadeStats(float(size.mean()), _se(size), float(low.mean()), _se(low), len(records))


def write_jsonl(records: Iterable, path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_jsonl(path) -> list[CascadeRecord]:
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(CascadeRecord.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad cascade record ({exc})") from exc
    return out
