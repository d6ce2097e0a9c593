"""True/false-content block models: construction from user parameters and
estimation from labelled cascades."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .cascade import CascadeRecord
from .graph import Partition, SbmModel

TRUE, FALSE = "true", "false"
LABELS = (TRUE, FALSE)


@dataclass(frozen=True, eq=False)
class UserParams:
    r_plus: np.ndarray
    r_minus: np.ndarray

    def __post_init__(self):
        for name in ("r_plus", "r_minus"):
            r = np.asarray(getattr(self, name), dtype=float)
            if r.ndim != 1 or r.min(initial=0.0) < 0 or r.max(initial=0.0) > 1:
                raise ValueError(f"{name} must be a vector of probabilities")
            object.__setattr__(self, name, r)
        if self.r_plus.size != self.r_minus.size:
            raise ValueError("r_plus and r_minus lengths differ")


@dataclass(frozen=True, eq=False)
class ClassTransfer:
    c_plus: np.ndarray
    c_minus: np.ndarray

    def __post_init__(self):
        for name in ("c_plus", "c_minus"):
            c = np.asarray(getattr(self, name), dtype=float)
            if c.ndim != 2 or c.shape[0] != c.shape[1] or c.min() < 0 or c.max() > 1:
                raise ValueError(f"{name} must be a square matrix of probabilities")
            off = c - np.diag(c)[:, None]
            if np.any(off > 0):
                warnings.warn(f"{name}: some c_uv exceed c_uu (no echo-chamber structure)", stacklevel=3)
            object.__setattr__(self, name, c)
        if self.c_plus.shape != self.c_minus.shape:
            raise ValueError("c_plus and c_minus shapes differ")


@dataclass(frozen=True, eq=False)
class ContentModelPair:
    """Block models for true (``g_plus``) and false (``g_minus``) content."""

    g_plus: SbmModel
    g_minus: SbmModel

    def __post_init__(self):
        if self.g_plus.partition != self.g_minus.partition:
            raise ValueError("true and false models must share one partition")

    @classmethod
    def from_blocks(cls, partition: Partition, b_plus, b_minus) -> "ContentModelPair":
        return cls(SbmModel(partition, b_plus), SbmModel(partition, b_minus))

    @property
    def partition(self) -> Partition:
        return self.g_plus.partition

    @property
    def b_plus(self) -> np.ndarray:
        return self.g_plus.block

    @property
    def b_minus(self) -> np.ndarray:
        return self.g_minus.block

    def for_label(self, label: str) -> SbmModel:
        return {TRUE: self.g_plus, FALSE: self.g_minus}[label]


def build_block_matrices(users: UserParams, transfer: ClassTransfer,
                         partition: Partition) -> ContentModelPair:
    """b_uv = mean over senders i in C_u of r_i * c_uv."""
    if users.r_plus.size != partition.n_total:
        raise ValueError(f"user vectors have length {users.r_plus.size}, partition has N={partition.n_total}")
    if transfer.c_plus.shape[0] != partition.k:
        raise ValueError(f"transfer matrices are {transfer.c_plus.shape}, partition has k={partition.k}")
    sizes = partition.size_array
    blocks = []
    for r, c in ((users.r_plus, transfer.c_plus), (users.r_minus, transfer.c_minus)):
        mean_r = np.bincount(partition.class_of, weights=r, minlength=partition.k) / sizes
        blocks.append(np.clip(mean_r[:, None] * c, 0.0, 1.0))
    return ContentModelPair.from_blocks(partition, *blocks)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FitResult:
    """Estimated models plus the pooled exposure bookkeeping behind them.

    ``opportunities[label][u, v]`` sums |I_t^u| * |S_t^v| over all steps;
    ``successes`` are the transfer counts implied by the fitted rates
    (b_hat * opportunities). ``unobserved`` masks pairs with no opportunity,
    whose estimate is set to 0.
    """

    models: ContentModelPair
    opportunities: dict[str, np.ndarray]
    successes: dict[str, np.ndarray]
    unobserved: dict[str, np.ndarray]
    n_cascades: dict[str, int]


def _exposures(rec: CascadeRecord, sizes: np.ndarray):
    """(infected counts n_t, susceptible counts S_t, new infections x_{t+1}) per step."""
    steps = rec.steps
    reached = np.cumsum(steps, axis=0)
    sus = sizes[None, :] - reached
    if np.any(sus < 0):
        raise ValueError("cascade counts exceed class sizes")
    return steps[:-1], sus[:-1], steps[1:]


_THETA_MAX = 40.0  # 1 - exp(-40) == 1.0 in double precision


def _fit_column(n: np.ndarray, s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """MLE of the column hazards theta_u = -log(1 - b_uv) for one receiver class.

    Each observation is x new infections among s susceptibles with
    P(infected) = 1 - exp(-sum_u n_u theta_u). The log-likelihood is concave
    in theta; maximised over theta >= 0 with L-BFGS-B on a rescaled variable.
    """
    k = n.shape[1]
    active = n.sum(axis=0) > 0
    theta = np.zeros(k)
    keep = (s > 0) & (n.sum(axis=1) > 0)
    n, s, x = n[keep][:, active], s[keep].astype(float), x[keep].astype(float)
    if not n.size:
        return theta
    if np.all(x == s):
        # every exposed node got infected: the likelihood increases without bound
        theta[active] = _THETA_MAX
        return theta
    opp = (n * s[:, None]).sum(axis=0)
    naive = x.sum() / max(opp.sum(), 1.0)
    scale = np.full(active.sum(), max(naive, 1e-6))
    weight = s.sum()

    def negloglik(phi):
        th = phi * scale
        eta = n @ th
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = np.where(x > 0, x * np.log(-np.expm1(-eta)), 0.0)
            dhit = np.where(x > 0, x / np.expm1(eta), 0.0)
        f = -(hit - (s - x) * eta).sum() / weight
        g = -(n.T @ (dhit - (s - x))) * scale / weight
        if not np.isfinite(f):
            return 1e300, np.zeros_like(phi)
        return f, g

    lo = 1e-9 / scale
    res = minimize(negloglik, np.ones(active.sum()), jac=True, method="L-BFGS-B",
                   bounds=list(zip(lo, np.full(lo.size, _THETA_MAX) / scale)),
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000})
    theta[active] = res.x * scale
    return theta


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(40)
_GL_NODES, _GL_WEIGHTS = (_GL_NODES + 1) / 2, _GL_WEIGHTS / 2


def _tree_exposures(rec: CascadeRecord, partition: Partition):
    """Like ``_exposures`` but new infections are split by the sender's class.

    Returns (n_t, S_t, x) with ``x[t, w, v]`` the class-v nodes infected at
    t+1 whose recorded parent is in class w, or None when the tree does not
    reproduce the step counts (e.g. a multi-step infectious period).
    """
    k, c = partition.k, partition.class_of
    tree = rec.tree
    n, s, _ = _exposures(rec, partition.size_array)
    T = rec.steps.shape[0]
    depth = np.full(partition.n_total, -1, dtype=np.int64)
    depth[list(rec.seeds)] = 0
    par, kid = tree[:, 0], tree[:, 1]
    for _ in range(T):
        todo = (depth[kid] < 0) & (depth[par] >= 0)
        if not todo.any():
            break
        depth[kid[todo]] = depth[par[todo]] + 1
    if np.any(depth[kid] < 1) or np.any(depth[kid] >= T):
        return None
    x = np.zeros((T - 1, k, k))
    np.add.at(x, (depth[par], c[par], c[kid]), 1.0)
    if not np.array_equal(x.sum(axis=1), rec.steps[1:]):
        return None
    return n, s, x


def _fit_column_tree(n: np.ndarray, s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """MLE of column v of the block matrix when each new infection carries
    the class of the node it came from.

    Per-sender-class hits into a susceptible node are Binomial(n_u, p_u) and
    the recorded parent is a uniformly chosen successful sender, so
    P(infected, parent class w) = n_w p_w E[1 / (1 + H')] where H' counts the
    hits from the other senders. That expectation equals
    int_0^1 prod_u (1 - p_u (1 - z))^(n_u - [u = w]) dz, done by quadrature.
    """
    k = n.shape[1]
    p_hat = np.zeros(k)
    keep = (s > 0) & (n.sum(axis=1) > 0)
    n, s, x = n[keep].astype(float), s[keep].astype(float), x[keep]
    active = n.sum(axis=0) > 0
    if not active.any():
        return p_hat
    n, x = n[:, active], x[:, active]
    if np.all(x.sum(axis=1) == s):
        p_hat[active] = 1.0  # no exposed node escaped; supremum at the boundary
        return p_hat
    ka = int(active.sum())
    opp = (n * s[:, None]).sum(axis=0)
    scale = np.maximum(x.sum(axis=0) / opp, 1e-7)
    miss = s - x.sum(axis=1)
    weight = s.sum()
    one_minus_z = 1.0 - _GL_NODES
    groups = [(w, x[:, w] > 0) for w in range(ka)]

    def negloglik(phi):
        p = np.clip(phi * scale, 1e-300, 1 - 1e-12)
        base = 1.0 - p[None, :] * one_minus_z[:, None]           # (Q, k)
        logb = np.log(base)
        total = n @ logb.T                                        # (G, Q)
        f = -(miss[:, None] * n).sum(axis=0) @ np.log1p(-p)
        g = (miss[:, None] * n).sum(axis=0) / (1 - p)
        for w, sel in groups:
            if not sel.any():
                continue
            xs, ns = x[sel, w], n[sel]
            integrand = np.exp(total[sel] - logb[None, :, w])    # (G', Q)
            J = integrand @ _GL_WEIGHTS
            f -= xs @ (np.log(ns[:, w] * p[w]) + np.log(J))
            m = ns.copy()
            m[:, w] -= 1
            dJ = -(integrand * _GL_WEIGHTS[None, :]) @ (one_minus_z[:, None] / base) * m
            grad = (xs / J) @ dJ
            grad[w] += xs.sum() / p[w]
            g -= grad
        return f / weight, g * scale / weight

    res = minimize(negloglik, np.ones(ka), jac=True, method="L-BFGS-B",
                   bounds=[(1e-9 / sc, (1 - 1e-9) / sc) for sc in scale],
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 3000})
    p_hat[active] = res.x * scale
    p_hat[p_hat > 1 - 1e-8] = 1.0  # boundary optimum
    return p_hat


ESTIMATORS = ("auto", "tree", "counts")


def estimate_block_matrices(cascades: Sequence[CascadeRecord], partition: Partition,
                            pseudo_count: float = 0.0, method: str = "auto") -> FitResult:
    """Frequentist estimate of b_plus and b_minus from labelled cascades.

    Successful u->v transfers are not observed one by one (a node hit twice
    is infected once), so they are reconstructed at the maximum-likelihood
    point, where ``b_hat = successes / opportunities`` holds by construction.

    ``method="counts"`` uses per-step class counts only. ``method="tree"``
    also uses the recorded propagation trees, which say which class each
    infection came from; this identifies off-diagonal entries far better.
    ``"auto"`` picks the tree likelihood when every record has a consistent
    tree. ``pseudo_count > 0`` applies Laplace smoothing,
    ``(successes + a) / (opportunities + 2a)``, to observed pairs.
    """
    if method not in ESTIMATORS:
        raise ValueError(f"method must be one of {ESTIMATORS}")
    k = partition.k
    sizes = partition.size_array
    blocks, opps, succs, unobs, counts = {}, {}, {}, {}, {}
    for label in LABELS:
        recs = [r for r in cascades if r.label == label]
        if not recs:
            raise InsufficientDataError(f"no cascades labelled {label!r}")
        counts[label] = len(recs)
        if any(r.k != k for r in recs):
            raise ValueError(f"cascade class counts do not match partition k={k}")
        tree_parts = None
        if method != "counts" and all(r.tree is not None for r in recs):
            tree_parts = [_tree_exposures(r, partition) for r in recs]
            if any(t is None for t in tree_parts):
                tree_parts = None
        if method == "tree" and tree_parts is None:
            raise ValueError("method='tree' needs every cascade to carry a tree consistent with its steps")
        if tree_parts is not None:
            n = np.concatenate([p[0] for p in tree_parts])
            s = np.concatenate([p[1] for p in tree_parts])
            x = np.concatenate([p[2] for p in tree_parts])
            b = np.column_stack([_fit_column_tree(n, s[:, v], x[:, :, v]) for v in range(k)])
        else:
            parts = [_exposures(r, sizes) for r in recs]
            n = np.concatenate([p[0] for p in parts])
            s = np.concatenate([p[1] for p in parts])
            x = np.concatenate([p[2] for p in parts])
            theta = np.column_stack([_fit_column(n, s[:, v], x[:, v]) for v in range(k)])
            b = -np.expm1(-theta)
        opp = n.T.astype(float) @ s.astype(float)
        succ = b * opp
        if pseudo_count > 0:
            b = (succ + pseudo_count) / (opp + 2 * pseudo_count)
        missing = opp == 0
        b[missing] = 0.0
        blocks[label] = np.clip(b, 0.0, 1.0)
        opps[label], succs[label], unobs[label] = opp, succ, missing
    models = ContentModelPair.from_blocks(partition, blocks[TRUE], blocks[FALSE])
    return FitResult(models, opps, succs, unobs, counts)


def merge_small_partitions(partition: Partition, threshold_fraction: float) -> tuple[Partition, np.ndarray]:
    """Fold every class smaller than ``threshold_fraction * N`` into one residual class.

    Returns the new partition and ``remap`` with ``remap[old_class] = new_class``.
    Large classes keep their relative order; the residual class comes last.
    """
    if not 0 < threshold_fraction < 1:
        raise ValueError("threshold_fraction must lie in (0, 1)")
    sizes = partition.size_array
    small = sizes < threshold_fraction * partition.n_total
    if not small.any() or partition.k == 1:
        return partition, np.arange(partition.k)
    remap = np.empty(partition.k, dtype=np.int64)
    big = np.flatnonzero(~small)
    remap[big] = np.arange(big.size)
    remap[small] = big.size
    return Partition.from_class_of(remap[partition.class_of]), remap


def remap_record(rec: CascadeRecord, remap: np.ndarray) -> CascadeRecord:
    """Re-aggregate per-class step counts after a class merge."""
    k_new = int(remap.max()) + 1
    steps = np.zeros((rec.steps.shape[0], k_new), dtype=np.int64)
    for old, new in enumerate(remap):
        steps[:, new] += rec.steps[:, old]
    return CascadeRecord(rec.seeds, steps, rec.r_infinity, rec.label, rec.tree)
