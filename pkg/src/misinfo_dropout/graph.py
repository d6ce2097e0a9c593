"""Node partitions, stochastic block models and sampled digraph instances.

Node ids are dense integers ``0..N-1``. Block matrices are indexed
``block[sender_class, receiver_class]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of every node to one of ``k`` classes."""

    class_of: np.ndarray
    sizes: tuple[int, ...]

    def __post_init__(self):
        class_of = np.asarray(self.class_of, dtype=np.int64)
        if class_of.ndim != 1 or class_of.size == 0:
            raise ValueError("class_of must be a non-empty 1-d array")
        sizes = tuple(int(s) for s in self.sizes)
        k = len(sizes)
        if k < 1 or min(sizes) < 1:
            raise ValueError(f"all class sizes must be >= 1, got {sizes}")
        if class_of.min() < 0 or class_of.max() >= k:
            raise ValueError("class index out of range")
        if tuple(np.bincount(class_of, minlength=k).tolist()) != sizes:
            raise ValueError("sizes do not match class_of")
        class_of.setflags(write=False)
        object.__setattr__(self, "class_of", class_of)
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "Partition":
        """Contiguous blocks: the first ``sizes[0]`` nodes are class 0, and so on."""
        sizes = [int(s) for s in sizes]
        if not sizes or min(sizes) < 1:
            raise ValueError(f"all class sizes must be >= 1, got {sizes}")
        return cls(np.repeat(np.arange(len(sizes)), sizes), tuple(sizes))

    @classmethod
    def from_class_of(cls, class_of: Sequence[int]) -> "Partition":
        class_of = np.asarray(class_of, dtype=np.int64)
        if class_of.size == 0:
            raise ValueError("class_of must be non-empty")
        k = int(class_of.max()) + 1
        return cls(class_of, tuple(np.bincount(class_of, minlength=k).tolist()))

    @property
    def k(self) -> int:
        return len(self.sizes)

    @property
    def n_total(self) -> int:
        return int(self.class_of.size)

    @property
    def size_array(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=np.int64)

    def members(self, u: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == u)

    def check_node(self, i: int) -> int:
        if not 0 <= int(i) < self.n_total:
            raise IndexError(f"node id {i} out of range [0, {self.n_total})")
        return int(i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        return self.sizes == other.sizes and np.array_equal(self.class_of, other.class_of)

    def __hash__(self):
        return hash((self.sizes, self.class_of.tobytes()))

    def to_json(self) -> dict:
        if np.array_equal(self.class_of, np.repeat(np.arange(self.k), self.sizes)):
            return {"sizes": list(self.sizes)}
        return {"class_of": self.class_of.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Partition":
        if "class_of" in obj:
            return cls.from_class_of(obj["class_of"])
        if "sizes" in obj:
            return cls.from_sizes(obj["sizes"])
        raise ValueError("partition JSON needs a 'sizes' or 'class_of' key")


def _as_block(block, k: int | None = None) -> np.ndarray:
    block = np.array(block, dtype=float)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ValueError(f"block matrix must be square, got shape {block.shape}")
    if k is not None and block.shape[0] != k:
        raise ValueError(f"block matrix is {block.shape[0]}x{block.shape[0]}, partition has k={k}")
    if not np.all(np.isfinite(block)) or block.min() < 0.0 or block.max() > 1.0:
        raise ValueError("block entries must lie in [0, 1]")
    block.setflags(write=False)
    return block


@dataclass(frozen=True, eq=False)
class SbmModel:
    """The random digraph G_SBM(partition, block)."""

    partition: Partition
    block: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "block", _as_block(self.block, self.partition.k))

    @property
    def k(self) -> int:
        return self.partition.k

    @property
    def n_total(self) -> int:
        return self.partition.n_total

    def with_block(self, block) -> "SbmModel":
        return SbmModel(self.partition, block)

    def edge_prob_matrix(self) -> np.ndarray:
        """Dense N x N matrix of pair probabilities (zero diagonal)."""
        c = self.partition.class_of
        p = self.block[c[:, None], c[None, :]]
        np.fill_diagonal(p, 0.0)
        return p


def edge_prob(model: SbmModel, i: int, j: int) -> float:
    i = model.partition.check_node(i)
    j = model.partition.check_node(j)
    if i == j:
        return 0.0
    c = model.partition.class_of
    return float(model.block[c[i], c[j]])


@dataclass(frozen=True, eq=False)
class DirectedGraphInstance:
    """One realisation of a random digraph; ``edges`` is a sorted (E, 2) array."""

    n_total: int
    edges: np.ndarray = field(repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n_total:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            edges = np.unique(edges, axis=0)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        order = np.argsort(edges[:, 0], kind="stable")
        indptr = np.zeros(self.n_total + 1, dtype=np.int64)
        np.cumsum(np.bincount(edges[:, 0], minlength=self.n_total), out=indptr[1:])
        object.__setattr__(self, "_indptr", indptr)
        object.__setattr__(self, "_targets", edges[order, 1])

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "DirectedGraphInstance":
        adj = np.asarray(adj, dtype=bool).copy()
        np.fill_diagonal(adj, False)
        return cls(adj.shape[0], np.argwhere(adj))

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def successors(self, i: int) -> np.ndarray:
        return self._targets[self._indptr[i]:self._indptr[i + 1]]

    def successors_of(self, nodes: Iterable[int]) -> np.ndarray:
        nodes = np.asarray(list(nodes) if not isinstance(nodes, np.ndarray) else nodes, dtype=np.int64)
        if nodes.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([self.successors(i) for i in nodes]))


def sample_uniforms(n_total: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per ordered node pair; shared draws couple instances of different models."""
    return rng.random((n_total, n_total))


def instance_from_uniforms(model: SbmModel, uniforms: np.ndarray) -> DirectedGraphInstance:
    return DirectedGraphInstance.from_adjacency(uniforms < model.edge_prob_matrix())


def sample_instance(model: SbmModel, rng: np.random.Generator) -> DirectedGraphInstance:
    """Include each ordered pair (i, j), i != j, independently with probability edge_prob(i, j)."""
    return instance_from_uniforms(model, sample_uniforms(model.n_total, rng))


def class_counts(partition: Partition, node_set) -> np.ndarray:
    nodes = np.fromiter((int(i) for i in node_set), dtype=np.int64) if not isinstance(
        node_set, np.ndarray) else node_set.astype(np.int64, copy=False)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= partition.n_total):
        raise IndexError("node id out of range")
    return np.bincount(partition.class_of[nodes], minlength=partition.k)


def load_partition(path) -> Partition:
    return Partition.from_json(json.loads(Path(path).read_text()))


def load_block(path) -> np.ndarray:
    obj = json.loads(Path(path).read_text())
    return _as_block(obj["block"])


def save_partition(partition: Partition, path) -> None:
    Path(path).write_text(json.dumps(partition.to_json()))


def save_block(block, path) -> None:
    Path(path).write_text(json.dumps({"block": np.asarray(block).tolist()}))
