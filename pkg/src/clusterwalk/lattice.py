"""Periodic boxes of Z^d, Bernoulli bond configurations and their clusters.

Indexing conventions
--------------------
* A vertex ``x = (x_1, ..., x_d)`` with ``0 <= x_i < L`` has flat index
  ``numpy.ravel_multi_index(x, (L,)*d)`` (C order, ``x_d`` fastest).
* The undirected edge ``(x, x + e_k)`` has index ``k * L**d + flat(x)``.
* Directed directions are numbered ``j = 2k`` for ``+e_k`` and ``j = 2k + 1``
  for ``-e_k``; per-vertex tables with a trailing axis of length ``2d`` use
  this order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import rng


class LatticeError(ValueError):
    """Invalid lattice geometry or vertex/direction argument."""


@dataclass(frozen=True)
class LatticeSpec:
    d: int
    L: int
    periodic: bool = True

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise LatticeError(f"dimension d must be an integer >= 2, got {self.d}")
        if int(self.L) != self.L or self.L < 4 or self.L % 2:
            raise LatticeError(f"side L must be an even integer >= 4, got {self.L}")
        if not self.periodic:
            raise LatticeError("only periodic boxes are supported")

    @property
    def n_vertices(self) -> int:
        return self.L ** self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.L ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    def flat(self, x) -> np.ndarray | int:
        x = np.asarray(x)
        return np.ravel_multi_index(tuple(np.moveaxis(x % self.L, -1, 0)), self.shape)

    def coords(self, v) -> np.ndarray:
        """Coordinates in ``[0, L)^d``; trailing axis of length d."""
        return np.stack(np.unravel_index(np.asarray(v), self.shape), axis=-1)

    def offsets(self, v, origin: int = 0) -> np.ndarray:
        """Minimal-image displacement of ``v`` from ``origin``, each entry in [-L/2, L/2)."""
        delta = self.coords(v) - self.coords(origin)
        return (delta + self.L // 2) % self.L - self.L // 2

    def direction(self, j: int) -> np.ndarray:
        """Unit vector for directed direction index ``j``."""
        e = np.zeros(self.d, dtype=np.int64)
        e[j // 2] = 1 if j % 2 == 0 else -1
        return e

    def direction_index(self, e) -> int:
        e = np.asarray(e)
        nz = np.flatnonzero(e)
        if e.shape != (self.d,) or nz.size != 1 or abs(int(e[nz[0]])) != 1:
            raise LatticeError(f"not a unit lattice direction: {e.tolist()}")
        k = int(nz[0])
        return 2 * k + (0 if e[k] > 0 else 1)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """``(V, 2d)`` array: periodic neighbor of each vertex in each direction."""
        grid = np.arange(self.n_vertices).reshape(self.shape)
        cols = []
        for k in range(self.d):
            cols.append(np.roll(grid, -1, axis=k).ravel())  # x + e_k
            cols.append(np.roll(grid, 1, axis=k).ravel())   # x - e_k
        return np.stack(cols, axis=1)

    @cached_property
    def edge_table(self) -> np.ndarray:
        """``(V, 2d)`` array: index of the undirected edge used by each directed step."""
        V = self.n_vertices
        v = np.arange(V)
        nbr = self.neighbor_table
        cols = []
        for k in range(self.d):
            cols.append(k * V + v)
            cols.append(k * V + nbr[:, 2 * k + 1])
        return np.stack(cols, axis=1)

    def edge_endpoints(self, edges=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tail ``x``, head ``x + e_k`` and axis ``k`` of undirected edges."""
        if edges is None:
            edges = np.arange(self.n_edges)
        edges = np.asarray(edges)
        axis, tail = np.divmod(edges, self.n_vertices)
        head = self.neighbor_table[tail, 2 * axis]
        return tail, head, axis


@dataclass(frozen=True, eq=False)
class BondConfiguration:
    """The environment: one open/closed state per undirected edge."""

    spec: LatticeSpec
    p: float
    seed: int
    bonds: np.ndarray = field(repr=False)

    def __post_init__(self):
        bonds = np.ascontiguousarray(self.bonds, dtype=bool)
        if bonds.shape != (self.spec.n_edges,):
            raise LatticeError(
                f"expected {self.spec.n_edges} bond states, got shape {bonds.shape}")
        bonds.flags.writeable = False
        object.__setattr__(self, "bonds", bonds)

    def __eq__(self, other):
        if not isinstance(other, BondConfiguration):
            return NotImplemented
        return (self.spec == other.spec and self.p == other.p and self.seed == other.seed
                and np.array_equal(self.bonds, other.bonds))

    @cached_property
    def open_table(self) -> np.ndarray:
        """``(V, 2d)`` boolean array: is the directed step from x in direction j open."""
        return self.bonds[self.spec.edge_table]

    @property
    def n_open(self) -> int:
        return int(self.bonds.sum())

    def packed(self) -> bytes:
        return np.packbits(self.bonds, bitorder="little").tobytes()


def sample_bonds(spec: LatticeSpec, p: float, seed: int, chunk: int | None = None) -> BondConfiguration:
    """Open every edge independently with probability ``p``.

    Edge ``i`` is open iff the i-th uniform of the ``(seed, BONDS)`` stream is
    below ``p``, so the result does not depend on ``chunk`` (the number of edges
    drawn per call).
    """
    if not 0.0 <= p <= 1.0:
        raise LatticeError(f"p must lie in [0, 1], got {p}")
    if seed < 0 or seed >= 2 ** 64:
        raise LatticeError(f"seed must be a 64-bit unsigned integer, got {seed}")
    n = spec.n_edges
    if p == 1.0:
        bonds = np.ones(n, dtype=bool)
    elif p == 0.0:
        bonds = np.zeros(n, dtype=bool)
    else:
        chunk = chunk or n
        parts = [rng.to_unit(rng.raw_words(seed, rng.BONDS, min(chunk, n - a), a)) < p
                 for a in range(0, n, chunk)]
        bonds = np.concatenate(parts)
    return BondConfiguration(spec, float(p), int(seed), bonds)


@dataclass(frozen=True, eq=False)
class ClusterDecomposition:
    """Cluster labels, sizes and degrees of a configuration.

    Cluster ids are ordered by the smallest vertex index they contain, so the
    cluster of vertex 0 has id 0.
    """

    labels: np.ndarray
    sizes: np.ndarray
    degrees: np.ndarray
    largest_cluster_id: int

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    def members(self, cluster_id: int | None = None) -> np.ndarray:
        """Sorted vertex indices of a cluster (the largest by default)."""
        if cluster_id is None:
            cluster_id = self.largest_cluster_id
        return np.flatnonzero(self.labels == cluster_id)

    @property
    def root(self) -> int:
        """Smallest vertex of the largest cluster; plays the role of the origin."""
        return int(np.argmax(self.labels == self.largest_cluster_id))


def decompose_clusters(config: BondConfiguration) -> ClusterDecomposition:
    spec = config.spec
    V = spec.n_vertices
    tail, head, _ = spec.edge_endpoints(np.flatnonzero(config.bonds))
    graph = coo_matrix((np.ones(len(tail), dtype=np.int8), (tail, head)), shape=(V, V))
    _, raw = connected_components(graph, directed=False)
    # canonical relabelling: order clusters by first appearance in vertex order
    _, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    labels = rank[inverse.ravel()]
    labels.flags.writeable = False
    sizes = np.bincount(labels)
    degrees = config.open_table.sum(axis=1).astype(np.int64)
    # argmax returns the first maximum, i.e. the smallest id among ties
    return ClusterDecomposition(labels, sizes, degrees, int(np.argmax(sizes)))


def _check_vertex(spec: LatticeSpec, x) -> int:
    if np.ndim(x) == 0:
        v = int(x)
        if not 0 <= v < spec.n_vertices:
            raise LatticeError(f"vertex index {v} outside the box")
        return v
    x = np.asarray(x)
    if x.shape != (spec.d,) or np.any(x < 0) or np.any(x >= spec.L):
        raise LatticeError(f"vertex {x.tolist()} outside the box")
    return int(spec.flat(x))


def open_neighbors(config: BondConfiguration, x) -> list[int]:
    """Flat indices of neighbors joined to ``x`` by an open edge, in direction order."""
    v = _check_vertex(config.spec, x)
    row = config.open_table[v]
    return [int(w) for w in config.spec.neighbor_table[v][row]]


def translated_bond(config: BondConfiguration, x, e) -> int:
    """State of the edge between ``x`` and ``x + e`` (periodic)."""
    v = _check_vertex(config.spec, x)
    j = config.spec.direction_index(e)
    return int(config.bonds[config.spec.edge_table[v, j]])


def open_neighbor_tables(config: BondConfiguration) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Packed open-neighbor lists for fast walks.

    Returns ``(nbr, step, deg)`` where ``nbr[v, :deg[v]]`` are the open
    neighbors of ``v`` in direction order and ``step[v, i]`` the direction index
    used to reach ``nbr[v, i]``.
    """
    spec = config.spec
    open_ = config.open_table
    deg = open_.sum(axis=1)
    # stable sort puts open directions first while keeping their order
    step = np.argsort(~open_, axis=1, kind="stable")
    nbr = np.take_along_axis(spec.neighbor_table, step, axis=1)
    return nbr, step, deg
