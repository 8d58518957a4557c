"""Discrete cell problem, corrector field and the exact identities they satisfy.

Edge fields come in two representations:

* dense ``(V, 2d)`` arrays indexed by vertex and directed direction (see
  :mod:`clusterwalk.lattice`); only entries on open edges are meaningful.  The
  operators :func:`gradient_field` and :func:`divergence_field` work on these.
* :class:`DirectionField`, an antisymmetric field on the open edges of one
  cluster, stored once per undirected edge as the value on ``(x, +e_k)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, depth_first_order

from .cg import SolverNotConverged, conjugate_gradient
from .lattice import BondConfiguration, ClusterDecomposition, LatticeError, LatticeSpec

__all__ = [
    "SolverNotConverged", "SolverOptions", "ClusterGraph", "DirectionField", "CorrectorField",
    "CellSolution", "cluster_graph", "gradient", "gradient_field", "divergence",
    "divergence_field", "hat_field", "energy", "solve_cell_problem", "solve_all_directions",
    "integrate_corrector", "verify_cocycle", "verify_harmonic", "two_scale_ibp_check",
    "TensorBump",
]


class FieldError(ValueError):
    """Field evaluated where it is not defined (closed edge, isolated vertex, ...)."""


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int | None = None
    preconditioner: str = "diagonal"

    def __post_init__(self):
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"solver tolerance must lie in (0, 1), got {self.tol}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.preconditioner not in ("none", "diagonal"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def iteration_cap(self, spec: LatticeSpec) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return int(math.ceil(20 * spec.L ** (spec.d / 2) * spec.d))


class ClusterGraph:
    """Open-edge subgraph of one cluster, in local (0..n-1) vertex numbering."""

    def __init__(self, config: BondConfiguration, clusters: ClusterDecomposition,
                 cluster_id: int | None = None):
        if cluster_id is None:
            cluster_id = clusters.largest_cluster_id
        spec = config.spec
        self.config = config
        self.clusters = clusters
        self.spec = spec
        self.cluster_id = int(cluster_id)
        self.vertices = clusters.members(cluster_id)
        self.local = np.full(spec.n_vertices, -1, dtype=np.int64)
        self.local[self.vertices] = np.arange(len(self.vertices))
        open_edges = np.flatnonzero(config.bonds)
        tail, head, axis = spec.edge_endpoints(open_edges)
        inside = self.local[tail] >= 0
        self.edges = open_edges[inside]
        self.tail = self.local[tail[inside]]
        self.head = self.local[head[inside]]
        self.axis = axis[inside]
        self.degrees = clusters.degrees[self.vertices]

    @classmethod
    def from_vertices(cls, config: BondConfiguration, vertices: np.ndarray) -> "ClusterGraph":
        """Induced open subgraph on ``vertices`` (assumed connected, sorted).

        Degrees count only edges inside the subgraph.
        """
        spec = config.spec
        g = cls.__new__(cls)
        g.config, g.clusters, g.spec, g.cluster_id = config, None, spec, -1
        g.vertices = np.asarray(vertices, dtype=np.int64)
        g.local = np.full(spec.n_vertices, -1, dtype=np.int64)
        g.local[g.vertices] = np.arange(len(g.vertices))
        open_edges = np.flatnonzero(config.bonds)
        tail, head, axis = spec.edge_endpoints(open_edges)
        inside = (g.local[tail] >= 0) & (g.local[head] >= 0)
        g.edges = open_edges[inside]
        g.tail = g.local[tail[inside]]
        g.head = g.local[head[inside]]
        g.axis = axis[inside]
        g.degrees = (np.bincount(g.tail, minlength=g.size)
                     + np.bincount(g.head, minlength=g.size))
        return g

    @property
    def size(self) -> int:
        return len(self.vertices)

    @property
    def root(self) -> int:
        """Local index of the anchor vertex (smallest global index)."""
        return 0

    @cached_property
    def adjacency(self) -> csr_matrix:
        n = self.size
        rows = np.concatenate([self.tail, self.head])
        cols = np.concatenate([self.head, self.tail])
        return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    @cached_property
    def laplacian(self) -> csr_matrix:
        """``K = D - A``; ``u^T K u`` is the sum over undirected edges of squared increments."""
        from scipy.sparse import diags
        return (diags(self.degrees.astype(np.float64)) - self.adjacency).tocsr()

    @cached_property
    def edge_lookup(self) -> np.ndarray:
        """``(n, 2d)`` table of (signed, 1-based) positions in ``self.edges``; 0 if closed."""
        spec = self.spec
        table = np.zeros((self.size, 2 * spec.d), dtype=np.int64)
        pos = np.arange(1, len(self.edges) + 1)
        table[self.tail, 2 * self.axis] = pos
        table[self.head, 2 * self.axis + 1] = -pos
        return table

    def coordinate_rhs(self, b: int) -> np.ndarray:
        """``f(x) = sum over open e at x of e.b`` for lattice axis ``b``."""
        on_axis = (self.axis == b).astype(np.float64)
        return (np.bincount(self.tail, on_axis, minlength=self.size)
                - np.bincount(self.head, on_axis, minlength=self.size))


_graph_cache: dict[tuple[int, int, int], ClusterGraph] = {}


def cluster_graph(config: BondConfiguration, clusters: ClusterDecomposition,
                  cluster_id: int | None = None) -> ClusterGraph:
    cid = clusters.largest_cluster_id if cluster_id is None else cluster_id
    key = (id(config), id(clusters), cid)
    g = _graph_cache.get(key)
    if g is None or g.config is not config or g.clusters is not clusters:
        if len(_graph_cache) > 8:
            _graph_cache.clear()
        g = _graph_cache[key] = ClusterGraph(config, clusters, cid)
    return g


@dataclass(frozen=True, eq=False)
class DirectionField:
    """Antisymmetric field on the open edges of a cluster.

    ``values[i]`` is the value on ``(x, x + e_k)`` for the i-th edge in
    ``edges``; the value on ``(x + e_k, -e_k)`` is ``-values[i]``.
    """

    spec: LatticeSpec
    b: int
    edges: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def at(self, x: int, j: int) -> float:
        """Value on the directed edge from vertex ``x`` in direction ``j``."""
        k, sign = divmod(j, 2)
        tail = x if sign == 0 else int(self.spec.neighbor_table[x, j])
        e = k * self.spec.n_vertices + tail
        i = np.searchsorted(self.edges, e)
        if i >= len(self.edges) or self.edges[i] != e:
            raise FieldError(f"edge ({x}, direction {j}) is not in the field's support")
        return float(self.values[i]) if sign == 0 else -float(self.values[i])

    def to_dense(self) -> np.ndarray:
        spec = self.spec
        out = np.zeros((spec.n_vertices, 2 * spec.d))
        tail, head, axis = spec.edge_endpoints(self.edges)
        out[tail, 2 * axis] = self.values
        out[head, 2 * axis + 1] = -self.values
        return out


@dataclass(frozen=True, eq=False)
class CorrectorField:
    """Corrector values on one cluster, anchored to zero at the root vertex."""

    spec: LatticeSpec
    cluster_id: int
    vertices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def root(self) -> int:
        return int(self.vertices[0])

    def dense(self) -> np.ndarray:
        """``(V, d)`` array with NaN off the cluster."""
        out = np.full((self.spec.n_vertices, self.spec.d), np.nan)
        out[self.vertices] = self.values
        return out


class CellSolution(NamedTuple):
    potential: np.ndarray
    field: DirectionField
    iterations: int
    residual: float


# -- discrete calculus -------------------------------------------------------

def gradient(config: BondConfiguration, u: np.ndarray, x: int, e) -> float:
    """``u(x + e) - u(x)`` on an open edge."""
    spec = config.spec
    j = e if isinstance(e, (int, np.integer)) else spec.direction_index(e)
    if not config.open_table[x, j]:
        raise FieldError(f"gradient requested on closed edge ({x}, direction {j})")
    return float(u[spec.neighbor_table[x, j]] - u[x])


def gradient_field(config: BondConfiguration, u: np.ndarray) -> np.ndarray:
    """Dense ``(V, 2d)`` gradient of a vertex function; zero on closed edges."""
    u = np.asarray(u, dtype=np.float64)
    grad = u[config.spec.neighbor_table] - u[:, None]
    return np.where(config.open_table, grad, 0.0)


def divergence_field(config: BondConfiguration, v: np.ndarray) -> np.ndarray:
    """``(1/n(x)) sum_e w(x,e) (v(x,e) - v(x+e,-e))`` at every vertex.

    ``v`` is a dense ``(V, 2d)`` edge field.  Isolated vertices get NaN.
    """
    spec = config.spec
    v = np.asarray(v, dtype=np.float64)
    nbr = spec.neighbor_table
    # reverse direction of j is j ^ 1
    back = v[nbr, np.arange(2 * spec.d) ^ 1]
    open_ = config.open_table
    flux = np.where(open_, v - back, 0.0).sum(axis=1)
    n = open_.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, flux / n, np.nan)


def divergence(config: BondConfiguration, v: np.ndarray, x: int) -> float:
    n = int(config.open_table[x].sum())
    if n == 0:
        raise FieldError(f"divergence undefined at isolated vertex {x}")
    spec = config.spec
    total = 0.0
    for j in range(2 * spec.d):
        if config.open_table[x, j]:
            y = spec.neighbor_table[x, j]
            total += v[x, j] - v[y, j ^ 1]
    return total / n


def hat_field(spec: LatticeSpec, b: int) -> np.ndarray:
    """The coordinate field ``(x, e) -> e.b`` as a dense ``(V, 2d)`` array."""
    row = np.zeros(2 * spec.d)
    row[2 * b] = 1.0
    row[2 * b + 1] = -1.0
    return np.broadcast_to(row, (spec.n_vertices, 2 * spec.d)).copy()


def energy(graph: ClusterGraph, b: int, u: np.ndarray | None = None) -> float:
    """``sum_x sum_{e open} (e.b + u(x+e) - u(x))^2`` over the cluster."""
    inc = (graph.axis == b).astype(np.float64)
    if u is not None:
        inc = inc + (u[graph.head] - u[graph.tail])
    return 2.0 * float(np.dot(inc, inc))


# -- cell problem ------------------------------------------------------------

def solve_cell_problem(config: BondConfiguration, clusters: ClusterDecomposition, b: int,
                       opts: SolverOptions | None = None) -> CellSolution:
    """Project ``-b_hat`` onto gradients on the largest cluster.

    Minimises ``sum (e.b + u(x+e) - u(x))^2`` over open edges of the cluster,
    i.e. solves ``K u = f`` with ``f(x) = sum_e e.b``; ``u`` has mean zero.
    """
    return solve_all_directions(config, clusters, opts, directions=[b])[0]


def solve_all_directions(config: BondConfiguration, clusters: ClusterDecomposition,
                         opts: SolverOptions | None = None,
                         directions=None) -> list[CellSolution]:
    opts = opts or SolverOptions()
    spec = config.spec
    directions = list(range(spec.d)) if directions is None else list(directions)
    for b in directions:
        if not 0 <= b < spec.d:
            raise LatticeError(f"direction index {b} outside 0..{spec.d - 1}")
    graph = cluster_graph(config, clusters)
    if graph.size < 2:
        raise FieldError("largest cluster has fewer than two vertices")
    K = graph.laplacian
    inv_diag = 1.0 / graph.degrees if opts.preconditioner == "diagonal" else None
    out = []
    for b in directions:
        res = conjugate_gradient(K.dot, graph.coordinate_rhs(b), tol=opts.tol,
                                 max_iter=opts.iteration_cap(spec), inv_diag=inv_diag)
        u = res.x
        values = u[graph.head] - u[graph.tail]
        out.append(CellSolution(u, DirectionField(spec, b, graph.edges, values),
                                res.iterations, res.residual))
    return out


def _tree(graph: ClusterGraph, method: str) -> tuple[np.ndarray, np.ndarray]:
    if method == "bfs":
        order, pred = breadth_first_order(graph.adjacency, graph.root, directed=False)
    elif method == "dfs":
        order, pred = depth_first_order(graph.adjacency, graph.root, directed=False)
    else:
        raise ValueError(f"unknown traversal {method!r}")
    if len(order) != graph.size:
        raise RuntimeError("cluster is not connected to its root")
    return order, pred


def _tree_increments(graph: ClusterGraph, pred: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Field value on the tree edge pred[v] -> v for every non-root v."""
    spec = graph.spec
    child = np.flatnonzero(pred >= 0)
    parent = pred[child]
    gparent = graph.vertices[parent]
    gchild = graph.vertices[child]
    j = np.argmax(spec.neighbor_table[gparent] == gchild[:, None], axis=1)
    pos = graph.edge_lookup[parent, j]
    sign = np.sign(pos) if values.ndim == 1 else np.sign(pos)[:, None]
    inc = np.zeros((graph.size,) + values.shape[1:])
    inc[child] = sign * values[np.abs(pos) - 1]
    return inc


def _integrate(graph: ClusterGraph, values: np.ndarray, method: str) -> np.ndarray:
    order, pred = _tree(graph, method)
    inc = _tree_increments(graph, pred, values)
    out = np.zeros_like(inc)
    pl = pred.tolist()
    for v in order[1:].tolist():
        out[v] = out[pl[v]] + inc[v]
    return out


def integrate_corrector(fields: list[DirectionField], config: BondConfiguration,
                        clusters: ClusterDecomposition, method: str = "bfs") -> CorrectorField:
    """Sum the fields along a spanning tree from the root; ``chi(root) = 0``."""
    spec = config.spec
    if len(fields) != spec.d or sorted(f.b for f in fields) != list(range(spec.d)):
        raise ValueError("need exactly one field per lattice direction")
    graph = cluster_graph(config, clusters)
    fields = sorted(fields, key=lambda f: f.b)
    for f in fields:
        if not np.array_equal(f.edges, graph.edges):
            raise ValueError("field is not defined on the largest cluster")
    values = np.stack([f.values for f in fields], axis=1)
    chi = _integrate(graph, values, method)
    return CorrectorField(spec, graph.cluster_id, graph.vertices.copy(), chi)


def verify_cocycle(field: DirectionField, config: BondConfiguration,
                   clusters: ClusterDecomposition) -> float:
    """Largest absolute sum of the field around a fundamental cycle."""
    graph = cluster_graph(config, clusters)
    if not np.array_equal(field.edges, graph.edges):
        raise ValueError("field is not defined on the largest cluster")
    pot = _integrate(graph, field.values, "bfs")
    # tree edges give zero by construction; non-tree edges close a cycle each
    cyc = pot[graph.tail] + field.values - pot[graph.head]
    return float(np.max(np.abs(cyc))) if len(cyc) else 0.0


def verify_harmonic(chi: CorrectorField, config: BondConfiguration,
                    clusters: ClusterDecomposition) -> float:
    """``max_{x, b} |L(id + chi)(x).b|`` over the corrector's cluster."""
    spec = config.spec
    phi = chi.dense()
    nbr = spec.neighbor_table[chi.vertices]
    open_ = config.open_table[chi.vertices]
    worst = 0.0
    for b in range(spec.d):
        step = np.zeros(2 * spec.d)
        step[2 * b], step[2 * b + 1] = 1.0, -1.0
        diff = step + phi[nbr, b] - phi[chi.vertices, b][:, None]
        gen = np.where(open_, diff, 0.0).sum(axis=1) / open_.sum(axis=1)
        worst = max(worst, float(np.max(np.abs(gen))))
    return worst


# -- two-scale integration by parts -----------------------------------------

class TensorBump:
    """``phi(z) = scale * prod_i exp(-1 / (1 - ((z_i - c_i) / r_i)^2))`` on its box."""

    def __init__(self, center, radius, scale: float = 1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), self.center.shape)
        self.scale = float(scale)

    @property
    def support(self) -> float:
        """Sup-norm radius of the support around the origin."""
        return float(np.max(np.abs(self.center) + self.radius))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        s = (np.asarray(z) - self.center) / self.radius
        inside = np.all(np.abs(s) < 1.0, axis=-1)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            f = np.exp(-1.0 / (1.0 - s ** 2))
        f = np.where(np.abs(s) < 1.0, f, 0.0)
        return self.scale * np.where(inside, f.prod(axis=-1), 0.0)


class _Zero:
    support = 0.0

    def __call__(self, z):
        return np.zeros(np.shape(z)[:-1])


ZERO = _Zero()


def two_scale_ibp_check(config: BondConfiguration, clusters: ClusterDecomposition,
                        u: np.ndarray, phi: Callable[[np.ndarray], np.ndarray], eps: float,
                        support: float | None = None) -> tuple[float, float]:
    """Both sides of the rescaled integration by parts on the largest cluster.

    ``u`` is a dense ``(V, 2d)`` edge field; ``phi`` maps ``(n, d)`` points to
    values and vanishes outside the sup-norm ball of radius ``support`` (taken
    from ``phi.support`` when not given), which must lie inside ``(-1, 1)^d``
    and inside the torus at scale ``eps``.  Returns ``(lhs, rhs)`` with

    * ``lhs = eps^d sum_{x in C} n(x) phi(eps x) div u(x)``
    * ``rhs = -eps^d sum_{x in C} sum_e w(x,e) u(x,e) (phi(eps(x+e)) - phi(eps x))``
    """
    spec = config.spec
    if eps <= 0:
        raise ValueError("eps must be positive")
    if support is None:
        support = getattr(phi, "support", 1.0)
    if support >= 1.0:
        raise ValueError(f"test function support radius {support} not inside (-1, 1)^d")
    if support / eps > spec.L // 2 - 1:
        raise ValueError(
            f"support radius {support} at eps={eps} reaches {support / eps:.1f} lattice units; "
            f"the torus allows at most {spec.L // 2 - 1}")
    graph = cluster_graph(config, clusters)
    xs = graph.vertices
    pos = spec.offsets(xs, clusters.root).astype(np.float64)
    u = np.asarray(u, dtype=np.float64)
    open_ = config.open_table[xs]
    n = open_.sum(axis=1)
    div = divergence_field(config, u)[xs]
    phi0 = phi(eps * pos)
    lhs = eps ** spec.d * math.fsum(n * phi0 * div)
    terms = []
    for j in range(2 * spec.d):
        step = spec.direction(j)
        dphi = phi(eps * (pos + step)) - phi0
        terms.append(np.where(open_[:, j], u[xs, j] * dphi, 0.0))
    rhs = -eps ** spec.d * math.fsum(np.concatenate(terms))
    return lhs, rhs
