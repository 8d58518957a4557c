"""Effective diffusivity and the statistics used to check the homogenization limit."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import rng
from .cg import conjugate_gradient
from .corrector import (ClusterGraph, CorrectorField, DirectionField, cluster_graph)
from .lattice import BondConfiguration, ClusterDecomposition
from .walk import ensemble_positions, horizon_check


class DegenerateSampleError(ValueError):
    """All sample values coincide, so no scale can be estimated."""


class GeometryError(ValueError):
    """Requested boxes do not fit in the torus or in [-1, 1]^d."""


# -- variational diffusivity ------------------------------------------------

@dataclass(frozen=True)
class TildeQWeights:
    """Degree-weighted probability on the largest cluster."""

    vertices: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    normalization: float = 0.0


def tilde_q_weights(config: BondConfiguration, clusters: ClusterDecomposition) -> TildeQWeights:
    graph = cluster_graph(config, clusters)
    n = graph.degrees.astype(np.float64)
    total = float(n.sum())
    if total <= 0:
        raise ValueError("largest cluster has no edges")
    return TildeQWeights(graph.vertices, n / total, total)


def bracket_density(graph: ClusterGraph, field_: DirectionField | None, b: int) -> np.ndarray:
    """``(1/n(x)) sum_{e open} (e.b + G_b(x, e))^2`` at each cluster vertex."""
    g = np.zeros(len(graph.edges)) if field_ is None else field_.values
    inc = (graph.axis == b) + g
    sq = inc * inc
    # each undirected edge contributes (e.b + G)^2 at both of its endpoints
    acc = (np.bincount(graph.tail, sq, minlength=graph.size)
           + np.bincount(graph.head, sq, minlength=graph.size))
    return acc / graph.degrees


def variational_sigma2(config: BondConfiguration, clusters: ClusterDecomposition,
                       fields: list[DirectionField] | None) -> np.ndarray:
    """Degree-weighted cluster average of the bracket density, per direction.

    Passing ``fields=None`` evaluates the unprojected value (``G_b = 0``).
    """
    graph = cluster_graph(config, clusters)
    if graph.size == 0 or len(graph.edges) == 0:
        raise ValueError("largest cluster is empty")
    q = tilde_q_weights(config, clusters).weights
    d = config.spec.d
    by_dir = {f.b: f for f in fields} if fields is not None else {}
    if fields is not None and sorted(by_dir) != list(range(d)):
        raise ValueError("need one field per lattice direction")
    for f in by_dir.values():
        if not np.array_equal(f.edges, graph.edges):
            raise ValueError("field is not defined on the largest cluster")
    return np.array([math.fsum(q * bracket_density(graph, by_dir.get(b), b)) for b in range(d)])


# -- mean squared displacement ----------------------------------------------

@dataclass
class MSDEstimate:
    sigma2: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray
    cov_stderr: np.ndarray
    n: int
    t: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"value": self.sigma2.tolist(), "stderr": self.stderr.tolist(),
                "covariance": self.covariance.tolist(),
                "cov_stderr": self.cov_stderr.tolist(), "n": self.n, "t": self.t,
                "degenerate": self.degenerate}


def msd_sigma2(endpoints: np.ndarray, t: float, n_boot: int = 1000, seed: int = 0) -> MSDEstimate:
    """Per-direction ``Var(X(t).b) / t`` with bootstrap standard errors.

    ``covariance`` is the full sample covariance divided by ``t``.
    """
    x = np.asarray(endpoints, dtype=np.float64)
    n, d = x.shape
    if n < 100:
        raise ValueError(f"need at least 100 endpoints, got {n}")
    if not t > 0:
        raise ValueError("t must be positive")
    cov = np.atleast_2d(np.cov(x, rowvar=False)) / t
    if np.all(x == x[0]):
        z = np.zeros(d)
        return MSDEstimate(z, z.copy(), np.zeros((d, d)), np.zeros((d, d)), n, t, True)
    gen = rng.generator(seed, rng.BOOTSTRAP)
    boots = np.empty((n_boot, d, d))
    for i in range(n_boot):
        s = x[gen.integers(0, n, n)]
        boots[i] = np.atleast_2d(np.cov(s, rowvar=False)) / t
    cov_se = boots.std(axis=0, ddof=1)
    return MSDEstimate(np.diag(cov).copy(), np.diag(cov_se).copy(), cov, cov_se, n, t, False)


@dataclass
class DiffusivityReport:
    variational: np.ndarray
    msd: MSDEstimate
    params: dict

    @property
    def z_scores(self) -> np.ndarray:
        return (self.msd.sigma2 - self.variational) / self.msd.stderr

    @property
    def agree(self) -> bool:
        return bool(np.all(np.abs(self.z_scores) <= 3.0))


# -- corrector sublinearity --------------------------------------------------

@dataclass
class SublinearityEntry:
    eps: float
    a_eps: np.ndarray
    s: float
    count: int


@dataclass
class SublinearityReport:
    entries: list[SublinearityEntry]
    box_averages: dict = field(default_factory=dict)

    def to_list(self) -> list[dict]:
        return [{"eps": e.eps, "a_eps": e.a_eps.tolist(), "s": e.s, "count": e.count}
                for e in self.entries]


def _scaled_positions(chi: CorrectorField, eps: float) -> np.ndarray:
    return eps * chi.spec.offsets(chi.vertices, chi.root).astype(np.float64)


def _in_box(pos: np.ndarray) -> np.ndarray:
    return np.all(np.abs(pos) <= 1.0, axis=1)


def sublinearity_statistic(chi: CorrectorField, eps_list) -> SublinearityReport:
    """``s(eps) = eps^d sum_{|x| <= 1/eps} |eps chi(x) - a_eps|^2`` on the cluster.

    ``a_eps`` is the mean of ``eps chi`` over the same cluster vertices.
    """
    spec = chi.spec
    entries = []
    for eps in sorted((float(e) for e in eps_list), reverse=True):
        if not eps > 0 or 1.0 / eps > spec.L / 2:
            raise GeometryError(f"box of radius 1/eps = {1 / eps:g} exceeds L/2 = {spec.L // 2}")
        mask = _in_box(_scaled_positions(chi, eps))
        vals = eps * chi.values[mask]
        a = vals.mean(axis=0)
        s = eps ** spec.d * float(np.sum((vals - a) ** 2))
        entries.append(SublinearityEntry(eps, a, s, int(mask.sum())))
    return SublinearityReport(entries)


def _rectangle(rect, d: int) -> np.ndarray:
    r = np.asarray(rect, dtype=np.float64).reshape(d, 2)
    if np.any(r[:, 0] > r[:, 1]) or np.any(r < -1.0) or np.any(r > 1.0):
        raise GeometryError(f"rectangle {r.tolist()} is not inside [-1, 1]^d")
    return r


def _exact_sum(values: np.ndarray) -> Fraction:
    """Exact rational sum of finite doubles."""
    if len(values) == 0:
        return Fraction(0)
    ratios = [v.as_integer_ratio() for v in values.tolist()]
    den = max(q for _, q in ratios)   # all denominators are powers of two
    return Fraction(sum(n * (den // q) for n, q in ratios), den)


def box_average_statistic(chi: CorrectorField, eps: float, rectangles, b0: int = 0) -> list[float]:
    """``eps^d sum_{x in C, eps x in A} (eps chi(x) - a_eps).b0`` per rectangle ``A``.

    ``a_eps`` is the mean of ``eps chi.b0`` over the cluster vertices of
    ``[-1, 1]^d``, taken exactly; sums are exact rationals rounded once, so
    the full box gives exactly zero.
    """
    spec = chi.spec
    pos = _scaled_positions(chi, eps)
    vals = eps * chi.values[:, b0]
    box = _in_box(pos)
    n_box = int(box.sum())
    if n_box == 0:
        raise GeometryError("no cluster vertex in the box")
    total = _exact_sum(vals[box])
    scale = Fraction(eps) ** spec.d
    out = []
    for rect in rectangles:
        r = _rectangle(rect, spec.d)
        mask = np.all((pos >= r[:, 0]) & (pos <= r[:, 1]), axis=1)
        k = int(mask.sum())
        out.append(float(scale * (_exact_sum(vals[mask]) - Fraction(k, n_box) * total)))
    return out


def orthants(d: int) -> list[np.ndarray]:
    """The ``2^d`` closed orthants of ``[-1, 1]^d``."""
    out = []
    for signs in np.ndindex(*(2,) * d):
        out.append(np.array([[0.0, 1.0] if s == 0 else [-1.0, 0.0] for s in signs]))
    return out


# -- Poincare constants ------------------------------------------------------

@dataclass
class PoincareEstimate:
    eps: float
    size: int
    lambda1: float
    ratio: float
    trial_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def box_component(config: BondConfiguration, clusters: ClusterDecomposition,
                  radius: int, origin: int | None = None) -> ClusterGraph:
    """Open subgraph of the sup-norm box of ``radius`` around ``origin`` (the
    root by default), restricted to the connected piece containing ``origin``."""
    spec = config.spec
    if radius > spec.L // 2 - 1:
        raise GeometryError(f"box radius {radius} wraps around the torus of side {spec.L}")
    origin = clusters.root if origin is None else int(origin)
    inside = np.all(np.abs(spec.offsets(np.arange(spec.n_vertices), origin)) <= radius, axis=1)
    tail, head, _ = spec.edge_endpoints(np.flatnonzero(config.bonds))
    keep = inside[tail] & inside[head]
    V = spec.n_vertices
    adj = coo_matrix((np.ones(int(keep.sum())), (tail[keep], head[keep])), shape=(V, V))
    _, lab = connected_components(adj, directed=False)
    return ClusterGraph.from_vertices(config, np.flatnonzero(lab == lab[origin]))


def smallest_nonzero_eigenvalue(graph: ClusterGraph, block: int = 4, tol: float = 1e-10,
                                max_rounds: int = 500, seed: int = 0) -> float:
    """First nonzero Laplacian eigenvalue by block inverse iteration.

    The iteration lives on mean-zero vectors (the constants are deflated) and
    each round applies the pseudo-inverse through conjugate gradient followed
    by a Rayleigh-Ritz step.
    """
    n = graph.size
    if n < 2:
        raise GeometryError("need at least two vertices")
    K = graph.laplacian
    k = min(block, n - 1)
    gen = rng.generator(seed, rng.TESTFN)
    V = gen.standard_normal((n, k))
    V -= V.mean(axis=0)
    V, _ = np.linalg.qr(V)
    inv_diag = 1.0 / graph.degrees
    lam_old = np.inf
    for _ in range(max_rounds):
        W = np.column_stack([
            conjugate_gradient(K.dot, V[:, i], tol=1e-10, max_iter=50 * n,
                               inv_diag=inv_diag).x for i in range(k)])
        W, _ = np.linalg.qr(W)
        H = W.T @ (K @ W)
        vals, vecs = np.linalg.eigh((H + H.T) / 2)
        V = W @ vecs
        lam = float(vals[0])
        if abs(lam - lam_old) <= tol * lam:
            return lam
        lam_old = lam
    return lam


def poincare_sides(graph: ClusterGraph, u: np.ndarray) -> tuple[float, float]:
    """``((1/#C) sum_{x,y} (u(x)-u(y))^2, sum_{edges} (u(x)-u(y))^2)``."""
    u = np.asarray(u, dtype=np.float64)
    # shifting by u[0] first makes constant functions centre to exactly zero
    c = u - u[0]
    c -= c.mean()
    lhs = 2.0 * float(np.dot(c, c))
    diff = u[graph.head] - u[graph.tail]
    return lhs, float(np.dot(diff, diff))


def poincare_ratio(config: BondConfiguration, clusters: ClusterDecomposition, eps: float,
                   trials: int = 16, seed: int = 0) -> PoincareEstimate:
    """Best constant in ``(1/#C) sum_{x,y}(u(x)-u(y))^2 <= ratio * sum_{x~y}(u(x)-u(y))^2``
    on the box component ``C^eps`` of radius ``1/eps``; equals ``2 / lambda_1``.

    ``trial_max`` is the largest ratio seen on random centred test functions and
    is a lower bound for ``ratio``.
    """
    radius = int(math.floor(1.0 / eps + 1e-9))
    graph = box_component(config, clusters, radius)
    if graph.size < 2:
        raise GeometryError(f"box component has {graph.size} vertex; need at least 2")
    lam = smallest_nonzero_eigenvalue(graph, seed=seed)
    gen = rng.generator(seed, rng.TESTFN + 1)
    best = 0.0
    for _ in range(trials):
        lhs, en = poincare_sides(graph, gen.standard_normal(graph.size))
        if en > 0:
            best = max(best, lhs / en)
    return PoincareEstimate(float(eps), graph.size, lam, 2.0 / lam, best)


# -- chopped boxes -----------------------------------------------------------

def chopped_box_bound(chi: CorrectorField, fields: list[DirectionField], config: BondConfiguration,
                      clusters: ClusterDecomposition, delta: float, M: float,
                      eps: float) -> tuple[float, float]:
    """Both sides of the small-box Poincare estimate summed over a chopping of [-1, 1]^d.

    Boxes ``C_z`` (side ``delta``) and ``B_z`` (side ``M delta``) are centred on
    ``z in delta Z^d`` with ``|z| <= 1`` and taken half-open so the ``C_z`` tile
    space.  Returns ``(lhs, rhs)``, both multiplied by ``eps^d``:

    * ``lhs = sum_z sum_{x in C cap C_z} |eps chi(x) - a_eps(z)|^2``
    * ``rhs = delta^2 sum_z sum_{x in C cap B_z} sum_b sum_{e open} G_b(x, e)^2``
    """
    spec = chi.spec
    if not 0.0 < delta < 1.0:
        raise GeometryError(f"delta must lie in (0, 1), got {delta}")
    if M < 1 or M * delta > 2:
        raise GeometryError(f"need M >= 1 and M*delta <= 2, got M={M}, delta={delta}")
    reach = (1.0 + max(M, 1.0) * delta / 2) / eps
    if reach > spec.L / 2:
        raise GeometryError(f"boxes reach {reach:.1f} lattice units; torus half-side is {spec.L // 2}")
    pos = _scaled_positions(chi, eps)
    graph = cluster_graph(config, clusters)
    # sum over b and over open directed edges at x of G_b(x, e)^2
    sq = sum(f.values ** 2 for f in fields)
    local_energy = (np.bincount(graph.tail, sq, minlength=graph.size)
                    + np.bincount(graph.head, sq, minlength=graph.size))
    K = int(math.floor(1.0 / delta + 1e-9))
    ticks = delta * np.arange(-K, K + 1)
    lhs = 0.0
    energy = 0.0
    for z in np.array(np.meshgrid(*([ticks] * spec.d), indexing="ij")).reshape(spec.d, -1).T:
        rel = pos - z
        small = np.all((rel >= -delta / 2) & (rel < delta / 2), axis=1)
        if small.any():
            v = eps * chi.values[small]
            lhs += float(np.sum((v - v.mean(axis=0)) ** 2))
        big = np.all((rel >= -M * delta / 2) & (rel < M * delta / 2), axis=1)
        energy += float(local_energy[big].sum())
    scale = eps ** spec.d
    return scale * lhs, scale * delta ** 2 * energy


# -- heat kernel ---------------------------------------------------------------

@dataclass
class HeatKernelEstimate:
    times: np.ndarray
    returns: np.ndarray
    n: int
    prob: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    slope: float
    slope_stderr: float
    intercept: float

    def to_list(self) -> list[dict]:
        return [{"t": float(t), "returns": int(r), "p": float(p), "lo": float(lo), "hi": float(hi)}
                for t, r, p, lo, hi in zip(self.times, self.returns, self.prob,
                                           self.lower, self.upper)]


def wilson_interval(k, n: int, z: float = 1.96) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(k, dtype=np.float64)
    phat = k / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return center - half, center + half


def heat_kernel_return(config: BondConfiguration, clusters: ClusterDecomposition, x0: int,
                       t_list, N: int, seed: int = 0, threads: int = 1) -> HeatKernelEstimate:
    """Monte Carlo ``P_x0[X(t) = x0]`` (unwrapped) and a log-log slope fit.

    The slope is a weighted least-squares fit of ``log p`` on ``log t`` over the
    positive times with at least one return, weighting by the delta-method
    variance ``(1 - p) / (N p)``.
    """
    times = np.asarray(sorted(float(t) for t in t_list))
    if N < 1000:
        raise ValueError(f"need at least 1000 walks, got {N}")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    if clusters.labels[x0] != clusters.largest_cluster_id:
        raise ValueError(f"start vertex {x0} is not in the largest cluster")
    horizon_check(config, float(times[-1]))
    starts = np.full(N, int(x0), dtype=np.int64)
    seeds = np.uint64(seed % 2 ** 64) + np.arange(N, dtype=np.uint64)
    _, disp = ensemble_positions(config, starts, seeds, times, threads=threads)
    home = np.all(disp == 0, axis=2)
    k = home.sum(axis=0)
    p = k / N
    lo, hi = wilson_interval(k, N)
    use = (times > 0) & (k > 0) & (k < N)
    slope = se = icpt = float("nan")
    if use.sum() >= 2:
        X = np.log(times[use])
        Y = np.log(p[use])
        w = N * p[use] / (1 - p[use])
        A = np.column_stack([np.ones_like(X), X])
        AtW = A.T * w
        cov = np.linalg.inv(AtW @ A)
        icpt, slope = cov @ (AtW @ Y)
        # scale by the reduced chi^2 when the scatter exceeds the binomial model
        resid = Y - A @ np.array([icpt, slope])
        dof = max(int(use.sum()) - 2, 1)
        chi2 = float(np.sum(w * resid ** 2)) / dof
        se = math.sqrt(cov[1, 1] * max(chi2, 1.0))
    return HeatKernelEstimate(times, k, N, p, lo, hi, float(slope), float(se), float(icpt))


# -- Gaussianity ---------------------------------------------------------------

@dataclass
class KSResult:
    statistic: float
    pvalue: float
    n: int


def ks_statistic(z: np.ndarray, cdf=special.ndtr) -> float:
    """Two-sided one-sample Kolmogorov-Smirnov distance to ``cdf``."""
    z = np.sort(np.asarray(z, dtype=np.float64))
    n = len(z)
    F = cdf(z)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def gaussianity_test(endpoints: np.ndarray, b: int = 0, lattice_spacing: float | None = None,
                     seed: int = 0) -> KSResult:
    """KS test of the standardized component ``X.b`` against N(0, 1).

    The p-value uses the asymptotic Kolmogorov distribution.  Lattice-valued
    samples violate the continuity the KS null assumes; pass their spacing as
    ``lattice_spacing`` to spread each value uniformly over its lattice cell
    (seeded) before standardizing.
    """
    y = np.asarray(endpoints, dtype=np.float64)
    y = y[:, b] if y.ndim == 2 else y
    n = len(y)
    if n < 1000:
        raise ValueError(f"need at least 1000 samples, got {n}")
    if lattice_spacing:
        u = rng.to_unit(rng.raw_words(seed, rng.JITTER, n))
        y = y + lattice_spacing * (u - 0.5)
    sd = y.std(ddof=1)
    if not sd > 0:
        raise DegenerateSampleError("sample variance is zero")
    D = ks_statistic((y - y.mean()) / sd)
    return KSResult(D, float(special.kolmogorov(math.sqrt(n) * D)), n)
