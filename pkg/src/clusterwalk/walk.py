"""Exact simulation of the constant-speed random walk on a bond configuration.

The walk at ``x`` waits an Exp(1) time and then jumps to a uniformly chosen
open neighbor.  Walk randomness is a pure function of its seed: word ``2k`` of
the walk's stream gives the k-th holding time and word ``2k + 1`` the k-th
jump choice.  Batched simulation (:func:`ensemble_positions`) and single
trajectories (:func:`simulate_walk`) therefore agree exactly.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .lattice import (BondConfiguration, ClusterDecomposition, LatticeError,
                      open_neighbor_tables)


class TorusHorizonWarning(UserWarning):
    """Walk horizon long enough for the torus period to matter."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    start: int
    times: np.ndarray = field(repr=False)
    vertices: np.ndarray = field(repr=False)
    displacements: np.ndarray = field(repr=False)
    t_max: float = 0.0

    @property
    def n_events(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class EnsembleSpec:
    n_walks: int
    t_max: float
    base_seed: int = 0
    start: int | str = "uniform"

    def __post_init__(self):
        if self.n_walks < 1:
            raise ValueError(f"walk count must be >= 1, got {self.n_walks}")
        if not self.t_max > 0:
            raise ValueError(f"horizon t_max must be positive, got {self.t_max}")
        if self.start != "uniform" and not isinstance(self.start, (int, np.integer)):
            raise ValueError(f"start policy must be 'uniform' or a vertex index, got {self.start!r}")

    def seeds(self) -> np.ndarray:
        # uint64 arithmetic wraps, matching the 64-bit seed space
        return np.uint64(self.base_seed) + np.arange(self.n_walks, dtype=np.uint64)


def _kcap(t: float) -> int:
    return int(t + 6.0 * math.sqrt(t) + 16)


def _walk_stream(seed: int, t_end: float) -> tuple[np.ndarray, np.ndarray]:
    """Event times in ``[0, t_end]`` and the matching jump uniforms."""
    n = _kcap(t_end)
    while True:
        words = rng.raw_words(seed, rng.WALK, 2 * n)
        times = np.cumsum(-np.log(rng.to_open_unit(words[0::2])))
        if times[-1] > t_end:
            k = int(np.searchsorted(times, t_end, side="right"))
            return times[:k], rng.to_unit(words[1:2 * k:2])
        n *= 2


def _check_start(config: BondConfiguration, x0) -> int:
    v = int(x0)
    if not 0 <= v < config.spec.n_vertices:
        raise LatticeError(f"start vertex {v} outside the box")
    return v


def simulate_walk(config: BondConfiguration, clusters: ClusterDecomposition | None,
                  x0: int, t_max: float, seed: int) -> Trajectory:
    """One exact trajectory on ``[0, t_max]``.

    ``clusters`` is accepted for symmetry with the ensemble functions and is not
    needed: the walk never leaves the start vertex's cluster.
    """
    if not t_max > 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    spec = config.spec
    x0 = _check_start(config, x0)
    nbr, step, deg = open_neighbor_tables(config)
    if deg[x0] == 0:
        empty = np.empty(0)
        return Trajectory(x0, empty, empty.astype(np.int64),
                          np.zeros((0, spec.d), dtype=np.int64), float(t_max))
    times, jumps = _walk_stream(seed, t_max)
    unit = np.stack([spec.direction(j) for j in range(2 * spec.d)])
    verts = np.empty(len(times), dtype=np.int64)
    moves = np.empty(len(times), dtype=np.int64)
    nbr_l, step_l, deg_l = nbr.tolist(), step.tolist(), deg.tolist()
    cur = x0
    for k, u in enumerate(jumps.tolist()):
        slot = int(u * deg_l[cur])
        moves[k] = step_l[cur][slot]
        cur = nbr_l[cur][slot]
        verts[k] = cur
    disp = np.cumsum(unit[moves], axis=0)
    return Trajectory(x0, times, verts, disp, float(t_max))


def position_at(traj: Trajectory, t: float) -> tuple[int, np.ndarray]:
    """Right-continuous position and unwrapped displacement at time ``t``."""
    if not 0.0 <= t <= traj.t_max:
        raise ValueError(f"time {t} outside [0, {traj.t_max}]")
    k = int(np.searchsorted(traj.times, t, side="right"))
    if k == 0:
        return traj.start, np.zeros(traj.displacements.shape[1], dtype=np.int64)
    return int(traj.vertices[k - 1]), traj.displacements[k - 1].copy()


def _batch(config, tables, starts, seeds, times):
    spec = config.spec
    nbr, step, deg = tables
    nb = len(seeds)
    t_end = float(times[-1])
    streams = [_walk_stream(int(s), t_end) if deg[x] > 0 else (np.empty(0), np.empty(0))
               for s, x in zip(seeds, starts)]
    counts = np.array([np.searchsorted(ts, times, side="right") for ts, _ in streams],
                      dtype=np.int64).reshape(nb, len(times))
    kmax = int(counts[:, -1].max()) if nb else 0
    jumps = np.zeros((nb, kmax))
    for i, (_, u) in enumerate(streams):
        jumps[i, :len(u)] = u
    unit = np.stack([spec.direction(j) for j in range(2 * spec.d)])
    cur = np.asarray(starts, dtype=np.int64).copy()
    disp = np.zeros((nb, spec.d), dtype=np.int64)
    vpath = np.empty((nb, kmax + 1), dtype=np.int64)
    dpath = np.empty((nb, kmax + 1, spec.d), dtype=np.int64)
    vpath[:, 0] = cur
    dpath[:, 0] = disp
    n_events = counts[:, -1]
    for k in range(kmax):
        idx = np.flatnonzero(n_events > k)
        c = cur[idx]
        slot = (jumps[idx, k] * deg[c]).astype(np.int64)
        cur[idx] = nbr[c, slot]
        disp[idx] += unit[step[c, slot]]
        vpath[:, k + 1] = cur
        dpath[:, k + 1] = disp
    rows = np.arange(nb)[:, None]
    return vpath[rows, counts], dpath[rows, counts]


def ensemble_positions(config: BondConfiguration, starts, seeds, times, *,
                       batch: int = 2048, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Positions of independent walks at each of the sorted ``times``.

    Returns ``(vertices, displacements)`` with shapes ``(N, T)`` and
    ``(N, T, d)``.  Output depends only on ``(starts, seeds, times)``, not on
    ``batch`` or ``threads``.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be a non-empty sorted list of non-negative reals")
    starts = np.asarray(starts, dtype=np.int64)
    seeds = np.asarray(seeds, dtype=np.uint64)
    tables = open_neighbor_tables(config)
    chunks = [slice(a, min(a + batch, len(seeds))) for a in range(0, len(seeds), batch)]

    def run(sl):
        return _batch(config, tables, starts[sl], seeds[sl], times)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    verts = np.concatenate([p[0] for p in parts])
    disp = np.concatenate([p[1] for p in parts])
    return verts, disp


def start_vertices(clusters: ClusterDecomposition, spec: EnsembleSpec) -> np.ndarray:
    if spec.start != "uniform":
        return np.full(spec.n_walks, int(spec.start), dtype=np.int64)
    members = clusters.members()
    u = np.array([rng.to_unit(rng.raw_words(int(s), rng.START, 1))[0] for s in spec.seeds()])
    return members[(u * len(members)).astype(np.int64)]


def horizon_check(config: BondConfiguration, t: float) -> None:
    L = config.spec.L
    if t > (L / 4) ** 2:
        warnings.warn(
            f"walk horizon {t:g} exceeds (L/4)^2 = {(L / 4) ** 2:g}; torus revisits "
            "correlate the environment beyond one period", TorusHorizonWarning, stacklevel=3)


def rescaled_endpoints(config: BondConfiguration, clusters: ClusterDecomposition,
                       spec: EnsembleSpec, epsilon: float, threads: int = 1) -> np.ndarray:
    """``eps * X(t_max / eps^2)`` (unwrapped) for each walk of the ensemble."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    t_micro = spec.t_max / epsilon ** 2
    horizon_check(config, t_micro)
    starts = start_vertices(clusters, spec)
    _, disp = ensemble_positions(config, starts, spec.seeds(), [t_micro], threads=threads)
    return epsilon * disp[:, 0, :].astype(np.float64)
