import numpy as np
import pytest

from clusterwalk.lattice import LatticeSpec, decompose_clusters, sample_bonds


def brute_open_edges(config):
    """Open undirected edges as (x, y, axis) by looping over coordinates."""
    spec = config.spec
    out = []
    for x in np.ndindex(*spec.shape):
        fx = int(np.ravel_multi_index(x, spec.shape))
        for k in range(spec.d):
            y = list(x)
            y[k] = (y[k] + 1) % spec.L
            fy = int(np.ravel_multi_index(tuple(y), spec.shape))
            if config.bonds[k * spec.n_vertices + fx]:
                out.append((fx, fy, k))
    return out


def dfs_components(config):
    """Cluster labels by explicit stack DFS, labelled in order of first vertex."""
    V = config.spec.n_vertices
    adj = [[] for _ in range(V)]
    for x, y, _ in brute_open_edges(config):
        adj[x].append(y)
        adj[y].append(x)
    labels = [-1] * V
    nxt = 0
    for s in range(V):
        if labels[s] >= 0:
            continue
        labels[s] = nxt
        stack = [s]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if labels[w] < 0:
                    labels[w] = nxt
                    stack.append(w)
        nxt += 1
    return np.array(labels)


def dense_cell_oracle(config, clusters, b):
    """Mean-zero minimiser of the cell energy by a dense least-squares solve.

    Builds the edge-incidence matrix of the largest cluster and solves
    ``min ||B u + c||`` with ``c`` the b-coordinate of each edge direction.
    """
    members = clusters.members()
    local = {int(v): i for i, v in enumerate(members)}
    rows, rhs = [], []
    for x, y, k in brute_open_edges(config):
        if x in local and y in local:
            r = np.zeros(len(members))
            r[local[y]] += 1.0
            r[local[x]] -= 1.0
            rows.append(r)
            rhs.append(-1.0 if k == b else 0.0)
    B = np.array(rows)
    u = np.linalg.lstsq(B, np.array(rhs), rcond=None)[0]
    return u - u.mean()


def small_cluster_config(seed, max_size=200, d=2, L=16, p=0.5):
    """First configuration from ``seed`` onward whose largest cluster has 2..max_size vertices."""
    spec = LatticeSpec(d, L)
    s = seed
    while True:
        cfg = sample_bonds(spec, p, s)
        cl = decompose_clusters(cfg)
        if 2 <= cl.sizes[cl.largest_cluster_id] <= max_size:
            return cfg, cl
        s += 1000


@pytest.fixture(scope="session")
def perc64():
    cfg = sample_bonds(LatticeSpec(2, 64), 0.7, 11)
    return cfg, decompose_clusters(cfg)
