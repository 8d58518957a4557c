"""Preconditioned conjugate gradient for singular graph Laplacians.

The systems solved here are ``K u = f`` with ``K`` a connected-graph Laplacian,
whose kernel is the constants, and ``f`` summing to zero.  Residuals and search
directions are projected onto mean-zero vectors at every step so rounding
cannot feed the kernel; the returned solution has mean zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class SolverNotConverged(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"conjugate gradient stopped after {iterations} iterations "
            f"with relative residual {residual:.3e}")
        self.residual = residual
        self.iterations = iterations


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def _center(v: np.ndarray) -> np.ndarray:
    v -= v.mean()
    return v


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, *,
                       tol: float = 1e-10, max_iter: int = 1000,
                       inv_diag: np.ndarray | None = None) -> CGResult:
    """Solve ``apply(x) = rhs`` on the mean-zero subspace.

    Stops on ``||r|| <= tol * ||rhs||``.  The recursive residual is checked
    against the true residual before returning; if they disagree the iteration
    restarts from the true residual.
    """
    b = _center(np.array(rhs, dtype=np.float64))
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0)
    target2 = (tol * bnorm) ** 2

    def precond(r):
        return _center(r * inv_diag) if inv_diag is not None else r.copy()

    it = 0
    while True:
        r = _center(b - apply(x))
        z = precond(r)
        p = z.copy()
        rz = float(np.dot(r, z))
        while it < max_iter and float(np.dot(r, r)) > target2:
            it += 1
            Ap = apply(p)
            alpha = rz / float(np.dot(p, Ap))
            x += alpha * p
            r -= alpha * Ap
            _center(r)
            z = precond(r)
            rz_new = float(np.dot(r, z))
            p *= rz_new / rz
            p += z
            rz = rz_new
        _center(x)
        rel = float(np.linalg.norm(_center(b - apply(x)))) / bnorm
        if rel <= tol:
            return CGResult(x, it, rel)
        if it >= max_iter:
            raise SolverNotConverged(rel, it)
