import numpy as np
import pytest
from scipy.sparse import diags

from clusterwalk.cg import SolverNotConverged, conjugate_gradient


def path_laplacian(n):
    main = np.full(n, 2.0)
    main[[0, -1]] = 1.0
    return diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, 1, -1]).tocsr()


@pytest.mark.parametrize("precond", [False, True])
def test_singular_laplacian_matches_pseudoinverse(precond):
    K = path_laplacian(40)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(40)
    inv = 1.0 / K.diagonal() if precond else None
    res = conjugate_gradient(K.dot, f, tol=1e-12, max_iter=500, inv_diag=inv)
    oracle = np.linalg.pinv(K.toarray()) @ (f - f.mean())
    assert abs(res.x.mean()) < 1e-12
    assert np.max(np.abs(res.x - oracle)) < 1e-8
    assert res.residual <= 1e-12


def test_zero_rhs():
    res = conjugate_gradient(path_laplacian(5).dot, np.zeros(5))
    assert res.iterations == 0 and np.all(res.x == 0)


def test_constant_rhs_is_projected_away():
    res = conjugate_gradient(path_laplacian(5).dot, np.ones(5))
    assert np.all(res.x == 0)


def test_nonconvergence_carries_residual():
    K = path_laplacian(200)
    f = np.random.default_rng(1).standard_normal(200)
    with pytest.raises(SolverNotConverged) as info:
        conjugate_gradient(K.dot, f, tol=1e-12, max_iter=3)
    assert info.value.iterations >= 3 and info.value.residual > 1e-12
