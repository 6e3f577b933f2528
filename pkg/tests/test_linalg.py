import numpy as np
import pytest

from helpers import max_rel_err
from sublab import linalg
from sublab import tensor as T


def reconstruction_error(m, u, s, v):
    err = np.linalg.norm(u @ np.diag(s) @ v.T - m)
    return err / max(np.linalg.norm(m), 1e-300)


def test_svd_identity():
    u, s, v = linalg.svd(np.eye(3))
    assert np.allclose(s, np.ones(3), atol=1e-12)
    assert reconstruction_error(np.eye(3), u, s, v) < 1e-12


def test_svd_diagonal_sorted_descending():
    m = np.diag([3.0, 2.0, 1.0])
    _, s, _ = linalg.svd(m)
    assert np.allclose(s, [3.0, 2.0, 1.0], atol=1e-12)


def test_svd_reconstructs_random_matrices():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(5, 3))
        u, s, v = linalg.svd(m)
        assert reconstruction_error(m, u, s, v) < 1e-8
        assert (s >= 0).all()
        assert (np.diff(s) <= 1e-12).all()
        # thin factors have orthonormal columns
        assert np.allclose(u.T @ u, np.eye(3), atol=1e-10)
        assert np.allclose(v.T @ v, np.eye(3), atol=1e-10)


def test_svd_wide_matrix():
    rng = np.random.default_rng(11)
    m = rng.normal(size=(3, 7))
    u, s, v = linalg.svd(m)
    assert u.shape == (3, 3) and v.shape == (7, 3)
    assert reconstruction_error(m, u, s, v) < 1e-8


def test_svd_matches_reference_singular_values():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(6, 4))
        _, s, _ = linalg.svd(m)
        ref = np.linalg.svd(m, compute_uv=False)
        assert max_rel_err(s, ref) < 1e-9


def test_singular_values_invariant_under_orthogonal_factors():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(5, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    _, s0, _ = linalg.svd(m)
    _, s1, _ = linalg.svd(q @ m)
    _, s2, _ = linalg.svd(m @ q)
    assert np.abs(s0 - s1).max() <= 1e-8
    assert np.abs(s0 - s2).max() <= 1e-8


def test_svd_zero_and_rank_deficient():
    u, s, v = linalg.svd(np.zeros((4, 2)))
    assert np.array_equal(s, np.zeros(2))
    m = np.outer(np.arange(1.0, 5.0), np.array([1.0, 2.0]))
    u, s, v = linalg.svd(m)
    assert s[1] <= 1e-10 * s[0]
    assert reconstruction_error(m, u, s, v) < 1e-8


def test_svd_convergence_failure_is_loud():
    rng = np.random.default_rng(0)
    with pytest.raises(linalg.SvdConvergenceError):
        linalg.svd(rng.normal(size=(6, 6)), max_sweeps=0)


def test_svd_rejects_non_finite():
    m = np.full((2, 2), np.nan)
    with pytest.raises(T.NonFiniteError):
        linalg.svd(m)


def test_eigh_reconstructs_symmetric():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(5, 5))
        sym = (a + a.T) / 2
        w, q = linalg.eigh(sym)
        assert np.linalg.norm(q @ np.diag(w) @ q.T - sym) < 1e-9
        assert (np.diff(w) <= 1e-12).all()


def test_eigh_of_gram_matches_squared_singular_values():
    rng = np.random.default_rng(8)
    m = rng.normal(size=(6, 4))
    _, s, _ = linalg.svd(m)
    w, _ = linalg.eigh(m.T @ m)
    assert max_rel_err(np.sqrt(np.maximum(w, 0.0)), s, floor=1e-9) < 1e-7


def test_eigh_rejects_asymmetric():
    with pytest.raises(ValueError):
        linalg.eigh(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_jacobian_of_identity():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    jac = linalg.jacobian(lambda t: T.reshape(t, (6,)), x)
    assert np.array_equal(jac, np.eye(6))


def test_jacobian_of_linear_map_is_weight():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(4, 3))
    x = T.Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    jac = linalg.jacobian(lambda t: T.matmul(t, T.constant(w)), x)
    assert np.abs(jac - w.T).max() < 1e-12


def test_jacobian_matches_finite_differences_on_nonlinear_map():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(5, 5))
    g = 1.0 + 0.1 * rng.normal(size=(5,))
    b = rng.normal(size=(5,))

    def block(t):
        return T.layer_norm(T.add(t, T.relu(T.matmul(t, T.constant(w)))), T.constant(g), T.constant(b))

    x0 = rng.normal(size=(1, 5))
    x = T.Tensor(x0, requires_grad=True)
    jac = linalg.jacobian(block, x)

    h = 1e-5
    fd = np.zeros((5, 5))
    for j in range(5):
        hi = x0.copy()
        lo = x0.copy()
        hi[0, j] += h
        lo[0, j] -= h
        fhi = block(T.Tensor(hi)).data.reshape(-1)
        flo = block(T.Tensor(lo)).data.reshape(-1)
        fd[:, j] = (fhi - flo) / (2 * h)
    assert max_rel_err(jac, fd) <= 1e-4


def test_jacobian_size_cap():
    x = T.Tensor(np.zeros(2000), requires_grad=True)
    with pytest.raises(ValueError):
        linalg.jacobian(lambda t: t, x)


def test_mean_singular_value_of_identity_map():
    x = T.Tensor(np.linspace(-1, 1, 12).reshape(1, 12), requires_grad=True)
    jac = linalg.jacobian(lambda t: t, x)
    assert linalg.mean_singular_value(jac) == pytest.approx(1.0, abs=1e-12)
