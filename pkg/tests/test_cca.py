import numpy as np
import pytest

from sublab.cca import pwcca


def random_orthogonal(d, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q


def test_self_similarity_is_one():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 16))
    assert abs(pwcca(x, x) - 1.0) < 1e-6


def test_orthogonal_transform_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 16))
    q = random_orthogonal(16, seed=2)
    assert abs(pwcca(x, x @ q) - 1.0) < 1e-6


def test_invertible_transform_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 12))
    a = rng.normal(size=(12, 12)) + 4.0 * np.eye(12)
    assert abs(pwcca(x, x @ a) - 1.0) < 1e-5


def test_output_range():
    rng = np.random.default_rng(4)
    for seed in range(5):
        local = np.random.default_rng(seed)
        x = local.normal(size=(150, 10))
        y = local.normal(size=(150, 14))
        score = pwcca(x, y)
        assert 0.0 <= score <= 1.0 + 1e-9


def test_independent_noise_scores_below_shared_signal():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(400, 8))
    shared = base @ rng.normal(size=(8, 8)) + 0.1 * rng.normal(size=(400, 8))
    noise = rng.normal(size=(400, 8))
    assert pwcca(base, shared) > pwcca(base, noise)


def test_rank_deficient_input_truncates():
    rng = np.random.default_rng(6)
    thin = rng.normal(size=(100, 4))
    x = np.concatenate([thin, thin], axis=1)  # rank 4, 8 columns
    assert abs(pwcca(x, thin) - 1.0) < 1e-6


def test_different_widths_allowed():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(120, 6))
    y = rng.normal(size=(120, 18))
    score = pwcca(x, y)
    assert 0.0 <= score <= 1.0 + 1e-9


def test_constant_matrix_rejected():
    x = np.ones((50, 4))
    y = np.random.default_rng(8).normal(size=(50, 4))
    with pytest.raises(ValueError):
        pwcca(x, y)


def test_row_mismatch_rejected():
    rng = np.random.default_rng(9)
    with pytest.raises(ValueError):
        pwcca(rng.normal(size=(10, 3)), rng.normal(size=(11, 3)))


def test_weighting_uses_first_argument():
    # x has one dominant direction shared with y and many weak noise
    # directions not shared; projection weighting should keep the score high
    rng = np.random.default_rng(10)
    n = 500
    signal = rng.normal(size=(n, 1))
    x = np.concatenate([signal * 10.0, 0.05 * rng.normal(size=(n, 7))], axis=1)
    y = np.concatenate([signal, rng.normal(size=(n, 7))], axis=1)
    assert pwcca(x, y) > 0.8
