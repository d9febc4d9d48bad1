import math

import numpy as np
import pytest

from pcrkit.errors import DimensionMismatch, InvalidTemperature
from pcrkit.objective import ContrastiveBatch, info_nce, info_nce_grad, similarity_matrix


def test_similarity_matrix_orthonormal_identity():
    q = np.eye(4)
    assert np.allclose(similarity_matrix(q, q), np.eye(4))


def test_similarity_matrix_all_identical_rows():
    row = np.array([[0.5, 0.5, 0.5, 0.5]])
    m = np.repeat(row, 3, axis=0)
    assert np.allclose(similarity_matrix(m, m), np.ones((3, 3)))


def test_similarity_matrix_transpose_symmetry():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(5, 8))
    c = rng.normal(size=(5, 8))
    assert np.allclose(similarity_matrix(q, c), similarity_matrix(c, q).T)


def test_similarity_matrix_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


def test_info_nce_single_pair_is_zero():
    batch = ContrastiveBatch(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), tau=1.0)
    assert abs(info_nce(batch)) < 1e-12


def test_info_nce_all_equal_similarities_is_ln_b():
    for b in (2, 4, 7):
        q = np.repeat([[1.0, 0.0, 0.0]], b, axis=0)
        batch = ContrastiveBatch(q, q.copy(), tau=0.37)
        assert abs(info_nce(batch) - math.log(b)) < 1e-9


def test_info_nce_two_orthonormal_hand_value():
    # logits row i: [1, 0] at tau=1 -> loss = ln(1 + e^-1)
    batch = ContrastiveBatch(np.eye(2), np.eye(2), tau=1.0)
    assert abs(info_nce(batch) - 0.31326169) < 1e-8


def test_info_nce_invalid_temperature():
    with pytest.raises(InvalidTemperature):
        ContrastiveBatch(np.eye(2), np.eye(2), tau=0.0)
    with pytest.raises(InvalidTemperature):
        ContrastiveBatch(np.eye(2), np.eye(2), tau=-1.0)


def test_info_nce_nonnegative_random_batches():
    rng = np.random.default_rng(5)
    for _ in range(25):
        b = int(rng.integers(1, 9))
        q = rng.normal(size=(b, 12))
        c = rng.normal(size=(b, 12))
        assert info_nce(ContrastiveBatch(q, c, tau=float(rng.uniform(0.05, 5)))) >= 0


def test_info_nce_row_permutation_invariance():
    rng = np.random.default_rng(6)
    q = rng.normal(size=(6, 10))
    c = rng.normal(size=(6, 10))
    perm = rng.permutation(6)
    a = info_nce(ContrastiveBatch(q, c, tau=0.2))
    b = info_nce(ContrastiveBatch(q[perm], c[perm], tau=0.2))
    assert abs(a - b) < 1e-12


def test_grad_single_pair_is_zero():
    batch = ContrastiveBatch(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]), tau=0.5)
    gq, gc = info_nce_grad(batch)
    assert np.max(np.abs(gq)) < 1e-12 and np.max(np.abs(gc)) < 1e-12


def _fd_check(q, c, tau, symmetric=False, h=1e-5):
    gq, gc = info_nce_grad(ContrastiveBatch(q, c, tau), symmetric=symmetric)
    worst = 0.0
    for mat, grad in ((q, gq), (c, gc)):
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                orig = mat[i, j]
                mat[i, j] = orig + h
                lp = info_nce(ContrastiveBatch(q, c, tau), symmetric=symmetric)
                mat[i, j] = orig - h
                lm = info_nce(ContrastiveBatch(q, c, tau), symmetric=symmetric)
                mat[i, j] = orig
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(grad[i, j] - fd) / max(abs(grad[i, j]), abs(fd), 1e-8))
    return worst


def test_grad_matches_finite_differences():
    # frozen oracle: central differences on the raw (pre-normalization) inputs
    rng = np.random.default_rng(3)
    q = rng.normal(size=(4, 16)) * 1.7
    c = rng.normal(size=(4, 16)) * 0.6
    assert _fd_check(q, c, tau=0.07) <= 1e-6


def test_grad_matches_finite_differences_symmetric():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(3, 8))
    c = rng.normal(size=(3, 8))
    assert _fd_check(q, c, tau=0.3, symmetric=True) <= 1e-6


def test_grad_flattens_with_large_tau():
    rng = np.random.default_rng(7)
    q = rng.normal(size=(5, 12))
    c = rng.normal(size=(5, 12))
    sharp = np.linalg.norm(np.concatenate(info_nce_grad(ContrastiveBatch(q, c, 0.1))))
    flat = np.linalg.norm(np.concatenate(info_nce_grad(ContrastiveBatch(q, c, 10.0))))
    assert flat < sharp


def test_symmetric_flag_changes_loss_in_general():
    rng = np.random.default_rng(8)
    q = rng.normal(size=(4, 6))
    c = rng.normal(size=(4, 6))
    batch = ContrastiveBatch(q, c, tau=0.2)
    assert info_nce(batch) != info_nce(batch, symmetric=True)
