import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgaa.decompose import (
    FactorPair,
    ScaleVector,
    afm_decompose,
    energy_profile,
    joint_qk_decompose,
    output_covariance,
    pca_decompose,
    plain_svd_decompose,
    prepare_matrix,
    rank_for_ratio,
    split_joint,
    stack_qk,
    weighted_svd_decompose,
)
from mgaa.errors import (
    AllZeroSpectrumError,
    DimensionMismatchError,
    InsufficientTokensError,
    RankTooLargeError,
    RatioOutOfRangeError,
    ShapeMismatchError,
)
from oracles import cumulative_energy, jacobi_evd


def instance(d_out, d_in, n, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d_out, d_in))
    x = rng.standard_normal((d_in, n)) * rng.uniform(0.2, 3.0, size=(d_in, 1))
    return w, x


def test_rank_for_ratio_values():
    assert rank_for_ratio(4096, 4096, 0.5) == 1024
    assert rank_for_ratio(64, 64, 0.0) == 32
    assert rank_for_ratio(64, 172, 0.5) == 23
    # 1 - 0.3 is not exact in binary, the result must still be the floor of the real value
    assert rank_for_ratio(10, 10, 0.3) == 3
    assert rank_for_ratio(2, 2, 0.99) == 1


def test_rank_for_ratio_errors():
    with pytest.raises(RatioOutOfRangeError):
        rank_for_ratio(4, 4, 1.0)
    with pytest.raises(RatioOutOfRangeError):
        rank_for_ratio(4, 4, -0.1)
    with pytest.raises(DimensionMismatchError):
        rank_for_ratio(0, 4, 0.5)


@settings(max_examples=60, deadline=None)
@given(d_in=st.integers(1, 300), d_out=st.integers(1, 300), p=st.floats(0.0, 0.999))
def test_rank_for_ratio_budget(d_in, d_out, p):
    r = rank_for_ratio(d_in, d_out, p)
    assert 1 <= r <= min(d_in, d_out)
    if r > 1 and r < min(d_in, d_out):
        assert r * (d_in + d_out) <= d_in * d_out * (1 - p) + 1e-6


def test_energy_profile():
    prof = energy_profile([1.0, 3.0, 0.0, 4.0])
    np.testing.assert_allclose(prof.energies, [4.0, 3.0, 1.0, 0.0])
    np.testing.assert_allclose(prof.cumulative, [0.5, 0.875, 1.0, 1.0])
    assert prof.retained(2) == 0.875
    assert prof.retained(0) == 0.0
    assert prof.tail(1) == 4.0
    with pytest.raises(AllZeroSpectrumError):
        energy_profile([0.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_pca_loss_identity(seed):
    w, x = instance(12, 10, 60, seed)
    y = w @ x
    for r in (1, 3, 6, 10):
        pair, prof, predicted = pca_decompose(w, y @ y.T, r)
        measured = np.sum((y - pair.dense() @ x) ** 2)
        assert measured == pytest.approx(predicted, rel=1e-8, abs=1e-9 * np.sum(y * y))
        vals, _ = jacobi_evd(y @ y.T)
        assert predicted == pytest.approx(np.sum(vals[r:]), rel=1e-8, abs=1e-9 * vals[0])
        np.testing.assert_allclose(prof.cumulative, cumulative_energy(vals), atol=1e-10)


def test_pca_full_rank_is_exact():
    w, x = instance(8, 8, 30, 1)
    y = w @ x
    pair, _, loss = pca_decompose(w, y @ y.T, 8)
    np.testing.assert_allclose(pair.dense(), w, atol=1e-10)
    assert loss == pytest.approx(0.0, abs=1e-8)


def test_pca_basis_orthonormal():
    w, x = instance(9, 7, 40, 2)
    y = w @ x
    pair, _, _ = pca_decompose(w, y @ y.T, 5)
    np.testing.assert_allclose(pair.l.T @ pair.l, np.eye(5), atol=1e-12)


def test_pca_errors():
    w, x = instance(6, 5, 20, 0)
    g = (w @ x) @ (w @ x).T
    with pytest.raises(RankTooLargeError):
        pca_decompose(w, g, 6)
    with pytest.raises(RankTooLargeError):
        pca_decompose(w, g, 0)
    with pytest.raises(DimensionMismatchError):
        pca_decompose(w, np.eye(5), 2)
    with pytest.raises(AllZeroSpectrumError):
        pca_decompose(w, np.zeros((6, 6)), 2)


def test_weighted_svd_unit_scales_equals_plain():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((10, 7))
    for r in (1, 4, 7):
        pw, prof_w = weighted_svd_decompose(w, np.ones(7), r)
        pp, prof_p = plain_svd_decompose(w, r)
        np.testing.assert_allclose(pw.l, pp.l, atol=1e-8)
        np.testing.assert_allclose(pw.r_mat, pp.r_mat, atol=1e-8)
        np.testing.assert_allclose(prof_w.cumulative, prof_p.cumulative, atol=1e-12)


def test_weighted_svd_scaled_loss():
    # truncation error measured in the scaled space equals the discarded singular energy
    rng = np.random.default_rng(1)
    w = rng.standard_normal((8, 6))
    s = rng.uniform(0.1, 2.0, 6)
    for r in (1, 3, 5):
        pair, prof = weighted_svd_decompose(w, s, r)
        err = np.sum(((w - pair.dense()) * s) ** 2)
        assert err == pytest.approx(prof.tail(r), rel=1e-9, abs=1e-12)


def test_scale_vector_clamps():
    sv = ScaleVector([0.0, 1e-12, 2.0])
    assert sv.clamped == 2
    assert sv.scales.min() == 1e-8
    pair, _ = weighted_svd_decompose(np.ones((3, 3)), sv, 1)
    assert np.all(np.isfinite(pair.r_mat))


def test_afm_zero_mean_equals_pca():
    w, x = instance(9, 6, 80, 3)
    y = w @ x
    n = y.shape[1]
    g = y @ y.T
    for r in (1, 3, 6):
        pa, _ = afm_decompose(w, g, np.zeros(9), n, r)
        pp, _, _ = pca_decompose(w, g, r)
        assert pa.bias_correction is None
        np.testing.assert_allclose(pa.l, pp.l, atol=1e-8)
        np.testing.assert_allclose(pa.r_mat, pp.r_mat, atol=1e-8)


def test_afm_bias_restores_mean():
    w, x = instance(8, 5, 200, 4)
    x += 3.0
    y = w @ x
    n = y.shape[1]
    mu = y.mean(axis=1)
    pair, prof = afm_decompose(w, y @ y.T, mu, n, 2)
    approx = pair.dense() @ x + pair.bias_correction[:, None]
    np.testing.assert_allclose(approx.mean(axis=1), mu, atol=1e-9)
    # loss equals n times the discarded covariance eigenvalues
    vals, _ = jacobi_evd(output_covariance(y @ y.T, mu, n))
    assert np.sum((y - approx) ** 2) == pytest.approx(n * np.sum(vals[2:]), rel=1e-8)


def test_afm_needs_two_tokens():
    with pytest.raises(InsufficientTokensError):
        afm_decompose(np.eye(3), np.eye(3), np.zeros(3), 1, 1)


def test_joint_qk_full_rank_exact():
    rng = np.random.default_rng(5)
    d = 6
    wq, wk = rng.standard_normal((d, d)), rng.standard_normal((d, d))
    pq, pk = joint_qk_decompose(wq, wk, r=d)
    assert pq.r_mat is pk.r_mat
    np.testing.assert_allclose(pq.dense(), wq, atol=1e-8)
    np.testing.assert_allclose(pk.dense(), wk, atol=1e-8)
    x = rng.standard_normal((d, 50))
    y = stack_qk(wq, wk) @ x
    pq, pk = joint_qk_decompose(wq, wk, y @ y.T, r=d)
    np.testing.assert_allclose(pq.dense(), wq, atol=1e-8)
    np.testing.assert_allclose(pk.dense(), wk, atol=1e-8)


def test_joint_qk_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        stack_qk(np.ones((3, 3)), np.ones((2, 3)))


def test_factor_pair_validation_and_apply():
    rng = np.random.default_rng(0)
    l, r = rng.standard_normal((5, 2)), rng.standard_normal((2, 4))
    pair = FactorPair(l, r, 2, bias_correction=np.arange(5.0))
    assert pair.param_count == 2 * 9 + 5
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(pair.apply_rows(x), x @ (l @ r).T + np.arange(5.0))
    with pytest.raises(DimensionMismatchError):
        FactorPair(l, r, 3)
    big_l, big_r = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    with pytest.raises(RankTooLargeError):
        FactorPair(big_l, big_r, 4)


def test_split_joint_shares_r():
    pair = FactorPair(np.ones((6, 2)), np.ones((2, 3)), 2)
    a, b = split_joint(pair, 3)
    assert a.r_mat is b.r_mat
    assert a.d_out == b.d_out == 3


@pytest.mark.parametrize("method", ["pca", "afm", "svd", "asvd", "awsvd"])
def test_prepared_matches_direct(method):
    w, x = instance(7, 5, 40, 6)
    y = w @ x
    n = y.shape[1]
    kw = {}
    if method in ("pca", "afm"):
        kw = dict(gram_y=y @ y.T, mean_y=y.mean(axis=1), token_count=n)
    elif method == "asvd":
        kw = dict(scales=ScaleVector(np.abs(x).mean(axis=1), "mean_abs"))
    elif method == "awsvd":
        kw = dict(scales=ScaleVector(np.sqrt((x * x).sum(axis=1)), "l2_norm"))
    prep = prepare_matrix(method, w, **kw)
    for r in (1, 3, 5):
        pair = prep.factor(r)
        assert pair.rank == r
        if method == "pca":
            direct, _, _ = pca_decompose(w, y @ y.T, r)
            np.testing.assert_allclose(pair.dense(), direct.dense(), atol=1e-12)
            assert prep.predicted_loss(r) == pytest.approx(np.sum((y - pair.dense() @ x) ** 2), rel=1e-8)
        if method == "afm":
            approx = pair.dense() @ x + (pair.bias_correction[:, None] if pair.bias_correction is not None else 0)
            assert prep.predicted_loss(r) == pytest.approx(np.sum((y - approx) ** 2), rel=1e-8)
