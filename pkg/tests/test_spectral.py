import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kappatune.errors import NonFiniteData, NotEligible, ZeroTensor
from kappatune.rng import make_rng
from kappatune.spectral import (
    condition_number,
    frobenius_norm,
    log_volume,
    numerical_rank,
    reshape_to_matrix,
    singular_values,
    spectral_summary,
)
from kappatune.tensor_io import TensorRecord

from oracles import gram_schmidt_orthogonal, gram_singular_values


def tensor(name, array):
    return TensorRecord.from_array(name, np.asarray(array, dtype=np.float64))


def test_reshape_2d_passthrough():
    t = tensor("w", np.arange(12).reshape(4, 3))
    m = reshape_to_matrix(t)
    assert m.shape == (4, 3)
    np.testing.assert_array_equal(m, np.arange(12).reshape(4, 3))


def test_reshape_conv_kernel():
    data = np.arange(8 * 27).reshape(8, 3, 3, 3)
    m = reshape_to_matrix(tensor("conv", data))
    assert m.shape == (8, 27)
    # row-major flatten of the trailing dims
    np.testing.assert_array_equal(m[2], data[2].reshape(-1))


def test_reshape_rejects_vector():
    with pytest.raises(NotEligible):
        reshape_to_matrix(tensor("b", np.ones(5)))


def test_sv_identity_and_diagonal():
    np.testing.assert_allclose(singular_values(np.eye(3)), [1, 1, 1])
    np.testing.assert_allclose(singular_values(np.diag([1.0, 4.0, 2.0])), [4, 2, 1])


def test_sv_against_jacobi_oracle_seed7():
    w = make_rng(7).uniform(-1, 1, (5, 3))
    ours = singular_values(w)
    ref = gram_singular_values(w).astype(np.float64)
    assert ours.shape == (3,)
    np.testing.assert_allclose(ours, ref, rtol=1e-8)


def test_sv_rejects_nan():
    w = np.ones((2, 2))
    w[1, 0] = np.nan
    with pytest.raises(NonFiniteData):
        singular_values(w)


def test_sv_descending_with_ties():
    s = singular_values(np.diag([2.0, 3.0, 2.0, 3.0]))
    assert list(s) == [3.0, 3.0, 2.0, 2.0]


@pytest.mark.parametrize(
    "sigmas,kappa,smin",
    [([10, 5, 1], 10.0, 1.0), ([1, 1], 1.0, 1.0), ([1, 1e-30], 1.0, 1.0)],
)
def test_condition_number_examples(sigmas, kappa, smin):
    k, s = condition_number(sigmas, 1e-12)
    assert k == kappa
    assert s == smin


def test_threshold_rank():
    assert numerical_rank([1, 1e-30], 1e-12) == 1
    assert numerical_rank([1, 0.5, 1e-13], 1e-12) == 2
    assert numerical_rank([1, 0.5, 1e-13], 1e-14) == 3


def test_zero_spectrum():
    with pytest.raises(ZeroTensor):
        condition_number([0.0, 0.0])
    with pytest.raises(ZeroTensor):
        log_volume([0.0])


def test_frobenius_examples():
    assert frobenius_norm([[3, 4]]) == 5.0
    assert frobenius_norm(np.eye(7)) == pytest.approx(math.sqrt(7), rel=1e-15)


def test_frobenius_matches_sigmas_seed3():
    w = make_rng(3).uniform(-1, 1, (6, 4))
    s = singular_values(w)
    assert frobenius_norm(w) == pytest.approx(math.sqrt(np.sum(s**2)), rel=1e-6)


@pytest.mark.parametrize(
    "sigmas,expected",
    [([1, 1, 1], 0.0), ([2, 0.5], 0.0), ([math.sqrt(2), math.sqrt(2)], 1.0)],
)
def test_log_volume_examples(sigmas, expected):
    value, terms = log_volume(sigmas)
    assert value == pytest.approx(expected, abs=1e-15)
    assert terms == len(sigmas)


def test_summary_identity():
    s = spectral_summary(tensor("w", np.eye(3)))
    assert s.kappa == pytest.approx(1.0)
    assert s.frobenius == pytest.approx(math.sqrt(3))
    assert s.log_volume == pytest.approx(0.0, abs=1e-15)
    assert s.numerical_rank == 3


def test_summary_diag():
    s = spectral_summary(tensor("w", np.diag([10.0, 1.0])))
    assert s.kappa == pytest.approx(10.0)
    assert s.frobenius == pytest.approx(math.sqrt(101))
    assert s.log_volume == pytest.approx(math.log2(10))
    assert s.sigma_max == s.sigmas[0]


def test_summary_zero_tensor_named():
    with pytest.raises(ZeroTensor) as info:
        spectral_summary(tensor("dead", np.zeros((4, 4))))
    assert info.value.name == "dead"
    assert "dead" in str(info.value)


def test_summary_json_fields():
    s = spectral_summary(tensor("w", make_rng(1).uniform(-1, 1, (80, 70))))
    row = json.loads(s.to_json())
    assert len(row["sigmas"]) == 64
    assert set(row) >= {"name", "m", "n", "sigmas", "sigma_max", "sigma_min_nonzero", "kappa",
                        "frobenius", "log_volume", "numerical_rank", "zero_tolerance_used"}
    assert row["m_gt_n"] is True


# -- properties ----------------------------------------------------------------

dims = st.integers(1, 8)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=dims, n=dims,
       c=st.sampled_from([1e-3, 0.5, 1.0, 7.0, 1e3]))
def test_scale_invariance(seed, m, n, c):
    w = make_rng(seed).uniform(-1, 1, (m, n))
    a = spectral_summary(tensor("w", w))
    # scale in float64 so the only difference is the factor itself
    s1 = singular_values(w.astype(np.float32).astype(np.float64))
    s2 = singular_values(c * w.astype(np.float32).astype(np.float64))
    k1, _ = condition_number(s1)
    k2, _ = condition_number(s2)
    assert k2 / k1 == pytest.approx(1.0, abs=1e-9)
    lv1, r1 = log_volume(s1)
    lv2, _ = log_volume(s2)
    assert lv2 == pytest.approx(lv1 + r1 * math.log2(c), abs=1e-9)
    assert a.kappa >= 1.0


def test_frobenius_identity_500():
    rng = make_rng(11)
    for _ in range(500):
        m, n = rng.integers(1, 9, 2)
        w = rng.uniform(-1, 1, (m, n))
        s = singular_values(w)
        assert frobenius_norm(w) ** 2 == pytest.approx(np.sum(s**2), rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=dims, n=dims)
def test_orthogonal_invariance(seed, m, n):
    rng = make_rng(seed)
    w = rng.uniform(-1, 1, (m, n))
    q = gram_schmidt_orthogonal(rng, m)
    np.testing.assert_allclose(singular_values(q @ w), singular_values(w), rtol=1e-7, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=dims, n=dims)
def test_summary_invariants(seed, m, n):
    s = spectral_summary(tensor("w", make_rng(seed).uniform(-1, 1, (m, n))))
    assert list(s.sigmas) == sorted(s.sigmas, reverse=True)
    assert len(s.sigmas) == min(m, n)
    assert s.kappa >= 1.0
    assert s.frobenius**2 == pytest.approx(sum(x * x for x in s.sigmas), rel=1e-6)
    assert s.numerical_rank == sum(x > s.zero_tolerance_used * s.sigma_max for x in s.sigmas)
