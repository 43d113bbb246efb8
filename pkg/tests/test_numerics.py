import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from t2ic.numerics import (
    NonFiniteError,
    NumericsError,
    apply_precision,
    cosine_sim,
    gaussian_stats,
    grad_check,
    log_softmax,
    matrix_sqrt_psd,
    precision_dtype,
)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


@pytest.mark.parametrize(
    "a, b, expected",
    [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 1], [1, 0], 0.70710678)],
)
def test_cosine_examples(a, b, expected):
    assert float(cosine_sim(t(a), t(b))) == pytest.approx(expected, abs=1e-8)


def test_cosine_zero_norm_raises():
    with pytest.raises(NumericsError, match="zero-norm"):
        cosine_sim(t([0.0, 0.0]), t([1.0, 0.0]))


def test_cosine_length_mismatch():
    with pytest.raises(NumericsError):
        cosine_sim(t([1.0, 0.0]), t([1.0, 0.0, 0.0]))


vectors = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: math.sqrt(sum(x * x for x in v)) > 1e-3
)


@given(vectors, vectors, st.floats(1e-3, 1e3))
def test_cosine_positive_scale_invariance(a, b, alpha):
    a, b = t(a), t(b)
    c = float(cosine_sim(a, b))
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert float(cosine_sim(alpha * a, b)) == pytest.approx(c, abs=1e-6)


@pytest.mark.parametrize(
    "x, expected",
    [
        ([0.0, 0.0], [-math.log(2), -math.log(2)]),
        ([1000.0, 1000.0], [-math.log(2), -math.log(2)]),
        ([1.0, 0.0], [-0.31326, -1.31326]),
    ],
)
def test_log_softmax_examples(x, expected):
    out = log_softmax(t(x))
    assert out.tolist() == pytest.approx(expected, abs=1e-5)
    assert float(out.exp().sum()) == pytest.approx(1.0, abs=1e-6)


def test_log_softmax_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        log_softmax(t([1.0, float("nan")]))


@given(st.lists(st.floats(-500, 500, allow_nan=False), min_size=1, max_size=20))
def test_log_softmax_normalises(x):
    assert float(log_softmax(t(x)).exp().sum()) == pytest.approx(1.0, abs=1e-6)


def test_gaussian_stats_examples():
    s = gaussian_stats(t([[1, 0], [1, 0]]))
    assert s.mean.tolist() == [1.0, 0.0]
    assert torch.count_nonzero(s.cov) == 0
    s = gaussian_stats(t([[0], [2]]))
    assert s.mean.tolist() == [1.0]
    assert s.cov.tolist() == [[2.0]]
    assert s.count == 2


def test_gaussian_stats_monte_carlo():
    x = torch.randn(10_000, 3, generator=torch.Generator().manual_seed(0), dtype=D)
    s = gaussian_stats(x)
    assert float(s.mean.abs().max()) < 0.1
    assert float((s.cov - torch.eye(3, dtype=D)).abs().max()) < 0.1


def test_gaussian_stats_needs_two_rows():
    with pytest.raises(NumericsError, match="at least 2"):
        gaussian_stats(t([[1.0, 2.0]]))


@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=30)
def test_gaussian_stats_cov_exactly_symmetric(n, d, seed):
    x = torch.randn(n, d, generator=torch.Generator().manual_seed(seed), dtype=D)
    cov = gaussian_stats(x).cov
    assert torch.equal(cov, cov.T)


def test_matrix_sqrt_examples():
    eye = torch.eye(3, dtype=D)
    assert torch.allclose(matrix_sqrt_psd(eye), eye)
    assert torch.allclose(matrix_sqrt_psd(torch.diag(t([4.0, 9.0]))), torch.diag(t([2.0, 3.0])))


def test_matrix_sqrt_random_gram():
    a = torch.randn(8, 8, generator=torch.Generator().manual_seed(1), dtype=D)
    m = a.T @ a
    s = matrix_sqrt_psd(m)
    assert float(torch.linalg.norm(s @ s - m) / torch.linalg.norm(m)) <= 1e-5
    assert torch.equal(s, s.T)
    assert float(torch.linalg.eigvalsh(s).min()) >= -1e-10


@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
@settings(max_examples=30)
def test_matrix_sqrt_recovers_psd_root(d, seed):
    g = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(d, d, generator=g, dtype=D))
    evals = torch.rand(d, generator=g, dtype=D) * 3
    s = q @ torch.diag(evals) @ q.T
    s = 0.5 * (s + s.T)
    r = matrix_sqrt_psd(s @ s)
    assert float(torch.linalg.norm(r - s) / max(float(torch.linalg.norm(s)), 1e-12)) <= 1e-5


def test_matrix_sqrt_not_psd():
    with pytest.raises(NumericsError, match="not PSD"):
        matrix_sqrt_psd(torch.diag(t([1.0, -1e-3])))


def test_matrix_sqrt_clips_tiny_negative():
    s = matrix_sqrt_psd(torch.diag(t([4.0, -1e-10])))
    assert s.tolist() == [[2.0, 0.0], [0.0, 0.0]]


def test_matrix_sqrt_not_symmetric():
    with pytest.raises(NumericsError, match="not symmetric"):
        matrix_sqrt_psd(t([[1.0, 1.0], [0.0, 1.0]]))


def test_grad_check_quadratic():
    x = torch.randn(6, generator=torch.Generator().manual_seed(2), dtype=D)
    assert grad_check(lambda v: (v * v).sum(), x) <= 1e-7


def test_grad_check_constant():
    x = torch.randn(4, dtype=D)
    assert grad_check(lambda v: torch.tensor(3.0, dtype=D) + 0 * v.sum(), x) == 0.0


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    x = torch.randn(5, generator=torch.Generator().manual_seed(3), dtype=D)
    assert grad_check(Wrong.apply, x) > 0.1


def test_grad_check_nonfinite_probe():
    with pytest.raises(NonFiniteError):
        grad_check(lambda v: torch.log(v).sum(), t([1e-6, 1.0]), eps=1e-5)


def test_grad_check_subset_is_seeded():
    x = torch.randn(50, generator=torch.Generator().manual_seed(4), dtype=D)
    f = lambda v: (v.sin() * v).sum()  # noqa: E731
    assert grad_check(f, x, max_coords=5, seed=1) == grad_check(f, x, max_coords=5, seed=1)


def test_precision_env(monkeypatch):
    monkeypatch.setenv("T2IC_PRECISION", "f64")
    assert precision_dtype() is torch.float64
    monkeypatch.setenv("T2IC_PRECISION", "bogus")
    with pytest.raises(NumericsError):
        precision_dtype()
    monkeypatch.setenv("T2IC_PRECISION", "f32")
    assert apply_precision() is torch.float32
