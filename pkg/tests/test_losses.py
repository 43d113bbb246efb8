import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cross_entropy_literal, nt_xent_literal
from t2ic.losses import (
    TYPICAL_SSACN,
    TYPICAL_STYLE,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    f2f_loss,
    f2r_loss,
    interleave,
    nt_xent,
    recaption_loss,
    total_loss,
)
from t2ic.numerics import NonFiniteError, NumericsError, grad_check

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_nt_xent_single_pair_is_zero():
    for tau in (0.1, 0.5, 2.0):
        assert float(nt_xent(rand(2, 5), tau)) == 0.0


def test_nt_xent_hand_example():
    u = torch.tensor([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=D)
    value = float(nt_xent(u, 1.0))
    assert value == pytest.approx(nt_xent_literal(u.tolist(), 1.0), abs=1e-12)
    assert value == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert value == pytest.approx(0.55144, abs=5e-6)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_nt_xent_matches_literal(n):
    for seed in range(10):
        u = rand(2 * n, 6, seed=seed)
        assert float(nt_xent(u, 0.5)) == pytest.approx(nt_xent_literal(u.tolist(), 0.5), abs=1e-12)


def test_nt_xent_errors():
    with pytest.raises(ValueError):
        nt_xent(rand(4, 3), 0.0)
    with pytest.raises(ValueError):
        nt_xent(rand(3, 3), 0.5)
    u = rand(4, 3)
    u[2] = 0
    with pytest.raises(NumericsError):
        nt_xent(u, 0.5)


@given(st.integers(1, 5), st.integers(0, 10_000), st.floats(0.05, 5.0))
@settings(max_examples=40, deadline=None)
def test_nt_xent_non_negative(n, seed, tau):
    assert float(nt_xent(rand(2 * n, 4, seed=seed), tau)) >= 0.0


@given(st.integers(1, 5), st.integers(0, 10_000), st.floats(1e-3, 1e3))
@settings(max_examples=40, deadline=None)
def test_nt_xent_scale_invariance(n, seed, alpha):
    u = rand(2 * n, 4, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    i = int(torch.randint(0, 2 * n, (1,), generator=g))
    v = u.clone()
    v[i] *= alpha
    assert float(nt_xent(v, 0.5)) == pytest.approx(float(nt_xent(u, 0.5)), abs=1e-9)


@given(st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_nt_xent_pair_preserving_permutation(n, seed):
    u = rand(2 * n, 4, seed=seed)
    g = torch.Generator().manual_seed(seed)
    pair_order = torch.randperm(n, generator=g)
    flips = torch.randint(0, 2, (n,), generator=g)
    rows = []
    for k, f in zip(pair_order.tolist(), flips.tolist()):
        rows += [2 * k + f, 2 * k + 1 - f]
    assert float(nt_xent(u[rows], 0.5)) == pytest.approx(float(nt_xent(u, 0.5)), abs=1e-6)


def test_nt_xent_decreases_with_positive_similarity():
    # only the (0, 1) similarity changes as u1 rotates towards u0 inside a
    # plane orthogonal to every other embedding
    base = torch.zeros(4, 6, dtype=D)
    base[2, 2] = base[3, 3] = 1.0
    base[2, 4] = base[3, 5] = 0.3

    def loss_at(angle):
        u = base.clone()
        u[0, 0] = 1.0
        u[1, 0], u[1, 1] = math.cos(angle), math.sin(angle)
        return float(nt_xent(u, 0.5))

    for angle in (0.3, 1.0, 2.0):
        h = 1e-4
        slope = (loss_at(angle - h) - loss_at(angle + h)) / (2 * h)
        assert slope < 0  # shrinking the angle (raising the cosine) lowers the loss


def test_interleave_order():
    a = torch.tensor([[1.0], [2.0]])
    b = torch.tensor([[10.0], [20.0]])
    assert interleave(a, b).flatten().tolist() == [1, 10, 2, 20]
    with pytest.raises(ValueError):
        interleave(a, b[:1])


def test_f2r_f2f_examples():
    x = rand(4, 8)
    assert float(f2r_loss(x[:1], x[1:2])) == 0.0
    assert float(f2f_loss(x[:1], x[1:2])) == 0.0
    a = torch.tensor([[1, 0], [0, 1]], dtype=D)
    assert float(f2f_loss(a, a, 1.0)) == pytest.approx(nt_xent_literal([[1, 0], [1, 0], [0, 1], [0, 1]], 1.0), abs=1e-12)
    with pytest.raises(ValueError):
        f2r_loss(x[:2], x[:3])
    with pytest.raises(ValueError):
        f2f_loss(x[:2], x[:3])


def test_f2r_at_equality():
    # every positive cosine is 1; the loss is then set by the reals alone
    reals = rand(4, 8, seed=5)
    got = float(f2r_loss(reals, reals, 0.5))
    assert got == pytest.approx(nt_xent_literal(interleave(reals, reals).tolist(), 0.5), abs=1e-12)
    assert float(f2f_loss(reals, reals, 0.5)) == got
    assert float(f2r_loss(reals * 3.0, reals, 0.5)) == pytest.approx(got, abs=1e-12)


def test_recaption_uniform():
    logits = torch.zeros(5, 40, dtype=D)
    caption = torch.tensor([4, 5, 6, 7, 8])
    assert float(recaption_loss(logits, caption)) == pytest.approx(math.log(40), abs=1e-12)
    assert math.log(40) == pytest.approx(3.68888, abs=1e-5)


def test_recaption_saturated():
    caption = torch.tensor([4, 9, 27, 37])
    logits = torch.zeros(4, 40, dtype=D)
    logits[torch.arange(4), caption] = 100.0
    assert float(recaption_loss(logits, caption)) == pytest.approx(0.0, abs=1e-12)


def test_recaption_two_token_example():
    logits = torch.zeros(2, 40, dtype=D)
    logits[0, 0] = 1.0
    logits[1, 1] = 1.0
    caption = torch.tensor([0, 1])
    got = float(recaption_loss(logits, caption, lengths=torch.tensor(2)))
    row = [1.0] + [0.0] * 39
    expected = 0.5 * (cross_entropy_literal(row, 0) + cross_entropy_literal(row, 0))
    assert got == pytest.approx(expected, abs=1e-12)


def test_recaption_ignores_padding():
    logits = rand(6, 40)
    caption = torch.tensor([4, 5, 6, 0, 0, 0])
    expected = sum(cross_entropy_literal(logits[i].tolist(), int(caption[i])) for i in range(3)) / 3
    assert float(recaption_loss(logits, caption)) == pytest.approx(expected, abs=1e-12)
    assert float(recaption_loss(logits, caption, lengths=torch.tensor(3))) == pytest.approx(expected, abs=1e-12)


def test_recaption_all_padding():
    with pytest.raises(ValueError):
        recaption_loss(torch.zeros(3, 40), torch.zeros(3, dtype=torch.long))


def test_adversarial_examples():
    two = torch.full((3,), 2.0)
    assert float(adversarial_d_loss(two, -two, -two)) == 0.0
    z = torch.zeros(3)
    assert float(adversarial_g_loss(z)) == 0.0
    assert float(adversarial_d_loss(z, z, z)) == 2.0


def test_total_loss_examples():
    assert total_loss(1.3, 2, 3, 4, 5, LossWeights(0, 0, 0, 0)) == 1.3
    assert total_loss(1.0, 1.0, 1.0, 1.0, 1.0, TYPICAL_SSACN) == pytest.approx(2.45, abs=1e-12)
    assert total_loss(1.0, 1.0, 1.0, 1.0, 1.0, TYPICAL_STYLE) == pytest.approx(7.40, abs=1e-12)


def test_total_loss_linear_in_lambda2():
    w1 = LossWeights(0.05, 0.2, 0.2, 1.0)
    w2 = LossWeights(0.05, 0.4, 0.2, 1.0)
    parts = (0.7, 1.1, 2.3, 0.9, 3.1)
    zero = total_loss(*parts, LossWeights(0.05, 0.0, 0.2, 1.0))
    c1 = total_loss(*parts, w1) - zero
    c2 = total_loss(*parts, w2) - zero
    assert c2 == pytest.approx(2 * c1, rel=1e-12)


def test_total_loss_names_bad_component():
    with pytest.raises(NonFiniteError, match="L_CF"):
        total_loss(1.0, 1.0, 1.0, float("nan"), 1.0, TYPICAL_SSACN)
    with pytest.raises(NonFiniteError, match="L_DAMSM"):
        total_loss(torch.tensor(1.0), torch.tensor(float("inf")), 1.0, 1.0, 1.0, TYPICAL_SSACN)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0)
    with pytest.raises(ValueError):
        LossWeights(lambda3=-0.1)


def test_gradients():
    tau = 0.5
    assert grad_check(lambda u: nt_xent(u, tau), rand(8, 5, seed=1)) <= 1e-4
    assert grad_check(lambda a, b: f2r_loss(a, b, tau), [rand(3, 5, seed=2), rand(3, 5, seed=3)]) <= 1e-4
    assert grad_check(lambda a, b: f2f_loss(a, b, tau), [rand(3, 5, seed=4), rand(3, 5, seed=5)]) <= 1e-4
    cap = torch.tensor([[4, 5, 6, 0], [7, 8, 9, 10]])
    assert grad_check(lambda lg: recaption_loss(lg, cap), rand(2, 4, 40, seed=6)) <= 1e-4
    # keep hinge arguments away from the kinks
    s = torch.tensor([0.3, -0.4, 2.5, -1.7], dtype=D)
    assert grad_check(adversarial_g_loss, s) <= 1e-4
    assert grad_check(adversarial_d_loss, [s, s.flip(0), s * 0.5]) <= 1e-4
