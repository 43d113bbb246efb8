import math
import warnings

import pytest
import torch

from oracles import inception_score_literal
from t2ic import metrics as M
from t2ic.numerics import NonFiniteError

D = torch.float64


def normal(n, d, seed, mean=0.0, std=1.0):
    return torch.randn(n, d, generator=torch.Generator().manual_seed(seed), dtype=D) * std + mean


def test_fid_identical_sets():
    a = normal(500, 4, 0)
    assert M.fid(a, a) == pytest.approx(0.0, abs=1e-6)


def test_fid_symmetric_and_non_negative():
    a, b = normal(400, 3, 1), normal(300, 3, 2, std=2.0)
    assert M.fid(a, b) == pytest.approx(M.fid(b, a), abs=1e-6)
    assert M.fid(a, b) >= 0


def test_frechet_closed_form_values():
    # equal covariances: squared mean distance only
    assert M.frechet_distance([0.0], [[1.0]], [3.0], [[1.0]]) == pytest.approx(9.0, abs=1e-12)
    # diagonal covariances: sum of squared std differences
    assert M.frechet_distance([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-12)
    cov1, cov2 = torch.diag(torch.tensor([1.0, 4.0, 9.0], dtype=D)), torch.diag(torch.tensor([4.0, 1.0, 9.0], dtype=D))
    assert M.frechet_distance([0, 0, 0], cov1, [1, 0, 0], cov2) == pytest.approx(1 + 1 + 1, abs=1e-12)


@pytest.mark.parametrize(
    "mean2, std2, analytic",
    [(3.0, 1.0, 9.0), (0.0, 2.0, 1.0)],
)
def test_fid_1d_monte_carlo(mean2, std2, analytic):
    a = normal(50_000, 1, 3)
    b = normal(50_000, 1, 4, mean=mean2, std=std2)
    assert abs(M.fid(a, b) - analytic) / analytic <= 0.05


def test_fid_converges_with_samples():
    err = {}
    for n in (1_000, 50_000):
        errs = []
        for seed in range(3):
            a, b = normal(n, 1, 10 + seed), normal(n, 1, 20 + seed, mean=3.0)
            errs.append(abs(M.fid(a, b) - 9.0))
        err[n] = sum(errs) / len(errs)
    assert err[50_000] < err[1_000]


def test_fid_warns_on_small_samples():
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        M.fid(normal(5, 8, 0), normal(5, 8, 1))


def test_fid_nonfinite():
    a = normal(10, 2, 0)
    b = a.clone()
    b[0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        M.fid(a, b)


def test_literal_variant_is_not_a_distance():
    cov = torch.diag(torch.tensor([1.0, 4.0], dtype=D))
    mu = torch.zeros(2, dtype=D)
    # Tr(2S - 2S^2) with S = diag(1, 4): 2*5 - 2*17 = -24, so the literal form gives +24 for identical inputs
    assert M.fid_literal_variant(mu, cov, mu, cov) == pytest.approx(24.0, abs=1e-12)
    assert M.frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-12)
    small = torch.diag(torch.tensor([0.1, 0.1], dtype=D))
    assert M.fid_literal_variant(mu, small, mu, small) < 0


def test_inception_score_uniform():
    mean, std = M.inception_score(torch.full((40, 24), 1 / 24, dtype=D))
    assert mean == pytest.approx(1.0, abs=1e-6) and std == pytest.approx(0.0, abs=1e-6)


def test_inception_score_balanced_one_hot():
    probs = torch.eye(24, dtype=D).repeat(4, 1)
    mean, std = M.inception_score(probs)
    assert mean == pytest.approx(24.0, abs=1e-6)


def test_inception_score_two_rows_literal():
    rows = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]
    mean, std = M.inception_score(torch.tensor(rows, dtype=D), splits=1)
    assert mean == pytest.approx(inception_score_literal(rows), abs=1e-12)
    assert std == 0.0


def test_inception_score_folds_are_contiguous():
    a = torch.eye(4, dtype=D)
    b = torch.full((4, 4), 0.25, dtype=D)
    mean, std = M.inception_score(torch.cat([a, b]), splits=2)
    assert mean == pytest.approx((4.0 + 1.0) / 2, abs=1e-12)
    assert std == pytest.approx(1.5, abs=1e-12)


def test_inception_score_bounds_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        p = torch.softmax(torch.randn(64, 24, generator=g, dtype=D) * 3, dim=1)
        mean, _ = M.inception_score(p)
        assert 1 - 1e-6 <= mean <= 24 + 1e-6


def test_inception_score_rejects_unnormalised():
    with pytest.raises(ValueError):
        M.inception_score(torch.full((8, 24), 0.05, dtype=D))


def r_setup(n, seed, d=16):
    g = torch.Generator().manual_seed(seed)
    pool = torch.randn(n, d, generator=g, dtype=D)
    return pool, torch.arange(n)


def test_r_precision_perfect():
    d = 200
    pool = torch.eye(d, dtype=D)
    gt = pool[:20]
    assert M.r_precision(gt, gt, pool, torch.arange(20), torch.arange(d), seed=0) == 1.0


def test_r_precision_second_place_is_miss():
    # the ground truth is second to one distractor that is an exact copy of the image vector
    d = 120
    img = torch.eye(d, dtype=D)[:5]
    gt = img + 0.5 * torch.eye(d, dtype=D)[5:10]
    pool = torch.cat([img, torch.eye(d, dtype=D)[10:110]])
    owners = torch.arange(len(pool)) + 1000
    # n_distractors equal to the pool size forces the copy into every candidate set
    got = M.r_precision(img, gt, pool, torch.arange(5), owners, seed=0, n_distractors=len(pool))
    assert got == 0.0


def test_r_precision_ties_are_misses():
    img = torch.eye(4, dtype=D)[:1]
    pool = torch.cat([img, torch.eye(4, dtype=D)[1:]])
    got = M.r_precision(img, img, pool, torch.tensor([9]), torch.arange(4), seed=0, n_distractors=4)
    assert got == 0.0


def test_r_precision_chance_level():
    rates = []
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        img, gt = torch.randn(1000, 32, generator=g, dtype=D), torch.randn(1000, 32, generator=g, dtype=D)
        rates.append(M.r_precision(img, gt, gt, torch.arange(1000), torch.arange(1000), seed=seed))
    assert abs(sum(rates) / 5 - 0.01) <= 0.01


def test_r_precision_excludes_same_scene_and_identical_tokens():
    # distractor pool: 99 copies of the ground-truth text from the same scene plus
    # 99 valid ones; the copies must never be drawn
    d = 8
    gt = torch.zeros(1, d, dtype=D)
    gt[0, 0] = 1
    img = gt.clone()
    pool = torch.cat([gt.repeat(99, 1), -gt.repeat(99, 1)])
    owners = torch.cat([torch.zeros(99, dtype=torch.long), torch.arange(1, 100)])
    assert M.r_precision(img, gt, pool, torch.tensor([0]), owners, seed=0) == 1.0
    tokens = torch.cat([torch.ones(99, 3, dtype=torch.long), torch.ones(99, 3, dtype=torch.long)])
    tokens[99:, 0] = 2
    owners_all_other = torch.arange(1, 199)
    got = M.r_precision(img, gt, pool, torch.tensor([0]), owners_all_other, seed=0,
                        query_tokens=torch.ones(1, 3, dtype=torch.long), pool_tokens=tokens)
    assert got == 1.0


def test_r_precision_small_pool():
    pool, owners = r_setup(50, 0)
    with pytest.raises(ValueError, match="distractor pool"):
        M.r_precision(pool[:2], pool[:2], pool, owners[:2], owners, seed=0)


def test_r_precision_deterministic():
    g = torch.Generator().manual_seed(7)
    img, gt = torch.randn(300, 8, generator=g, dtype=D), torch.randn(300, 8, generator=g, dtype=D)
    img = img + 2 * gt
    a = M.r_precision(img, gt, gt, torch.arange(300), torch.arange(300), seed=3)
    b = M.r_precision(img, gt, gt, torch.arange(300), torch.arange(300), seed=3)
    assert a == b and 0 < a < 1


def test_classifier_rows_sum_to_one():
    torch.manual_seed(0)
    clf = M.Classifier().eval()
    p = clf.probs(torch.rand(10, 3, 32, 32) * 2 - 1)
    assert p.shape == (10, 24)
    assert float((p.sum(1) - 1).abs().max()) <= 1e-6


def test_uncertified_classifier_refused(tmp_path):
    from t2ic import checkpoint

    clf = M.Classifier()
    path = tmp_path / "c.t2ic"
    checkpoint.save(path, checkpoint.module_tensors(clf, "cls."),
                    {"kind": "classifier", "eval_accuracy": "0.5", "certified": "false", "seed": "0"})
    with pytest.raises(M.UncertifiedClassifierError, match="0.5"):
        M.load_classifier(path)


def test_frechet_clips_tiny_negative():
    mu = torch.zeros(2, dtype=D)
    cov = torch.tensor([[1.0, 0.999999999], [0.999999999, 1.0]], dtype=D)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert M.frechet_distance(mu, cov, mu, cov) >= 0.0
    assert not math.isnan(M.frechet_distance(mu, cov, mu, cov))
