"""Toy-FID, Inception Score and R-precision, plus the small classifier that
stands in for Inception-v3 when scoring ShapesCap images.

All feature-based numbers here are computed in a locally trained feature
space, so they are only comparable within this package.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .numerics import NumericsError, check_finite, gaussian_stats, matrix_sqrt_psd
from .synthdata import NUM_CLASSES, Dataset

log = logging.getLogger(__name__)

IS_SPLITS = 4
MIN_CERTIFIED_ACCURACY = 0.80


@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    r_precision: float
    n_samples: int
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The product root is taken as sqrt(S1^(1/2) S2 S1^(1/2)), which is symmetric
    PSD and has the same trace.
    """
    mu1, mu2 = torch.as_tensor(mu1, dtype=torch.float64), torch.as_tensor(mu2, dtype=torch.float64)
    cov1, cov2 = torch.as_tensor(cov1, dtype=torch.float64), torch.as_tensor(cov2, dtype=torch.float64)
    root1 = matrix_sqrt_psd(cov1)
    middle = root1 @ cov2 @ root1
    cross = matrix_sqrt_psd(0.5 * (middle + middle.T))
    value = float(((mu1 - mu2) ** 2).sum() + torch.trace(cov1) + torch.trace(cov2) - 2 * torch.trace(cross))
    if value < 0:
        if value < -1e-6 * max(1.0, float(torch.trace(cov1) + torch.trace(cov2))):
            raise NumericsError(f"Frechet distance came out negative ({value:.3e})")
        warnings.warn(f"clipping tiny negative Frechet distance {value:.3e} to 0", RuntimeWarning)
        value = 0.0
    return value


def fid(real_feats: torch.Tensor, fake_feats: torch.Tensor) -> float:
    check_finite(real_feats, "real features")
    check_finite(fake_feats, "fake features")
    d = real_feats.shape[1]
    if min(real_feats.shape[0], fake_feats.shape[0]) < d + 1:
        warnings.warn(
            f"FID from {real_feats.shape[0]} / {fake_feats.shape[0]} samples in {d} dims; "
            "covariances are rank deficient", RuntimeWarning,
        )
    a, b = gaussian_stats(real_feats), gaussian_stats(fake_feats)
    return frechet_distance(a.mean, a.cov, b.mean, b.cov)


def fid_literal_variant(mu1, cov1, mu2, cov2) -> float:
    """|mu1 - mu2|^2 - Tr(S1 + S2 - 2 S1 S2): a sign-flipped, root-free form.

    Kept only to show that it is not a distance.
    """
    mu1, mu2 = torch.as_tensor(mu1, dtype=torch.float64), torch.as_tensor(mu2, dtype=torch.float64)
    cov1, cov2 = torch.as_tensor(cov1, dtype=torch.float64), torch.as_tensor(cov2, dtype=torch.float64)
    return float(((mu1 - mu2) ** 2).sum() - torch.trace(cov1 + cov2 - 2 * cov1 @ cov2))


def inception_score(probs: torch.Tensor, splits: int = IS_SPLITS) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per contiguous fold; returns (mean, std)."""
    p = torch.as_tensor(probs, dtype=torch.float64)
    if p.dim() != 2 or p.shape[0] < splits:
        raise ValueError(f"need an n x C probability matrix with n >= {splits}")
    if bool((p < 0).any()) or float((p.sum(1) - 1).abs().max()) > 1e-5:
        raise ValueError("every row must be a probability distribution (non-negative, sums to 1)")
    scores = []
    for fold in torch.tensor_split(p, splits):
        marginal = fold.mean(0, keepdim=True)
        logp = torch.where(fold > 0, torch.log(fold.clamp_min(1e-300)), torch.zeros_like(fold))
        logm = torch.where(fold > 0, torch.log(marginal.clamp_min(1e-300)).expand_as(fold), torch.zeros_like(fold))
        kl = (fold * (logp - logm)).sum(1)
        scores.append(math.exp(float(kl.mean())))
    t = torch.tensor(scores, dtype=torch.float64)
    return float(t.mean()), float(t.std(unbiased=False))


def r_precision(
    image_vecs: torch.Tensor,
    gt_text_vecs: torch.Tensor,
    pool_vecs: torch.Tensor,
    query_owner: torch.Tensor,
    pool_owner: torch.Tensor,
    seed: int,
    n_distractors: int = 99,
    query_tokens: torch.Tensor | None = None,
    pool_tokens: torch.Tensor | None = None,
) -> float:
    """Top-1 retrieval rate of the ground-truth caption among n_distractors + 1.

    Distractors for query i are drawn without replacement from pool entries
    whose owner scene differs from ``query_owner[i]`` and, when tokens are
    given, whose token sequence differs from the query caption. A hit needs
    the ground truth strictly more similar than every distractor.
    """
    n = image_vecs.shape[0]
    gen = torch.Generator().manual_seed(seed)
    img = F.normalize(image_vecs.double(), dim=1)
    gt = F.normalize(gt_text_vecs.double(), dim=1)
    pool = F.normalize(pool_vecs.double(), dim=1)
    hits = 0
    for i in range(n):
        allowed = pool_owner != query_owner[i]
        if query_tokens is not None:
            allowed &= (pool_tokens != query_tokens[i]).any(dim=1)
        candidates = torch.nonzero(allowed).squeeze(1)
        if len(candidates) < n_distractors:
            raise ValueError(f"distractor pool has {len(candidates)} entries, need {n_distractors}")
        pick = candidates[torch.randperm(len(candidates), generator=gen)[:n_distractors]]
        gt_sim = float(img[i] @ gt[i])
        distractor_sim = pool[pick] @ img[i]
        hits += int(gt_sim > float(distractor_sim.max()))
    return hits / n


class Classifier(nn.Module):
    def __init__(self, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, 1, 1), nn.BatchNorm2d(32), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, 1, 1), nn.BatchNorm2d(64), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, 1, 1), nn.BatchNorm2d(64), nn.ReLU(), nn.AdaptiveAvgPool2d(1),
            nn.Flatten(), nn.Linear(64, num_classes),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)

    @torch.no_grad()
    def probs(self, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
        return torch.cat([torch.softmax(self(images[s : s + chunk]), dim=1) for s in range(0, len(images), chunk)])


@torch.no_grad()
def accuracy(clf: Classifier, images: torch.Tensor, labels: torch.Tensor) -> float:
    return float((clf.probs(images).argmax(1) == labels).float().mean())


def train_is_classifier(dataset: Dataset, out_path, epochs: int = 15, lr: float = 2e-3, batch_size: int = 64,
                        seed: int = 0) -> tuple[Classifier, float]:
    """Fit the class-posterior model used for IS; certifies at >= 80% eval accuracy."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    clf = Classifier()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    train = dataset.train_indices
    for epoch in range(epochs):
        clf.train()
        order = train[torch.randperm(len(train), generator=gen)]
        for s in range(0, len(order), batch_size):
            b = dataset.batch(order[s : s + batch_size])
            loss = F.cross_entropy(clf(b["images"]), b["labels"])
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    ev = dataset.batch(dataset.eval_indices)
    acc = accuracy(clf, ev["images"], ev["labels"])
    certified = acc >= MIN_CERTIFIED_ACCURACY
    log.info("IS classifier eval accuracy %.4f (%s)", acc, "certified" if certified else "NOT certified")
    fields = {"kind": "classifier", "eval_accuracy": repr(acc), "certified": "true" if certified else "false",
              "seed": str(seed)}
    checkpoint.save(out_path, checkpoint.module_tensors(clf, "cls."), fields)
    return clf, acc


class UncertifiedClassifierError(RuntimeError):
    pass


def load_classifier(path) -> Classifier:
    tensors, fields = checkpoint.load(path)
    if fields.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    if fields.get("certified") != "true":
        raise UncertifiedClassifierError(
            f"{path}: classifier eval accuracy {fields.get('eval_accuracy')} is below "
            f"{MIN_CERTIFIED_ACCURACY:.0%}; refusing to use it for Inception Score"
        )
    clf = Classifier()
    checkpoint.load_module(clf, tensors, "cls.")
    return clf.eval()
