"""Contrastive, re-captioning, adversarial and aggregate generator losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .numerics import NumericsError, NonFiniteError, check_finite, log_softmax


@dataclass(frozen=True)
class LossWeights:
    """Weights of the aggregate generator loss.

    lambda1 scales DAMSM, lambda2 fake-to-real, lambda3 fake-to-fake and
    lambda4 re-captioning. A zero weight switches a term off.
    """

    lambda1: float = 0.05
    lambda2: float = 0.2
    lambda3: float = 0.2
    lambda4: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


TYPICAL_SSACN = LossWeights(lambda1=0.05, lambda2=0.2, lambda3=0.2, lambda4=1.0)
TYPICAL_STYLE = LossWeights(lambda1=5.0, lambda2=0.2, lambda3=0.2, lambda4=1.0)


def interleave(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Stack two N x D batches as (a0, b0, a1, b1, ...)."""
    if a.shape != b.shape:
        raise ValueError(f"pair batches differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.stack([a, b], dim=1).reshape(-1, a.shape[-1])


def nt_xent(pairs: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """NT-Xent over 2N embeddings where rows 2k and 2k+1 are positives.

    The denominator of each row runs over every k != i, so the positive term
    is included in it.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if pairs.dim() != 2 or pairs.shape[0] < 2 or pairs.shape[0] % 2:
        raise ValueError(f"expected an even number (>= 2) of embeddings, got shape {tuple(pairs.shape)}")
    norms = torch.linalg.vector_norm(pairs, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericsError("zero-norm embedding in contrastive batch")
    u = pairs / norms
    sim = u @ u.T / tau
    n2 = pairs.shape[0]
    self_mask = torch.eye(n2, dtype=torch.bool, device=pairs.device)
    sim = sim.masked_fill(self_mask, -math.inf)
    partner = torch.arange(n2, device=pairs.device) ^ 1
    # log_softmax with -inf on the diagonal: subtract the row max by hand
    row_max = sim.max(dim=1, keepdim=True).values.detach()
    shifted = sim - row_max
    log_denom = torch.log(torch.exp(shifted).sum(dim=1))
    log_prob = shifted[torch.arange(n2), partner] - log_denom
    return check_finite(-log_prob.mean(), "nt_xent")


def f2r_loss(fake_globals: torch.Tensor, real_globals: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    if fake_globals.shape[0] != real_globals.shape[0]:
        raise ValueError(f"{fake_globals.shape[0]} fakes vs {real_globals.shape[0]} reals")
    return nt_xent(interleave(fake_globals, real_globals), tau)


def f2f_loss(fake_a: torch.Tensor, fake_b: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    if fake_a.shape[0] != fake_b.shape[0]:
        raise ValueError(f"{fake_a.shape[0]} vs {fake_b.shape[0]} fakes")
    return nt_xent(interleave(fake_a, fake_b), tau)


def recaption_loss(logits: torch.Tensor, caption: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy over the real (non-padding) caption tokens.

    ``logits`` is L x V (or B x L x V) and ``caption`` the matching token ids.
    Without ``lengths``, token id 0 marks padding.
    """
    if logits.dim() == 2:
        logits, caption = logits.unsqueeze(0), caption.unsqueeze(0)
        if lengths is not None:
            lengths = torch.as_tensor(lengths).reshape(1)
    steps = caption.shape[1]
    if lengths is None:
        mask = caption != 0
    else:
        mask = torch.arange(steps, device=caption.device)[None, :] < lengths[:, None]
    if not bool(mask.any()):
        raise ValueError("caption has no real tokens")
    logp = log_softmax(logits, dim=-1)
    picked = logp.gather(-1, caption.unsqueeze(-1)).squeeze(-1)
    return check_finite(-(picked * mask).sum() / mask.sum(), "recaption_loss")


def adversarial_g_loss(d_scores_fake: torch.Tensor) -> torch.Tensor:
    return -d_scores_fake.mean()


def adversarial_d_loss(
    d_scores_real: torch.Tensor, d_scores_fake: torch.Tensor, d_scores_mismatched: torch.Tensor
) -> torch.Tensor:
    """Hinge loss with a mismatched-caption negative."""
    return (
        torch.relu(1 - d_scores_real).mean()
        + 0.5 * torch.relu(1 + d_scores_fake).mean()
        + 0.5 * torch.relu(1 + d_scores_mismatched).mean()
    )


COMPONENTS = ("L_G", "L_DAMSM", "L_CR", "L_CF", "L_CP")


def total_loss(l_g, l_damsm, l_cr, l_cf, l_cp, weights: LossWeights):
    """L_G + lambda1 L_DAMSM + lambda2 L_CR + lambda3 L_CF + lambda4 L_CP.

    Accepts floats or scalar tensors; the same expression serves backprop and
    the run ledger so logged totals reproduce exactly.
    """
    for name, value in zip(COMPONENTS, (l_g, l_damsm, l_cr, l_cf, l_cp)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteError(f"loss component {name} is not finite ({v})")
    return (
        l_g
        + weights.lambda1 * l_damsm
        + weights.lambda2 * l_cr
        + weights.lambda3 * l_cf
        + weights.lambda4 * l_cp
    )
