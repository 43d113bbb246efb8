"""Tensor substrate: stable reductions, Gaussian statistics, PSD square root and
a central-difference gradient checker.

Tensors are ``torch.Tensor`` values. Training runs in float32; setting the
environment variable ``T2IC_PRECISION=f64`` switches the default dtype to
float64 for oracle and gradient-check work.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import torch


class NumericsError(ValueError):
    """Raised when an operation would produce or consume a degenerate value."""


class NonFiniteError(NumericsError):
    pass


def precision_dtype() -> torch.dtype:
    mode = os.environ.get("T2IC_PRECISION", "f32").lower()
    if mode in ("f64", "float64", "double"):
        return torch.float64
    if mode in ("f32", "float32", "float", ""):
        return torch.float32
    raise NumericsError(f"unknown T2IC_PRECISION {mode!r} (expected f32 or f64)")


def apply_precision() -> torch.dtype:
    """Set torch's default dtype from ``T2IC_PRECISION`` and return it."""
    dtype = precision_dtype()
    torch.set_default_dtype(dtype)
    return dtype


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return t


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """a.b / (|a| |b|) along the last axis. Zero-norm inputs are rejected."""
    if a.shape[-1] != b.shape[-1]:
        raise NumericsError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericsError("cosine similarity of a zero-norm vector")
    out = (a * b).sum(-1) / (na * nb)
    return check_finite(out, "cosine_sim")


def normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    if bool((n == 0).any()):
        raise NumericsError("cannot l2-normalize a zero-norm vector")
    return x / n


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    check_finite(x, "log_softmax input")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


@dataclass(frozen=True)
class GaussianStats:
    mean: torch.Tensor
    cov: torch.Tensor
    count: int


def gaussian_stats(samples: torch.Tensor) -> GaussianStats:
    """Sample mean and unbiased covariance of the rows of ``samples``."""
    if samples.dim() != 2:
        raise NumericsError(f"expected an n x d matrix, got shape {tuple(samples.shape)}")
    n = samples.shape[0]
    if n < 2:
        raise NumericsError(f"need at least 2 samples for a covariance, got {n}")
    check_finite(samples, "samples")
    x = samples.to(torch.float64)
    mean = x.mean(0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, cov=cov, count=n)


def matrix_sqrt_psd(m: torch.Tensor, neg_tol: float = 1e-8) -> torch.Tensor:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-neg_tol, 0) are clipped to zero; anything more negative
    means the input is not PSD.
    """
    if m.dim() != 2 or m.shape[0] != m.shape[1]:
        raise NumericsError(f"expected a square matrix, got shape {tuple(m.shape)}")
    check_finite(m, "matrix_sqrt_psd input")
    x = m.to(torch.float64)
    scale = max(float(x.abs().max()), 1.0)
    if float((x - x.T).abs().max()) > 1e-6 * scale:
        raise NumericsError("matrix is not symmetric")
    evals, evecs = torch.linalg.eigh(0.5 * (x + x.T))
    if float(evals.min()) < -neg_tol * scale:
        raise NumericsError(f"matrix is not PSD (min eigenvalue {float(evals.min()):.3e})")
    root = evecs @ torch.diag(evals.clamp_min(0).sqrt()) @ evecs.T
    return 0.5 * (root + root.T)


def grad_check(
    f: Callable[..., torch.Tensor],
    params: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of scalar ``f(*params)`` with central differences.

    Returns the max over checked coordinates of
    ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)``. With ``max_coords`` a seeded
    random subset of coordinates is probed instead of all of them.
    """
    if isinstance(params, torch.Tensor):
        params = [params]
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    out = f(*leaves)
    if out.numel() != 1:
        raise NumericsError("grad_check needs a scalar function")
    check_finite(out, "f(theta)")
    if any(p.requires_grad for p in leaves) and out.requires_grad:
        analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    else:
        analytic = [None] * len(leaves)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(leaves, analytic)]

    coords = [(i, j) for i, p in enumerate(leaves) for j in range(p.numel())]
    if max_coords is not None and len(coords) > max_coords:
        gen = torch.Generator().manual_seed(seed)
        pick = torch.randperm(len(coords), generator=gen)[:max_coords].tolist()
        coords = [coords[k] for k in sorted(pick)]

    base = [p.detach().clone() for p in leaves]
    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            probe = [b.clone() for b in base]
            flat = probe[i].view(-1)
            flat[j] = base[i].view(-1)[j] + eps
            f_plus = f(*probe)
            flat[j] = base[i].view(-1)[j] - eps
            f_minus = f(*probe)
            check_finite(f_plus, "f(theta + eps)")
            check_finite(f_minus, "f(theta - eps)")
            g_n = float(f_plus - f_minus) / (2 * eps)
            g_a = float(analytic[i].reshape(-1)[j])
            err = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
            worst = max(worst, err)
    return worst
