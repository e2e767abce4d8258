"""Online mapping of predictions onto learnable prototypes via entropic optimal transport."""
from __future__ import annotations

import torch
import torch.nn.functional as F

DEFAULT_EPS = 0.05
DEFAULT_NITERS = 3
DEFAULT_W = 0.05


class SinkhornDivergedError(FloatingPointError):
    pass


def _tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def init_prototypes(channels: int, d: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    """Gaussian (channels x d) matrix with unit-norm columns."""
    if d < 2:
        raise ValueError(f"need at least 2 prototypes, got {d}")
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(channels, d, generator=g, dtype=torch.float64)
    return normalize_prototypes(a).to(dtype)


@torch.no_grad()
def normalize_prototypes(a: torch.Tensor) -> torch.Tensor:
    a = _tensor(a)
    return a / a.norm(dim=0, keepdim=True).clamp_min(1e-12)


def compute_scores(a, y_flat) -> torch.Tensor:
    """Prototype scores a^T y: (d x n) for a of shape (C x d) and y of shape (C x n)."""
    a = _tensor(a)
    y_flat = _tensor(y_flat, a)
    if a.dim() != 2 or y_flat.dim() != 2 or a.shape[0] != y_flat.shape[0]:
        raise ValueError(f"prototype matrix {tuple(a.shape)} does not match predictions {tuple(y_flat.shape)}")
    return a.t() @ y_flat


@torch.no_grad()
def sinkhorn(scores, eps: float = DEFAULT_EPS, niters: int = DEFAULT_NITERS) -> torch.Tensor:
    """Balanced soft assignment of n pixels to d prototypes.

    ``scores`` is (d x n). Returns Q of shape (n x d) whose rows sum to one. Prototype
    marginals are driven towards 1/d and pixel marginals towards 1/n by ``niters`` rounds
    of alternating rescaling.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if niters < 0:
        raise ValueError(f"niters must be non-negative, got {niters}")
    scores = _tensor(scores).detach()
    if not torch.isfinite(scores).all():
        raise SinkhornDivergedError("sinkhorn diverged: non-finite scores")
    d, n = scores.shape
    # shifting by the global max leaves the normalized plan unchanged
    P = torch.exp((scores - scores.max()) / eps)
    P = P / P.sum()
    r = torch.full((d,), 1.0 / d, dtype=P.dtype)
    c = torch.full((n,), 1.0 / n, dtype=P.dtype)
    for _ in range(niters):
        u = P.sum(dim=1)
        P = P * (r / u).unsqueeze(1)
        P = P * (c / P.sum(dim=0)).unsqueeze(0)
    Q = (P / P.sum(dim=0, keepdim=True)).t()
    if not torch.isfinite(Q).all():
        raise SinkhornDivergedError(f"sinkhorn diverged (eps={eps}): transport plan underflowed")
    return Q


def mapping_loss(scores, Q, w: float = DEFAULT_W) -> torch.Tensor:
    """Swapped-assignment cross-entropy: -mean over pixels of sum_k Q[p, k] log softmax(scores[:, p] / w)[k]."""
    if w <= 0:
        raise ValueError(f"w must be positive, got {w}")
    scores = _tensor(scores)
    Q = _tensor(Q, scores).detach()
    log_p = F.log_softmax(scores / w, dim=0)  # (d x n)
    return -(Q * log_p.t()).sum(dim=1).mean()


def aggregate_prototype_vectors(y_flat, Q) -> torch.Tensor:
    """Per-channel prototype vectors: row c is sum_p y_flat[c, p] * Q[p, :]. Shape (C x d)."""
    y_flat = _tensor(y_flat)
    Q = _tensor(Q, y_flat)
    if y_flat.shape[1] != Q.shape[0]:
        raise ValueError(f"prediction has {y_flat.shape[1]} pixels but Q has {Q.shape[0]} rows")
    return y_flat @ Q
