"""Training objectives: mix consistency, prototype clustering, anatomy consistency, weak supervision."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .mixing import SubsetSchedule

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12
DEFAULT_TAU = 0.1
TERMS = ("mix", "cluster", "ac", "map", "scribble", "category")


class LossDivergedError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss diverged: term {term!r} is {value}")
        self.term = term


def cosine(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of the flattened inputs; 0 when either norm underflows."""
    z1, z2 = z1.reshape(-1), z2.reshape(-1)
    n1, n2 = z1.norm(), z2.norm()
    if n1 < NORM_FLOOR or n2 < NORM_FLOOR:
        return (z1 * 0).sum() + (z2 * 0).sum()
    return (z1 @ z2) / (n1 * n2)


def neg_cos(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    return -cosine(z1, z2)


def mix_consistency_loss(pred_mixed: torch.Tensor, target: torch.Tensor, *, detach_target: bool = True,
                         per_channel: bool = False) -> torch.Tensor:
    """Negative cosine between the prediction on the mixed image and the mixed predictions.

    Inputs are (C, h, w) or batched (B, C, h, w); batches are averaged over B.
    """
    if pred_mixed.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_mixed.shape)} vs {tuple(target.shape)}")
    if detach_target:
        target = target.detach()
    if pred_mixed.dim() == 3:
        pred_mixed, target = pred_mixed.unsqueeze(0), target.unsqueeze(0)
    per_item = []
    for p, t in zip(pred_mixed, target):
        if per_channel:
            per_item.append(torch.stack([neg_cos(pc, tc) for pc, tc in zip(p, t)]).mean())
        else:
            per_item.append(neg_cos(p, t))
    return torch.stack(per_item).mean()


def cluster_loss(vectors: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Compactness-vs-discriminability loss over per-sample class prototypes.

    ``vectors`` has shape (B, m, d): one prototype vector per sample and class.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    B, m, _ = vectors.shape
    centers = vectors.mean(dim=0)
    compact = torch.stack([cosine(vectors[b, i], centers[i]) for b in range(B) for i in range(m)]) / tau
    pairs = [cosine(centers[i], centers[j]) for i in range(m) for j in range(m) if i != j]
    log_c = torch.logsumexp(compact, dim=0)
    if not pairs:
        return log_c - log_c
    discrim = torch.stack(pairs) / tau
    return torch.logsumexp(torch.cat([compact, discrim]), dim=0) - log_c


def _combined_index(m: int, k: int) -> int:
    # channel layout: 0..m-1 single classes (class c at c-1), then subsets k = 2..m
    return m + k - 2


def anatomy_consistency_terms(pred: torch.Tensor, protos: torch.Tensor, schedule: SubsetSchedule, *,
                              batched: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """(segmentation term, prototype term) of the anatomy-consistency loss.

    ``pred`` is (C, ...) or, with ``batched``, (B, C, ...); the segmentation term is then
    averaged over B. ``protos`` is (C, d), typically batch-centered prototype vectors.
    """
    m = schedule.m
    C = 2 * m - 1
    preds = pred if batched else pred.unsqueeze(0)
    if preds.shape[1] != C or protos.shape[0] != C:
        raise ValueError(f"expected {C} channels for m={m}, got {preds.shape[1]} and {protos.shape[0]}")
    seg_terms = []
    for p in preds:
        s = 0
        for k in range(2, m + 1):
            members = [c - 1 for c in sorted(schedule.subset(k))]
            s = s + neg_cos(p[_combined_index(m, k)], p[members].sum(dim=0))
        seg_terms.append(s)
    seg = torch.stack(seg_terms).mean() if len(seg_terms) > 1 else seg_terms[0]
    proto = 0
    for k in range(2, m + 1):
        members = [c - 1 for c in sorted(schedule.subset(k))]
        proto = proto + neg_cos(protos[_combined_index(m, k)], protos[members].sum(dim=0))
    return seg, proto


def anatomy_consistency_loss(pred: torch.Tensor, protos: torch.Tensor, schedule: SubsetSchedule, *,
                             batched: bool = False) -> torch.Tensor:
    seg, proto = anatomy_consistency_terms(pred, protos, schedule, batched=batched)
    return seg + proto


def scribble_loss(probs: torch.Tensor, scribbles, unlabeled: int = 255) -> tuple[torch.Tensor, bool]:
    """Partial cross-entropy plus pixelwise dice term over annotated pixels.

    ``probs`` is the softmax head (background first), shape (K, h, w) or (B, K, h, w);
    ``scribbles`` holds class ids or ``unlabeled``. Returns (loss, supervised); when no
    pixel is annotated the loss is 0 and ``supervised`` is False.
    """
    scribbles = torch.as_tensor(scribbles).long()
    if probs.dim() == 3:
        probs, scribbles = probs.unsqueeze(0), scribbles.unsqueeze(0)
    annotated = scribbles != unlabeled
    if not annotated.any():
        return probs.sum() * 0, False
    idx = torch.where(annotated, scribbles, torch.zeros_like(scribbles))
    p_true = probs.gather(1, idx.unsqueeze(1)).squeeze(1)[annotated]
    per_pixel = torch.log(p_true.clamp_min(PROB_FLOOR)) + 2 * p_true / (1 + p_true)
    return -per_pixel.mean(), True


def category_loss(probs: torch.Tensor, present) -> torch.Tensor:
    """Mean over pixels of -log of the probability mass on background plus present classes.

    ``probs`` is (K, h, w) with one set of present class ids, or (B, K, h, w) with a list of sets.
    """
    if probs.dim() == 3:
        probs, present = probs.unsqueeze(0), [present]
    B, K = probs.shape[:2]
    allowed = torch.zeros(B, K, dtype=probs.dtype)
    allowed[:, 0] = 1
    for b, psi in enumerate(present):
        for c in psi:
            allowed[b, int(c)] = 1
    mass = (probs * allowed[:, :, None, None]).sum(dim=1)
    return -torch.log(mass.clamp_min(PROB_FLOOR)).mean()


@dataclass
class LossBreakdown:
    mix: float = 0.0
    cluster: float = 0.0
    ac: float = 0.0
    map: float = 0.0
    scribble: float = 0.0
    category: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)
    supervised: bool = True
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        out = {f"l_{t}": getattr(self, t) for t in TERMS}
        out["total"] = self.total
        return out


def default_weights() -> dict:
    return {t: 1.0 for t in TERMS}


def total_loss(terms: dict, weights: dict | None = None, supervised: bool = True) -> LossBreakdown:
    """Weighted sum of the loss terms. Terms with weight 0 are recorded as 0 and not evaluated."""
    weights = {**default_weights(), **(weights or {})}
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    objective = None
    values = {}
    total = 0.0
    for t in TERMS:
        wt = float(weights[t])
        if wt < 0:
            raise ValueError(f"weight for {t} must be non-negative")
        v = terms.get(t, 0.0)
        if wt == 0:
            values[t] = 0.0
            continue
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise LossDivergedError(t, fv)
        values[t] = fv
        total += wt * fv
        if isinstance(v, torch.Tensor):
            objective = wt * v if objective is None else objective + wt * v
    return LossBreakdown(**values, total=total, weights=weights, supervised=supervised, objective=objective)
