"""Prediction heads and the confidence-filtered pseudo-label objective.

All tensors are batch-first: features ``(B, D, H, W)``, class maps ``(B, H, W)``.
Class maps hold contiguous class indices; ``IGNORE_INDEX`` marks unsupervised pixels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

IGNORE_INDEX = -1
logger = logging.getLogger(__name__)


class EmptySupervisionError(ValueError):
    pass


@dataclass
class PredictionMap:
    logits: torch.Tensor  # (B, C, H, W)

    @property
    def log_probs(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=1)

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)

    @property
    def hard(self) -> torch.Tensor:
        # torch.argmax returns the first maximal index, i.e. the lowest class on ties
        return self.logits.argmax(dim=1)


class PredictionHead(nn.Conv2d):
    """1x1 convolution from features to class logits."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__(in_channels, num_classes, kernel_size=1)


def predict_head(features: torch.Tensor, head: PredictionHead) -> PredictionMap:
    return PredictionMap(head(features))


def ce_loss(pred: PredictionMap, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean negative log-likelihood over pixels whose label is not ``ignore_index``."""
    if labels.shape != pred.logits.shape[:1] + pred.logits.shape[2:]:
        raise ValueError(f"label shape {tuple(labels.shape)} does not match prediction {tuple(pred.logits.shape)}")
    keep = labels != ignore_index
    if not bool(keep.any()):
        raise EmptySupervisionError("empty supervision: every pixel is ignored")
    nll = -pred.log_probs.gather(1, labels.clamp(min=0).unsqueeze(1)).squeeze(1)
    return nll[keep].mean()


@dataclass
class ClassPrototypes:
    proto: torch.Tensor  # (C, D); rows of absent classes are zero
    present: torch.Tensor  # (C,) bool

    @property
    def present_ids(self):
        return [int(c) for c in torch.nonzero(self.present).flatten()]


@torch.no_grad()
def compute_prototypes(features: torch.Tensor, hard: torch.Tensor, num_classes: int) -> ClassPrototypes:
    """Per-class mean feature over every pixel (whole batch) predicted as that class."""
    if features.shape[:1] + features.shape[2:] != hard.shape:
        raise ValueError("features and class map must share batch and spatial dims")
    D = features.shape[1]
    flat = features.permute(0, 2, 3, 1).reshape(-1, D).double()
    idx = hard.reshape(-1)
    valid = (idx >= 0) & (idx < num_classes)
    flat, idx = flat[valid], idx[valid]
    sums = torch.zeros(num_classes, D, dtype=torch.float64).index_add_(0, idx, flat)
    counts = torch.bincount(idx, minlength=num_classes)
    present = counts > 0
    proto = torch.zeros_like(sums)
    proto[present] = sums[present] / counts[present, None]
    return ClassPrototypes(proto, present)


@torch.no_grad()
def cosine_to_prototype(features: torch.Tensor, hard: torch.Tensor, protos: ClassPrototypes) -> torch.Tensor:
    """Cosine similarity of every pixel feature to its class prototype (nan if undefined)."""
    C = protos.proto.shape[0]
    f = features.permute(0, 2, 3, 1).double()
    idx = hard.clamp(0, C - 1)
    p = protos.proto[idx]
    fn = f.norm(dim=-1)
    pn = p.norm(dim=-1)
    ok = (hard >= 0) & (hard < C) & protos.present[idx] & (fn > 0) & (pn > 0)
    cos = (f * p).sum(-1) / (fn * pn)
    return torch.where(ok, cos, torch.full_like(cos, float("nan")))


@torch.no_grad()
def confidence_mask(features: torch.Tensor, hard: torch.Tensor, protos: ClassPrototypes,
                    tau: float = 0.9) -> torch.Tensor:
    """True where the pixel feature's cosine to its class prototype is >= ``tau``."""
    if not -1.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [-1, 1]")
    cos = cosine_to_prototype(features, hard, protos)
    return torch.nan_to_num(cos, nan=-2.0) >= tau


def masked_ce_loss(pred2: PredictionMap, pseudo: torch.Tensor, mask: torch.Tensor) -> Optional[torch.Tensor]:
    """NLL of the pseudo labels averaged over masked-in pixels.

    Returns ``None`` when the mask keeps nothing, so callers can skip the term
    rather than divide by zero.
    """
    if pseudo.shape != mask.shape:
        raise ValueError("pseudo labels and mask must share a shape")
    if not bool(mask.any()):
        return None
    nll = -pred2.log_probs.gather(1, pseudo.detach().clamp(min=0).unsqueeze(1)).squeeze(1)
    return nll[mask].mean()


def total_loss(l1, l2, lam: float = 0.5):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if l2 is None:
        return lam * l1
    return lam * l1 + (1.0 - lam) * l2


def mask_statistics(mask: torch.Tensor, hard: torch.Tensor, num_classes: int) -> Dict[str, object]:
    kept = float(mask.float().mean())
    per_class = {}
    for c in range(num_classes):
        sel = hard == c
        n = int(sel.sum())
        if n:
            per_class[c] = float(mask[sel].float().mean())
    return {"kept_fraction": kept, "per_class_kept": per_class}
