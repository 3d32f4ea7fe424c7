"""Pseudo-label thresholding and the informative-pixel filter."""
from __future__ import annotations

import torch

from .datamodel import FilterMode


def make_pseudo_labels(probs, gamma: float) -> torch.Tensor:
    """Hard labels ``1[p > gamma]`` with the same dtype as ``probs``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    probs = torch.as_tensor(probs)
    return (probs > gamma).to(probs.dtype)


def informative_pixel_mask(probs, labels, gamma: float, alpha: float, mode=FilterMode.DISTANCE_FROM_LABEL) -> torch.Tensor:
    """Boolean mask of pixels whose loss is large enough to enter the global statistics.

    ``distance_from_label`` keeps pixels whose distance from their pseudo label,
    normalized by the label's distance from the threshold, exceeds ``alpha``:
    confident (near-zero loss) pixels are dropped. ``literal_paper_formula``
    evaluates ``|p - gamma| / |y - gamma| > alpha`` instead. ``alpha == 0``
    keeps every pixel in both modes.
    """
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if alpha == 0.0:
        return torch.ones_like(probs, dtype=torch.bool)
    mode = FilterMode(mode)
    if mode is FilterMode.DISTANCE_FROM_LABEL:
        ratio = (probs - labels).abs() / (gamma - labels).abs()
    else:
        ratio = (probs - gamma).abs() / (labels - gamma).abs()
    # ratios within rounding of alpha count as ties, which the strict predicate rejects
    tie = 4 * torch.finfo(ratio.dtype).eps * max(alpha, 1.0)
    return ratio > alpha + tie
