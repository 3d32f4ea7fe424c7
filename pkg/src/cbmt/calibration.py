"""Global foreground/background loss statistics and the calibrated BCE.

All per-class tensors are channel-last: the class axis is the last one and
every other axis is treated as "pixels".
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True, eq=False)
class CalibrationStats:
    """Per-class accumulators and the weights finalized from them.

    ``sum_*``/``count_*`` collect the current epoch; ``eta_*`` and
    ``bg_weight`` hold the last finalized values (``nan`` / ``1.0`` before
    the first finalization).
    """

    sum_fg_loss: np.ndarray
    count_fg: np.ndarray
    sum_bg_loss: np.ndarray
    count_bg: np.ndarray
    eta_fg: np.ndarray
    eta_bg: np.ndarray
    bg_weight: np.ndarray
    epoch: int = 0
    finalized: np.ndarray = None

    @classmethod
    def empty(cls, num_classes: int) -> "CalibrationStats":
        z = np.zeros(num_classes)
        nan = np.full(num_classes, np.nan)
        return cls(
            sum_fg_loss=z.copy(),
            count_fg=np.zeros(num_classes, dtype=np.int64),
            sum_bg_loss=z.copy(),
            count_bg=np.zeros(num_classes, dtype=np.int64),
            eta_fg=nan.copy(),
            eta_bg=nan.copy(),
            bg_weight=np.ones(num_classes),
            finalized=np.zeros(num_classes, dtype=bool),
        )

    @property
    def num_classes(self) -> int:
        return len(self.bg_weight)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        """Add another partial accumulation (associative, for parallel folds)."""
        return dataclasses.replace(
            self,
            sum_fg_loss=self.sum_fg_loss + other.sum_fg_loss,
            count_fg=self.count_fg + other.count_fg,
            sum_bg_loss=self.sum_bg_loss + other.sum_bg_loss,
            count_bg=self.count_bg + other.count_bg,
        )

    def running_weight(self) -> np.ndarray:
        """Background weight estimated from the accumulators so far.

        Falls back to the last finalized weight for classes lacking either a
        foreground or background sample.
        """
        ok = (self.count_fg > 0) & (self.count_bg > 0) & (self.sum_bg_loss > 0)
        w = self.bg_weight.copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            est = (self.sum_fg_loss / self.count_fg) / (self.sum_bg_loss / self.count_bg)
        w[ok] = est[ok]
        return w


def _split_classes(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(-1, x.shape[-1])


def bce_loss(probs, labels, eps: float = EPS):
    """Per-pixel-per-class binary cross entropy and its mean.

    Returns ``(losses, mean)``; ``losses`` has the shape of ``probs`` and is
    non-negative.
    """
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    p = probs.clamp(eps, 1.0 - eps)
    losses = -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    return losses, losses.mean()


def accumulate_stats(stats: CalibrationStats, losses, labels, keep=None) -> CalibrationStats:
    """Fold kept pixel losses into the per-class foreground/background sums."""
    losses = torch.as_tensor(losses).detach()
    labels = torch.as_tensor(labels).detach()
    if keep is None:
        keep = torch.ones_like(labels, dtype=torch.bool)
    keep = torch.as_tensor(keep, dtype=torch.bool)
    if not (losses.shape == labels.shape == keep.shape):
        raise ValueError("losses, labels and keep must share a shape")
    if losses.shape[-1] != stats.num_classes:
        raise ValueError(f"expected {stats.num_classes} classes, got {losses.shape[-1]}")
    L = _split_classes(losses).double()
    fg = _split_classes((labels > 0.5) & keep)
    bg = _split_classes((labels <= 0.5) & keep)
    return dataclasses.replace(
        stats,
        sum_fg_loss=stats.sum_fg_loss + (L * fg).sum(0).cpu().numpy(),
        count_fg=stats.count_fg + fg.sum(0).cpu().numpy(),
        sum_bg_loss=stats.sum_bg_loss + (L * bg).sum(0).cpu().numpy(),
        count_bg=stats.count_bg + bg.sum(0).cpu().numpy(),
    )


def finalize_epoch(stats: CalibrationStats, classes: Optional[Iterable[int]] = None) -> CalibrationStats:
    """Turn the epoch's accumulators into mean losses and background weights.

    Classes without at least one kept foreground and one kept background
    pixel (or with zero background loss) keep their previous weight, with a
    warning if they are in ``classes`` (the calibrated set; default all).
    Accumulators are reset and the epoch counter advances.
    """
    classes = set(range(stats.num_classes)) if classes is None else set(classes)
    eta_fg = stats.eta_fg.copy()
    eta_bg = stats.eta_bg.copy()
    weight = stats.bg_weight.copy()
    finalized = stats.finalized.copy()
    for k in range(stats.num_classes):
        nf, nb = stats.count_fg[k], stats.count_bg[k]
        if nf > 0:
            eta_fg[k] = stats.sum_fg_loss[k] / nf
        if nb > 0:
            eta_bg[k] = stats.sum_bg_loss[k] / nb
        if nf > 0 and nb > 0 and eta_bg[k] > 0:
            weight[k] = eta_fg[k] / eta_bg[k]
            finalized[k] = True
        elif k in classes:
            logger.warning(
                "epoch %d class %d: no usable statistics (kept fg=%d, bg=%d); keeping weight %.4g",
                stats.epoch, k, nf, nb, weight[k],
            )
        if k in classes:
            logger.info(
                "epoch %d class %d: eta_fg=%.6g eta_bg=%.6g bg_weight=%.6g",
                stats.epoch, k, eta_fg[k], eta_bg[k], weight[k],
            )
    fresh = CalibrationStats.empty(stats.num_classes)
    return dataclasses.replace(
        fresh,
        eta_fg=eta_fg,
        eta_bg=eta_bg,
        bg_weight=weight,
        finalized=finalized,
        epoch=stats.epoch + 1,
    )


def class_weights(stats: CalibrationStats, calibrated_classes: Sequence[int], streaming: bool = False) -> np.ndarray:
    """Background weight per class: the calibrated value for calibrated classes, 1 elsewhere."""
    source = stats.running_weight() if streaming else stats.bg_weight
    w = np.ones(stats.num_classes)
    for k in calibrated_classes:
        if not 0 <= k < stats.num_classes:
            raise ValueError(f"no calibration statistics for class {k}")
        w[k] = source[k]
        if not np.isfinite(w[k]) or w[k] <= 0:
            raise ValueError(f"invalid background weight {w[k]} for class {k}")
    return w


def weighted_bce(probs, labels, bg_weight, pixel_weight=None, eps: float = EPS) -> torch.Tensor:
    """Mean of ``-[y log p + w_k (1 - y) log(1 - p)]`` over pixels and classes."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    w = torch.as_tensor(np.asarray(bg_weight), dtype=probs.dtype, device=probs.device)
    p = probs.clamp(eps, 1.0 - eps)
    losses = -(labels * torch.log(p) + w * (1.0 - labels) * torch.log1p(-p))
    if pixel_weight is not None:
        losses = losses * torch.as_tensor(pixel_weight, dtype=probs.dtype)
    return losses.mean()


def calibrated_bce(probs, labels, stats: CalibrationStats, calibrated_classes: Sequence[int], pixel_weight=None) -> torch.Tensor:
    """BCE whose background term is reweighted by ``eta_fg / eta_bg`` on calibrated classes."""
    return weighted_bce(probs, labels, class_weights(stats, calibrated_classes), pixel_weight)


STATS_CSV_FIELDS = ("epoch", "class", "eta_fg", "eta_bg", "bg_weight", "kept_fg_count", "kept_bg_count")


def append_stats_csv(path, before: CalibrationStats, after: CalibrationStats, classes: Iterable[int]) -> None:
    """Append one row per class: ``before`` holds the counts, ``after`` the finalized values."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(STATS_CSV_FIELDS)
        for k in classes:
            writer.writerow([
                before.epoch, k, after.eta_fg[k], after.eta_bg[k], after.bg_weight[k],
                int(before.count_fg[k]), int(before.count_bg[k]),
            ])
