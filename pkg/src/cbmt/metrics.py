"""Dice coefficient and average symmetric surface distance (ASSD)."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage

from .datamodel import CLASS_NAMES

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice(pred, truth) -> float:
    """``2|P & T| / (|P| + |T|)``; 1.0 when both masks are empty."""
    pred, truth = _check(pred, truth)
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / denom)


def surface(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask; border pixels count as surface."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~inner


def assd(pred, truth) -> float:
    """Average symmetric surface distance in pixels; ``nan`` if either mask is empty."""
    pred, truth = _check(pred, truth)
    if not pred.any() or not truth.any():
        warnings.warn("ASSD undefined for an empty mask", RuntimeWarning, stacklevel=2)
        return float("nan")
    sp, st = surface(pred), surface(truth)
    # distance from every pixel to the nearest surface pixel of the other mask
    to_t = ndimage.distance_transform_edt(~st)
    to_p = ndimage.distance_transform_edt(~sp)
    total = to_t[sp].sum() + to_p[st].sum()
    return float(total / (sp.sum() + st.sum()))


@dataclass
class EvalResult:
    class_names: Sequence[str]
    ids: List[str] = field(default_factory=list)
    dice: List[List[float]] = field(default_factory=list)  # [image][class]
    assd: List[List[float]] = field(default_factory=list)

    def add(self, image_id: str, pred: np.ndarray, truth: np.ndarray) -> None:
        """Record one ``H x W x C`` prediction/ground-truth pair."""
        if pred.shape != truth.shape:
            raise ValueError(f"{image_id}: shape mismatch {pred.shape} vs {truth.shape}")
        self.ids.append(image_id)
        self.dice.append([dice(pred[..., k], truth[..., k]) for k in range(pred.shape[-1])])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            row = [assd(pred[..., k], truth[..., k]) for k in range(pred.shape[-1])]
        for k, v in enumerate(row):
            if np.isnan(v):
                warnings.warn(f"{image_id}: ASSD undefined for class {self.class_names[k]}; excluded",
                              RuntimeWarning, stacklevel=2)
        self.assd.append(row)

    def aggregates(self) -> Dict[str, Dict[str, float]]:
        d = np.asarray(self.dice, dtype=float).reshape(len(self.ids), -1)
        a = np.asarray(self.assd, dtype=float).reshape(len(self.ids), -1)
        out = {}
        for k, name in enumerate(self.class_names):
            valid = a[:, k][~np.isnan(a[:, k])]
            out[name] = {
                "dice_mean": float(d[:, k].mean()) if len(d) else float("nan"),
                "dice_std": float(d[:, k].std()) if len(d) else float("nan"),
                "assd_mean": float(valid.mean()) if len(valid) else float("nan"),
                "assd_std": float(valid.std()) if len(valid) else float("nan"),
                "assd_excluded": int(len(a) - len(valid)),
            }
        return out

    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id"] + [f"dice_{n}" for n in self.class_names] + [f"assd_{n}" for n in self.class_names])
            for i, image_id in enumerate(self.ids):
                writer.writerow([image_id] + list(self.dice[i]) + list(self.assd[i]))

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_nan_to_none(self.aggregates()), fh, indent=2, sort_keys=True)


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and np.isnan(obj):
        return None
    return obj


def evaluate_masks(ids, preds, truths, class_names=CLASS_NAMES) -> EvalResult:
    result = EvalResult(list(class_names))
    for image_id, p, t in zip(ids, preds, truths):
        result.add(image_id, np.asarray(p, bool), np.asarray(t, bool))
    return result
