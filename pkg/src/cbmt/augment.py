"""Weak (geometric) and strong (photometric/erasure) augmentation.

The strong view is always built on top of the weak view and never moves
pixels, so a teacher label computed on the weak view supervises the student
at exactly the same location.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .datamodel import AugmentParams, ImageSample


@dataclass(frozen=True)
class GeoRecord:
    hflip: bool
    vflip: bool
    scale: float


@dataclass(frozen=True)
class StrongRecord:
    erase_box: Optional[Tuple[int, int, int, int]]  # top, left, height, width
    contrast: Optional[float]
    noise_fraction: Optional[float]


@dataclass(frozen=True, eq=False)
class AugmentedPair:
    weak_view: ImageSample
    strong_view: ImageSample
    geo_record: GeoRecord
    strong_record: StrongRecord
    rng_seed: int


def derive_seed(global_seed: int, sample_id: str, epoch: int) -> int:
    """Stable per-sample seed (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(f"{global_seed}|{sample_id}|{epoch}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def flip(arr: np.ndarray, hflip: bool, vflip: bool) -> np.ndarray:
    if hflip:
        arr = arr[:, ::-1]
    if vflip:
        arr = arr[::-1]
    return np.ascontiguousarray(arr)


def rescale(arr: np.ndarray, scale: float, order: int) -> np.ndarray:
    """Resize by ``scale`` then center-crop or reflect-pad back to the input size."""
    if scale == 1.0:
        return arr
    h, w = arr.shape[:2]
    zoomed = ndimage.zoom(arr, (scale, scale, 1), order=order, mode="nearest", grid_mode=True)
    zh, zw = zoomed.shape[:2]
    if zh >= h:
        top = (zh - h) // 2
        zoomed = zoomed[top:top + h]
    else:
        pad = h - zh
        zoomed = np.pad(zoomed, ((pad // 2, pad - pad // 2), (0, 0), (0, 0)), mode="reflect")
    if zw >= w:
        left = (zw - w) // 2
        zoomed = zoomed[:, left:left + w]
    else:
        pad = w - zw
        zoomed = np.pad(zoomed, ((0, 0), (pad // 2, pad - pad // 2), (0, 0)), mode="reflect")
    return zoomed


def erase(image: np.ndarray, top: int, left: int, height: int, width: int, fill) -> np.ndarray:
    out = image.copy()
    out[top:top + height, left:left + width] = fill
    return out


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image
    mean = image.mean(axis=(0, 1), keepdims=True)
    return np.clip(mean + factor * (image - mean), 0.0, 1.0)


def impulse_noise(image: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    n = int(round(fraction * h * w))
    if n == 0:
        return image
    out = image.copy()
    idx = rng.choice(h * w, size=n, replace=False)
    salt = rng.random(n) < 0.5
    flat = out.reshape(h * w, -1)
    flat[idx] = salt[:, None].astype(image.dtype)
    return out


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def weak_augment(sample: ImageSample, rng: np.random.Generator, params: AugmentParams = AugmentParams()):
    """Random horizontal/vertical flip and mild rescale; returns ``(view, GeoRecord)``."""
    hflip = bool(rng.random() < params.flip_p)
    vflip = bool(rng.random() < params.flip_p)
    lo, hi = params.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    geo = GeoRecord(hflip, vflip, scale)
    return apply_geometry(sample, geo), geo


def apply_geometry(sample: ImageSample, geo: GeoRecord) -> ImageSample:
    pixels = rescale(flip(sample.pixels, geo.hflip, geo.vflip), geo.scale, order=1)
    pixels = np.clip(pixels, 0.0, 1.0)
    mask = sample.mask
    if mask is not None:
        mask = rescale(flip(mask, geo.hflip, geo.vflip), geo.scale, order=0)
    return sample.replace(pixels=pixels, mask=mask)


def strong_augment(weak_view: ImageSample, rng: np.random.Generator, params: AugmentParams = AugmentParams(),
                   fill_value=None, return_record: bool = False):
    """Random erase, contrast change and salt-and-pepper noise, each with probability ``op_p``.

    ``fill_value`` is the erase fill (per-channel dataset mean); it defaults
    to the mean of the view itself.
    """
    img = weak_view.pixels
    h, w = img.shape[:2]
    box = contrast = noise = None
    do_erase, do_contrast, do_noise = rng.random(3) < params.op_p
    if do_erase:
        area = rng.uniform(*params.erase_area) * h * w
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        eh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        ew = int(np.clip(round(np.sqrt(area / aspect)), 1, w))
        top, left = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
        fill = img.mean(axis=(0, 1)) if fill_value is None else np.asarray(fill_value, dtype=img.dtype)
        img = erase(img, top, left, eh, ew, fill)
        box = (top, left, eh, ew)
    if do_contrast:
        contrast = float(rng.uniform(*params.contrast_range))
        img = adjust_contrast(img, contrast)
    if do_noise:
        noise = float(rng.uniform(*params.noise_fraction))
        img = impulse_noise(img, noise, rng)
    out = weak_view.replace(pixels=img)
    if return_record:
        return out, StrongRecord(box, contrast, noise)
    return out


def make_pair(sample: ImageSample, seed: int, params: AugmentParams = AugmentParams(), fill_value=None,
              strong: bool = True) -> AugmentedPair:
    rng = np.random.default_rng(seed)
    weak, geo = weak_augment(sample, rng, params)
    if strong:
        strong_view, rec = strong_augment(weak, rng, params, fill_value, return_record=True)
    else:
        strong_view, rec = weak, StrongRecord(None, None, None)
    return AugmentedPair(weak, strong_view, geo, rec, seed)


def erase_mask(pair: AugmentedPair) -> np.ndarray:
    """``H x W`` float mask that is 0 inside the erased rectangle, 1 elsewhere."""
    h, w = pair.strong_view.shape
    m = np.ones((h, w), dtype=np.float32)
    if pair.strong_record.erase_box is not None:
        top, left, eh, ew = pair.strong_record.erase_box
        m[top:top + eh, left:left + ew] = 0.0
    return m
