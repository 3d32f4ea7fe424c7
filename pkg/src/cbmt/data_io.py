"""Dataset manifests, image/mask decoding, ROI preprocessing and synthetic fundus data."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .datamodel import ImageSample

DEFAULT_LEVELS = {"background": 0, "disc": 128, "cup": 255}


# ---------------------------------------------------------------------------
# mask encoding
# ---------------------------------------------------------------------------


def encode_mask(mask: np.ndarray, levels: Dict[str, int] = DEFAULT_LEVELS) -> np.ndarray:
    """``H x W x 2`` (disc, cup) binary mask -> single-channel 8-bit raster."""
    mask = np.asarray(mask).astype(bool)
    out = np.full(mask.shape[:2], levels["background"], dtype=np.uint8)
    out[mask[..., 0]] = levels["disc"]
    out[mask[..., 1]] = levels["cup"]
    return out


def decode_mask(raster: np.ndarray, levels: Dict[str, int] = DEFAULT_LEVELS) -> np.ndarray:
    """Single-channel raster -> ``H x W x 2`` mask; the disc channel is the union of disc and cup."""
    raster = np.asarray(raster)
    cup = raster == levels["cup"]
    disc = (raster == levels["disc"]) | cup
    return np.stack([disc, cup], axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    mask_path: Optional[Path] = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: List[ManifestEntry]
    roi_size: Tuple[int, int] = (512, 512)
    levels: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_LEVELS))

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate ids in manifest: {', '.join(dup)}")

    def __len__(self):
        return len(self.entries)

    @property
    def labeled(self) -> bool:
        return all(e.mask_path is not None for e in self.entries)

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for e in self.entries:
                writer.writerow([e.id, _rel(e.image_path, path.parent), _rel(e.mask_path, path.parent) if e.mask_path else ""])

    @classmethod
    def read(cls, path, split: str = "train", roi_size=(512, 512)) -> "DatasetManifest":
        """Read ``id,image_path,mask_path?`` lines; relative paths resolve against the manifest's folder.

        A ``<manifest>.levels.json`` sidecar overrides the mask level mapping.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        entries = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) < 2:
                    raise ValueError(f"{path}:{lineno}: expected id,image_path[,mask_path]")
                mask = row[2].strip() if len(row) > 2 and row[2].strip() else None
                entries.append(ManifestEntry(row[0].strip(), path.parent / row[1].strip(),
                                             path.parent / mask if mask else None))
        levels = dict(DEFAULT_LEVELS)
        sidecar = path.with_suffix(".levels.json")
        if sidecar.exists():
            levels.update(json.loads(sidecar.read_text()))
        return cls(path.parent, split, entries, tuple(roi_size), levels)


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def fit_roi(arr: np.ndarray, roi_size, order: int) -> np.ndarray:
    """Center-crop dimensions larger than the ROI, resize dimensions smaller than it."""
    th, tw = roi_size
    h, w = arr.shape[:2]
    top, left = max((h - th) // 2, 0), max((w - tw) // 2, 0)
    arr = arr[top:top + min(h, th), left:left + min(w, tw)]
    h, w = arr.shape[:2]
    if (h, w) != (th, tw):
        factors = (th / h, tw / w) + (1,) * (arr.ndim - 2)
        arr = ndimage.zoom(arr, factors, order=order, mode="nearest", grid_mode=True)
    return arr


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def read_mask(path, levels=DEFAULT_LEVELS) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return decode_mask(np.asarray(im.convert("L")), levels)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc


def load_dataset(manifest: DatasetManifest, domain_tag: Optional[str] = None) -> Iterator[ImageSample]:
    for e in manifest.entries:
        pixels = read_image(e.image_path)
        mask = None
        if e.mask_path is not None:
            mask = read_mask(e.mask_path, manifest.levels)
            if mask.shape[:2] != pixels.shape[:2]:
                raise ValueError(f"{e.id}: mask size {mask.shape[:2]} != image size {pixels.shape[:2]} ({e.mask_path})")
            mask = fit_roi(mask, manifest.roi_size, order=0)
        pixels = np.clip(fit_roi(pixels, manifest.roi_size, order=1), 0.0, 1.0)
        yield ImageSample(e.id, pixels, mask, domain_tag or manifest.split)


def save_sample(sample: ImageSample, image_path, mask_path=None) -> None:
    Image.fromarray(np.round(sample.pixels * 255).astype(np.uint8)).save(image_path)
    if mask_path is not None and sample.mask is not None:
        Image.fromarray(encode_mask(sample.mask)).save(mask_path)


# ---------------------------------------------------------------------------
# synthetic fundus-like data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainShift:
    contrast_scale: float = 1.0
    brightness_shift: float = 0.0
    blur_sigma: float = 0.0
    texture_seed: Optional[int] = None
    color_gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return self == DomainShift(texture_seed=self.texture_seed) and self.texture_seed is None


# Target appearance used by the shipped benchmark: lower contrast, darker, blurred, new texture.
BENCHMARK_SHIFT = DomainShift(contrast_scale=0.55, brightness_shift=-0.08, blur_sigma=1.2, texture_seed=7)


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 64
    n_test: int = 32
    image_size: Tuple[int, int] = (128, 128)
    disc_radius_range: Tuple[float, float] = (0.18, 0.24)  # fraction of image side
    cup_ratio_range: Tuple[float, float] = (0.4, 0.55)  # cup radius / disc radius
    domain_shift: DomainShift = DomainShift()
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cup_ratio_range
        if not 0 < lo <= hi < 1:
            raise ValueError("cup_ratio_range must lie strictly inside (0, 1)")
        if not 0 < self.disc_radius_range[0] <= self.disc_radius_range[1] < 0.5:
            raise ValueError("disc_radius_range must lie inside (0, 0.5)")


def _smooth_noise(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _vessels(rng, h, w, cy, cx, n=6):
    """Dark curvilinear structures radiating from the disc centre."""
    out = np.zeros((h, w))
    for _ in range(n):
        angle = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.004, 0.004)
        width = rng.uniform(0.8, 1.6)
        t = np.linspace(0, 1.2 * max(h, w), 400)
        a = angle + bend * t
        py, px = cy + t * np.sin(a), cx + t * np.cos(a)
        keep = (py > -5) & (py < h + 5) & (px > -5) & (px < w + 5)
        line = np.zeros((h, w))
        iy = np.clip(np.round(py[keep]).astype(int), 0, h - 1)
        ix = np.clip(np.round(px[keep]).astype(int), 0, w - 1)
        line[iy, ix] = 1.0
        out = np.maximum(out, ndimage.gaussian_filter(line, width) * width * 2.5)
    return np.clip(out, 0, 1)


def render_fundus(rng: np.random.Generator, spec: SynthSpec, texture_rng: np.random.Generator):
    """One synthetic fundus ROI and its (disc, cup) mask."""
    h, w = spec.image_size
    side = min(h, w)
    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    rd = rng.uniform(*spec.disc_radius_range) * side
    ecc = rng.uniform(0.88, 1.12)
    rdy, rdx = rd * ecc, rd / ecc
    ratio = rng.uniform(*spec.cup_ratio_range)
    rcy, rcx = rdy * ratio * rng.uniform(0.9, 1.1), rdx * ratio * rng.uniform(0.9, 1.1)
    # keep the cup strictly inside the disc
    room_y, room_x = rdy * 0.92 - rcy, rdx * 0.92 - rcx
    ccy = cy + rng.uniform(-1, 1) * max(room_y, 0) * 0.5
    ccx = cx + rng.uniform(-1, 1) * max(room_x, 0) * 0.5

    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d_disc = np.sqrt(((yy - cy) / rdy) ** 2 + ((xx - cx) / rdx) ** 2)
    d_cup = np.sqrt(((yy - ccy) / rcy) ** 2 + ((xx - ccx) / rcx) ** 2)
    disc_mask = d_disc <= 1.0
    cup_mask = (d_cup <= 1.0) & disc_mask

    # soft region opacities (edge widths in pixels)
    a_disc = 1.0 / (1.0 + np.exp((d_disc - 1.0) * rd / 1.2))
    a_cup = 1.0 / (1.0 + np.exp((d_cup - 1.0) * (rd * ratio) / 1.5))

    tex = _smooth_noise(texture_rng, (h, w), 3.0)
    coarse = _smooth_noise(texture_rng, (h, w), 12.0)
    r2 = ((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / (0.5 * side) ** 2
    vignette = 1.0 - 0.35 * np.clip(r2, 0, 1.5)

    bg = np.array([0.62, 0.30, 0.14]) * rng.uniform(0.9, 1.1)
    disc_col = np.array([0.88, 0.62, 0.36]) * rng.uniform(0.95, 1.05)
    cup_col = np.array([0.97, 0.80, 0.55]) * rng.uniform(0.97, 1.03)

    img = bg * (vignette + 0.06 * coarse)[..., None]
    img = img * (1 - a_disc[..., None]) + disc_col * a_disc[..., None]
    img = img * (1 - a_cup[..., None]) + cup_col * a_cup[..., None]
    img = img + 0.035 * tex[..., None]
    vessels = _vessels(rng, h, w, cy, cx)
    img = img * (1 - 0.45 * vessels[..., None])
    img = np.clip(img, 0.0, 1.0)
    mask = np.stack([disc_mask, cup_mask], axis=-1).astype(np.uint8)
    return img, mask


def apply_domain_shift(img: np.ndarray, shift: DomainShift) -> np.ndarray:
    if shift.is_identity:
        return img
    out = img * np.asarray(shift.color_gain)
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = mean + shift.contrast_scale * (out - mean) + shift.brightness_shift
    if shift.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, (shift.blur_sigma, shift.blur_sigma, 0))
    return np.clip(out, 0.0, 1.0)


def synthesize(spec: SynthSpec, domain: str, split: str) -> List[ImageSample]:
    """In-memory samples for ``domain`` in {source, target} and ``split`` in {train, test}.

    Pixels are quantized to 8 bits so in-memory and on-disk datasets agree.
    """
    if domain not in ("source", "target") or split not in ("train", "test"):
        raise ValueError(f"unknown domain/split {domain}/{split}")
    n = spec.n_images if split == "train" else spec.n_test
    shift = spec.domain_shift if domain == "target" else DomainShift()
    base = np.random.SeedSequence([spec.seed, ("source", "target").index(domain), ("train", "test").index(split)])
    out = []
    for i, child in enumerate(base.spawn(n)):
        rng = np.random.default_rng(child)
        tex_key = child.entropy if shift.texture_seed is None else [shift.texture_seed, *child.generate_state(2)]
        texture_rng = np.random.default_rng(tex_key)
        img, mask = render_fundus(rng, spec, texture_rng)
        img = apply_domain_shift(img, shift)
        img = np.round(img * 255) / 255.0
        out.append(ImageSample(f"{domain}_{split}_{i:04d}", img, mask, domain))
    return out


def generate_synthetic(spec: SynthSpec, out_dir) -> Tuple[Dict[str, DatasetManifest], Dict[str, DatasetManifest]]:
    """Write source and target datasets (PNG images and 3-level masks) with manifests.

    Returns ``(source, target)``, each a ``{"train": manifest, "test": manifest}``
    dict. Manifests are written as ``<domain>_<split>.csv``.
    """
    out_dir = Path(out_dir)
    result = []
    for domain in ("source", "target"):
        manifests = {}
        for split in ("train", "test"):
            folder = out_dir / domain / split
            folder.mkdir(parents=True, exist_ok=True)
            entries = []
            for s in synthesize(spec, domain, split):
                img_p, mask_p = folder / f"{s.id}.png", folder / f"{s.id}_mask.png"
                save_sample(s, img_p, mask_p)
                entries.append(ManifestEntry(s.id, img_p, mask_p))
            m = DatasetManifest(out_dir, split, entries, spec.image_size)
            m.write(out_dir / f"{domain}_{split}.csv")
            manifests[split] = m
        result.append(manifests)
    return result[0], result[1]


def fg_fraction(samples) -> np.ndarray:
    """Mean per-class foreground pixel fraction over labeled samples."""
    return np.mean([s.mask.reshape(-1, s.mask.shape[-1]).mean(0) for s in samples], axis=0)


def to_dict(spec: SynthSpec) -> dict:
    return dataclasses.asdict(spec)
