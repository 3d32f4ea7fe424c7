"""Core domain types and the run configuration.

Arrays follow a channel-last layout: images are ``H x W x 3`` and per-class
maps (probabilities, labels, masks) are ``H x W x C``. Class 0 is the optic
disc and class 1 the optic cup; classes are independent sigmoid outputs, so a
pixel may be positive for both.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

try:  # python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

DISC, CUP = 0, 1
CLASS_NAMES = ("disc", "cup")


class ConfigError(ValueError):
    """Raised when a configuration field is out of range or unknown."""


class FilterMode(str, enum.Enum):
    DISTANCE_FROM_LABEL = "distance_from_label"
    LITERAL_PAPER_FORMULA = "literal_paper_formula"


class Producer(str, enum.Enum):
    TEACHER = "teacher"
    STUDENT = "student"
    SOURCE = "source"


# ---------------------------------------------------------------------------
# Samples and maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    domain_tag: str = "target"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"{self.id}: pixels must be HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.ndim != 3 or m.shape[:2] != px.shape[:2]:
                raise ValueError(f"{self.id}: mask shape {m.shape} does not match image {px.shape}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{self.id}: mask values must be 0 or 1")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def replace(self, **changes) -> "ImageSample":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ProbMap:
    values: np.ndarray
    producer: Producer = Producer.TEACHER

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size and (np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class PseudoLabelMap:
    labels: np.ndarray
    gamma_used: float
    producer_id: str = "teacher"


# ---------------------------------------------------------------------------
# Parameter snapshots
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParamSnapshot:
    """Ordered name -> array mapping of parameters and normalization buffers."""

    entries: Dict[str, np.ndarray]
    step: int = 0

    def keys(self):
        return list(self.entries.keys())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.entries.items()}

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.entries.values())

    def __eq__(self, other):
        if not isinstance(other, ParamSnapshot):
            return NotImplemented
        if self.step != other.step or list(self.entries) != list(other.entries):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def save(self, path, meta: Optional[Mapping[str, Any]] = None) -> None:
        payload = {f"p:{k}": v for k, v in self.entries.items()}
        header = {"step": self.step, "order": list(self.entries), "meta": dict(meta or {})}
        payload["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> "ParamSnapshot":
        snap, _ = cls.load_with_meta(path)
        return snap

    @classmethod
    def load_with_meta(cls, path) -> Tuple["ParamSnapshot", Dict[str, Any]]:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(data["__header__"].tobytes().decode())
            entries = {k: data[f"p:{k}"].copy() for k in header["order"]}
        return cls(entries, step=header["step"]), header["meta"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip_p: float = 0.5
    scale_range: Tuple[float, float] = (0.9, 1.1)
    op_p: float = 0.8
    erase_area: Tuple[float, float] = (0.02, 0.10)
    contrast_range: Tuple[float, float] = (0.5, 1.5)
    noise_fraction: Tuple[float, float] = (0.01, 0.05)
    loss_on_erased: bool = True


@dataclass(frozen=True)
class CbmtConfig:
    gamma: float = 0.75
    lambda_ema: float = 0.98
    alpha: float = 0.2
    calibrated_classes: Tuple[int, ...] = (CUP,)
    lr_adapt: float = 5e-4
    lr_source: float = 1e-3
    lr_source_decay: float = 0.98
    epochs_adapt: int = 20
    epochs_source: int = 200
    batch_size: int = 8
    optimizer_momenta: Tuple[float, float] = (0.9, 0.99)
    filter_mode: FilterMode = FilterMode.DISTANCE_FROM_LABEL
    seed: int = 0
    roi_size: Tuple[int, int] = (512, 512)
    num_classes: int = 2
    model: str = "tiny_unet"
    # ablation switches; all on is the full method
    strong_aug: bool = True
    calibration: bool = True
    # "epoch": weights frozen within an epoch; "streaming": running estimate
    calibration_timing: str = "epoch"
    # "raw": statistics from unit-weight BCE; "calibrated": from the weighted loss
    stats_loss: str = "raw"
    ema_buffers: bool = True
    lr_factor: float = 1.0
    eval_model: str = "teacher"
    # teacher forward during adaptation: "running" (stored statistics) or "batch" (target batch statistics)
    teacher_norm: str = "running"
    checkpoint_every: int = 0
    # source training sees strong views too, so the student is not surprised by them later
    source_strong_aug: bool = False
    augment: AugmentParams = field(default_factory=AugmentParams)

    def replace(self, **changes) -> "CbmtConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, AugmentParams):
                v = {k: (list(x) if isinstance(x, tuple) else x) for k, x in dataclasses.asdict(v).items()}
            elif isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def to_toml(self) -> str:
        d = self.to_dict()
        aug = d.pop("augment")
        lines = [f"{k} = {_toml_value(v)}" for k, v in d.items()]
        lines.append("")
        lines.append("[augment]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in aug.items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CbmtConfig":
        return validate_config(_coerce(cls, data))

    @classmethod
    def from_toml(cls, path) -> "CbmtConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _coerce(cls, data: Mapping[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if isinstance(current, AugmentParams):
            value = value if isinstance(value, AugmentParams) else _coerce(AugmentParams, value)
        elif isinstance(current, FilterMode):
            try:
                value = FilterMode(value)
            except ValueError:
                raise ConfigError(f"filter_mode: unknown mode {value!r}") from None
        elif isinstance(current, bool):
            value = _as_bool(name, value)
        elif isinstance(current, tuple):
            item_type = type(current[0]) if current else int
            value = tuple(item_type(x) for x in value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, int):
            value = int(value)
        kwargs[name] = value
    return cls(**kwargs)


def _as_bool(name, value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on", "false", "0", "no", "off"):
        return value.lower() in ("true", "1", "yes", "on")
    raise ConfigError(f"{name}: expected a boolean, got {value!r}")


def validate_config(cfg: CbmtConfig) -> CbmtConfig:
    """Return ``cfg`` unchanged if every field is in range, else raise ConfigError."""
    if not 0.0 < cfg.gamma < 1.0:
        raise ConfigError("gamma out of (0,1)")
    if not 0.0 <= cfg.lambda_ema <= 1.0:
        raise ConfigError("lambda_ema out of [0,1]")
    if not 0.0 <= cfg.alpha < 1.0:
        raise ConfigError("alpha out of [0,1)")
    if cfg.num_classes < 1:
        raise ConfigError("num_classes must be positive")
    bad = [k for k in cfg.calibrated_classes if not 0 <= k < cfg.num_classes]
    if bad:
        raise ConfigError(f"calibrated_classes: index {bad[0]} out of range")
    for name in ("lr_adapt", "lr_source", "lr_source_decay", "lr_factor"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive")
    for name in ("epochs_adapt", "epochs_source", "checkpoint_every"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(cfg.optimizer_momenta) != 2 or not all(0 <= b < 1 for b in cfg.optimizer_momenta):
        raise ConfigError("optimizer_momenta must be two values in [0,1)")
    if len(cfg.roi_size) != 2 or min(cfg.roi_size) < 1:
        raise ConfigError("roi_size must be two positive integers")
    if cfg.calibration_timing not in ("epoch", "streaming"):
        raise ConfigError("calibration_timing must be 'epoch' or 'streaming'")
    if cfg.stats_loss not in ("raw", "calibrated"):
        raise ConfigError("stats_loss must be 'raw' or 'calibrated'")
    if cfg.eval_model not in ("teacher", "student", "both"):
        raise ConfigError("eval_model must be 'teacher', 'student' or 'both'")
    if cfg.teacher_norm not in ("running", "batch"):
        raise ConfigError("teacher_norm must be 'running' or 'batch'")
    a = cfg.augment
    if not (0 <= a.flip_p <= 1 and 0 <= a.op_p <= 1):
        raise ConfigError("augment: probabilities must lie in [0,1]")
    for name in ("scale_range", "erase_area", "contrast_range", "noise_fraction"):
        lo, hi = getattr(a, name)
        if lo > hi or lo < 0:
            raise ConfigError(f"augment.{name} must be an ordered non-negative range")
    if a.erase_area[1] >= 1 or a.noise_fraction[1] > 1:
        raise ConfigError("augment: area fractions must be below 1")
    return cfg


def save_config(cfg: CbmtConfig, path) -> None:
    Path(path).write_text(cfg.to_toml())
