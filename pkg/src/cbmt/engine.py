"""Source training and the class-balanced mean-teacher adaptation loop."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import augment as aug
from .calibration import (CalibrationStats, accumulate_stats, append_stats_csv, bce_loss, class_weights,
                          finalize_epoch, weighted_bce)
from .datamodel import CLASS_NAMES, CbmtConfig, ImageSample, ParamSnapshot
from .meanteacher import TorchAdapter, ema_update, init_pair
from .metrics import EvalResult
from .models import build_model
from .pseudo import informative_pixel_mask, make_pseudo_labels

logger = logging.getLogger(__name__)

EVAL_THRESHOLD = 0.5

ABLATION_MODES = {
    "PL": dict(lambda_ema=0.0, strong_aug=False, calibration=False),
    "+EMA": dict(strong_aug=False, calibration=False),
    "+EMA+Aug": dict(calibration=False),
    "+EMA+Calib": dict(strong_aug=False),
    "full": dict(),
}

# learning-rate reduction applied to vanilla pseudo-labeling runs
PL_LR_FACTOR = 1.0 / 20.0


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dice: List[float]
    bg_weight: List[float]
    eta_ratio: List[float]
    fg_fraction: List[float]
    kept_fg: List[int]
    kept_bg: List[int]
    wall_time: float
    student_dice: Optional[List[float]] = None

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")


@dataclass
class RunLog:
    class_names: Sequence[str] = CLASS_NAMES
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def column(self, name: str, k: Optional[int] = None) -> np.ndarray:
        vals = []
        for r in self.records:
            v = r.mean_dice if name == "mean_dice" else getattr(r, name)
            vals.append(v if k is None else v[k])
        return np.asarray(vals, dtype=float)

    def fieldnames(self) -> List[str]:
        names = ["epoch", "loss", "mean_dice"]
        for prefix in ("dice", "bg_weight", "eta_ratio", "fg_fraction", "kept_fg", "kept_bg"):
            names += [f"{prefix}_{n}" for n in self.class_names]
        if self.records and self.records[0].student_dice is not None:
            names += [f"student_dice_{n}" for n in self.class_names]
        return names + ["wall_time"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.fieldnames())
            writer.writeheader()
            for r in self.records:
                row = {"epoch": r.epoch, "loss": r.loss, "mean_dice": r.mean_dice, "wall_time": r.wall_time}
                for prefix in ("dice", "bg_weight", "eta_ratio", "fg_fraction", "kept_fg", "kept_bg", "student_dice"):
                    values = getattr(r, prefix)
                    if values is None:
                        continue
                    for n, v in zip(self.class_names, values):
                        row[f"{prefix}_{n}"] = v
                writer.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        """Parse a run log; columns other than ``epoch`` are optional."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or "epoch" not in reader.fieldnames:
                raise ValueError(f"{path}:1: missing 'epoch' column")
            names = [c[len("dice_"):] for c in reader.fieldnames if c.startswith("dice_")]
            log = cls(tuple(names))
            for lineno, row in enumerate(reader, 2):
                try:
                    def vec(prefix, typ=float):
                        cols = [row.get(f"{prefix}_{n}") for n in names]
                        if any(c in (None, "") for c in cols):
                            return [float("nan")] * len(names)
                        return [typ(c) for c in cols]

                    sd = vec("student_dice")
                    log.append(EpochRecord(
                        epoch=int(row["epoch"]),
                        loss=float(row.get("loss") or "nan"),
                        dice=vec("dice"),
                        bg_weight=vec("bg_weight"),
                        eta_ratio=vec("eta_ratio"),
                        fg_fraction=vec("fg_fraction"),
                        kept_fg=vec("kept_fg"),
                        kept_bg=vec("kept_bg"),
                        wall_time=float(row.get("wall_time") or "nan"),
                        student_dice=None if np.isnan(sd).all() else sd,
                    ))
                except (TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
        return log


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def seed_everything(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def to_tensor(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack ``H x W x C`` arrays into an ``N x C x H x W`` float32 tensor."""
    return torch.from_numpy(np.stack(arrays).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def predict_probs(adapter: TorchAdapter, samples: Sequence[ImageSample], batch_size: int = 16) -> np.ndarray:
    """Eval-mode sigmoid probabilities, ``N x H x W x C``."""
    was_training = adapter.module.training
    adapter.set_mode("eval")
    out = []
    for i in range(0, len(samples), batch_size):
        x = to_tensor([s.pixels for s in samples[i:i + batch_size]])
        out.append(torch.sigmoid(adapter(x)).permute(0, 2, 3, 1).numpy())
    adapter.module.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_adapter(adapter: TorchAdapter, samples: Sequence[ImageSample], threshold: float = EVAL_THRESHOLD,
                     class_names=CLASS_NAMES):
    """Dice/ASSD on labeled samples plus the predicted foreground fraction per class."""
    probs = predict_probs(adapter, samples)
    preds = probs > threshold
    result = EvalResult(list(class_names))
    for s, p in zip(samples, preds):
        if s.mask is None:
            raise ValueError(f"sample {s.id} has no ground-truth mask")
        result.add(s.id, p, s.mask.astype(bool))
    return result, preds.reshape(-1, preds.shape[-1]).mean(0)


def dice_only(adapter: TorchAdapter, samples: Sequence[ImageSample], threshold: float = EVAL_THRESHOLD):
    """Per-class mean Dice and predicted fg fraction (cheaper than a full EvalResult)."""
    from .metrics import dice

    preds = predict_probs(adapter, samples) > threshold
    scores = [[dice(p[..., k], s.mask[..., k]) for k in range(p.shape[-1])] for s, p in zip(samples, preds)]
    return np.mean(scores, axis=0), preds.reshape(-1, preds.shape[-1]).mean(0)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def _forward_batch_norm(module: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Forward with batch statistics in every norm layer, leaving stored statistics untouched."""
    norms = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [(m.training, m.track_running_stats) for m in norms]
    for m in norms:
        m.train()
        m.track_running_stats = False
    try:
        return module(images)
    finally:
        for m, (training, track) in zip(norms, saved):
            m.train(training)
            m.track_running_stats = track


def _bn_train_only(module: nn.Module) -> None:
    module.train()
    for m in module.modules():
        if isinstance(m, nn.Dropout2d) or isinstance(m, nn.Dropout):
            m.eval()


@torch.no_grad()
def dataset_loss(adapter: TorchAdapter, samples: Sequence[ImageSample]) -> float:
    """Supervised BCE over labeled samples with batch-statistics normalization and no dropout."""
    module = copy.deepcopy(adapter.module)
    _bn_train_only(module)
    x = to_tensor([s.pixels for s in samples])
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))
    probs = torch.sigmoid(module(x)).permute(0, 2, 3, 1)
    return float(bce_loss(probs, y)[1])


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------


def source_lr(cfg: CbmtConfig, epoch: int) -> float:
    return cfg.lr_source * cfg.lr_source_decay ** epoch


def train_source(samples: Sequence[ImageSample], cfg: CbmtConfig, model: Optional[TorchAdapter] = None,
                 loss_log: Optional[list] = None):
    """Supervised BCE training on labeled source samples; returns ``(snapshot, per-epoch losses)``."""
    for s in samples:
        if s.mask is None:
            raise ValueError(f"source sample {s.id} has no mask")
    if not samples:
        raise ValueError("empty source dataset")
    seed_everything(cfg.seed)
    model = model or build_model(cfg.model, cfg.num_classes)
    model.set_mode("train")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_source, betas=tuple(cfg.optimizer_momenta))
    rng = np.random.default_rng(cfg.seed)
    fill = np.mean([s.pixels.mean(axis=(0, 1)) for s in samples], axis=0)
    losses = [] if loss_log is None else loss_log
    for epoch in range(cfg.epochs_source):
        for g in opt.param_groups:
            g["lr"] = source_lr(cfg, epoch)
        total, count = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            pairs = [aug.make_pair(samples[i], aug.derive_seed(cfg.seed, samples[i].id, epoch), cfg.augment, fill,
                                   strong=cfg.source_strong_aug) for i in idx]
            views = [p.strong_view for p in pairs]
            x = to_tensor([v.pixels for v in views])
            y = torch.from_numpy(np.stack([v.mask for v in views]).astype(np.float32))
            probs = torch.sigmoid(model(x)).permute(0, 2, 3, 1)
            _, loss = bce_loss(probs, y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite source loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        logger.info("source epoch %d lr %.3g loss %.5f", epoch, source_lr(cfg, epoch), losses[-1])
    snap = model.read_params()
    return ParamSnapshot(snap.entries, step=cfg.epochs_source), losses


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


def ablation_config(cfg: CbmtConfig, mode: str) -> CbmtConfig:
    """Config for one row of the component ablation grid."""
    try:
        changes = dict(ABLATION_MODES[mode])
    except KeyError:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {list(ABLATION_MODES)}") from None
    if mode == "PL":
        changes["lr_factor"] = cfg.lr_factor * PL_LR_FACTOR
    return cfg.replace(**changes)


def _weights(stats, cfg: CbmtConfig) -> np.ndarray:
    if not cfg.calibration:
        return np.ones(stats.num_classes)
    return class_weights(stats, cfg.calibrated_classes, streaming=cfg.calibration_timing == "streaming")


def adapt(target: Sequence[ImageSample], source_ckpt: ParamSnapshot, cfg: CbmtConfig,
          builder: Optional[Callable[[], TorchAdapter]] = None, eval_set: Optional[Sequence[ImageSample]] = None,
          out_dir=None, callback=None):
    """Adapt a source checkpoint to unlabeled target samples.

    Returns ``(teacher snapshot, RunLog)``. ``eval_set`` (labeled) is used for
    per-epoch logging only. ``callback(record, pair)`` runs after each epoch.
    """
    if not target:
        raise ValueError("empty target dataset")
    builder = builder or (lambda: build_model(cfg.model, cfg.num_classes))
    seed_everything(cfg.seed)
    pair = init_pair(source_ckpt, builder, cfg.lambda_ema, cfg.ema_buffers)
    opt = torch.optim.Adam(pair.student.parameters(), lr=cfg.lr_adapt * cfg.lr_factor,
                           betas=tuple(cfg.optimizer_momenta))
    rng = np.random.default_rng(cfg.seed)
    stats = CalibrationStats.empty(cfg.num_classes)
    fill = np.mean([s.pixels.mean(axis=(0, 1)) for s in target], axis=0)
    classes = tuple(cfg.calibrated_classes) if cfg.calibration else ()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        stats_csv = out_dir / "calibration.csv"
        if stats_csv.exists():
            stats_csv.unlink()
    log = RunLog(CLASS_NAMES[:cfg.num_classes] if cfg.num_classes <= len(CLASS_NAMES)
                 else tuple(f"class{k}" for k in range(cfg.num_classes)))
    fg_probe = eval_set if eval_set else target
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs_adapt):
        epoch_loss, seen = 0.0, 0
        applied = _weights(stats, cfg)
        for b, idx in enumerate(_batches(len(target), cfg.batch_size, rng)):
            if len(idx) == 0:
                raise ValueError(f"empty batch at epoch {epoch}")
            pairs = [aug.make_pair(target[i], aug.derive_seed(cfg.seed, target[i].id, epoch), cfg.augment, fill,
                                   strong=cfg.strong_aug) for i in idx]
            weak = to_tensor([p.weak_view.pixels for p in pairs])
            strong = to_tensor([p.strong_view.pixels for p in pairs])
            pixel_weight = None
            if cfg.strong_aug and not cfg.augment.loss_on_erased:
                pixel_weight = torch.from_numpy(np.stack([aug.erase_mask(p) for p in pairs]))[..., None]

            with torch.no_grad():
                pair.teacher.set_mode("eval")
                t_logits = (_forward_batch_norm(pair.teacher.module, weak) if cfg.teacher_norm == "batch"
                            else pair.teacher(weak))
                t_probs = torch.sigmoid(t_logits).permute(0, 2, 3, 1)
            labels = make_pseudo_labels(t_probs, cfg.gamma)

            pair.student.set_mode("train")
            s_probs = torch.sigmoid(pair.student(strong)).permute(0, 2, 3, 1)
            if cfg.calibration and cfg.calibration_timing == "streaming":
                applied = _weights(stats, cfg)
            loss = weighted_bce(s_probs, labels, applied, pixel_weight)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} batch {b}")

            with torch.no_grad():
                raw, _ = bce_loss(s_probs.detach(), labels)
                if cfg.stats_loss == "calibrated":
                    w = torch.as_tensor(applied, dtype=raw.dtype)
                    raw = torch.where(labels > 0.5, raw, raw * w)
                # the filter looks at the teacher probabilities the labels came from
                keep = informative_pixel_mask(t_probs, labels, cfg.gamma, cfg.alpha, cfg.filter_mode)
                stats = accumulate_stats(stats, raw, labels, keep)

            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update(pair)
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)

        before = stats
        stats = finalize_epoch(stats, classes)
        if out_dir is not None:
            append_stats_csv(out_dir / "calibration.csv", before, stats, range(cfg.num_classes))

        evaluated = pair.student if cfg.eval_model == "student" else pair.teacher
        if eval_set:
            dice_k, _ = dice_only(evaluated, eval_set)
        else:
            dice_k = np.full(cfg.num_classes, np.nan)
        fg = (predict_probs(evaluated, fg_probe) > EVAL_THRESHOLD)
        fg = fg.reshape(-1, fg.shape[-1]).mean(0)
        student_dice = None
        if cfg.eval_model == "both" and eval_set:
            student_dice = [float(v) for v in dice_only(pair.student, eval_set)[0]]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = stats.eta_fg / stats.eta_bg
        rec = EpochRecord(
            epoch=epoch + 1,
            loss=epoch_loss / seen,
            dice=[float(v) for v in dice_k],
            bg_weight=[float(v) for v in applied],
            eta_ratio=[float(v) for v in ratio],
            fg_fraction=[float(v) for v in fg],
            kept_fg=[int(v) for v in before.count_fg],
            kept_bg=[int(v) for v in before.count_bg],
            wall_time=time.perf_counter() - t0,
            student_dice=student_dice,
        )
        log.append(rec)
        logger.info("adapt epoch %d loss %.5f dice %s bg_weight %s fg %s", rec.epoch, rec.loss,
                    np.round(rec.dice, 4), np.round(rec.bg_weight, 4), np.round(rec.fg_fraction, 4))
        if out_dir is not None and cfg.checkpoint_every and rec.epoch % cfg.checkpoint_every == 0:
            pair.teacher.read_params().save(out_dir / f"ckpt_epoch{rec.epoch}.bin",
                                            {"config": cfg.digest(), "step": pair.step, "role": "teacher"})
        if callback is not None:
            callback(rec, pair)

    final = pair.teacher.read_params()
    final = ParamSnapshot(final.entries, step=pair.step)
    if out_dir is not None:
        final.save(out_dir / "teacher_final.bin", {"config": cfg.digest(), "step": pair.step, "role": "teacher"})
        student = pair.student.read_params()
        ParamSnapshot(student.entries, step=pair.step).save(
            out_dir / "student_final.bin", {"config": cfg.digest(), "step": pair.step, "role": "student"})
    return final, log


def run_ablation(mode: str, target, source_ckpt, cfg: CbmtConfig, **kwargs):
    """Adaptation run configured as one row of the ablation grid; returns the RunLog."""
    _, log = adapt(target, source_ckpt, ablation_config(cfg, mode), **kwargs)
    return log


def summarize(log: RunLog, result: Optional[EvalResult], cfg: CbmtConfig) -> Dict:
    """Deterministic run summary (no timings)."""
    last = log.records[-1] if log.records else None
    out = {
        "config_digest": cfg.digest(),
        "epochs": len(log.records),
        "final_loss": last.loss if last else None,
        "losses": [r.loss for r in log.records],
        "final_bg_weight": dict(zip(log.class_names, last.bg_weight)) if last else None,
    }
    if result is not None:
        out["metrics"] = result.aggregates()
        out["mean_dice"] = result.mean_dice()
    return out


def write_json(obj, path) -> None:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (float, np.floating)):
            return None if np.isnan(o) else float(o)
        if isinstance(o, np.integer):
            return int(o)
        return o

    with open(path, "w") as fh:
        json.dump(clean(obj), fh, indent=2, sort_keys=True)


__all__ = [
    "ABLATION_MODES", "EpochRecord", "RunLog", "ablation_config", "adapt", "dataset_loss", "evaluate_adapter",
    "predict_probs", "run_ablation", "source_lr", "summarize", "train_source",
]
