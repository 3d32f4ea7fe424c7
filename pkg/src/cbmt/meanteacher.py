"""Teacher/student pair, the EMA update and the model-adapter contract."""
from __future__ import annotations

import abc
import copy
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np
import torch
from torch import nn

from .datamodel import ParamSnapshot


class CheckpointMismatchError(ValueError):
    """A checkpoint's key set or shapes do not match the architecture."""


class ModelAdapter(abc.ABC):
    """What the training loop needs from a segmentation network."""

    @abc.abstractmethod
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``N x 3 x H x W`` images in [0, 1] -> ``N x C x H x W`` logits."""

    @abc.abstractmethod
    def read_params(self) -> ParamSnapshot: ...

    @abc.abstractmethod
    def write_params(self, snapshot: ParamSnapshot) -> None: ...

    @abc.abstractmethod
    def set_mode(self, mode: str) -> None: ...

    def __call__(self, images):
        return self.forward(images)


class TorchAdapter(ModelAdapter):
    """Adapter over an ``nn.Module``; snapshots cover parameters and buffers."""

    def __init__(self, module: nn.Module):
        self.module = module

    def forward(self, images):
        return self.module(images)

    def state(self) -> Dict[str, torch.Tensor]:
        return self.module.state_dict(keep_vars=False)

    def read_params(self) -> ParamSnapshot:
        return ParamSnapshot({k: v.detach().cpu().numpy().copy() for k, v in self.state().items()})

    def write_params(self, snapshot: ParamSnapshot) -> None:
        check_compatible(snapshot, self.read_params())
        state = {k: torch.from_numpy(np.array(v)) for k, v in snapshot.entries.items()}
        self.module.load_state_dict(state, strict=True)

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.module.train(mode == "train")

    def parameters(self):
        return self.module.parameters()


def check_compatible(snapshot: ParamSnapshot, reference: ParamSnapshot) -> None:
    """Raise CheckpointMismatchError listing missing, unexpected and mis-shaped keys."""
    want, have = reference.shapes(), snapshot.shapes()
    missing = [k for k in want if k not in have]
    unexpected = [k for k in have if k not in want]
    shape = [f"{k}: {have[k]} != {want[k]}" for k in want if k in have and have[k] != want[k]]
    if missing or unexpected or shape:
        parts = []
        if missing:
            parts.append("missing keys: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected keys: " + ", ".join(unexpected))
        if shape:
            parts.append("shape mismatch: " + "; ".join(shape))
        raise CheckpointMismatchError("checkpoint does not match architecture (" + " | ".join(parts) + ")")


@dataclass
class TeacherStudentPair:
    teacher: TorchAdapter
    student: TorchAdapter
    lambda_ema: float
    step: int = 0
    include_buffers: bool = True


def init_pair(source_checkpoint: ParamSnapshot, builder: Callable[[], TorchAdapter], lambda_ema: float = 0.98,
              include_buffers: bool = True) -> TeacherStudentPair:
    """Build teacher and student from the same source weights."""
    student = builder()
    student.write_params(source_checkpoint)
    teacher = TorchAdapter(copy.deepcopy(student.module))
    for p in teacher.module.parameters():
        p.requires_grad_(False)
    teacher.set_mode("eval")
    student.set_mode("train")
    return TeacherStudentPair(teacher, student, lambda_ema, step=0, include_buffers=include_buffers)


@torch.no_grad()
def ema_update(pair: TeacherStudentPair) -> TeacherStudentPair:
    """``teacher <- lambda * teacher + (1 - lambda) * student`` on every floating entry.

    Integer buffers (batch counters) are copied from the student. With
    ``include_buffers=False`` normalization statistics are left untouched.
    """
    lam = pair.lambda_ema
    t_state = pair.teacher.module.state_dict()
    s_state = pair.student.module.state_dict()
    param_names = {n for n, _ in pair.teacher.module.named_parameters()}
    for name, t in t_state.items():
        s = s_state[name]
        if name not in param_names and not pair.include_buffers:
            continue
        if not t.is_floating_point():
            t.copy_(s)
            continue
        # written as t + (1 - lam)(s - t) so a teacher equal to the student stays bit-identical
        if lam == 0.0:
            t.copy_(s)
        else:
            t.add_(s - t, alpha=1.0 - lam)
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"EMA update produced non-finite values in {name!r} at step {pair.step}")
    pair.step += 1
    return pair


def ema_snapshot(teacher: ParamSnapshot, student: ParamSnapshot, lambda_ema: float) -> ParamSnapshot:
    """Pure-array form of the EMA update, for snapshots held outside a model."""
    check_compatible(student, teacher)
    out = {}
    for name, t in teacher.entries.items():
        s = student.entries[name]
        if np.issubdtype(t.dtype, np.floating):
            v = s.copy() if lambda_ema == 0.0 else t + (1.0 - lambda_ema) * (s - t)
            if not np.isfinite(v).all():
                raise FloatingPointError(f"EMA update produced non-finite values in {name!r}")
            out[name] = v.astype(t.dtype, copy=False)
        else:
            out[name] = s.copy()
    return ParamSnapshot(out, step=teacher.step + 1)


def max_abs_gap(pair: TeacherStudentPair) -> Tuple[str, float]:
    """Largest elementwise ``|teacher - student|`` and the entry it occurs in."""
    worst, where = 0.0, ""
    s_state = pair.student.module.state_dict()
    for name, t in pair.teacher.module.state_dict().items():
        if t.is_floating_point():
            gap = (t - s_state[name]).abs().max().item() if t.numel() else 0.0
            if gap > worst:
                worst, where = gap, name
    return where, worst
