"""Desk-scale synthetic benchmark: source training plus the ablation grid.

Results are cached on disk under a key made from the benchmark settings and
a fingerprint of this package's source files, so a cached run is reused only
when it would be recomputed bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import data_io, engine
from .datamodel import CbmtConfig, ParamSnapshot
from .models import build_model

logger = logging.getLogger(__name__)

GRID = ("PL", "+EMA", "+EMA+Aug", "+EMA+Calib", "full")


def _bench_config() -> CbmtConfig:
    return CbmtConfig(roi_size=(128, 128), epochs_source=200, epochs_adapt=100, source_strong_aug=True,
                      teacher_norm="batch")


@dataclass(frozen=True)
class BenchmarkSetup:
    synth: data_io.SynthSpec = data_io.SynthSpec(domain_shift=data_io.BENCHMARK_SHIFT)
    config: CbmtConfig = field(default_factory=_bench_config)
    seeds: Tuple[int, ...] = (0, 1, 2)

    def key(self) -> str:
        payload = json.dumps({"synth": dataclasses.asdict(self.synth), "config": self.config.to_dict(),
                              "code": code_fingerprint()}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def code_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if path.name == "cli.py":  # presentation only
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class Benchmark:
    """Lazily computed, disk-cached benchmark artifacts."""

    def __init__(self, setup: BenchmarkSetup = BenchmarkSetup(), cache_dir=None):
        self.setup = setup
        self.cache = Path(cache_dir) if cache_dir is not None else None
        if self.cache is not None:
            self.cache.mkdir(parents=True, exist_ok=True)
        self._data = None
        self._source = None
        self._runs: Dict[Tuple[str, int], engine.RunLog] = {}

    def _path(self, name: str) -> Optional[Path]:
        return None if self.cache is None else self.cache / f"{self.setup.key()}-{name}"

    @property
    def data(self):
        if self._data is None:
            spec = self.setup.synth
            self._data = {f"{d}_{s}": data_io.synthesize(spec, d, s) for d in ("source", "target")
                          for s in ("train", "test")}
        return self._data

    def source(self) -> ParamSnapshot:
        if self._source is None:
            path = self._path("source.bin")
            if path is not None and path.exists():
                self._source = ParamSnapshot.load(path)
            else:
                logger.info("training source model (%d epochs)", self.setup.config.epochs_source)
                self._source, _ = engine.train_source(self.data["source_train"], self.setup.config)
                if path is not None:
                    self._source.save(path, {"role": "source"})
        return self._source

    def source_dice(self, split: str = "target_test") -> np.ndarray:
        model = build_model(self.setup.config.model, self.setup.config.num_classes)
        model.write_params(self.source())
        return engine.dice_only(model, self.data[split])[0]

    def run(self, mode: str, seed: int = 0) -> engine.RunLog:
        if (mode, seed) in self._runs:
            return self._runs[(mode, seed)]
        tag = mode.replace("+", "p")
        path = self._path(f"run-{tag}-seed{seed}.csv")
        if path is not None and path.exists():
            log = engine.RunLog.read_csv(path)
        else:
            cfg = engine.ablation_config(self.setup.config.replace(seed=seed), mode)
            logger.info("adapting: mode %s seed %d", mode, seed)
            _, log = engine.adapt(self.data["target_train"], self.source(), cfg, eval_set=self.data["target_test"])
            if path is not None:
                log.write_csv(path)
        self._runs[(mode, seed)] = log
        return log

    def grid(self, modes: Sequence[str] = GRID, seeds: Optional[Sequence[int]] = None) -> Dict[str, np.ndarray]:
        """Final-epoch mean Dice per mode, one entry per seed."""
        seeds = self.setup.seeds if seeds is None else seeds
        return {m: np.array([self.run(m, s).column("mean_dice")[-1] for s in seeds]) for m in modes}


def summarize_run(log: engine.RunLog) -> Dict[str, float]:
    md = log.column("mean_dice")
    cup = log.column("fg_fraction", len(log.class_names) - 1)
    return {
        "final_dice": float(md[-1]),
        "best_dice": float(md.max()),
        "best_epoch": int(log.column("epoch")[int(md.argmax())]),
        "cup_fraction_first": float(cup[0]),
        "cup_fraction_last": float(cup[-1]),
    }


def report(bench: Benchmark) -> Dict:
    out = {"setup_key": bench.setup.key(), "source_dice": [float(v) for v in bench.source_dice()]}
    out["source_mean_dice"] = float(np.mean(out["source_dice"]))
    grid = bench.grid()
    out["grid_final_dice"] = {m: [float(v) for v in vals] for m, vals in grid.items()}
    out["grid_mean"] = {m: float(vals.mean()) for m, vals in grid.items()}
    out["runs"] = {m: summarize_run(bench.run(m, bench.setup.seeds[0])) for m in GRID}
    return out
