"""Command-line interface: ``cbmt <command> [options]``.

Commands: synth-gen, train-source, adapt, evaluate, plot-curves. Every
command writes its outputs under ``--out`` together with the effective
configuration (defaults, then ``--config`` TOML, then flags).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data_io, engine
from .datamodel import CbmtConfig, ConfigError, FilterMode, ParamSnapshot, save_config, validate_config
from .meanteacher import CheckpointMismatchError
from .models import build_model

logger = logging.getLogger("cbmt")

ADAPT_MODES = {"cbmt": "full", "vanilla-pl": "PL"}


class UsageError(Exception):
    """Bad command-line input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# config flags
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration overrides")
    group.add_argument("--config", type=Path, help="TOML file with config fields")
    for f in dataclasses.fields(CbmtConfig):
        if f.name == "augment":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(CbmtConfig(), f.name)
        if isinstance(default, bool):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, FilterMode):
            group.add_argument(flag, dest=f.name, choices=[m.value for m in FilterMode], default=None)
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else int
            group.add_argument(flag, dest=f.name, type=kind, nargs="*", default=None, metavar=f.name.upper())
        else:
            group.add_argument(flag, dest=f.name, type=type(default), default=None)


def resolve_config(args) -> CbmtConfig:
    """Defaults, then the TOML file, then explicit flags; ``CBMT_SEED`` fills in a missing seed."""
    data = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        data.update(CbmtConfig.from_toml(args.config).to_dict())
    for f in dataclasses.fields(CbmtConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    if "seed" not in data and os.environ.get("CBMT_SEED"):
        try:
            data["seed"] = int(os.environ["CBMT_SEED"])
        except ValueError:
            raise UsageError(f"CBMT_SEED must be an integer, got {os.environ['CBMT_SEED']!r}") from None
    return validate_config(CbmtConfig.from_dict(data))


def _prepare_out(args, cfg: CbmtConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    logger.info("effective config:\n%s", cfg.to_toml())
    return out


def _load(path, roi_size, split, need_labels=False):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    manifest = data_io.DatasetManifest.read(path, split, roi_size)
    samples = list(data_io.load_dataset(manifest))
    if not samples:
        raise UsageError(f"{path}: no samples")
    if need_labels:
        missing = [s.id for s in samples if s.mask is None]
        if missing:
            raise ValueError(f"{path}: unlabeled samples: {', '.join(missing[:5])}")
    return samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> None:
    shift = data_io.BENCHMARK_SHIFT if args.shift == "benchmark" else data_io.DomainShift()
    spec = data_io.SynthSpec(n_images=args.n_images, n_test=args.n_test, image_size=(args.size, args.size),
                             domain_shift=shift, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = data_io.generate_synthetic(spec, out)
    engine.write_json(data_io.to_dict(spec), out / "synth_spec.json")
    print(f"wrote {sum(len(m) for m in source.values())} source and "
          f"{sum(len(m) for m in target.values())} target samples to {out}")


def cmd_train_source(args) -> None:
    cfg = resolve_config(args)
    samples = _load(args.data, cfg.roi_size, "train", need_labels=True)
    out = _prepare_out(args, cfg)
    snap, losses = engine.train_source(samples, cfg)
    snap.save(out / "source.bin", {"config": cfg.digest(), "role": "source"})
    with open(out / "source_loss.csv", "w") as fh:
        fh.write("epoch,loss,lr\n")
        for e, loss in enumerate(losses):
            fh.write(f"{e},{loss!r},{engine.source_lr(cfg, e)!r}\n")
    engine.write_json({"config_digest": cfg.digest(), "epochs": len(losses), "losses": losses},
                      out / "summary.json")
    print(f"source checkpoint: {out / 'source.bin'}")


def _adapt_mode(mode: str) -> str:
    if mode in ADAPT_MODES:
        return ADAPT_MODES[mode]
    if mode.startswith("ablation:"):
        row = mode.split(":", 1)[1]
        if row in engine.ABLATION_MODES:
            return row
    raise UsageError(f"unknown --mode {mode!r}; use cbmt, vanilla-pl or ablation:<"
                     + "|".join(engine.ABLATION_MODES) + ">")


def cmd_adapt(args) -> None:
    row = _adapt_mode(args.mode)
    cfg = engine.ablation_config(resolve_config(args), row)
    validate_config(cfg)
    if not Path(args.source_ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.source_ckpt}")
    source = ParamSnapshot.load(args.source_ckpt)
    target = _load(args.target_data, cfg.roi_size, "train")
    eval_set = _load(args.eval_data, cfg.roi_size, "test", need_labels=True) if args.eval_data else None
    out = _prepare_out(args, cfg)
    teacher, log = engine.adapt(target, source, cfg, eval_set=eval_set, out_dir=out)
    log.write_csv(out / "runlog.csv")
    result = None
    if eval_set is not None:
        model = build_model(cfg.model, cfg.num_classes)
        model.write_params(teacher)
        result, _ = engine.evaluate_adapter(model, eval_set)
        result.write_csv(out / "metrics.csv")
    engine.write_json(engine.summarize(log, result, cfg), out / "summary.json")
    print(f"teacher checkpoint: {out / 'teacher_final.bin'}")


def cmd_evaluate(args) -> None:
    cfg = resolve_config(args)
    samples = _load(args.data, cfg.roi_size, "test", need_labels=True)
    model = build_model(cfg.model, cfg.num_classes)
    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    model.write_params(ParamSnapshot.load(args.ckpt))
    out = _prepare_out(args, cfg)
    result, _ = engine.evaluate_adapter(model, samples)
    result.write_csv(out / "metrics.csv")
    result.write_json(out / "metrics.json")
    for name, agg in result.aggregates().items():
        print(f"{name}: dice {agg['dice_mean']:.4f} +- {agg['dice_std']:.4f}  "
              f"assd {agg['assd_mean']:.3f} +- {agg['assd_std']:.3f}")


def cmd_plot_curves(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = [(Path(p), engine.RunLog.read_csv(p)) for p in args.runlog]
    labels = args.label or [p.parent.name or p.stem for p, _ in logs]
    if len(labels) != len(logs):
        raise UsageError("--label must be given once per --runlog")
    def cup_fraction(log):
        if not log.class_names or not log.records:
            return None
        values = log.column("fg_fraction", len(log.class_names) - 1)
        return None if np.isnan(values).all() else values

    fractions = [cup_fraction(log) for _, log in logs]
    for (path, _), frac in zip(logs, fractions):
        if frac is None:
            warnings.warn(f"{path}: no fg_fraction columns; left out of the fraction panel", RuntimeWarning)
    panels = ["dice"] + (["fg"] if any(f is not None for f in fractions) else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(5.5 * len(panels), 4), squeeze=False)
    for (_, log), label, frac in zip(logs, labels, fractions):
        epochs = log.column("epoch")
        axes[0, 0].plot(epochs, 100 * log.column("mean_dice"), label=label)
        if frac is not None:
            axes[0, 1].plot(epochs, frac, label=label)
    axes[0, 0].set_xlabel("epoch")
    axes[0, 0].set_ylabel("mean Dice (%)")
    if "fg" in panels:
        axes[0, 1].set_xlabel("epoch")
        axes[0, 1].set_ylabel(f"predicted {logs[0][1].class_names[-1]} fraction")
    for ax in axes[0]:
        ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "curves.png"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"figure: {out}")


def cmd_benchmark(args) -> None:
    import json

    from . import benchmark

    bench = benchmark.Benchmark(cache_dir=args.cache)
    out = benchmark.report(bench)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbmt", description="Class-balanced mean teacher adaptation for "
                                                              "optic disc and cup segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic source/target benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=64)
    p.add_argument("--n-test", type=int, default=32)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--shift", choices=["benchmark", "none"], default="benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-source", help="supervised training on the labeled source domain")
    p.add_argument("--data", required=True, help="labeled manifest CSV")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="source-free adaptation to an unlabeled target domain")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target-data", required=True, help="target manifest CSV (masks ignored)")
    p.add_argument("--eval-data", help="labeled target test manifest, used for logging only")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="cbmt", help="cbmt | vanilla-pl | ablation:<PL|+EMA|+EMA+Aug|+EMA+Calib|full>")
    _add_config_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="Dice and ASSD of a checkpoint on a labeled set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-curves", help="Dice and cup-fraction curves from run logs")
    p.add_argument("--runlog", required=True, nargs="+")
    p.add_argument("--label", nargs="*")
    p.add_argument("--out", required=True, help="output PNG path or directory")
    p.set_defaults(func=cmd_plot_curves)

    p = sub.add_parser("benchmark", help="synthetic benchmark: source model plus the 3-seed ablation grid")
    p.add_argument("--cache", default=".cache/benchmark", help="directory for cached checkpoints and run logs")
    p.add_argument("--out", help="write the JSON report here as well")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"cbmt: error: {exc}", file=sys.stderr)
        return 2
    except CheckpointMismatchError as exc:
        print(f"cbmt: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"cbmt: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
