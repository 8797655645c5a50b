"""Command-line entry point: ``catnet synth|train|separate|evaluate``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files), 3 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from . import data as D
from .errors import CatNetError, CheckpointError, ConfigError, DatasetError, InputError, WavError
from .models import ModelConfig, build_model
from .train import TrainConfig, Trainer, load_checkpoint
from .wavio import read_wav, write_wav

logger = logging.getLogger("catnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
MODEL_CHOICES = {"catnet": "catnet", "unet": "unet_wav_loss", "unet-sp": "unet_spec_loss", "wavunet": "wavunet"}


class UsageError(CatNetError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path: Optional[str]) -> dict:
    """Read a JSON config with optional ``model``, ``train`` and ``augment`` sections."""
    if path is None:
        return {"model": {}, "train": {}, "augment": {}}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(cfg) - {"model", "train", "augment", "description"}
    if unknown:
        raise ConfigError(f"config file {path} has unknown sections {sorted(unknown)}")
    return {k: cfg.get(k, {}) for k in ("model", "train", "augment")}


def _build_configs(args) -> tuple[ModelConfig, TrainConfig, D.AugmentConfig]:
    raw = load_config(args.config)
    try:
        model_cfg = ModelConfig.from_dict(raw["model"])
        train_raw = dict(raw["train"])
        aug_raw = dict(raw["augment"])
        for key in ("steps", "batch_size", "lr", "seed"):
            if getattr(args, key) is not None:
                train_raw[key] = getattr(args, key)
        if args.aug:
            aug_raw["enable"] = True
        if args.mix_count is not None:
            aug_raw["mix_count"] = args.mix_count
        if args.no_track_mixing:
            aug_raw["random_track_mixing"] = False
        if MODEL_CHOICES[args.model] == "unet_spec_loss":
            train_raw["loss"] = "spectrogram_mae"
        return model_cfg, TrainConfig(**train_raw), D.AugmentConfig(**aug_raw)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None


def cmd_synth(args) -> int:
    out = Path(args.out)
    tracks = D.generate_synthetic_dataset(args.seed, args.tracks, args.seconds, args.sample_rate, args.channels)
    D.write_dataset(tracks, out)
    print(f"wrote {len(tracks)} tracks to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = D.load_dataset(args.data, D.SOURCES)
    if not dataset:
        raise DatasetError(f"no tracks found under {args.data}")
    log_path = args.log or f"{args.out}.loss.csv"
    if args.resume:
        trainer = Trainer.from_checkpoint(args.out, dataset)
        if args.steps is not None:
            trainer.config.steps = args.steps
    else:
        model_cfg, train_cfg, aug_cfg = _build_configs(args)
        if dataset[0].sample_rate != model_cfg.sample_rate:
            raise InputError(
                f"dataset sample rate {dataset[0].sample_rate} Hz != model sample rate {model_cfg.sample_rate} Hz"
            )
        model = build_model(
            MODEL_CHOICES[args.model], model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype, target=args.source
        )
        trainer = Trainer(model, dataset, train_cfg, aug_cfg, model_cfg.sources)
        Path(log_path).unlink(missing_ok=True)
    losses = trainer.run(log_path=log_path, checkpoint_path=args.out)
    if losses:
        print(f"trained {trainer.model.kind} for {trainer.step} steps; final loss {losses[-1]:.6f}")
    return EXIT_OK


def _models(paths: Sequence[str]):
    models = {}
    for p in paths:
        ckpt = load_checkpoint(p)
        model = ckpt.build_model()
        models[model.target] = model
    return models


def _segment(models, seconds: Optional[float]) -> Optional[int]:
    if seconds is None:
        return None
    rate = next(iter(models.values())).config.sample_rate
    return int(round(seconds * rate))


def cmd_separate(args) -> int:
    from .metrics import model_separator

    models = _models(args.ckpt)
    mixture = read_wav(args.input)
    seg = _segment(models, args.segment_seconds)
    estimates = model_separator(models, seg, None if seg is None else seg // 4)(mixture)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for source, segment in estimates.items():
        write_wav(out / f"{source}.wav", segment, args.encoding)
    print(f"wrote {', '.join(sorted(estimates))} to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_model, model_separator

    models = _models(args.ckpt)
    dataset = D.load_dataset(args.data, D.SOURCES)
    seg = _segment(models, args.segment_seconds)
    config = {
        "checkpoints": list(args.ckpt),
        "models": {s: {"kind": m.kind, "config": m.config.to_dict()} for s, m in models.items()},
        "frame_seconds": args.frame_seconds,
        "data": str(args.data),
    }
    result = evaluate_model(
        model_separator(models, seg, None if seg is None else seg // 4),
        dataset,
        list(models),
        args.frame_seconds,
        args.frame_seconds,
        config,
    )
    result.write_csv(args.report)
    json_path = args.json or str(Path(args.report).with_suffix(".json"))
    result.write_json(json_path)
    for source, value in result.medians().items():
        print(f"{source}: median SDR {value:.3f} dB over {len(dataset)} tracks")
    if result.failures:
        print(f"{len(result.failures)} failure(s): {', '.join(sorted(result.failures))}")
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="catnet", description="Two-branch music source separation: synth, train, separate, evaluate.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 = bitwise reproducible)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a deterministic synthetic stem dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tracks", type=int, default=8)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--channels", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one separation model for one source")
    p.add_argument("--data", required=True)
    p.add_argument("--source", default="vocals", choices=D.SOURCES)
    p.add_argument("--model", default="catnet", choices=sorted(MODEL_CHOICES))
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--aug", action="store_true", help="enable mix-audio augmentation")
    p.add_argument("--mix-count", type=int)
    p.add_argument("--no-track-mixing", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue training from --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate a mixture WAV")
    p.add_argument("--ckpt", required=True, action="append")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--encoding", default="float32", choices=["float32", "pcm16"])
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="median SDR of checkpoints over a dataset")
    p.add_argument("--ckpt", required=True, action="append")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--json")
    p.add_argument("--frame-seconds", type=float, default=1.0)
    p.add_argument("--segment-seconds", type=float)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit(threads: Optional[int]):
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"catnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"catnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, WavError, InputError, CheckpointError, FileNotFoundError) as exc:
        print(f"catnet: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        print(f"catnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
