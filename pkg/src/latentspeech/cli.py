"""Command-line surface: preprocess, train, synthesize, evaluate, inspect-checkpoint.

Success exits 0 and prints a single-line JSON summary to stdout; every failure
prints one `error: <family>: <message>` line to stderr with a family-specific
exit code, so shell pipelines can branch on what went wrong.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, evaluation
from .config import TrainingConfig, apply_overrides, field_names, load_config, save_config
from .errors import (
    AudioError,
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateOutputError,
    LatentSpeechError,
    TrainingError,
    VocabularyError,
)
from .model import VARIANT_FLAGS
from .synthesis import MODES, SamplingSpec, Synthesizer
from .training import Trainer, load_checkpoint

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = "config_used.cfg"

# one exit code per error family; 1 stays reserved for unexpected crashes,
# 2 is argparse usage
ERROR_FAMILIES = [
    (ConfigError, 3, "config"),
    (DataError, 4, "data"),
    (AudioError, 5, "audio"),
    (VocabularyError, 6, "vocabulary"),
    (CheckpointError, 7, "checkpoint"),
    (DegenerateOutputError, 8, "degenerate-output"),
    (TrainingError, 9, "training"),
]


def _config_key_epilog() -> str:
    defaults = TrainingConfig()
    lines = ["configuration keys (config file and --set KEY=VALUE):"]
    for name in field_names():
        lines.append(f"  {name} (default: {getattr(defaults, name)})")
    return "\n".join(lines)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _merged_config(args) -> TrainingConfig:
    overrides = _parse_overrides(args.overrides)
    if args.config is not None:
        return load_config(args.config, overrides)
    return TrainingConfig.from_dict(apply_overrides({}, overrides))


def _write_effective_config(config: TrainingConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / EFFECTIVE_CONFIG_NAME
    save_config(config, path)
    return path


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def run_preprocess(args) -> int:
    config = _merged_config(args)
    stats = data.preprocess_corpus(args.manifest, args.out_dir, config)
    _write_effective_config(config, args.out_dir)
    _emit(
        {
            "command": "preprocess",
            "out_dir": str(args.out_dir),
            "utterances": len(stats["utterances"]),
            "skipped": len(stats["skipped"]),
        }
    )
    return 0


def run_train(args) -> int:
    config = _merged_config(args)
    if args.variant is not None:
        config = TrainingConfig.from_dict(
            apply_overrides(config.to_dict(), {"variant": args.variant})
        )
    cache = data.CorpusCache(args.data_dir)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(config, args.out_dir)
    trainer = Trainer(config, cache, args.out_dir)
    try:
        if args.resume is not None:
            trainer.restore(args.resume)
        trainer.train()
    finally:
        trainer.close()
    _emit(
        {
            "command": "train",
            "variant": config.variant,
            "steps": trainer.step_count,
            "checkpoint": str(args.out_dir / "checkpoint_last.pt"),
        }
    )
    return 0


def _check_config_matches_checkpoint(args, checkpoint_config: TrainingConfig) -> None:
    """Synthesis settings come from the checkpoint; a supplied config must agree."""
    if args.config is None and not args.overrides:
        return
    requested = _merged_config(args)
    mismatched = [
        key
        for key in field_names()
        if getattr(requested, key) != getattr(checkpoint_config, key)
    ]
    if mismatched:
        raise ConfigError(
            "supplied config disagrees with the checkpoint config on: "
            + ", ".join(sorted(mismatched))
        )


def run_synthesize(args) -> int:
    if args.n_samples < 1:
        raise ConfigError(f"--n-samples must be >= 1, got {args.n_samples}")
    if not args.text_file.is_file():
        raise DataError(f"text file not found: {args.text_file}")
    synth = Synthesizer.from_checkpoint(args.checkpoint)
    _check_config_matches_checkpoint(args, synth.config)
    sentences = [line.strip() for line in args.text_file.read_text(encoding="utf-8").splitlines()]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise DataError(f"text file has no sentences: {args.text_file}")

    for index, text in enumerate(sentences):
        sentence_dir = args.out_dir / f"sent{index:03d}"
        for k in range(args.n_samples):
            spec = SamplingSpec(mode=args.mode, tau=args.tau, seed=args.seed + k)
            result = synth.synthesize(text, spec)
            synth.write_sample(
                result, sentence_dir, f"sample{k:03d}", wav_iterations=args.wav_iterations
            )
        logger.info("sentence %d: %d sample(s) written to %s", index, args.n_samples, sentence_dir)
    _write_effective_config(synth.config, args.out_dir)
    _emit(
        {
            "command": "synthesize",
            "out_dir": str(args.out_dir),
            "sentences": len(sentences),
            "samples_per_sentence": args.n_samples,
            "mode": args.mode,
            "tau": args.tau,
            "seed": args.seed,
        }
    )
    return 0


def run_evaluate(args) -> int:
    config = _merged_config(args)
    transcripts = None
    if args.transcripts is not None:
        if not args.transcripts.is_file():
            raise DataError(f"transcripts file not found: {args.transcripts}")
        try:
            transcripts = json.loads(args.transcripts.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"transcripts file is not valid JSON: {exc}") from exc
    report = evaluation.evaluate_directory(
        args.samples_dir,
        args.out_dir,
        config,
        n_bins=args.bins,
        mel_iterations=args.mel_iterations,
        transcripts=transcripts,
    )
    _write_effective_config(config, args.out_dir)
    _emit(
        {
            "command": "evaluate",
            "stats": str(args.out_dir / "stats.json"),
            "models": sorted(report["models"]),
        }
    )
    return 0


def run_inspect(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model_state = state["model_state"]
    by_module: dict[str, int] = {}
    for key, tensor in model_state.items():
        module = key.split(".")[0]
        by_module[module] = by_module.get(module, 0) + tensor.numel()
    report = {
        "checkpoint": str(args.checkpoint),
        "format_version": state["format_version"],
        "step": state["step"],
        "variant": state["config"]["variant"],
        "n_symbols": state["n_symbols"],
        "vocab_size": len(state["vocab"]),
        "pitch_mean": state["pitch_mean"],
        "pitch_sd": state["pitch_sd"],
        "normalize_pitch": state["normalize_pitch"],
        "has_discriminator": state.get("discriminator_state") is not None,
        "total_parameters": sum(by_module.values()),
        "parameters_by_module": by_module,
        "parameter_keys": sorted(model_state),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _add_config_args(parser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentspeech",
        description="Two-scale latent prosody TTS: data preparation, training, sampling, evaluation.",
        epilog=_config_key_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--log-level",
        default="info",
        choices=["debug", "info", "warning", "error"],
        help="logging verbosity (default: info)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="extract mel/duration/pitch features into a cache")
    p.add_argument("--manifest", type=Path, required=True, help="pipe-separated wav|phonemes list")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(func=run_preprocess)

    p = sub.add_parser("train", help="train a model variant on a preprocessed cache")
    p.add_argument("--data-dir", type=Path, required=True, help="preprocess output directory")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument(
        "--variant",
        choices=sorted(VARIANT_FLAGS),
        default=None,
        help="model variant; overrides the config value",
    )
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    _add_config_args(p)
    p.set_defaults(func=run_train)

    p = sub.add_parser("synthesize", help="sample mels (and optional WAVs) from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument(
        "--text-file", type=Path, required=True, help="one space-separated phoneme string per line"
    )
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--mode", choices=MODES, default="full", help="which latent scales to sample")
    p.add_argument("--tau", type=float, default=1.0, help="sampling temperature")
    p.add_argument("--seed", type=int, default=0, help="base seed; sample k uses seed + k")
    p.add_argument("--n-samples", type=int, default=1, help="samples per sentence")
    p.add_argument(
        "--wav-iterations",
        type=int,
        default=None,
        metavar="N",
        help="also write WAVs, inverted with N Griffin-Lim iterations",
    )
    _add_config_args(p)
    p.set_defaults(func=run_synthesize)

    p = sub.add_parser("evaluate", help="diversity statistics and histograms over sample batches")
    p.add_argument(
        "--samples-dir",
        type=Path,
        required=True,
        help="tree of <model_label>/<sentence_id>/<sample> WAV or mel files",
    )
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--bins", type=int, default=20, help="histogram bin count")
    p.add_argument(
        "--mel-iterations", type=int, default=30, help="Griffin-Lim iterations for mel samples"
    )
    p.add_argument(
        "--transcripts",
        type=Path,
        default=None,
        help="JSON transcripts recorded in the report for bookkeeping",
    )
    _add_config_args(p)
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=run_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except LatentSpeechError as err:
        for family, code, name in ERROR_FAMILIES:
            if isinstance(err, family):
                print(f"error: {name}: {' '.join(str(err).split())}", file=sys.stderr)
                return code
        print(f"error: internal: {' '.join(str(err).split())}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - contract: single-line errors, nonzero exit
        logger.debug("unexpected failure", exc_info=True)
        print(f"error: internal: {type(err).__name__}: {' '.join(str(err).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
