"""Command-line interface for xanelab."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config_file
from .degrade import CODEC_CLASSES, NOISE_CLASSES
from .errors import ConfigError, XaneError
from .evaluation import (
    EMBEDDING_DUMP_VERSION,
    LABEL_FIELDS,
    apply_filters,
    cosine_distance_report,
    embed_corpus,
    kmeans_f1,
    parse_filter,
    read_embedding_dump,
    tsne_project,
    write_cluster_report_csv,
    write_distance_report_csv,
    write_projection_csv,
)
from .features import FEATURE_CACHE_VERSION
from .logging import log_with_context, setup_logging
from .model import ABLATIONS, CHECKPOINT_SCHEMA_VERSION, EMBED_DIMS, ModelConfig
from .rir import RIR_SIDECAR_VERSION
from .speech import write_speech_corpus
from .synth import (
    MANIFEST_SCHEMA_VERSION,
    SynthConfig,
    join_labels,
    read_manifest,
    split_manifest,
    synthesize_corpus,
    write_manifest,
)
from .trainer import LR_SCHEDULES, TrainConfig, evaluate, train, write_metrics_csv

OVERLAP_CHOICES = {"both": (False, True), "on": (True,), "off": (False,)}
VERSION_TEXT = (
    f"xanelab {__version__} (manifest v{MANIFEST_SCHEMA_VERSION}, checkpoint v{CHECKPOINT_SCHEMA_VERSION}, "
    f"embedding-dump v{EMBEDDING_DUMP_VERSION}, feature-cache v{FEATURE_CACHE_VERSION}, "
    f"rir-sidecar v{RIR_SIDECAR_VERSION})"
)

logger = logging.getLogger("xanelab.cli")


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        default=None,
        help="TOML file with option values (flags override it)",
    )
    common.add_argument(
        "--log-level",
        type=str,
        default=os.getenv("XANELAB_LOG_LEVEL", "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Logging level",
    )
    return common


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=int(os.getenv("XANELAB_SEED", "0")), help="Global seed")


def _add_jobs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--jobs",
        type=int,
        default=int(os.getenv("XANELAB_JOBS", "4")),
        help="Worker threads (output does not depend on it)",
    )


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    """Top-level parser plus the subparser of every subcommand."""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="xanelab",
        description="XANE lab - synthesize degraded speech, train explainable acoustic embeddings, evaluate them",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=VERSION_TEXT)
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(
            name, help=help_text, parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )

    synth = add("synth", "Synthesize a labelled corpus in six codec x overlap groups")
    synth.add_argument("--clean-dir", type=Path, help="Clean 16 kHz speech, one subdirectory per speaker")
    noise = synth.add_mutually_exclusive_group()
    noise.add_argument("--noise-dir", type=Path, help="Noise WAVs, one subdirectory per noise class")
    noise.add_argument("--builtin-noise", action="store_true", help="Use the built-in noise generators")
    synth.add_argument("--out", type=Path, help="Output directory")
    synth.add_argument("--per-group", type=int, default=1, help="Utterances per group")
    synth.add_argument(
        "--noise-classes", type=_csv_list, default=list(NOISE_CLASSES), help="Comma-separated noise classes"
    )
    synth.add_argument(
        "--codec-classes", type=_csv_list, default=list(CODEC_CLASSES), help="Comma-separated codec classes"
    )
    synth.add_argument("--overlap", choices=sorted(OVERLAP_CHOICES), default="both", help="Overlap conditions")
    synth.add_argument("--reverb-probability", type=float, default=1.0, help="Share of reverberated utterances")
    synth.add_argument("--keep-stems", action="store_true", help="Keep clean/speech/noise/pre-codec stems")
    synth.add_argument("--progress-interval", type=float, default=30.0, help="Seconds between progress logs")
    _add_seed(synth)
    _add_jobs(synth)
    synth.set_defaults(func=cmd_synth)

    train_parser = add("train", "Train a model on a manifest")
    train_parser.add_argument("--manifest", type=Path, help="Training manifest")
    train_parser.add_argument("--embed-dim", type=int, choices=EMBED_DIMS, default=128, help="Embedding size")
    train_parser.add_argument(
        "--ablate", action="append", choices=sorted(ABLATIONS), default=[], help="Remove a classification head"
    )
    train_parser.add_argument("--out", type=Path, help="Output directory for checkpoint and logs")
    train_parser.add_argument("--epochs", type=int, default=100, help="Maximum epochs")
    train_parser.add_argument("--batch-size", type=int, default=64, help="Chunks per batch")
    train_parser.add_argument("--learning-rate", type=float, default=1e-3, help="Adam learning rate")
    train_parser.add_argument("--lr-schedule", choices=LR_SCHEDULES, default="constant", help="Learning-rate schedule")
    train_parser.add_argument("--warmup-steps", type=int, default=100, help="Steps of linear warmup")
    train_parser.add_argument("--patience", type=int, default=10, help="Early-stopping patience in epochs")
    train_parser.add_argument(
        "--validation-fraction", type=float, default=0.1, help="Share of speakers held out (0 disables)"
    )
    train_parser.add_argument("--feature-cache", type=Path, default=None, help="Feature cache path (.f32/.json)")
    _add_seed(train_parser)
    _add_jobs(train_parser)
    train_parser.set_defaults(func=cmd_train)

    eval_parser = add("eval", "Per-task MAE and F1 of a checkpoint on a manifest")
    eval_parser.add_argument("--checkpoint", type=Path, help="Checkpoint file")
    eval_parser.add_argument("--manifest", type=Path, help="Labelled manifest")
    eval_parser.add_argument("--out", type=Path, help="Metrics CSV")
    eval_parser.add_argument(
        "--require-head", action="append", choices=list(ABLATIONS.values()), default=[], help="Fail if head missing"
    )
    _add_jobs(eval_parser)
    eval_parser.set_defaults(func=cmd_eval)

    embed = add("embed", "Write utterance embeddings of a manifest")
    embed.add_argument("--checkpoint", type=Path, help="Checkpoint file")
    embed.add_argument("--manifest", type=Path, help="Manifest")
    embed.add_argument("--out", type=Path, help="Embedding dump")
    _add_jobs(embed)
    embed.set_defaults(func=cmd_embed)

    cluster = add("cluster", "k-means F1 of an embedding dump")
    cluster.add_argument("--dump", type=Path, help="Embedding dump")
    cluster.add_argument("--label", choices=sorted(LABEL_FIELDS), default="noise", help="Label to cluster by")
    cluster.add_argument("--filter", type=str, default="", help="Comma-separated field<op>value terms")
    cluster.add_argument("--out", type=Path, help="Cluster report CSV")
    _add_seed(cluster)
    cluster.set_defaults(func=cmd_cluster)

    project = add("project", "Exact t-SNE projection of an embedding dump")
    project.add_argument("--dump", type=Path, help="Embedding dump")
    project.add_argument("--out", type=Path, help="Coordinates CSV")
    project.add_argument("--perplexity", type=float, default=30.0, help="t-SNE perplexity")
    project.add_argument("--iterations", type=int, default=1000, help="t-SNE iterations")
    project.add_argument("--filter", type=str, default="", help="Comma-separated field<op>value terms")
    _add_seed(project)
    project.set_defaults(func=cmd_project)

    distance = add("distance", "Cosine distances from a reference speaker")
    distance.add_argument("--dump", type=Path, help="Embedding dump")
    distance.add_argument("--reference", type=str, help="Reference speaker id")
    distance.add_argument("--out", type=Path, help="Distance report CSV")
    distance.add_argument("--filter", type=str, default="", help="Comma-separated field<op>value terms")
    distance.set_defaults(func=cmd_distance)

    make_speech = add("make-speech", "Write a synthetic clean-speech corpus")
    make_speech.add_argument("--out", type=Path, help="Output directory")
    make_speech.add_argument("--speakers", type=int, default=8, help="Number of speakers")
    make_speech.add_argument("--per-speaker", type=int, default=10, help="Utterances per speaker")
    make_speech.add_argument("--min-duration", type=float, default=1.5, help="Shortest utterance in seconds")
    make_speech.add_argument("--max-duration", type=float, default=3.5, help="Longest utterance in seconds")
    _add_seed(make_speech)
    make_speech.set_defaults(func=cmd_make_speech)

    split = add("split", "Speaker-disjoint train/test split of a manifest")
    split.add_argument("--manifest", type=Path, help="Manifest to split")
    split.add_argument("--test-fraction", type=float, default=0.1, help="Share of speakers in the test split")
    split.add_argument("--out-train", type=Path, help="Train manifest")
    split.add_argument("--out-test", type=Path, help="Test manifest")
    _add_seed(split)
    split.set_defaults(func=cmd_split)

    join = add("join-labels", "Fill PESQ/ESTOI slots from a CSV")
    join.add_argument("--manifest", type=Path, help="Manifest")
    join.add_argument("--labels", type=Path, help="CSV with utterance_id,chunk_index,pesq,estoi")
    join.add_argument("--out", type=Path, help="Output manifest")
    join.set_defaults(func=cmd_join_labels)

    return parser, dict(subparsers.choices)


REQUIRED = {
    "synth": ("clean_dir", "out"),
    "train": ("manifest", "out"),
    "eval": ("checkpoint", "manifest", "out"),
    "embed": ("checkpoint", "manifest", "out"),
    "cluster": ("dump", "out"),
    "project": ("dump", "out"),
    "distance": ("dump", "reference", "out"),
    "make-speech": ("out",),
    "split": ("manifest", "out_train", "out_test"),
    "join-labels": ("manifest", "labels", "out"),
}


def _coerce(action: argparse.Action, value):
    """Apply an option's type and choices to a config-file value."""
    if isinstance(value, list) and action.type is not _csv_list:
        return [_coerce(action, v) for v in value]
    if action.type is _csv_list:
        value = [str(v) for v in value] if isinstance(value, list) else _csv_list(str(value))
    elif action.type is not None and not isinstance(value, bool):
        value = action.type(value)
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"invalid value {value!r} for {action.dest}, expected one of {list(action.choices)}")
    return value


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """
    Parse flags; values from ``--config`` fill options the command line leaves unset.

    Required options are checked after the merge so they can come from the config file.
    """
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = subparsers[args.command]
        known = {
            name: {a.dest for a in p._actions if a.dest not in ("help", "config")} for name, p in subparsers.items()
        }
        values = load_config_file(args.config, args.command, known)
        actions = {a.dest: a for a in sub._actions}
        sub.set_defaults(**{dest: _coerce(actions[dest], value) for dest, value in values.items()})
        args = parser.parse_args(argv)
    missing = [name for name in REQUIRED[args.command] if getattr(args, name) is None]
    if missing:
        subparsers[args.command].error(
            "the following arguments are required: " + ", ".join("--" + m.replace("_", "-") for m in missing)
        )
    return args


def _snapshot(args: argparse.Namespace, target: Path) -> None:
    """Resolved config next to an output: inside output directories, ``<file>.run_config.json`` otherwise."""
    if not target.is_dir():
        target = target.with_name(target.name + ".run_config.json")
    RunConfig.from_namespace(args.command, args).write(target)


def _print_json(data: dict) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=str))


def cmd_synth(args: argparse.Namespace) -> None:
    config = SynthConfig(
        utterances_per_group=args.per_group,
        noise_classes=tuple(args.noise_classes),
        codec_classes=tuple(args.codec_classes),
        overlap_conditions=OVERLAP_CHOICES[args.overlap],
        reverb_probability=args.reverb_probability,
        keep_stems=args.keep_stems,
        jobs=args.jobs,
        progress_interval=args.progress_interval,
    )
    manifest = synthesize_corpus(args.clean_dir, args.noise_dir, config, args.seed, args.out)
    _snapshot(args, args.out)
    _print_json({"manifest": str(manifest)})


def cmd_train(args: argparse.Namespace) -> None:
    model_config = ModelConfig(embed_dim=args.embed_dim)
    train_config = TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        lr_schedule=args.lr_schedule,
        warmup_steps=args.warmup_steps,
        seed=args.seed,
        ablation=tuple(sorted(set(args.ablate))),
        patience=args.patience,
        validation_fraction=args.validation_fraction,
        jobs=args.jobs,
    )
    result = train(args.manifest, model_config, train_config, args.out, feature_cache=args.feature_cache)
    _snapshot(args, args.out)
    _print_json({"checkpoint": result.checkpoint, "train_log": result.train_log, "best_epoch": result.best_epoch})


def cmd_eval(args: argparse.Namespace) -> None:
    metrics = evaluate(args.checkpoint, args.manifest, jobs=args.jobs, require_heads=tuple(args.require_head))
    write_metrics_csv(args.out, metrics)
    _snapshot(args, args.out)
    _print_json(metrics)


def cmd_embed(args: argparse.Namespace) -> None:
    records = embed_corpus(args.checkpoint, args.manifest, args.out, jobs=args.jobs)
    _snapshot(args, args.out)
    _print_json({"dump": str(args.out), "records": len(records)})


def _filtered_records(args: argparse.Namespace):
    _, records = read_embedding_dump(args.dump)
    return apply_filters(records, parse_filter(args.filter))


def cmd_cluster(args: argparse.Namespace) -> None:
    records = _filtered_records(args)
    report = kmeans_f1(records, args.label, seed=args.seed)
    write_cluster_report_csv(args.out, report)
    _snapshot(args, args.out)
    _print_json({"task": report.task, "k": report.k, "f1": report.f1, "records": report.n_records})


def cmd_project(args: argparse.Namespace) -> None:
    records = _filtered_records(args)
    coords = tsne_project(records, args.perplexity, args.iterations, args.seed)
    write_projection_csv(args.out, records, coords)
    _snapshot(args, args.out)
    _print_json({"coords": str(args.out), "records": len(records)})


def cmd_distance(args: argparse.Namespace) -> None:
    report = cosine_distance_report(_filtered_records(args), args.reference)
    write_distance_report_csv(args.out, report)
    _snapshot(args, args.out)
    _print_json({"reference": report.reference_speaker, "mean": report.mean, "std": report.std})


def cmd_make_speech(args: argparse.Namespace) -> None:
    paths = write_speech_corpus(
        args.out, args.speakers, args.per_speaker, args.seed, (args.min_duration, args.max_duration)
    )
    _snapshot(args, args.out)
    _print_json({"out": str(args.out), "files": len(paths)})


def cmd_split(args: argparse.Namespace) -> None:
    train_entries, test_entries = split_manifest(read_manifest(args.manifest), args.test_fraction, args.seed)
    write_manifest(args.out_train, train_entries)
    write_manifest(args.out_test, test_entries)
    _snapshot(args, args.out_train)
    _print_json({"train": len(train_entries), "test": len(test_entries)})


def cmd_join_labels(args: argparse.Namespace) -> None:
    write_manifest(args.out, join_labels(read_manifest(args.manifest), args.labels))
    _snapshot(args, args.out)
    _print_json({"manifest": str(args.out)})


def main(argv: list[str] | None = None) -> None:
    """Main entry point for the CLI."""
    try:
        args = parse_args(argv)
        setup_logging("xanelab", args.log_level)
        log_with_context(logger, "debug", "Resolved options", RunConfig.from_namespace(args.command, args).options)
        args.func(args)
        sys.exit(0)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user", file=sys.stderr)
        sys.exit(130)
    except XaneError as e:
        print(f"Error ({type(e).__name__}): {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        sys.exit(3)
    except Exception as e:
        print(f"Fatal error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
