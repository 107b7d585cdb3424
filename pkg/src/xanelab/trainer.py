"""Mini-batch training, evaluation metrics and run logs."""

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.metrics import f1_score

from . import __version__
from .audio import read_wav
from .errors import ConfigError, DivergedLossError, EmptyManifestError, InsufficientSpeakersError, MissingHeadError
from .features import FeatureChunk, chunk, melfb, read_feature_cache, write_feature_cache
from .logging import get_memory_usage_mb, log_with_context
from .model import (
    ABLATIONS,
    CLASS_HEADS,
    LossTargets,
    ModelConfig,
    XaneModel,
    load_checkpoint,
    loss,
    predict,
    save_checkpoint,
)
from .synth import REGRESSION_TASKS, ChunkLabel, ManifestEntry, read_manifest, resolve_wav, split_manifest

LR_SCHEDULES = ("constant", "warmup")
CHECKPOINT_NAME = "checkpoint.xckpt"
TRAIN_LOG_NAME = "train_log.csv"
TRAIN_CONFIG_NAME = "train_config.json"
METRIC_COLUMNS = tuple(f"{task}_mae" for task in REGRESSION_TASKS) + tuple(f"{task}_f1" for task in CLASS_HEADS)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimizer and loop settings.

    ``ablation`` holds head codes: ``nn`` (no noise head), ``nc`` (no codec head), ``no`` (no overlap
    head). ``validation_fraction=0`` trains on every speaker and selects the best epoch by training loss
    without early stopping.
    """

    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "constant"
    warmup_steps: int = 100
    seed: int = 0
    ablation: tuple[str, ...] = ()
    shuffle: bool = True
    patience: int = 10
    validation_fraction: float = 0.1
    jobs: int = 4

    def __post_init__(self):
        for name in ("batch_size", "epochs", "warmup_steps", "patience", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam betas must be in [0, 1), got {(self.beta1, self.beta2)}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        bad = [code for code in self.ablation if code not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation codes {bad}, expected a subset of {sorted(ABLATIONS)}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")

    @property
    def run_name(self) -> str:
        """XANE, or XANE-NN/NC/NO style name for ablated runs."""
        if not self.ablation:
            return "XANE"
        return "XANE-" + "/".join(code.upper() for code in sorted(self.ablation))


@dataclass
class ChunkDataset:
    features: np.ndarray  # (n, frames, mels) float32
    labels: list[ChunkLabel]
    utterance_ids: list[str]
    speaker_ids: list[str]
    chunk_indices: list[int]

    def __len__(self) -> int:
        return len(self.labels)


def entry_chunks(manifest_path: str | Path, entry: ManifestEntry) -> list[FeatureChunk]:
    """Feature chunks of one manifest entry, truncated to the labelled chunk count."""
    chunks = chunk(melfb(read_wav(resolve_wav(manifest_path, entry))), entry.utterance_id)
    return chunks[: len(entry.chunk_labels)]


def load_chunk_dataset(
    manifest_path: str | Path,
    entries: list[ManifestEntry],
    jobs: int = 4,
    feature_cache: str | Path | None = None,
) -> ChunkDataset:
    """
    Extract features for ``entries`` in a thread pool; order follows ``entries``.

    With ``feature_cache`` set, chunks found in the cache are reused and the cache is rewritten
    to cover ``entries``.
    """
    cached: dict[tuple[str, int], FeatureChunk] = {}
    if feature_cache is not None and Path(feature_cache).with_suffix(".json").exists():
        cached = {(c.utterance_id, c.chunk_index): c for c in read_feature_cache(feature_cache)}

    def extract(entry: ManifestEntry) -> list[FeatureChunk]:
        keys = [(entry.utterance_id, i) for i, _ in entry.chunk_labels]
        if keys and all(key in cached for key in keys):
            return [cached[key] for key in keys]
        return entry_chunks(manifest_path, entry)

    with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="xanelab-features") as executor:
        per_entry = list(executor.map(extract, entries))

    features, labels, utterance_ids, speaker_ids, chunk_indices = [], [], [], [], []
    for entry, chunks in zip(entries, per_entry):
        for feature_chunk in chunks:
            features.append(feature_chunk.matrix)
            labels.append(entry.chunk_labels[feature_chunk.chunk_index][1])
            utterance_ids.append(entry.utterance_id)
            speaker_ids.append(entry.speaker_id)
            chunk_indices.append(feature_chunk.chunk_index)

    if feature_cache is not None:
        write_feature_cache(feature_cache, [c for chunks in per_entry for c in chunks])
    stacked = np.stack(features).astype(np.float32) if features else np.zeros((0, 0, 0), np.float32)
    return ChunkDataset(stacked, labels, utterance_ids, speaker_ids, chunk_indices)


def compute_target_norm(labels: list[ChunkLabel]) -> tuple[np.ndarray, np.ndarray]:
    """Per-task mean and std over present values. Tasks without values or spread get std 1."""
    mean = np.zeros(len(REGRESSION_TASKS))
    std = np.ones(len(REGRESSION_TASKS))
    for j, name in enumerate(REGRESSION_TASKS):
        values = np.array([getattr(label, name) for label in labels if getattr(label, name) is not None])
        if values.size:
            mean[j] = values.mean()
            spread = values.std()
            std[j] = spread if spread > 0 and math.isfinite(spread) else 1.0
    return mean, std


def _scheduler(optimizer: torch.optim.Optimizer, config: TrainConfig) -> torch.optim.lr_scheduler.LambdaLR:
    if config.lr_schedule == "warmup":
        return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / config.warmup_steps))
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: 1.0)


def make_optimizer(model: XaneModel, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps
    )


def train_step(
    model: XaneModel, optimizer: torch.optim.Optimizer, features: torch.Tensor, targets: LossTargets
) -> dict[str, float]:
    """One optimizer step; returns the pre-step total and per-task losses."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    result = loss(model(features), targets)
    result.total.backward()
    optimizer.step()
    return {"total": float(result.total.detach()), **{k: float(v.detach()) for k, v in result.components.items()}}


def _slice_targets(targets: LossTargets, index: torch.Tensor) -> LossTargets:
    return LossTargets(
        targets.regression[index],
        targets.regression_mask[index],
        {k: v[index] for k, v in targets.classes.items()},
        {k: v[index] for k, v in targets.class_mask.items()},
    )


def dataset_loss(model: XaneModel, dataset: ChunkDataset, batch_size: int = 256) -> dict[str, float]:
    """Loss over a whole dataset in eval mode."""
    output = predict(model, dataset.features, batch_size)
    result = loss(output, LossTargets.from_labels(dataset.labels, model))
    return {"total": float(result.total), **{k: float(v) for k, v in result.components.items()}}


def _loss_columns(model_config: ModelConfig) -> list[str]:
    return ["total", *REGRESSION_TASKS, *model_config.heads]


def _format(value: float | None) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class TrainResult:
    checkpoint: Path
    train_log: Path
    history: list[dict]
    best_epoch: int
    stopped_early: bool


def train(
    manifest_path: str | Path,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    feature_cache: str | Path | None = None,
) -> TrainResult:
    """
    Train a model on a manifest and keep the best checkpoint.

    Speakers are split 90/10 (``validation_fraction``) into train/validation; target normalization
    comes from the train split only. Each epoch appends a row of total and per-task losses to
    ``train_log.csv``; the checkpoint with the lowest validation loss is kept in ``checkpoint.xckpt``.

    Raises:
        EmptyManifestError: Manifest has no labelled chunks
        DivergedLossError: A batch loss became NaN or infinite (the best checkpoint so far is kept)
    """
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start_time = time.time()

    entries = read_manifest(manifest_path)
    if not entries or not any(entry.chunk_labels for entry in entries):
        raise EmptyManifestError(f"manifest {manifest_path} has no labelled chunks")

    removed = {ABLATIONS[code] for code in train_config.ablation}
    model_config = replace(model_config, heads=tuple(h for h in model_config.heads if h not in removed))

    train_entries, val_entries = entries, []
    if train_config.validation_fraction > 0:
        try:
            train_entries, val_entries = split_manifest(entries, train_config.validation_fraction, train_config.seed)
        except InsufficientSpeakersError:
            log_with_context(
                logger, "warning", "Single-speaker manifest, validating on the training set", {"entries": len(entries)}
            )
            val_entries = entries

    train_set = load_chunk_dataset(manifest_path, train_entries, train_config.jobs, feature_cache)
    val_set = load_chunk_dataset(manifest_path, val_entries, train_config.jobs) if val_entries else None
    if len(train_set) == 0:
        raise EmptyManifestError(f"manifest {manifest_path} yields no training chunks")
    batch_size = train_config.batch_size
    if len(train_set) < batch_size:
        log_with_context(
            logger,
            "warning",
            "Fewer training chunks than batch_size, using one full batch",
            {"chunks": len(train_set), "batch_size": batch_size},
        )
        batch_size = len(train_set)

    model = XaneModel(model_config, seed=train_config.seed)
    model.set_target_norm(*compute_target_norm(train_set.labels))
    optimizer = make_optimizer(model, train_config)
    scheduler = _scheduler(optimizer, train_config)
    generator = torch.Generator().manual_seed(train_config.seed)

    features = torch.as_tensor(train_set.features)
    targets = LossTargets.from_labels(train_set.labels, model)
    (out_dir / TRAIN_CONFIG_NAME).write_text(
        json.dumps(
            {
                "version": __version__,
                "manifest": str(manifest_path),
                "run_name": train_config.run_name,
                "model": model_config.to_dict(),
                "train": asdict(train_config),
                "train_chunks": len(train_set),
                "validation_chunks": len(val_set) if val_set else 0,
                "effective_batch_size": batch_size,
            },
            indent=2,
            sort_keys=True,
        )
    )
    log_with_context(
        logger,
        "info",
        "Starting training",
        {
            "run_name": train_config.run_name,
            "embed_dim": model_config.embed_dim,
            "heads": list(model_config.heads),
            "train_chunks": len(train_set),
            "validation_chunks": len(val_set) if val_set else 0,
            "seed": train_config.seed,
        },
    )

    columns = _loss_columns(model_config)
    header = ["epoch", *(f"train_{c}" for c in columns), *(f"val_{c}" for c in columns if val_set is not None)]
    log_path = out_dir / TRAIN_LOG_NAME
    checkpoint_path = out_dir / CHECKPOINT_NAME
    with open(log_path, "w", newline="") as f:
        csv.writer(f).writerow(header)

    history, best_loss, best_epoch, since_best, stopped_early = [], math.inf, 0, 0, False
    for epoch in range(1, train_config.epochs + 1):
        if train_config.shuffle:
            order = torch.randperm(len(train_set), generator=generator)
        else:
            order = torch.arange(len(train_set))
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for start in range(0, len(order), batch_size):
            index = order[start : start + batch_size]
            step = train_step(model, optimizer, features[index], _slice_targets(targets, index))
            scheduler.step()
            if not math.isfinite(step["total"]):
                raise DivergedLossError(
                    f"loss diverged at epoch {epoch}; last good checkpoint: "
                    f"{checkpoint_path if best_epoch else 'none'}"
                )
            for name, value in step.items():
                sums[name] = sums.get(name, 0.0) + value * len(index)
                counts[name] = counts.get(name, 0) + len(index)
        train_losses = {name: sums[name] / counts[name] for name in sums}
        val_losses = dataset_loss(model, val_set) if val_set is not None else {}

        record = {"epoch": epoch, "train": train_losses, "val": val_losses}
        history.append(record)
        with open(log_path, "a", newline="") as f:
            row = [epoch, *(_format(train_losses.get(c)) for c in columns)]
            if val_set is not None:
                row += [_format(val_losses.get(c)) for c in columns]
            csv.writer(f).writerow(row)
        log_with_context(
            logger,
            "info",
            "Epoch completed",
            {
                "epoch": epoch,
                "train_loss": round(train_losses["total"], 6),
                "val_loss": round(val_losses["total"], 6) if val_losses else None,
                "task_losses": {k: round(v, 6) for k, v in train_losses.items() if k != "total"},
                "memory_mb": round(get_memory_usage_mb(), 1),
            },
        )

        monitored = val_losses["total"] if val_losses else train_losses["total"]
        if monitored < best_loss:
            best_loss, best_epoch, since_best = monitored, epoch, 0
            extra = {"epoch": epoch, "loss": monitored, "run_name": train_config.run_name}
            save_checkpoint(model, checkpoint_path, extra=extra)
        else:
            since_best += 1
            if val_set is not None and since_best >= train_config.patience:
                stopped_early = True
                log_with_context(logger, "info", "Early stopping", {"epoch": epoch, "best_epoch": best_epoch})
                break

    log_with_context(
        logger,
        "info",
        "Training completed",
        {
            "best_epoch": best_epoch,
            "best_loss": best_loss,
            "epochs_run": len(history),
            "stopped_early": stopped_early,
            "elapsed_seconds": round(time.time() - start_time, 2),
        },
    )
    return TrainResult(checkpoint_path, log_path, history, best_epoch, stopped_early)


def compute_metrics(
    predicted: np.ndarray,
    predicted_classes: dict[str, np.ndarray],
    labels: list[ChunkLabel],
) -> dict[str, float | None]:
    """
    MAE per regression task in original units and macro-F1 per classification task.

    Args:
        predicted: (n, 11) denormalized regression outputs
        predicted_classes: task -> (n,) class indices; tasks without a head are omitted
        labels: Ground truth per chunk

    Returns:
        Mapping from ``METRIC_COLUMNS`` to values; ``None`` where a task has no labels or no head
    """
    metrics: dict[str, float | None] = {}
    for j, name in enumerate(REGRESSION_TASKS):
        pairs = [(predicted[i, j], getattr(label, name)) for i, label in enumerate(labels)]
        pairs = [(p, t) for p, t in pairs if t is not None]
        metrics[f"{name}_mae"] = float(np.mean([abs(p - t) for p, t in pairs])) if pairs else None
    for name in CLASS_HEADS:
        if name not in predicted_classes or not labels:
            metrics[f"{name}_f1"] = None
            continue
        truth = [label.class_index(name) for label in labels]
        metrics[f"{name}_f1"] = float(
            f1_score(truth, predicted_classes[name], average="macro", zero_division=0.0)
        )
    return metrics


def evaluate(
    checkpoint: str | Path,
    manifest_path: str | Path,
    jobs: int = 4,
    require_heads: tuple[str, ...] = (),
) -> dict[str, float | None]:
    """
    Score a checkpoint on every chunk of a manifest.

    Heads missing from the checkpoint are reported as ``None``. Naming one of them in
    ``require_heads`` raises instead.

    Raises:
        MissingHeadError: A required head is absent from the checkpoint
        EmptyManifestError: Manifest has no labelled chunks
    """
    model, config = load_checkpoint(checkpoint)
    missing = [h for h in require_heads if h not in config.heads]
    if missing:
        raise MissingHeadError(f"checkpoint {checkpoint} lacks heads {missing}")
    entries = read_manifest(manifest_path)
    dataset = load_chunk_dataset(manifest_path, entries, jobs)
    if len(dataset) == 0:
        raise EmptyManifestError(f"manifest {manifest_path} has no labelled chunks")

    output = predict(model, dataset.features)
    predicted = model.denormalize(output.regression).double().numpy()
    predicted_classes = {name: logits.argmax(dim=1).numpy() for name, logits in output.class_logits.items()}
    metrics = compute_metrics(predicted, predicted_classes, dataset.labels)
    log_with_context(
        logger,
        "info",
        "Evaluation completed",
        {"checkpoint": str(checkpoint), "chunks": len(dataset), "absent": [k for k, v in metrics.items() if v is None]},
    )
    return metrics


def write_metrics_csv(path: str | Path, metrics: dict[str, float | None]) -> None:
    """Header plus one row in fixed column order; absent metrics are empty cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        writer.writerow([_format(metrics.get(column)) for column in METRIC_COLUMNS])


def read_metrics_csv(path: str | Path) -> dict[str, float | None]:
    with open(path, newline="") as f:
        row = next(csv.DictReader(f))
    return {column: float(row[column]) if row[column] else None for column in METRIC_COLUMNS}
