"""
Embedding-level analysis: corpus embedding dumps, k-means clustering scored by F1 after
Hungarian matching, cosine-distance speaker analysis and 2-D t-SNE projection.

Dump format: the first line is a JSON header ``{"schema_version", "dim", "count", "source"}``;
each following line is one JSON record whose ``vector`` is either base64 of little-endian float32
or a list of decimals.
"""

import asyncio
import base64
import csv
import json
import logging
import operator
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import aiofiles
import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.manifold import TSNE
from sklearn.metrics import f1_score

from .errors import (
    ConfigError,
    DegenerateDataError,
    InsufficientSpeakersError,
    ManifestError,
    PerplexityTooLargeError,
    UtteranceTooShortError,
    VersionMismatchError,
    ZeroVectorError,
)
from .logging import get_memory_usage_mb, log_with_context
from .model import XaneModel, load_checkpoint
from .synth import ManifestEntry, read_manifest, utterance_labels
from .trainer import entry_chunks

EMBEDDING_DUMP_VERSION = 1
LABEL_FIELDS = {"noise": "noise_class", "reverb": "reverb_present", "overlap": "overlap"}
KMEANS_RESTARTS = 20
TSNE_MAX_POINTS = 5000
TSNE_MIN_ITERATIONS = 250
RECORD_FIELDS = ("utterance_id", "speaker_id", "noise_class", "reverb_present", "overlap")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingRecord:
    vector: np.ndarray
    utterance_id: str
    speaker_id: str
    noise_class: str | None = None
    reverb_present: bool = False
    overlap: bool = False
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise ManifestError(f"{self.utterance_id}: embedding contains non-finite values")
        object.__setattr__(self, "vector", vector)

    def get(self, name: str):
        if name in RECORD_FIELDS:
            return getattr(self, name)
        return self.attributes.get(name)

    def to_dict(self, encoding: str = "base64") -> dict:
        if encoding == "base64":
            vector = base64.b64encode(self.vector.astype("<f4").tobytes()).decode("ascii")
        else:
            vector = [float(v) for v in self.vector]
        data = {name: getattr(self, name) for name in RECORD_FIELDS}
        return {**data, "attributes": self.attributes, "vector": vector}

    @classmethod
    def from_dict(cls, data: dict) -> "EmbeddingRecord":
        vector = data["vector"]
        if isinstance(vector, str):
            vector = np.frombuffer(base64.b64decode(vector), dtype="<f4")
        return cls(
            vector=np.asarray(vector, dtype=np.float32),
            utterance_id=data["utterance_id"],
            speaker_id=data["speaker_id"],
            noise_class=data.get("noise_class"),
            reverb_present=bool(data.get("reverb_present", False)),
            overlap=bool(data.get("overlap", False)),
            attributes=data.get("attributes", {}),
        )


def _dump_lines(records: list[EmbeddingRecord], source: str, encoding: str) -> list[str]:
    dims = {r.vector.size for r in records}
    if len(dims) > 1:
        raise ConfigError(f"embedding records must share one dimension, got {sorted(dims)}")
    header = {
        "schema_version": EMBEDDING_DUMP_VERSION,
        "dim": dims.pop() if dims else 0,
        "count": len(records),
        "source": source,
    }
    return [json.dumps(header, sort_keys=True)] + [json.dumps(r.to_dict(encoding), sort_keys=True) for r in records]


def write_embedding_dump(
    path: str | Path, records: list[EmbeddingRecord], source: str = "xane", encoding: str = "base64"
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(_dump_lines(records, source, encoding)) + "\n", encoding="utf-8")


def read_embedding_dump(path: str | Path) -> tuple[dict, list[EmbeddingRecord]]:
    """
    Returns:
        (header, records)

    Raises:
        VersionMismatchError: Unsupported schema_version
        ManifestError: Count or dimension disagrees with the header
    """
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ManifestError(f"embedding dump {path} is empty")
    header = json.loads(lines[0])
    if header.get("schema_version") != EMBEDDING_DUMP_VERSION:
        raise VersionMismatchError(
            f"embedding dump schema_version {header.get('schema_version')} != supported {EMBEDDING_DUMP_VERSION}"
        )
    records = [EmbeddingRecord.from_dict(json.loads(line)) for line in lines[1:]]
    if len(records) != header["count"]:
        raise ManifestError(f"{path}: header count {header['count']} but {len(records)} records")
    bad = [r.utterance_id for r in records if r.vector.size != header["dim"]]
    if bad:
        raise ManifestError(f"{path}: {len(bad)} records differ from header dim {header['dim']}, first {bad[0]}")
    return header, records


def record_for_entry(entry: ManifestEntry, vector: np.ndarray) -> EmbeddingRecord:
    recipe = entry.recipe
    summary = utterance_labels(entry.labels)
    attributes = {
        "group_id": entry.group_id,
        "codec_class": recipe.get("codec_class"),
        "bitrate_kbps": recipe.get("bitrate_kbps"),
        "snr_db": recipe.get("snr_db"),
        "sir_db": recipe.get("sir_db"),
        "peak_dbfs": recipe.get("peak_dbfs"),
        "c50_db": summary.c50_db,
        "c5_db": summary.c5_db,
        "drr_db": summary.drr_db,
        "t60_ms": summary.t60_ms,
    }
    return EmbeddingRecord(
        vector=vector,
        utterance_id=entry.utterance_id,
        speaker_id=entry.speaker_id,
        noise_class=recipe.get("noise_class"),
        reverb_present=bool(recipe.get("reverb")),
        overlap=bool(recipe.get("overlap")),
        attributes=attributes,
    )


def utterance_embedding(model: XaneModel, manifest_path: str | Path, entry: ManifestEntry) -> np.ndarray:
    """Mean of the chunk embeddings of one utterance."""
    chunks = entry_chunks(manifest_path, entry)
    if not chunks:
        raise UtteranceTooShortError(f"{entry.utterance_id} has no full chunk to embed")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        batch = torch.as_tensor(np.stack([c.matrix for c in chunks]), dtype=dtype)
        embeddings = model(batch).embedding.double().numpy()
    return embeddings.mean(axis=0)


class CorpusEmbedder:
    """Embeds every utterance of a manifest in a thread pool and writes an embedding dump."""

    def __init__(
        self,
        checkpoint: str | Path,
        manifest_path: str | Path,
        out_path: str | Path,
        jobs: int = 4,
        progress_interval: float = 30.0,
        source: str = "xane",
    ):
        if jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {jobs}")
        self.checkpoint = Path(checkpoint)
        self.manifest_path = Path(manifest_path)
        self.out_path = Path(out_path)
        self.progress_interval = progress_interval
        self.source = source
        self.model, self.config = load_checkpoint(self.checkpoint)
        self.entries = read_manifest(self.manifest_path)
        self.stats = {"utterances_embedded": 0, "start_time": time.time()}
        self.stats_lock = asyncio.Lock()
        self.semaphore = asyncio.Semaphore(jobs)
        self.executor = ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="xanelab-embed")

    async def _embed_with_semaphore(self, entry: ManifestEntry) -> EmbeddingRecord:
        async with self.semaphore:
            loop = asyncio.get_running_loop()
            vector = await loop.run_in_executor(
                self.executor, utterance_embedding, self.model, self.manifest_path, entry
            )
        async with self.stats_lock:
            self.stats["utterances_embedded"] += 1
        return record_for_entry(entry, vector)

    async def _background_progress_reporter(self) -> None:
        while True:
            await asyncio.sleep(self.progress_interval)
            async with self.stats_lock:
                elapsed = time.time() - self.stats["start_time"]
                log_with_context(
                    logger,
                    "info",
                    "Embedding progress",
                    {
                        "elapsed_seconds": round(elapsed, 1),
                        "utterances_embedded": self.stats["utterances_embedded"],
                        "utterances_total": len(self.entries),
                        "memory_mb": round(get_memory_usage_mb(), 1),
                    },
                )

    async def embed(self) -> list[EmbeddingRecord]:
        log_with_context(
            logger,
            "info",
            "Starting corpus embedding",
            {
                "checkpoint": str(self.checkpoint),
                "manifest": str(self.manifest_path),
                "utterances": len(self.entries),
                "embed_dim": self.config.embed_dim,
            },
        )
        progress_task = asyncio.create_task(self._background_progress_reporter())
        try:
            records = await asyncio.gather(*(self._embed_with_semaphore(entry) for entry in self.entries))
        finally:
            progress_task.cancel()
            try:
                await progress_task
            except asyncio.CancelledError:
                pass
            self.executor.shutdown(wait=True)

        self.out_path.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(self.out_path, "w", encoding="utf-8") as f:
            for line in _dump_lines(list(records), self.source, "base64"):
                await f.write(line + "\n")
        log_with_context(
            logger,
            "info",
            "Corpus embedding completed",
            {
                "dump": str(self.out_path),
                "records": len(records),
                "elapsed_seconds": round(time.time() - self.stats["start_time"], 2),
            },
        )
        return list(records)


def embed_corpus(
    checkpoint: str | Path, manifest_path: str | Path, out_path: str | Path, jobs: int = 4
) -> list[EmbeddingRecord]:
    """One record per utterance, in manifest order; output does not depend on ``jobs``."""
    embedder = CorpusEmbedder(checkpoint, manifest_path, out_path, jobs)
    return asyncio.run(embedder.embed())


_OPERATORS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
}
_FILTER_TERM = re.compile(r"^\s*([A-Za-z_]\w*)\s*(==|!=|<=|>=|<|>)\s*(.*?)\s*$")


@dataclass(frozen=True)
class FilterPredicate:
    """One ``field <op> value`` term, e.g. ``snr_db>20`` or ``codec_class==uncompressed``."""

    field_name: str
    op: str
    value: str

    def matches(self, record: EmbeddingRecord) -> bool:
        actual = record.get(self.field_name)
        if actual is None:
            return False
        compare = _OPERATORS[self.op]
        if isinstance(actual, bool):
            expected = self.value.lower()
            if expected not in ("true", "false", "1", "0"):
                raise ConfigError(f"{self.field_name} is boolean, cannot compare with {self.value!r}")
            return compare(actual, expected in ("true", "1"))
        if isinstance(actual, (int, float)):
            try:
                return compare(float(actual), float(self.value))
            except ValueError as e:
                raise ConfigError(f"{self.field_name} is numeric, cannot compare with {self.value!r}") from e
        if self.op not in ("==", "!="):
            raise ConfigError(f"{self.field_name} is categorical, only == and != apply")
        return compare(str(actual), self.value)


def parse_filter(expression: str | None) -> list[FilterPredicate]:
    """Comma-separated terms joined by AND. Empty input means no filtering."""
    if not expression or not expression.strip():
        return []
    predicates = []
    for term in expression.split(","):
        match = _FILTER_TERM.match(term)
        if not match or not match.group(3):
            raise ConfigError(f"invalid filter term {term!r}, expected field<op>value")
        predicates.append(FilterPredicate(*match.groups()))
    return predicates


def apply_filters(records: list[EmbeddingRecord], predicates: list[FilterPredicate]) -> list[EmbeddingRecord]:
    known = set(RECORD_FIELDS).union(*(r.attributes for r in records)) if records else set(RECORD_FIELDS)
    unknown = sorted({p.field_name for p in predicates} - known)
    if unknown:
        raise ConfigError(f"unknown filter fields {unknown}")
    return [r for r in records if all(p.matches(r) for p in predicates)]


@dataclass(frozen=True)
class ClusterReport:
    task: str
    k: int
    f1: float
    assignment: dict  # cluster -> label
    per_class_f1: dict  # label -> F1
    n_records: int


def cluster_f1_matrix(clusters: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """F1 of each (cluster, label) pairing, shape (k clusters, k labels)."""
    matrix = np.zeros((k, k))
    for c in range(k):
        in_cluster = clusters == c
        for label in range(k):
            tp = np.sum(in_cluster & (labels == label))
            if tp == 0:
                continue
            precision = tp / np.sum(in_cluster)
            recall = tp / np.sum(labels == label)
            matrix[c, label] = 2 * precision * recall / (precision + recall)
    return matrix


def match_clusters(f1_matrix: np.ndarray) -> dict[int, int]:
    """Hungarian assignment of clusters to labels maximizing the summed F1."""
    rows, cols = linear_sum_assignment(f1_matrix, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def _check_not_degenerate(vectors: np.ndarray) -> None:
    if np.all(np.ptp(vectors, axis=0) == 0):
        raise DegenerateDataError("all embedding vectors are identical")


def kmeans_f1(records: list[EmbeddingRecord], label_field: str, k: int | None = None, seed: int = 0) -> ClusterReport:
    """
    k-means (k-means++ init, 20 restarts, best inertia) scored by macro-F1 after matching clusters
    to labels.

    ``label_field`` is a record field or one of the short names ``noise``, ``reverb``, ``overlap``.

    Raises:
        ConfigError: k differs from the number of distinct labels, k < 2, or fewer records than k
        DegenerateDataError: All vectors identical
    """
    field_name = LABEL_FIELDS.get(label_field, label_field)
    values = [r.get(field_name) for r in records]
    if any(v is None for v in values):
        raise ConfigError(f"some records lack the label field {field_name!r}")
    classes = sorted(set(values), key=str)
    if k is None:
        k = len(classes)
    if k != len(classes):
        raise ConfigError(f"k={k} must equal the number of distinct {field_name} labels ({len(classes)})")
    if k < 2:
        raise ConfigError(f"clustering needs k > 1, {field_name} has a single label {classes}")
    if len(records) < k:
        raise ConfigError(f"need at least k={k} records, got {len(records)}")

    vectors = np.stack([r.vector for r in records]).astype(np.float64)
    _check_not_degenerate(vectors)
    labels = np.array([classes.index(v) for v in values])
    clusters = KMeans(n_clusters=k, init="k-means++", n_init=KMEANS_RESTARTS, random_state=seed).fit_predict(vectors)

    assignment = match_clusters(cluster_f1_matrix(clusters, labels, k))
    mapped = np.array([assignment[c] for c in clusters])
    per_class = f1_score(labels, mapped, labels=list(range(k)), average=None, zero_division=0.0)
    report = ClusterReport(
        task=field_name,
        k=k,
        f1=float(np.mean(per_class)),
        assignment={c: classes[label] for c, label in assignment.items()},
        per_class_f1={classes[i]: float(v) for i, v in enumerate(per_class)},
        n_records=len(records),
    )
    log_with_context(logger, "info", "Clustering scored", {"task": field_name, "k": k, "f1": round(report.f1, 4)})
    return report


def write_cluster_report_csv(path: str | Path, report: ClusterReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_label = {label: cluster for cluster, label in report.assignment.items()}
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "k", "records", "macro_f1", "label", "cluster", "label_f1"])
        for label, value in report.per_class_f1.items():
            row = [report.task, report.k, report.n_records, repr(report.f1), label, by_label[label], repr(value)]
            writer.writerow(row)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """``1 - u.v / (|u| |v|)``, clipped to [0, 2]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm_u, norm_v = np.linalg.norm(u), np.linalg.norm(v)
    if norm_u == 0.0 or norm_v == 0.0:
        raise ZeroVectorError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - np.dot(u, v) / (norm_u * norm_v), 0.0, 2.0))


@dataclass(frozen=True)
class DistanceReport:
    reference_speaker: str
    mean: float
    std: float
    distances: dict  # speaker -> distance to the reference


def cosine_distance_report(records: list[EmbeddingRecord], reference_speaker: str) -> DistanceReport:
    """
    Distance from the reference speaker's embedding to every other speaker's.

    Speakers with several records are represented by their mean vector.

    Raises:
        InsufficientSpeakersError: Fewer than two speakers
        ZeroVectorError: A speaker vector is all zeros
    """
    by_speaker: dict[str, list[np.ndarray]] = {}
    for record in records:
        by_speaker.setdefault(record.speaker_id, []).append(record.vector.astype(np.float64))
    if len(by_speaker) < 2:
        raise InsufficientSpeakersError(f"cosine analysis needs >= 2 speakers, got {len(by_speaker)}")
    if reference_speaker not in by_speaker:
        raise ConfigError(f"reference speaker {reference_speaker!r} has no records")
    vectors = {speaker: np.mean(vs, axis=0) for speaker, vs in sorted(by_speaker.items())}
    reference = vectors.pop(reference_speaker)
    distances = {speaker: cosine_distance(reference, vector) for speaker, vector in vectors.items()}
    values = np.array(list(distances.values()))
    return DistanceReport(reference_speaker, float(values.mean()), float(values.std()), distances)


def write_distance_report_csv(path: str | Path, report: DistanceReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["reference_speaker", "speaker", "distance"])
        for speaker, distance in report.distances.items():
            writer.writerow([report.reference_speaker, speaker, repr(distance)])
        writer.writerow([report.reference_speaker, "mean", repr(report.mean)])
        writer.writerow([report.reference_speaker, "std", repr(report.std)])


def tsne_project(
    records: list[EmbeddingRecord], perplexity: float = 30.0, iterations: int = 1000, seed: int = 0
) -> np.ndarray:
    """
    Exact t-SNE to two dimensions with PCA initialization; early exaggeration covers the first
    250 iterations.

    Raises:
        PerplexityTooLargeError: Fewer than ``3 * perplexity`` records
        ConfigError: More than 5000 records or fewer than 250 iterations
        DegenerateDataError: All vectors identical
    """
    n = len(records)
    if perplexity <= 0:
        raise ConfigError(f"perplexity must be > 0, got {perplexity}")
    if n < 3 * perplexity:
        raise PerplexityTooLargeError(f"perplexity {perplexity} needs at least {3 * perplexity:g} records, got {n}")
    if n > TSNE_MAX_POINTS:
        raise ConfigError(f"exact t-SNE is limited to {TSNE_MAX_POINTS} records, got {n}")
    if iterations < TSNE_MIN_ITERATIONS:
        raise ConfigError(f"iterations must be >= {TSNE_MIN_ITERATIONS}, got {iterations}")
    vectors = np.stack([r.vector for r in records]).astype(np.float64)
    _check_not_degenerate(vectors)
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        max_iter=iterations,
        method="exact",
        init="pca",
        random_state=seed,
    )
    return tsne.fit_transform(vectors)


def write_projection_csv(path: str | Path, records: list[EmbeddingRecord], coords: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", *RECORD_FIELDS])
        for record, (x, y) in zip(records, coords):
            writer.writerow([repr(float(x)), repr(float(y)), *(record.get(name) for name in RECORD_FIELDS)])
