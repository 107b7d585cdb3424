"""
Corpus synthesis into six codec x overlap groups with per-chunk label manifests.

Utterances are synthesized concurrently in a thread pool; every utterance draws from its own
seeded stream keyed by its id, and the manifest is written in utterance-id order.
"""

import asyncio
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import aiofiles
import numpy as np
import soundfile as sf

from . import __version__
from .acoustics import LABEL_CEIL_DB, LABEL_FLOOR_DB, ReverbLabels, eyring_t60, reverb_labels
from .audio import SAMPLE_RATE, AudioBuffer, SeededRng, read_wav, rms, write_wav
from .degrade import (
    BITRATE_RANGE_KBPS,
    CODEC_CLASSES,
    NOISE_CLASSES,
    PEAK_RANGE_DBFS,
    SIR_RANGE_DB,
    SNR_RANGE_DB,
    UNCOMPRESSED_BITRATE_KBPS,
    VAD_FRAME,
    CodecSpec,
    DegradationRecipe,
    NoiseBank,
    active_sample_mask,
    degrade,
    vad_frames,
)
from .errors import (
    ConfigError,
    EmptyCleanDirError,
    InsufficientSpeakersError,
    ManifestError,
    UtteranceTooShortError,
    VersionMismatchError,
)
from .logging import get_memory_usage_mb, log_with_context
from .rir import RoomSamplingConfig, sample_geometry, sample_room, simulate_rir

MANIFEST_SCHEMA_VERSION = 1
CHUNK_SAMPLES = SAMPLE_RATE  # 1 s
CHUNK_VAD_FRAMES = CHUNK_SAMPLES // VAD_FRAME

# group_id -> (codec_class, overlap)
GROUPS = {
    1: ("uncompressed", False),
    2: ("uncompressed", True),
    3: ("surrogate_speech", False),
    4: ("surrogate_speech", True),
    5: ("surrogate_music", False),
    6: ("surrogate_music", True),
}

# Regression slots in metrics-table order; vad_fraction last.
REGRESSION_TASKS = (
    "c50_db",
    "t60_ms",
    "drr_db",
    "c5_db",
    "room_volume_m3",
    "reflection_coeff",
    "pesq",
    "estoi",
    "bitrate_kbps",
    "snr_db",
    "vad_fraction",
)
CLASS_TASKS = {
    "noise": NOISE_CLASSES,
    "codec": CODEC_CLASSES,
    "overlap": (False, True),
}
PESQ_RANGE = (-0.5, 4.5)
ESTOI_RANGE = (0.0, 1.0)
CLARITY_RANGE_DB = (LABEL_FLOOR_DB, LABEL_CEIL_DB)
BABBLE_POOL_SIZE = 12

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChunkLabel:
    """Targets for one 1 s chunk: 11 real slots and 3 categorical slots. ``None`` marks a missing value."""

    c50_db: float
    t60_ms: float
    drr_db: float
    c5_db: float
    room_volume_m3: float
    reflection_coeff: float
    pesq: float | None
    estoi: float | None
    bitrate_kbps: float
    snr_db: float | None
    vad_fraction: float
    noise_class: str
    codec_class: str
    overlap: bool

    def __post_init__(self):
        if self.noise_class not in NOISE_CLASSES:
            raise ManifestError(f"noise_class must be one of {NOISE_CLASSES}, got {self.noise_class!r}")
        if self.codec_class not in CODEC_CLASSES:
            raise ManifestError(f"codec_class must be one of {CODEC_CLASSES}, got {self.codec_class!r}")
        if not 0.0 <= self.vad_fraction <= 1.0:
            raise ManifestError(f"vad_fraction must be in [0, 1], got {self.vad_fraction}")
        for name, bounds in (
            ("pesq", PESQ_RANGE),
            ("estoi", ESTOI_RANGE),
            ("c50_db", CLARITY_RANGE_DB),
            ("c5_db", CLARITY_RANGE_DB),
            ("drr_db", CLARITY_RANGE_DB),
        ):
            value = getattr(self, name)
            if value is not None and not bounds[0] <= value <= bounds[1]:
                raise ManifestError(f"{name} must be in [{bounds[0]}, {bounds[1]}], got {value}")
        for name in REGRESSION_TASKS:
            value = getattr(self, name)
            if value is None and name not in ("pesq", "estoi", "snr_db"):
                raise ManifestError(f"{name} may not be missing")
            if value is not None and not math.isfinite(value):
                raise ManifestError(f"{name} must be finite, got {value}")

    def regression_values(self) -> list[float | None]:
        return [getattr(self, name) for name in REGRESSION_TASKS]

    def class_index(self, task: str) -> int:
        value = {"noise": self.noise_class, "codec": self.codec_class, "overlap": self.overlap}[task]
        return CLASS_TASKS[task].index(value)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChunkLabel":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ManifestError(f"unknown chunk label fields: {sorted(unknown)}")
        try:
            return cls(**{name: data[name] for name in names})
        except KeyError as e:
            raise ManifestError(f"chunk label is missing field {e}") from e


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    wav_path: str  # relative to the manifest directory
    speaker_id: str
    group_id: int
    recipe: dict
    chunk_labels: tuple[tuple[int, ChunkLabel], ...]

    def __post_init__(self):
        if self.group_id not in GROUPS:
            raise ManifestError(f"group_id must be one of {sorted(GROUPS)}, got {self.group_id}")
        indices = [index for index, _ in self.chunk_labels]
        if indices != list(range(len(indices))):
            raise ManifestError(f"{self.utterance_id}: chunk indices must be contiguous from 0, got {indices}")
        object.__setattr__(self, "chunk_labels", tuple((int(i), label) for i, label in self.chunk_labels))

    @property
    def labels(self) -> list[ChunkLabel]:
        return [label for _, label in self.chunk_labels]

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "utterance_id": self.utterance_id,
            "wav_path": self.wav_path,
            "speaker_id": self.speaker_id,
            "group_id": self.group_id,
            "recipe": self.recipe,
            "chunk_labels": [{"chunk_index": i, **label.to_dict()} for i, label in self.chunk_labels],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ManifestEntry":
        version = data.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise VersionMismatchError(f"manifest schema_version {version} != supported {MANIFEST_SCHEMA_VERSION}")
        try:
            chunks = []
            for item in data["chunk_labels"]:
                item = dict(item)
                chunks.append((item.pop("chunk_index"), ChunkLabel.from_dict(item)))
            return cls(
                utterance_id=data["utterance_id"],
                wav_path=data["wav_path"],
                speaker_id=data["speaker_id"],
                group_id=data["group_id"],
                recipe=data["recipe"],
                chunk_labels=tuple(chunks),
            )
        except KeyError as e:
            raise ManifestError(f"manifest entry is missing field {e}") from e


def serialize_entry(entry: ManifestEntry) -> str:
    return json.dumps(entry.to_dict(), sort_keys=True)


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(serialize_entry(entry) + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """
    Parse a line-delimited JSON manifest.

    Raises:
        ManifestError: Malformed line or field
        VersionMismatchError: Unsupported schema_version
    """
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{line_no}: invalid JSON: {e}") from e
            entries.append(ManifestEntry.from_dict(data))
    return entries


def resolve_wav(manifest_path: str | Path, entry: ManifestEntry) -> Path:
    wav = Path(entry.wav_path)
    return wav if wav.is_absolute() else Path(manifest_path).parent / wav


def chunk_labels(
    clean: AudioBuffer,
    recipe: DegradationRecipe,
    ir_labels: ReverbLabels,
    speech: AudioBuffer | None = None,
    noise: AudioBuffer | None = None,
) -> list[ChunkLabel]:
    """
    One label per full second of audio.

    Reverb, codec and class slots are constant per utterance. ``vad_fraction`` is the share of
    active 10 ms frames of the clean target within the chunk. ``snr_db`` is recomputed per chunk
    from the ``speech`` and ``noise`` stems when given (the recipe target otherwise) and is
    ``None`` for chunks without active speech.

    Raises:
        UtteranceTooShortError: Fewer than 16000 samples
    """

    n_chunks = len(clean) // CHUNK_SAMPLES
    if n_chunks < 1:
        raise UtteranceTooShortError(f"utterance of {clean.duration_s:.3f} s is shorter than one 1 s chunk")
    active = vad_frames(clean)
    active_samples = active_sample_mask(active, len(clean))

    labels = []
    for k in range(n_chunks):
        frames = active[k * CHUNK_VAD_FRAMES : (k + 1) * CHUNK_VAD_FRAMES]
        vad_fraction = float(np.mean(frames))
        snr = None
        if vad_fraction > 0.0:
            snr = recipe.snr_db
            if speech is not None and noise is not None:
                snr = _chunk_snr_db(speech, noise, active_samples, k)
        labels.append(
            ChunkLabel(
                c50_db=ir_labels.c50_db,
                t60_ms=ir_labels.t60_ms,
                drr_db=ir_labels.drr_db,
                c5_db=ir_labels.c5_db,
                room_volume_m3=ir_labels.room_volume_m3,
                reflection_coeff=ir_labels.reflection_coeff,
                pesq=None,
                estoi=None,
                bitrate_kbps=recipe.codec.bitrate_label,
                snr_db=snr,
                vad_fraction=vad_fraction,
                noise_class=recipe.noise_class,
                codec_class=recipe.codec.codec_class,
                overlap=recipe.overlap,
            )
        )
    return labels


def _chunk_snr_db(speech: AudioBuffer, noise: AudioBuffer, active_samples: np.ndarray, k: int) -> float | None:
    window = slice(k * CHUNK_SAMPLES, (k + 1) * CHUNK_SAMPLES)
    mask = active_samples[window]
    speech_level = float(np.sqrt(np.mean(speech.samples[window][mask] ** 2)))
    noise_level = rms(AudioBuffer(noise.samples[window]))
    if speech_level == 0.0 or noise_level == 0.0:
        return None
    return 20.0 * math.log10(speech_level / noise_level)


def utterance_labels(labels: list[ChunkLabel]) -> ChunkLabel:
    """Reduce chunk labels to one utterance label: mean of each real slot, ignoring missing values."""
    if not labels:
        raise ConfigError("utterance_labels needs at least one chunk label")
    means = {}
    for name in REGRESSION_TASKS:
        present = [getattr(label, name) for label in labels if getattr(label, name) is not None]
        means[name] = float(np.mean(present)) if present else None
    return replace(labels[0], **means)


def split_manifest(
    entries: list[ManifestEntry], test_fraction: float, seed: int
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """
    Speaker-disjoint split. At least one speaker lands on each side.

    Raises:
        InsufficientSpeakersError: Fewer than two speakers
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    speakers = sorted({entry.speaker_id for entry in entries})
    if len(speakers) < 2:
        raise InsufficientSpeakersError(f"a speaker-disjoint split needs >= 2 speakers, got {len(speakers)}")
    order = SeededRng.for_key(seed, "split").choice(len(speakers), size=len(speakers), replace=False)
    n_test = min(len(speakers) - 1, max(1, int(round(test_fraction * len(speakers)))))
    test_speakers = {speakers[i] for i in order[:n_test]}
    train = [e for e in entries if e.speaker_id not in test_speakers]
    test = [e for e in entries if e.speaker_id in test_speakers]
    return train, test


def join_labels(entries: list[ManifestEntry], csv_path: str | Path) -> list[ManifestEntry]:
    """
    Fill PESQ/ESTOI slots from a CSV with columns ``utterance_id,chunk_index,pesq,estoi``.

    Empty cells leave the slot missing.

    Raises:
        ManifestError: Rows for unknown utterances/chunks, missing columns or out-of-range values
    """
    table: dict[tuple[str, int], dict] = {}
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"utterance_id", "chunk_index", "pesq", "estoi"}
        if not required.issubset(reader.fieldnames or ()):
            raise ManifestError(f"{csv_path}: expected columns {sorted(required)}, got {reader.fieldnames}")
        for row in reader:
            key = (row["utterance_id"], int(row["chunk_index"]))
            table[key] = {name: float(row[name]) if row[name].strip() else None for name in ("pesq", "estoi")}

    known = {(e.utterance_id, i) for e in entries for i, _ in e.chunk_labels}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ManifestError(f"{len(unknown)} label rows match no manifest chunk, first: {unknown[0]}")

    joined = []
    for entry in entries:
        chunks = tuple(
            (i, replace(label, **table[(entry.utterance_id, i)]) if (entry.utterance_id, i) in table else label)
            for i, label in entry.chunk_labels
        )
        joined.append(replace(entry, chunk_labels=chunks))
    log_with_context(logger, "info", "External quality labels joined", {"rows": len(table), "csv": str(csv_path)})
    return joined


@dataclass(frozen=True)
class CleanFile:
    path: Path
    speaker_id: str
    n_samples: int


def speaker_id_for(path: Path, clean_dir: Path) -> str:
    """Subdirectory name under ``clean_dir``; files at the top level use the filename prefix before ``_``."""
    relative = path.relative_to(clean_dir)
    if len(relative.parts) > 1:
        return relative.parts[0]
    return path.stem.split("_", 1)[0]


def discover_clean_files(clean_dir: str | Path, min_samples: int = CHUNK_SAMPLES) -> list[CleanFile]:
    """
    All usable WAVs under ``clean_dir`` in sorted path order. Files shorter than one chunk are skipped.

    Raises:
        EmptyCleanDirError: No usable WAV found
    """
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise EmptyCleanDirError(f"clean directory does not exist: {clean_dir}")
    found, skipped = [], 0
    for path in sorted(clean_dir.rglob("*.wav")):
        frames = sf.info(str(path)).frames
        if frames < min_samples:
            skipped += 1
            continue
        found.append(CleanFile(path, speaker_id_for(path, clean_dir), frames))
    if skipped:
        log_with_context(
            logger,
            "warning",
            "Skipped clean files shorter than one chunk",
            {"skipped": skipped, "min_samples": min_samples},
        )
    if not found:
        raise EmptyCleanDirError(f"no usable clean WAV files under {clean_dir}")
    return found


@dataclass(frozen=True)
class SynthConfig:
    """
    Sampling ranges and condition controls for corpus synthesis.

    ``codec_classes`` x ``overlap_conditions`` selects which of the six groups are produced.
    """

    utterances_per_group: int = 1
    noise_classes: tuple[str, ...] = NOISE_CLASSES
    codec_classes: tuple[str, ...] = CODEC_CLASSES
    overlap_conditions: tuple[bool, ...] = (False, True)
    reverb_probability: float = 1.0
    room_sampling: RoomSamplingConfig = field(default_factory=RoomSamplingConfig)
    rir_max_order: int | None = None
    snr_range_db: tuple[float, float] = SNR_RANGE_DB
    sir_range_db: tuple[float, float] = SIR_RANGE_DB
    bitrate_range_kbps: tuple[float, float] = BITRATE_RANGE_KBPS
    peak_range_dbfs: tuple[float, float] = PEAK_RANGE_DBFS
    keep_stems: bool = False
    jobs: int = 4
    progress_interval: float = 30.0

    def __post_init__(self):
        if self.utterances_per_group < 1:
            raise ConfigError(f"utterances_per_group must be >= 1, got {self.utterances_per_group}")
        _check_subset("noise_classes", self.noise_classes, NOISE_CLASSES)
        _check_subset("codec_classes", self.codec_classes, CODEC_CLASSES)
        _check_subset("overlap_conditions", self.overlap_conditions, (False, True))
        if not 0.0 <= self.reverb_probability <= 1.0:
            raise ConfigError(f"reverb_probability must be in [0, 1], got {self.reverb_probability}")
        for name, outer in (
            ("snr_range_db", SNR_RANGE_DB),
            ("sir_range_db", SIR_RANGE_DB),
            ("bitrate_range_kbps", BITRATE_RANGE_KBPS),
            ("peak_range_dbfs", PEAK_RANGE_DBFS),
        ):
            low, high = getattr(self, name)
            if not outer[0] <= low <= high <= outer[1]:
                raise ConfigError(f"{name} must lie within {outer} with low <= high, got {(low, high)}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.progress_interval <= 0:
            raise ConfigError(f"progress_interval must be > 0, got {self.progress_interval}")

    def groups(self) -> list[int]:
        return [
            group_id
            for group_id, (codec_class, overlap) in GROUPS.items()
            if codec_class in self.codec_classes and overlap in self.overlap_conditions
        ]


def _check_subset(name: str, values: tuple, allowed: tuple) -> None:
    if not values:
        raise ConfigError(f"{name} must not be empty")
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ConfigError(f"{name} contains unknown values {bad}, expected a subset of {allowed}")


def utterance_id_for(group_id: int, index: int) -> str:
    return f"g{group_id}_{index:06d}"


def rir_duration_s(eyring_ms: float, direct_delay_s: float) -> float:
    """Simulation length: 1.2x the Eyring T60 clamped to [0.25, 2.5] s, after the direct delay."""
    return float(np.clip(1.2 * eyring_ms / 1000.0, 0.25, 2.5)) + direct_delay_s + 0.05


class CorpusSynthesizer:
    """
    Synthesizes a labelled corpus under ``out_dir``.

    Layout: ``<out_dir>/<group_id>/<utterance_id>.wav``, ``<out_dir>/manifest.jsonl`` and, with
    ``keep_stems``, float WAV stems under ``<out_dir>/stems/``.
    """

    def __init__(
        self,
        clean_dir: str | Path,
        out_dir: str | Path,
        config: SynthConfig,
        seed: int,
        noise_dir: str | Path | None = None,
    ):
        self.clean_dir = Path(clean_dir)
        self.out_dir = Path(out_dir)
        self.config = config
        self.seed = int(seed)
        self.noise_dir = noise_dir
        self.logger = logger

        self.clean_files = discover_clean_files(self.clean_dir)
        self.speakers = sorted({f.speaker_id for f in self.clean_files})
        if True in config.overlap_conditions and len(self.speakers) < 2:
            raise InsufficientSpeakersError(
                f"overlapped groups need >= 2 speakers in {self.clean_dir}, found {len(self.speakers)}"
            )

        pool = [read_wav(f.path) for f in self.clean_files[:BABBLE_POOL_SIZE]]
        self.noise_bank = NoiseBank(noise_dir, speech_pool=pool)

        self.stats = {
            "utterances_planned": len(config.groups()) * config.utterances_per_group,
            "utterances_written": 0,
            "chunks_labelled": 0,
            "reverberant": 0,
            "start_time": time.time(),
        }
        self.stats_lock = asyncio.Lock()
        self.semaphore = asyncio.Semaphore(config.jobs)
        self.executor = ThreadPoolExecutor(max_workers=config.jobs, thread_name_prefix="xanelab-synth")

    def _pick_clean(self, rng: SeededRng, exclude_speaker: str | None = None) -> CleanFile:
        candidates = [f for f in self.clean_files if f.speaker_id != exclude_speaker]
        return candidates[int(rng.integers(len(candidates)))]

    def _sample_recipe(self, rng: SeededRng, group_id: int):
        config = self.config
        codec_class, overlap = GROUPS[group_id]

        rir = interferer_rir = None
        if rng.child("reverb").random() < config.reverb_probability:
            room, geometry = sample_room(rng.child("room"), config.room_sampling)
            duration = rir_duration_s(eyring_t60(room), geometry.distance_m / room.speed_of_sound)
            rir = simulate_rir(room, geometry, config.rir_max_order, duration)
            if overlap:
                other = sample_geometry(rng.child("interferer-room"), room, config.room_sampling, geometry.mic_xyz)
                interferer_rir = simulate_rir(room, other, config.rir_max_order, duration)

        bitrate = UNCOMPRESSED_BITRATE_KBPS
        if codec_class != "uncompressed":
            bitrate = float(rng.child("bitrate").uniform(*config.bitrate_range_kbps))
        recipe = DegradationRecipe(
            rir=rir,
            noise_class=config.noise_classes[int(rng.child("noise-class").integers(len(config.noise_classes)))],
            snr_db=float(rng.child("snr").uniform(*config.snr_range_db)),
            overlap=overlap,
            sir_db=float(rng.child("sir").uniform(*config.sir_range_db)) if overlap else None,
            codec=CodecSpec(codec_class, bitrate),
            peak_dbfs=float(rng.child("level").uniform(*config.peak_range_dbfs)),
        )
        return recipe, interferer_rir

    def synthesize_utterance(self, group_id: int, index: int) -> ManifestEntry:
        """Build, write and label one utterance. Runs in a worker thread."""
        uid = utterance_id_for(group_id, index)
        rng = SeededRng.for_key(self.seed, uid)

        target = self._pick_clean(rng.child("clean"))
        clean = read_wav(target.path)
        recipe, interferer_rir = self._sample_recipe(rng, group_id)

        interferer_file = None
        interferer = None
        if recipe.overlap:
            interferer_file = self._pick_clean(rng.child("interferer"), exclude_speaker=target.speaker_id)
            interferer = read_wav(interferer_file.path)

        result = degrade(clean, recipe, rng.child("degrade"), self.noise_bank, interferer, interferer_rir)
        ir_labels = reverb_labels(recipe.rir) if recipe.rir is not None else ReverbLabels.anechoic()
        labels = chunk_labels(clean, recipe, ir_labels, result.speech, result.noise)

        wav_rel = Path(str(group_id)) / f"{uid}.wav"
        write_wav(result.degraded, self.out_dir / wav_rel)
        if self.config.keep_stems:
            stems = self.out_dir / "stems"
            for name in ("clean", "speech", "noise", "precodec"):
                write_wav(getattr(result, name), stems / f"{uid}_{name}.wav", subtype="FLOAT")

        summary = recipe.summary()
        summary["clean_path"] = str(target.path)
        summary["interferer_path"] = str(interferer_file.path) if interferer_file else None
        summary["achieved_snr_db"] = result.achieved_snr_db
        return ManifestEntry(
            utterance_id=uid,
            wav_path=wav_rel.as_posix(),
            speaker_id=target.speaker_id,
            group_id=group_id,
            recipe=summary,
            chunk_labels=tuple(enumerate(labels)),
        )

    async def _synthesize_with_semaphore(self, group_id: int, index: int) -> ManifestEntry:
        async with self.semaphore:
            loop = asyncio.get_running_loop()
            entry = await loop.run_in_executor(self.executor, self.synthesize_utterance, group_id, index)
        async with self.stats_lock:
            self.stats["utterances_written"] += 1
            self.stats["chunks_labelled"] += len(entry.chunk_labels)
            self.stats["reverberant"] += int(entry.recipe["reverb"])
        return entry

    async def _background_progress_reporter(self) -> None:
        while True:
            await asyncio.sleep(self.config.progress_interval)
            async with self.stats_lock:
                elapsed = time.time() - self.stats["start_time"]
                done = self.stats["utterances_written"]
                log_with_context(
                    self.logger,
                    "info",
                    "Synthesis progress",
                    {
                        "elapsed_seconds": round(elapsed, 1),
                        "utterances_written": done,
                        "utterances_planned": self.stats["utterances_planned"],
                        "utterances_per_second": round(done / elapsed, 2) if elapsed > 0 else 0.0,
                        "memory_mb": round(get_memory_usage_mb(), 1),
                    },
                )

    async def _write_manifest(self, entries: list[ManifestEntry]) -> Path:
        path = self.out_dir / "manifest.jsonl"
        async with aiofiles.open(path, "w", encoding="utf-8") as f:
            for entry in entries:
                await f.write(serialize_entry(entry) + "\n")
        return path

    async def synthesize(self) -> dict:
        """
        Synthesize every planned utterance and write the manifest.

        Returns:
            Dictionary with run statistics
        """
        log_with_context(
            self.logger,
            "info",
            "Starting corpus synthesis",
            {
                "version": __version__,
                "clean_dir": str(self.clean_dir),
                "out_dir": str(self.out_dir),
                "noise_dir": str(self.noise_dir) if self.noise_dir else "builtin",
                "groups": self.config.groups(),
                "utterances_per_group": self.config.utterances_per_group,
                "speakers": len(self.speakers),
                "clean_files": len(self.clean_files),
                "seed": self.seed,
                "jobs": self.config.jobs,
            },
        )
        self.out_dir.mkdir(parents=True, exist_ok=True)
        progress_task = asyncio.create_task(self._background_progress_reporter())
        try:
            tasks = [
                self._synthesize_with_semaphore(group_id, index)
                for group_id in self.config.groups()
                for index in range(self.config.utterances_per_group)
            ]
            entries = await asyncio.gather(*tasks)
        finally:
            progress_task.cancel()
            try:
                await progress_task
            except asyncio.CancelledError:
                pass
            self.executor.shutdown(wait=True)

        entries = sorted(entries, key=lambda e: e.utterance_id)
        manifest_path = await self._write_manifest(entries)

        elapsed = time.time() - self.stats["start_time"]
        final_stats = {
            "manifest": str(manifest_path),
            "utterances_written": self.stats["utterances_written"],
            "chunks_labelled": self.stats["chunks_labelled"],
            "reverberant": self.stats["reverberant"],
            "elapsed_seconds": round(elapsed, 2),
            "memory_mb": round(get_memory_usage_mb(), 1),
        }
        log_with_context(self.logger, "info", "Corpus synthesis completed", final_stats)
        return final_stats


async def async_synthesize_corpus(
    clean_dir: str | Path,
    noise_dir: str | Path | None,
    config: SynthConfig,
    seed: int,
    out_dir: str | Path,
) -> dict:
    synthesizer = CorpusSynthesizer(clean_dir, out_dir, config, seed, noise_dir)
    return await synthesizer.synthesize()


def synthesize_corpus(
    clean_dir: str | Path,
    noise_dir: str | Path | None,
    config: SynthConfig,
    seed: int,
    out_dir: str | Path,
) -> Path:
    """
    Synthesize a corpus and return the manifest path.

    Args:
        clean_dir: Directory of clean 16 kHz WAVs, one subdirectory per speaker
        noise_dir: Directory with one subdirectory per noise class, or None for built-in generators
        config: Sampling ranges and condition controls
        seed: Global seed
        out_dir: Output directory

    Raises:
        EmptyCleanDirError: No usable clean speech
        InsufficientSpeakersError: Overlap requested with fewer than two speakers
    """
    stats = asyncio.run(async_synthesize_corpus(clean_dir, noise_dir, config, seed, out_dir))
    return Path(stats["manifest"])
