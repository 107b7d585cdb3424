"""Audio buffer type, WAV I/O, level utilities and seeded random streams."""

import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import soundfile as sf

from .errors import (
    ClippedSignalWarning,
    ConfigError,
    CorruptFileError,
    EmptyBufferError,
    NonFiniteSamplesError,
    SilentInputError,
    UnsupportedFormatError,
)
from .logging import log_with_context

SAMPLE_RATE = 16000
WAV_SUBTYPES_READ = ("PCM_16", "FLOAT")
WAV_SUBTYPES_WRITE = ("PCM_16", "FLOAT")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AudioBuffer:
    """
    Immutable mono signal at 16 kHz.

    Samples are stored as a read-only float64 array. Values are normally in [-1, 1];
    intermediate mixtures may exceed that range and are clamped only when quantized.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedFormatError(f"sample_rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        samples = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise NonFiniteSamplesError("AudioBuffer samples must be finite (found NaN or Inf)")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    @classmethod
    def silence(cls, n_samples: int) -> "AudioBuffer":
        return cls(np.zeros(n_samples))


def stream_id_for(name: str) -> int:
    """Stable 64-bit stream id for a string key (utterance id, component name)."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class SeededRng:
    """
    Deterministic random stream identified by ``(seed, stream_id)``.

    Backed by numpy's PCG64 seeded from ``SeedSequence([seed, stream_id])`` so the draw
    sequence is identical across runs and platforms, and independent between streams.
    """

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream_id < 2**64):
            raise ConfigError(f"seed and stream_id must be unsigned 64-bit, got {self.seed}, {self.stream_id}")
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))

    @classmethod
    def for_key(cls, seed: int, key: str) -> "SeededRng":
        """Stream derived from a string key, e.g. an utterance id."""
        return cls(seed, stream_id_for(key))

    def child(self, name: str) -> "SeededRng":
        """Independent sub-stream, so adding draws to one component never shifts another."""
        return SeededRng(self.seed, stream_id_for(f"{self.stream_id}/{name}"))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace: bool = True):
        return self.generator.choice(a, size=size, replace=replace)

    def random(self, size=None):
        return self.generator.random(size)


def _check_riff_chunks(path: Path) -> None:
    """Walk the RIFF chunk list and fail on chunks running past the end of file."""
    data = path.read_bytes()
    if len(data) < 12 or data[:4] not in (b"RIFF", b"RIFX") or data[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path} is not a RIFF/WAVE file")
    offset = 12
    while offset + 8 <= len(data):
        chunk_id, chunk_size = struct.unpack("<4sI", data[offset : offset + 8])
        if offset + 8 + chunk_size > len(data):
            raise CorruptFileError(
                f"{path}: chunk {chunk_id!r} declares {chunk_size} bytes but only {len(data) - offset - 8} remain"
            )
        offset += 8 + chunk_size + (chunk_size & 1)


def read_wav(path: str | Path) -> AudioBuffer:
    """
    Read a 16 kHz mono WAV file (PCM 16-bit or IEEE float 32-bit).

    Args:
        path: WAV file path

    Returns:
        AudioBuffer with samples scaled to [-1, 1] (PCM divided by 32768)

    Raises:
        UnsupportedFormatError: Wrong container, rate, channel count or sample format
        CorruptFileError: Truncated or unreadable chunks
        NonFiniteSamplesError: Float samples holding NaN or Inf
    """
    path = Path(path)
    _check_riff_chunks(path)
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise CorruptFileError(f"{path}: {e}") from e

    if info.samplerate != SAMPLE_RATE or info.channels != 1 or info.subtype not in WAV_SUBTYPES_READ:
        raise UnsupportedFormatError(
            f"{path}: expected {SAMPLE_RATE} Hz mono {'/'.join(WAV_SUBTYPES_READ)}, got "
            f"{info.samplerate} Hz, {info.channels} channel(s), {info.subtype}"
        )

    try:
        samples, _ = sf.read(str(path), dtype="float64", always_2d=False)
    except RuntimeError as e:
        raise CorruptFileError(f"{path}: {e}") from e
    if samples.shape[0] != info.frames:
        raise CorruptFileError(f"{path}: header declares {info.frames} frames, read {samples.shape[0]}")
    return AudioBuffer(samples)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Scale by 32768, round to nearest and clamp to the int16 range."""
    return np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(buffer: AudioBuffer, path: str | Path, subtype: str = "PCM_16") -> None:
    """
    Write a buffer as a mono 16 kHz WAV file.

    PCM 16-bit is the canonical format. Samples beyond full scale are clamped and a
    ClippedSignalWarning is emitted. ``subtype="FLOAT"`` writes unclamped float32
    (impulse responses and stems).

    Args:
        buffer: Signal to write
        path: Destination path (parent directories are created)
        subtype: "PCM_16" or "FLOAT"
    """
    if subtype not in WAV_SUBTYPES_WRITE:
        raise ConfigError(f"subtype must be one of {WAV_SUBTYPES_WRITE}, got {subtype!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    if subtype == "PCM_16":
        n_clipped = int(np.count_nonzero(np.abs(buffer.samples) > 1.0))
        if n_clipped:
            log_with_context(
                logger,
                "warning",
                "Clipped samples clamped before quantization",
                {"path": str(path), "clipped_samples": n_clipped, "peak": buffer.peak},
            )
            warnings.warn(
                f"{n_clipped} sample(s) in {path} exceed full scale and were clamped",
                ClippedSignalWarning,
                stacklevel=2,
            )
        data = quantize_pcm16(buffer.samples)
    else:
        data = buffer.samples.astype(np.float32)

    sf.write(str(path), data, SAMPLE_RATE, subtype=subtype, format="WAV")


def apply_peak_level(buffer: AudioBuffer, target_dbfs: float) -> AudioBuffer:
    """
    Scale a buffer by a single gain so its absolute peak sits at ``target_dbfs``.

    Raises:
        ConfigError: target_dbfs above 0 dBFS
        SilentInputError: All-zero buffer
    """
    if target_dbfs > 0:
        raise ConfigError(f"target_dbfs must be <= 0, got {target_dbfs}")
    peak = buffer.peak
    if peak == 0.0:
        raise SilentInputError("cannot set the peak level of an all-zero buffer")
    gain = 10.0 ** (target_dbfs / 20.0) / peak
    return AudioBuffer(buffer.samples * gain)


def rms(buffer: AudioBuffer) -> float:
    """Root mean square of the samples."""
    if len(buffer) == 0:
        raise EmptyBufferError("rms of an empty buffer is undefined")
    return float(np.sqrt(np.mean(buffer.samples**2)))
