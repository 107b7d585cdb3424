"""Log-mel filterbank frontend and fixed-size chunking."""

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer
from .errors import ShapeMismatchError, TooShortError, VersionMismatchError

N_MELS = 80
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
CHUNK_FRAMES = 100  # 1 s
LOG_FLOOR = 1e-10
FEATURE_CACHE_VERSION = 1


@dataclass(frozen=True)
class FeatureChunk:
    matrix: np.ndarray  # CHUNK_FRAMES x N_MELS
    utterance_id: str = ""
    chunk_index: int = 0

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ShapeMismatchError(f"feature chunk must be 2-D, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ShapeMismatchError("feature chunk contains non-finite values")
        object.__setattr__(self, "matrix", matrix)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-mel filters over 0-8000 Hz with unit peak, shape (n_mels, N_FFT // 2 + 1)."""
    return librosa.filters.mel(
        sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=n_mels, fmin=0.0, fmax=SAMPLE_RATE / 2, htk=True, norm=None
    ).astype(np.float64)


def mel_center_frequencies(n_mels: int = N_MELS) -> np.ndarray:
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=0.0, fmax=SAMPLE_RATE / 2, htk=True)[1:-1]


def frame_count(n_samples: int) -> int:
    return -(-n_samples // HOP_LENGTH)


def melfb(buffer: AudioBuffer) -> np.ndarray:
    """
    80-band log-mel energies, one row per 10 ms hop.

    Frames are 400-sample Hann windows centred on multiples of the hop (reflection padding),
    giving ``ceil(len / 160)`` rows. Values are ``log(mel_energy + 1e-10)``.

    Raises:
        TooShortError: Fewer than 400 samples
    """
    x = buffer.samples
    if x.size < WIN_LENGTH:
        raise TooShortError(f"melfb needs at least {WIN_LENGTH} samples, got {x.size}")
    padded = np.pad(x, WIN_LENGTH // 2, mode="reflect")
    frames = sliding_window_view(padded, WIN_LENGTH)[::HOP_LENGTH][: frame_count(x.size)]
    window = signal.get_window("hann", WIN_LENGTH)
    power = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1)) ** 2
    return np.log(power @ mel_filterbank().T + LOG_FLOOR)


def chunk(features: np.ndarray, utterance_id: str = "") -> list[FeatureChunk]:
    """Consecutive non-overlapping 100-frame chunks; the trailing remainder is dropped."""
    n_frames = features.shape[0]
    if n_frames < CHUNK_FRAMES:
        raise TooShortError(f"need at least {CHUNK_FRAMES} frames to chunk, got {n_frames}")
    return [
        FeatureChunk(features[k * CHUNK_FRAMES : (k + 1) * CHUNK_FRAMES], utterance_id, k)
        for k in range(n_frames // CHUNK_FRAMES)
    ]


def write_feature_cache(path: str | Path, chunks: list[FeatureChunk]) -> None:
    """Flat little-endian float32 payload (``.f32``) plus a JSON header (``.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = list(chunks[0].matrix.shape) if chunks else [CHUNK_FRAMES, N_MELS]
    payload = np.stack([c.matrix for c in chunks]).astype("<f4") if chunks else np.zeros((0, *dims), "<f4")
    path.with_suffix(".f32").write_bytes(payload.tobytes(order="C"))
    header = {
        "version": FEATURE_CACHE_VERSION,
        "count": len(chunks),
        "dims": dims,
        "dtype": "float32-le",
        "chunks": [[c.utterance_id, c.chunk_index] for c in chunks],
    }
    path.with_suffix(".json").write_text(json.dumps(header))


def read_feature_cache(path: str | Path) -> list[FeatureChunk]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("version") != FEATURE_CACHE_VERSION:
        raise VersionMismatchError(
            f"feature cache version {header.get('version')} != supported {FEATURE_CACHE_VERSION}"
        )
    payload = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    matrices = payload.reshape(header["count"], *header["dims"])
    return [FeatureChunk(m, uid, int(idx)) for m, (uid, idx) in zip(matrices, header["chunks"])]
