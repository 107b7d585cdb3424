"""Synthetic clean speech for desk-scale corpora and built-in babble."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer, SeededRng, write_wav
from .errors import ConfigError
from .logging import log_with_context

# (F1, F2, F3) in Hz
VOWEL_FORMANTS = (
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
)
FORMANT_BANDWIDTHS_HZ = (90.0, 110.0, 170.0)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeakerVoice:
    f0_hz: float
    formant_scale: float

    @classmethod
    def sample(cls, rng: SeededRng) -> "SpeakerVoice":
        return cls(f0_hz=float(rng.uniform(90.0, 250.0)), formant_scale=float(rng.uniform(0.85, 1.15)))


def _resonator(freq_hz: float, bandwidth_hz: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bandwidth_hz / SAMPLE_RATE)
    theta = 2.0 * np.pi * freq_hz / SAMPLE_RATE
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a


def _syllable(rng: SeededRng, voice: SpeakerVoice, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f0 = voice.f0_hz * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(f0) / SAMPLE_RATE
    n_harmonics = int(7000.0 // voice.f0_hz)
    h = np.arange(1, n_harmonics + 1)[:, None]
    source = np.sum(np.sin(2 * np.pi * h * phase[None, :]) / h, axis=0)
    source += 0.05 * rng.normal(size=n)

    formants = VOWEL_FORMANTS[int(rng.integers(len(VOWEL_FORMANTS)))]
    out = source
    for freq, bw in zip(formants, FORMANT_BANDWIDTHS_HZ):
        b, a = _resonator(min(freq * voice.formant_scale, 0.45 * SAMPLE_RATE), bw)
        out = signal.lfilter(b, a, out)
    return out * np.hanning(n)


def synthesize_utterance(rng: SeededRng, voice: SpeakerVoice, duration_s: float) -> AudioBuffer:
    """
    Vowel-like babbling: harmonic source with a pitch contour, three formant resonators,
    syllable envelopes and random pauses. Peak is normalized to 0.5.
    """
    if duration_s <= 0:
        raise ConfigError(f"duration_s must be > 0, got {duration_s}")
    total = int(round(duration_s * SAMPLE_RATE))
    out = np.zeros(total)
    pos = int(rng.integers(0, int(0.1 * SAMPLE_RATE)))
    while pos < total:
        n = int(rng.uniform(0.12, 0.3) * SAMPLE_RATE)
        seg = _syllable(rng, voice, n)[: total - pos]
        out[pos : pos + seg.size] += seg
        pos += n
        if rng.random() < 0.25:
            pos += int(rng.uniform(0.05, 0.3) * SAMPLE_RATE)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return AudioBuffer(out)


def write_speech_corpus(
    out_dir: str | Path,
    n_speakers: int,
    utterances_per_speaker: int,
    seed: int,
    duration_range_s: tuple[float, float] = (1.5, 3.5),
) -> list[Path]:
    """
    Write ``<out_dir>/<speaker>/<speaker>_<n>.wav`` with one voice per speaker.

    Returns:
        Written paths in speaker/utterance order
    """
    if n_speakers < 1 or utterances_per_speaker < 1:
        raise ConfigError(
            f"n_speakers and utterances_per_speaker must be >= 1, got {n_speakers}, {utterances_per_speaker}"
        )
    out_dir = Path(out_dir)
    paths = []
    for s in range(n_speakers):
        speaker = f"spk{s:03d}"
        voice = SpeakerVoice.sample(SeededRng.for_key(seed, f"voice/{speaker}"))
        for u in range(utterances_per_speaker):
            rng = SeededRng.for_key(seed, f"utt/{speaker}/{u}")
            buffer = synthesize_utterance(rng, voice, float(rng.uniform(*duration_range_s)))
            path = out_dir / speaker / f"{speaker}_{u:03d}.wav"
            write_wav(buffer, path)
            paths.append(path)
    log_with_context(
        logger,
        "info",
        "Synthetic speech corpus written",
        {"out_dir": str(out_dir), "speakers": n_speakers, "utterances": len(paths)},
    )
    return paths
