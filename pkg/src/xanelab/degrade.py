"""
Degradation chain: reverb -> overlap -> noise -> codec -> level.

Also produces the signal-level stems used for SNR/VAD labelling.
"""

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Protocol

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer, SeededRng, apply_peak_level, read_wav, rms
from .errors import ConfigError, InvalidBitrateError, SilentInputError, SilentNoiseError, SilentSpeechError
from .logging import log_with_context
from .rir import ImpulseResponse
from .speech import SpeakerVoice, synthesize_utterance

NOISE_CLASSES = ("ambient", "babble", "music", "other", "white")
CODEC_CLASSES = ("uncompressed", "surrogate_speech", "surrogate_music")
UNCOMPRESSED_BITRATE_KBPS = 256.0
BITRATE_RANGE_KBPS = (8.0, 64.0)
SNR_RANGE_DB = (0.0, 30.0)
SIR_RANGE_DB = (3.0, 12.0)
PEAK_RANGE_DBFS = (-10.0, -0.1)
VAD_FRAME = 160  # 10 ms
VAD_THRESHOLD_DB = 40.0
BABBLE_TALKERS = 6

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecSpec:
    codec_class: str = "uncompressed"
    bitrate_kbps: float = UNCOMPRESSED_BITRATE_KBPS

    def __post_init__(self):
        if self.codec_class not in CODEC_FACTORIES:
            raise ConfigError(f"unknown codec_class {self.codec_class!r}, expected one of {sorted(CODEC_FACTORIES)}")
        if self.codec_class != "uncompressed":
            low, high = BITRATE_RANGE_KBPS
            if not low <= self.bitrate_kbps <= high:
                raise InvalidBitrateError(f"bitrate_kbps must be in [{low}, {high}], got {self.bitrate_kbps}")

    @property
    def bitrate_label(self) -> float:
        """Bit-rate regression target; uncompressed audio is labelled with the 16 kHz/16-bit PCM rate."""
        return UNCOMPRESSED_BITRATE_KBPS if self.codec_class == "uncompressed" else float(self.bitrate_kbps)


@dataclass(frozen=True)
class DegradationRecipe:
    rir: ImpulseResponse | None
    noise_class: str
    snr_db: float
    overlap: bool
    sir_db: float | None
    codec: CodecSpec
    peak_dbfs: float

    def __post_init__(self):
        if self.noise_class not in NOISE_CLASSES:
            raise ConfigError(f"noise_class must be one of {NOISE_CLASSES}, got {self.noise_class!r}")
        _check_range("snr_db", self.snr_db, SNR_RANGE_DB)
        _check_range("peak_dbfs", self.peak_dbfs, PEAK_RANGE_DBFS)
        if self.overlap != (self.sir_db is not None):
            raise ConfigError("sir_db must be set exactly when overlap is enabled")
        if self.overlap:
            _check_range("sir_db", self.sir_db, SIR_RANGE_DB)

    def summary(self) -> dict:
        """Manifest-friendly description (the IR itself is summarized by its room and geometry)."""
        room = self.rir.room if self.rir is not None else None
        geometry = self.rir.geometry if self.rir is not None else None
        return {
            "reverb": self.rir is not None,
            "room": None if room is None else [room.length_m, room.width_m, room.height_m],
            "reflection_coeff": None if room is None else room.reflection_coeff,
            "source_xyz": None if geometry is None else list(geometry.source_xyz),
            "mic_xyz": None if geometry is None else list(geometry.mic_xyz),
            "noise_class": self.noise_class,
            "snr_db": self.snr_db,
            "overlap": self.overlap,
            "sir_db": self.sir_db,
            "codec_class": self.codec.codec_class,
            "bitrate_kbps": self.codec.bitrate_label,
            "peak_dbfs": self.peak_dbfs,
        }


def _check_range(name: str, value: float, bounds: tuple[float, float]) -> None:
    if not bounds[0] <= value <= bounds[1]:
        raise ConfigError(f"{name} must be in [{bounds[0]}, {bounds[1]}], got {value}")


def convolve_reverb(speech: AudioBuffer, ir: ImpulseResponse) -> AudioBuffer:
    """Linear convolution (frequency-domain overlap-add) truncated to the input length."""
    if len(speech) == 0:
        raise ConfigError("cannot reverberate an empty buffer")
    wet = signal.oaconvolve(speech.samples, ir.taps)[: len(speech)]
    return AudioBuffer(wet)


def vad_frames(clean_speech: AudioBuffer) -> np.ndarray:
    """
    Energy VAD on 10 ms frames: active iff frame RMS is within 40 dB of the loudest frame.

    The final partial frame is scored on the samples it has.
    """
    if len(clean_speech) == 0:
        raise ConfigError("vad_frames needs a non-empty buffer")
    x = clean_speech.samples
    n_frames = -(-len(x) // VAD_FRAME)
    padded = np.zeros(n_frames * VAD_FRAME)
    padded[: len(x)] = x
    counts = np.full(n_frames, VAD_FRAME)
    counts[-1] = len(x) - (n_frames - 1) * VAD_FRAME
    frame_rms = np.sqrt(np.sum(padded.reshape(n_frames, VAD_FRAME) ** 2, axis=1) / counts)
    peak = frame_rms.max()
    if peak == 0.0:
        return np.zeros(n_frames, dtype=bool)
    return frame_rms > peak * 10.0 ** (-VAD_THRESHOLD_DB / 20.0)


def active_sample_mask(active: np.ndarray, n_samples: int) -> np.ndarray:
    return np.repeat(np.asarray(active, dtype=bool), VAD_FRAME)[:n_samples]


def rms_active(buffer: AudioBuffer, active: np.ndarray | None = None) -> float:
    """RMS over speech-active frames only."""
    if active is None:
        active = vad_frames(buffer)
    mask = active_sample_mask(active, len(buffer))
    if not mask.any():
        raise SilentSpeechError("no speech-active frames")
    return float(np.sqrt(np.mean(buffer.samples[mask] ** 2)))


def fit_length(x: np.ndarray, n: int, rng: SeededRng | None = None) -> np.ndarray:
    """Cut or loop ``x`` to ``n`` samples starting at a random offset (offset 0 without ``rng``)."""
    if x.size == 0:
        raise SilentInputError("cannot fit an empty signal")
    offset = int(rng.integers(0, x.size)) if rng is not None else 0
    reps = -(-(offset + n) // x.size)
    return np.tile(x, reps)[offset : offset + n]


def scale_noise(
    speech: AudioBuffer,
    noise: AudioBuffer,
    snr_db: float,
    rng: SeededRng | None = None,
    active: np.ndarray | None = None,
) -> tuple[AudioBuffer, float]:
    """
    Noise stem scaled so the active-speech to noise power ratio equals ``snr_db``.

    Returns:
        (scaled noise of speech length, gain applied)
    """
    if active is None:
        active = vad_frames(speech)
    speech_level = rms_active(speech, active)
    if speech_level == 0.0:
        raise SilentSpeechError("speech is silent in its active frames")
    fitted = AudioBuffer(fit_length(noise.samples, len(speech), rng))
    noise_level = rms(fitted)
    if noise_level == 0.0:
        raise SilentNoiseError("noise segment is all zeros")
    gain = speech_level / (noise_level * 10.0 ** (snr_db / 20.0))
    return AudioBuffer(fitted.samples * gain), gain


def measure_snr_db(speech: AudioBuffer, noise: AudioBuffer, active: np.ndarray) -> float:
    """Active-speech power over whole-signal noise power, in dB."""
    return float(20.0 * np.log10(rms_active(speech, active) / rms(noise)))


class SnrMix(NamedTuple):
    mixture: AudioBuffer
    achieved_snr_db: float


def mix_at_snr(
    speech: AudioBuffer,
    noise: AudioBuffer,
    snr_db: float,
    rng: SeededRng | None = None,
    active: np.ndarray | None = None,
) -> SnrMix:
    """
    Add noise at a target SNR measured on speech-active frames.

    Noise shorter than the speech is looped from a random offset.

    Raises:
        SilentSpeechError: No active speech
        SilentNoiseError: Noise is all zeros
    """
    if active is None:
        active = vad_frames(speech)
    scaled, _ = scale_noise(speech, noise, snr_db, rng, active)
    mixture = AudioBuffer(speech.samples + scaled.samples)
    return SnrMix(mixture, measure_snr_db(speech, scaled, active))


def mix_overlap(
    target: AudioBuffer, interferer: AudioBuffer, sir_db: float, rng: SeededRng | None = None
) -> AudioBuffer:
    """
    Add an interfering talker at ``sir_db`` (target over interferer active RMS).

    The interferer is cut or looped to the target length first.
    """
    _check_range("sir_db", sir_db, SIR_RANGE_DB)
    fitted = AudioBuffer(fit_length(interferer.samples, len(target), rng))
    try:
        target_level = rms_active(target)
        interferer_level = rms_active(fitted)
    except SilentSpeechError as e:
        raise SilentInputError(f"overlap mixing needs two active signals: {e}") from e
    gain = target_level / (interferer_level * 10.0 ** (sir_db / 20.0))
    return AudioBuffer(target.samples + gain * fitted.samples)


class Codec(Protocol):
    """Anything mapping a buffer to a coded buffer while declaring its label pair."""

    codec_class: str
    bitrate_kbps: float

    def __call__(self, buffer: AudioBuffer) -> AudioBuffer: ...


class IdentityCodec:
    codec_class = "uncompressed"
    bitrate_kbps = UNCOMPRESSED_BITRATE_KBPS

    def __call__(self, buffer: AudioBuffer) -> AudioBuffer:
        return buffer


class SurrogateCodec:
    """
    Deterministic stand-in for a perceptual codec: STFT magnitudes requantized per frame.

    Bit depth maps linearly from 2 bits at 8 kbps to 10 bits at 64 kbps. ``high_band_penalty``
    removes extra bits above ``high_band_hz`` (the speech preset spends fewer bits up there).
    """

    nperseg = 512

    def __init__(self, codec_class: str, bitrate_kbps: float, high_band_penalty: int = 0, high_band_hz=4000.0):
        low, high = BITRATE_RANGE_KBPS
        if not low <= bitrate_kbps <= high:
            raise InvalidBitrateError(f"bitrate_kbps must be in [{low}, {high}], got {bitrate_kbps}")
        self.codec_class = codec_class
        self.bitrate_kbps = float(bitrate_kbps)
        self.high_band_penalty = high_band_penalty
        self.high_band_hz = high_band_hz

    @property
    def bits(self) -> int:
        return int(round(2.0 + (self.bitrate_kbps - 8.0) * 8.0 / 56.0))

    def __call__(self, buffer: AudioBuffer) -> AudioBuffer:
        x = buffer.samples
        if x.size == 0:
            return buffer
        freqs, _, spec = signal.stft(x, fs=SAMPLE_RATE, nperseg=self.nperseg)
        magnitude, phase = np.abs(spec), np.angle(spec)

        bits = np.full(freqs.shape, self.bits)
        bits[freqs > self.high_band_hz] = max(1, self.bits - self.high_band_penalty)
        levels = (2.0 ** bits - 1.0)[:, None]

        frame_max = magnitude.max(axis=0, keepdims=True)
        scale = np.where(frame_max > 0, frame_max, 1.0)
        quantized = np.round(magnitude / scale * levels) / levels * scale

        _, y = signal.istft(quantized * np.exp(1j * phase), fs=SAMPLE_RATE, nperseg=self.nperseg)
        out = np.zeros(x.size)
        out[: min(x.size, y.size)] = y[: x.size]
        return AudioBuffer(out)


CODEC_FACTORIES: dict[str, Callable[[float], Codec]] = {
    "uncompressed": lambda bitrate_kbps: IdentityCodec(),
    "surrogate_speech": lambda bitrate_kbps: SurrogateCodec("surrogate_speech", bitrate_kbps, high_band_penalty=1),
    "surrogate_music": lambda bitrate_kbps: SurrogateCodec("surrogate_music", bitrate_kbps),
}


def register_codec(codec_class: str, factory: Callable[[float], Codec]) -> None:
    """Plug in a real codec under its class name; labels stay whatever the codec declares."""
    CODEC_FACTORIES[codec_class] = factory


def apply_codec(buffer: AudioBuffer, spec: CodecSpec) -> AudioBuffer:
    """Run ``buffer`` through the codec registered for ``spec.codec_class``."""
    return CODEC_FACTORIES[spec.codec_class](spec.bitrate_kbps)(buffer)


def _unit_rms(x: np.ndarray) -> np.ndarray:
    level = np.sqrt(np.mean(x**2))
    return x / level if level > 0 else x


def white_noise(n: int, rng: SeededRng) -> np.ndarray:
    return rng.normal(size=n)


def pink_noise(n: int, rng: SeededRng) -> np.ndarray:
    """White noise shaped by 1/f in power."""
    spectrum = np.fft.rfft(rng.normal(size=n))
    f = np.arange(spectrum.size, dtype=np.float64)
    f[0] = 1.0
    return _unit_rms(np.fft.irfft(spectrum / np.sqrt(f), n=n))


def hum_noise(n: int, rng: SeededRng) -> np.ndarray:
    """Pink noise plus 50 Hz mains hum and two harmonics."""
    t = np.arange(n) / SAMPLE_RATE
    hum = sum(np.sin(2 * np.pi * 50.0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3))
    return _unit_rms(pink_noise(n, rng) + 0.8 * _unit_rms(hum))


def music_noise(n: int, rng: SeededRng) -> np.ndarray:
    """Decaying harmonic tones with random note changes in three voices."""
    out = np.zeros(n)
    for _ in range(3):
        pos = 0
        while pos < n:
            length = int(rng.uniform(0.15, 0.5) * SAMPLE_RATE)
            t = np.arange(min(length, n - pos)) / SAMPLE_RATE
            f0 = 440.0 * 2.0 ** ((int(rng.integers(48, 85)) - 69) / 12.0)
            decay = np.exp(-t * rng.uniform(3.0, 8.0))
            note = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 5) if f0 * h < 0.45 * SAMPLE_RATE)
            out[pos : pos + t.size] += note * decay
            pos += length
    return _unit_rms(out)


def babble_noise(n: int, rng: SeededRng, speech_pool: list[AudioBuffer] | None = None) -> np.ndarray:
    """Six talkers, each looped from its own random offset."""
    talkers = []
    for i in range(BABBLE_TALKERS):
        talker_rng = rng.child(f"talker{i}")
        if speech_pool:
            source = speech_pool[int(talker_rng.integers(len(speech_pool)))].samples
        else:
            voice = SpeakerVoice.sample(talker_rng)
            source = synthesize_utterance(talker_rng, voice, max(n / SAMPLE_RATE, 1.0)).samples
        talkers.append(_unit_rms(fit_length(source, n, talker_rng)))
    return _unit_rms(np.sum(talkers, axis=0))


class NoiseBank:
    """
    Noise source per class: built-in generators, overridden per class by WAVs under
    ``<noise_dir>/<class>/``.
    """

    def __init__(self, noise_dir: str | Path | None = None, speech_pool: list[AudioBuffer] | None = None):
        self.speech_pool = speech_pool or []
        self.files: dict[str, list[Path]] = {}
        self._cache: dict[Path, AudioBuffer] = {}
        self._cache_lock = threading.Lock()
        if noise_dir is not None:
            noise_dir = Path(noise_dir)
            if not noise_dir.is_dir():
                raise ConfigError(f"noise directory does not exist: {noise_dir}")
            for noise_class in NOISE_CLASSES:
                files = sorted((noise_dir / noise_class).glob("*.wav"))
                if files:
                    self.files[noise_class] = files
            log_with_context(
                logger,
                "info",
                "Noise directory loaded",
                {"noise_dir": str(noise_dir), "files_per_class": {k: len(v) for k, v in self.files.items()}},
            )

    def _load(self, path: Path) -> AudioBuffer:
        # Synthesis workers share one bank; each file is read once.
        with self._cache_lock:
            if path not in self._cache:
                self._cache[path] = read_wav(path)
            return self._cache[path]

    def draw(self, noise_class: str, n_samples: int, rng: SeededRng) -> AudioBuffer:
        """Noise segment of ``n_samples`` for ``noise_class`` (unit RMS for built-in generators)."""
        if noise_class not in NOISE_CLASSES:
            raise ConfigError(f"noise_class must be one of {NOISE_CLASSES}, got {noise_class!r}")
        if noise_class in self.files:
            files = self.files[noise_class]
            source = self._load(files[int(rng.integers(len(files)))])
            return AudioBuffer(fit_length(source.samples, n_samples, rng))
        if noise_class == "white":
            return AudioBuffer(white_noise(n_samples, rng))
        if noise_class == "ambient":
            return AudioBuffer(pink_noise(n_samples, rng))
        if noise_class == "other":
            return AudioBuffer(hum_noise(n_samples, rng))
        if noise_class == "music":
            return AudioBuffer(music_noise(n_samples, rng))
        return AudioBuffer(babble_noise(n_samples, rng, self.speech_pool))


@dataclass(frozen=True)
class DegradedUtterance:
    degraded: AudioBuffer
    clean: AudioBuffer
    speech: AudioBuffer  # everything before noise: reverberant target plus interferer
    noise: AudioBuffer  # scaled noise stem
    precodec: AudioBuffer
    active: np.ndarray  # VAD of the clean target
    achieved_snr_db: float


def degrade(
    clean: AudioBuffer,
    recipe: DegradationRecipe,
    rng: SeededRng,
    noise_bank: NoiseBank,
    interferer: AudioBuffer | None = None,
    interferer_rir: ImpulseResponse | None = None,
) -> DegradedUtterance:
    """
    Run the full chain in fixed order: reverb, overlap, noise, codec, level.

    Every random draw comes from a named child of ``rng``, so identical inputs give
    bit-identical output.
    """
    active = vad_frames(clean)
    speech = convolve_reverb(clean, recipe.rir) if recipe.rir is not None else clean

    if recipe.overlap:
        if interferer is None:
            raise ConfigError("overlap recipe needs an interferer")
        if interferer_rir is not None:
            interferer = convolve_reverb(interferer, interferer_rir)
        speech = mix_overlap(speech, interferer, recipe.sir_db, rng.child("overlap"))

    noise = noise_bank.draw(recipe.noise_class, len(speech), rng.child("noise"))
    scaled, _ = scale_noise(speech, noise, recipe.snr_db, rng.child("noise-offset"), active)
    precodec = AudioBuffer(speech.samples + scaled.samples)

    coded = apply_codec(precodec, recipe.codec)
    degraded = apply_peak_level(coded, recipe.peak_dbfs)
    return DegradedUtterance(
        degraded=degraded,
        clean=clean,
        speech=speech,
        noise=scaled,
        precodec=precodec,
        active=active,
        achieved_snr_db=measure_snr_db(speech, scaled, active),
    )
