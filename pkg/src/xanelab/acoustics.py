"""Reverberation ground truth (C50, C5, DRR, T60) computed from impulse responses."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE
from .errors import ConfigError, InsufficientDecayError
from .logging import log_with_context
from .rir import ImpulseResponse, RoomSpec

LABEL_FLOOR_DB = -40.0
LABEL_CEIL_DB = 60.0
DIRECT_WINDOW_MS = (0.5, 2.5)
SCHROEDER_FIT_DB = (-5.0, -35.0)
SCHROEDER_FALLBACK_DB = (-5.0, -25.0)
EYRING_CONSTANT = 0.161

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReverbLabels:
    c50_db: float
    c5_db: float
    drr_db: float
    t60_ms: float
    room_volume_m3: float
    reflection_coeff: float

    @classmethod
    def anechoic(cls) -> "ReverbLabels":
        """Labels for an utterance that was not reverberated."""
        return cls(LABEL_CEIL_DB, LABEL_CEIL_DB, LABEL_CEIL_DB, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DecayFit:
    t60_ms: float
    fit_range_db: tuple[float, float]
    fallback: bool


def _ratio_db(numerator: float, denominator: float) -> float:
    if numerator <= 0.0:
        return LABEL_FLOOR_DB
    if denominator <= 0.0:
        return LABEL_CEIL_DB
    return float(np.clip(10.0 * math.log10(numerator / denominator), LABEL_FLOOR_DB, LABEL_CEIL_DB))


def _ms_to_samples(ms: float) -> int:
    return int(round(ms * SAMPLE_RATE / 1000.0))


def clarity(ir: ImpulseResponse, boundary_ms: float) -> float:
    """
    Early-to-late energy ratio in dB, counted from the direct arrival.

    ``boundary_ms=50`` gives C50 and ``boundary_ms=5`` gives C5. Result is clamped to [-40, +60] dB;
    an IR without late energy returns +60.
    """
    if boundary_ms <= 0:
        raise ConfigError(f"boundary_ms must be > 0, got {boundary_ms}")
    energy = ir.taps**2
    split = ir.direct_index + _ms_to_samples(boundary_ms)
    early = float(np.sum(energy[ir.direct_index : split]))
    late = float(np.sum(energy[split:]))
    return _ratio_db(early, late)


def drr(ir: ImpulseResponse) -> float:
    """Direct-to-reverberant ratio with the direct window [-0.5 ms, +2.5 ms] around the direct arrival."""
    energy = ir.taps**2
    start = max(0, ir.direct_index - _ms_to_samples(DIRECT_WINDOW_MS[0]))
    stop = ir.direct_index + _ms_to_samples(DIRECT_WINDOW_MS[1]) + 1
    direct = float(np.sum(energy[start:stop]))
    reverberant = float(np.sum(energy)) - direct
    return _ratio_db(direct, max(reverberant, 0.0))


def energy_decay_curve(ir: ImpulseResponse) -> np.ndarray:
    """Schroeder backward integral in dB relative to total energy (``-inf`` after the last tap)."""
    energy = ir.taps**2
    total = float(np.sum(energy))
    if total <= 0.0:
        raise InsufficientDecayError("impulse response carries no energy")
    remaining = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(remaining / total)


def _fit_decay(edc: np.ndarray, high_db: float, low_db: float) -> float | None:
    inside = np.nonzero((edc <= high_db) & (edc >= low_db))[0]
    if inside.size < 2 or not np.any(edc < low_db + 1e-9):
        return None
    t = inside / SAMPLE_RATE
    slope, _ = np.polyfit(t, edc[inside], 1)
    if slope >= 0:
        return None
    return 60.0 / abs(slope) * 1000.0


def estimate_decay(ir: ImpulseResponse) -> DecayFit:
    """
    Schroeder T60 with a least-squares line over the [-5, -35] dB EDC segment.

    Falls back to the [-5, -25] dB segment (``fallback=True``) when the EDC never reaches -35 dB.

    Raises:
        InsufficientDecayError: Neither segment is available
    """
    edc = energy_decay_curve(ir)
    t60 = _fit_decay(edc, *SCHROEDER_FIT_DB)
    if t60 is not None:
        return DecayFit(t60, SCHROEDER_FIT_DB, False)
    t60 = _fit_decay(edc, *SCHROEDER_FALLBACK_DB)
    if t60 is not None:
        log_with_context(logger, "debug", "T60 fit fell back to the -25 dB segment", {"t60_ms": round(t60, 1)})
        return DecayFit(t60, SCHROEDER_FALLBACK_DB, True)
    raise InsufficientDecayError("energy decay curve does not span the -5 to -25 dB fit range")


def t60_schroeder(ir: ImpulseResponse) -> float:
    """Reverberation time in ms, see :func:`estimate_decay`."""
    return estimate_decay(ir).t60_ms


def eyring_t60(room: RoomSpec) -> float:
    """Eyring reverberation time in ms, ``0.161 V / (-S ln(beta^2))``; 0 ms for an anechoic room."""
    beta = room.reflection_coeff
    if beta == 0.0:
        return 0.0
    return EYRING_CONSTANT * room.volume_m3() / (-room.surface_m2() * math.log(beta**2)) * 1000.0


def reverb_labels(ir: ImpulseResponse) -> ReverbLabels:
    """
    All six reverberation targets for one IR.

    When the IR is too short for a Schroeder fit, T60 falls back to the Eyring value of its room.
    """
    try:
        t60 = t60_schroeder(ir)
    except InsufficientDecayError:
        if ir.room is None:
            raise
        t60 = eyring_t60(ir.room)
        log_with_context(
            logger, "warning", "Schroeder fit impossible, using Eyring T60", {"t60_ms": round(t60, 1)}
        )
    return ReverbLabels(
        c50_db=clarity(ir, 50.0),
        c5_db=clarity(ir, 5.0),
        drr_db=drr(ir),
        t60_ms=t60,
        room_volume_m3=ir.room.volume_m3() if ir.room else float("nan"),
        reflection_coeff=ir.room.reflection_coeff if ir.room else float("nan"),
    )
