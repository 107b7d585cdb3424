"""Tests for reverberation ground-truth labels."""

import math

import numpy as np
import pytest

from xanelab.acoustics import (
    LABEL_CEIL_DB,
    LABEL_FLOOR_DB,
    ReverbLabels,
    clarity,
    drr,
    estimate_decay,
    eyring_t60,
    reverb_labels,
    t60_schroeder,
)
from xanelab.audio import SAMPLE_RATE, SeededRng
from xanelab.errors import InsufficientDecayError
from xanelab.rir import Geometry, ImpulseResponse, RoomSpec, simulate_rir


def two_impulses(second_ms: float, amplitude: float, length_ms: float = 200.0) -> ImpulseResponse:
    taps = np.zeros(int(length_ms * SAMPLE_RATE / 1000))
    taps[0] = 1.0
    taps[int(round(second_ms * SAMPLE_RATE / 1000))] = amplitude
    return ImpulseResponse(taps, 0)


def exponential_decay(t60_s: float, seed: int = 0) -> ImpulseResponse:
    """White noise under an envelope that falls 60 dB in ``t60_s``."""
    n = int(3 * t60_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    noise = np.random.default_rng(seed).standard_normal(n)
    return ImpulseResponse(noise * np.exp(-6.9078 * t / t60_s), 0)


class TestClarity:
    def test_equal_energies(self):
        assert clarity(two_impulses(60.0, 1.0), 50.0) == pytest.approx(0.0, abs=1e-12)

    def test_half_amplitude_late_tap(self):
        assert clarity(two_impulses(60.0, 0.5), 50.0) == pytest.approx(10 * math.log10(4), abs=1e-9)

    def test_single_delta_clamps_high(self):
        taps = np.zeros(100)
        taps[3] = 1.0
        assert clarity(ImpulseResponse(taps, 3), 50.0) == LABEL_CEIL_DB

    def test_no_early_energy_clamps_low(self):
        taps = np.zeros(2000)
        taps[1500] = 1.0
        assert clarity(ImpulseResponse(taps, 0), 5.0) == LABEL_FLOOR_DB

    def test_c50_at_least_c5(self):
        room = RoomSpec(6.0, 5.0, 3.0, 0.85)
        for i in range(5):
            geom = Geometry((1.0 + 0.5 * i, 2.0, 1.5), (4.5, 3.0, 1.2))
            ir = simulate_rir(room, geom, max_order=12)
            assert clarity(ir, 50.0) >= clarity(ir, 5.0)


class TestDrr:
    def test_half_amplitude_reverb(self):
        assert drr(two_impulses(30.0, 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-9)

    def test_tap_inside_direct_window_clamps(self):
        assert drr(two_impulses(1.0, 1.0)) == LABEL_CEIL_DB

    def test_drr_falls_with_distance(self):
        room = RoomSpec(6.0, 5.0, 3.0, 0.85)
        values = []
        for d in (1.0, 1.75, 2.5, 3.25, 4.0):
            geom = Geometry((1.0, 2.5, 1.5), (1.0 + d, 2.5, 1.5))
            values.append(drr(simulate_rir(room, geom, max_order=12)))
        assert all(a > b for a, b in zip(values, values[1:]))


class TestSchroeder:
    @pytest.mark.parametrize("t60_ms", [200.0, 400.0, 1000.0])
    def test_exponential_decay_oracle(self, t60_ms):
        estimate = t60_schroeder(exponential_decay(t60_ms / 1000.0))
        assert estimate == pytest.approx(t60_ms, rel=0.05)

    def test_direct_only_has_insufficient_decay(self):
        taps = np.zeros(40)
        taps[0] = 1.0
        with pytest.raises(InsufficientDecayError):
            t60_schroeder(ImpulseResponse(taps, 0))

    def test_silent_ir_has_insufficient_decay(self):
        with pytest.raises(InsufficientDecayError):
            t60_schroeder(ImpulseResponse(np.zeros(100), 0))

    def test_shallow_decay_falls_back(self):
        # a final tap holding 0.1% of the energy keeps the EDC above -30 dB
        n = SAMPLE_RATE // 2
        t = np.arange(n) / SAMPLE_RATE
        taps = np.random.default_rng(1).standard_normal(n) * np.exp(-6.9078 * t / 0.3)
        energy = float(np.sum(taps**2))
        taps = np.r_[taps, math.sqrt(1e-3 * energy / (1 - 1e-3))]
        fit = estimate_decay(ImpulseResponse(taps, 0))
        assert fit.fallback is True
        assert fit.fit_range_db == (-5.0, -25.0)
        assert fit.t60_ms > 300.0

    def test_agrees_with_eyring_on_simulated_rooms(self):
        for i in range(10):
            rng = SeededRng(2024, i)
            side = float(rng.uniform(4.0, 6.0))
            room = RoomSpec(side, side * float(rng.uniform(0.9, 1.1)), side * 0.7, float(rng.uniform(0.7, 0.9)))
            geom = Geometry((1.1, 1.3, 1.2), (side - 1.4, side * 0.8 - 1.0, 1.6))
            ir = simulate_rir(room, geom, duration_s=2.0)
            assert t60_schroeder(ir) == pytest.approx(eyring_t60(room), rel=0.25)


class TestEyring:
    def test_closed_form(self):
        expected = 0.161 * 90 / (126 * -math.log(0.81)) * 1000
        assert eyring_t60(RoomSpec(6.0, 5.0, 3.0, 0.9)) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(546, abs=1)

    def test_anechoic_is_zero(self):
        assert eyring_t60(RoomSpec(6.0, 5.0, 3.0, 0.0)) == 0.0

    def test_doubling_room_doubles_t60(self):
        small = eyring_t60(RoomSpec(4.0, 3.0, 2.5, 0.7))
        large = eyring_t60(RoomSpec(8.0, 6.0, 5.0, 0.7))
        assert large == pytest.approx(2 * small, rel=1e-12)


class TestReverbLabels:
    def test_labels_from_simulated_room(self):
        room = RoomSpec(6.0, 5.0, 3.0, 0.8)
        ir = simulate_rir(room, Geometry((1.0, 1.0, 1.5), (4.0, 3.5, 1.2)), duration_s=1.5)
        labels = reverb_labels(ir)
        assert labels.room_volume_m3 == pytest.approx(90.0)
        assert labels.reflection_coeff == 0.8
        assert labels.c50_db >= labels.c5_db
        for value in (labels.c50_db, labels.c5_db, labels.drr_db):
            assert LABEL_FLOOR_DB <= value <= LABEL_CEIL_DB
        assert labels.t60_ms > 0

    def test_short_simulated_ir_uses_eyring(self):
        room = RoomSpec(6.0, 5.0, 3.0, 0.0)
        ir = simulate_rir(room, Geometry((1.0, 1.0, 1.5), (4.0, 3.5, 1.2)), duration_s=0.1)
        assert reverb_labels(ir).t60_ms == 0.0

    def test_measured_ir_without_room_propagates(self):
        taps = np.zeros(40)
        taps[0] = 1.0
        with pytest.raises(InsufficientDecayError):
            reverb_labels(ImpulseResponse(taps, 0))

    def test_anechoic_labels(self):
        labels = ReverbLabels.anechoic()
        assert labels.c50_db == labels.drr_db == LABEL_CEIL_DB
        assert labels.t60_ms == 0.0
