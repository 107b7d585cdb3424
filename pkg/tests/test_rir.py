"""Tests for image-source impulse responses and room sampling."""

import itertools
import math
import time

import numpy as np
import pytest

from xanelab.audio import SAMPLE_RATE, SeededRng
from xanelab.errors import ConfigError, DurationTooShortError, GeometryOutsideRoomError, SamplingFailureError
from xanelab.rir import (
    Geometry,
    ImpulseResponse,
    RoomSamplingConfig,
    RoomSpec,
    default_max_order,
    read_rir,
    sample_geometry,
    sample_room,
    simulate_rir,
    write_rir,
)


def brute_force_taps(room: RoomSpec, geom: Geometry, max_order: int, n_taps: int) -> np.ndarray:
    """Enumerate mirror images one at a time: x = 2nL + s (2|n| hits) or 2nL - s (|2n - 1| hits)."""
    per_axis = []
    for s, m, size in zip(geom.source_xyz, geom.mic_xyz, room.dimensions):
        images = []
        for n in range(-max_order - 1, max_order + 2):
            for position, hits in ((2 * n * size + s, abs(2 * n)), (2 * n * size - s, abs(2 * n - 1))):
                if hits <= max_order:
                    images.append((position - m, hits))
        per_axis.append(images)

    taps = np.zeros(n_taps)
    c = room.speed_of_sound
    for (dx, kx), (dy, ky), (dz, kz) in itertools.product(*per_axis):
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        index = math.floor(d / c * SAMPLE_RATE + 0.5)
        if index < n_taps:
            taps[index] += room.reflection_coeff ** (kx + ky + kz) / (4 * math.pi * d)
    return taps


@pytest.fixture
def room():
    return RoomSpec(5.0, 4.0, 3.0, 0.8)


@pytest.fixture
def geometry():
    return Geometry((1.0, 1.5, 1.2), (3.5, 2.5, 1.6))


class TestSimulateRir:
    def test_anechoic_room_has_only_the_direct_tap(self):
        room = RoomSpec(8.0, 6.0, 4.0, 0.0)
        geom = Geometry((1.0, 1.0, 1.0), (4.43, 1.0, 1.0))
        ir = simulate_rir(room, geom, max_order=3)
        nonzero = np.flatnonzero(ir.taps)
        assert nonzero.tolist() == [160]
        assert ir.direct_index == 160
        assert ir.taps[160] == pytest.approx(1.0 / (4 * math.pi * 3.43), rel=1e-12)

    def test_order_zero_ignores_reflection_coefficient(self, geometry):
        a = simulate_rir(RoomSpec(5.0, 4.0, 3.0, 0.9), geometry, max_order=0)
        b = simulate_rir(RoomSpec(5.0, 4.0, 3.0, 0.0), geometry, max_order=0)
        np.testing.assert_array_equal(a.taps, b.taps)

    def test_matches_brute_force_in_reference_room(self, room, geometry):
        ir = simulate_rir(room, geometry, max_order=2)
        expected = brute_force_taps(room, geometry, 2, len(ir))
        np.testing.assert_array_equal(np.flatnonzero(ir.taps), np.flatnonzero(expected))
        np.testing.assert_allclose(ir.taps, expected, rtol=0, atol=1e-12)

    def test_matches_brute_force_on_random_rooms(self):
        start = time.monotonic()
        config = RoomSamplingConfig()
        for i in range(20):
            rng = SeededRng(99, i)
            room, geom = sample_room(rng, config)
            max_order = i % 4
            ir = simulate_rir(room, geom, max_order=max_order, duration_s=0.5)
            expected = brute_force_taps(room, geom, max_order, len(ir))
            np.testing.assert_array_equal(np.flatnonzero(ir.taps), np.flatnonzero(expected))
            np.testing.assert_allclose(ir.taps, expected, rtol=0, atol=1e-12)
        assert time.monotonic() - start < 10.0

    def test_direct_tap_amplitude(self, room, geometry):
        ir = simulate_rir(room, geometry, max_order=0)
        assert ir.taps[ir.direct_index] == pytest.approx(1.0 / (4 * math.pi * geometry.distance_m), rel=1e-12)

    def test_energy_non_decreasing_in_reflection_coeff(self, geometry):
        energies = [
            float(np.sum(simulate_rir(RoomSpec(5.0, 4.0, 3.0, beta), geometry, max_order=4).taps ** 2))
            for beta in (0.0, 0.2, 0.5, 0.8, 0.95)
        ]
        assert energies == sorted(energies)

    def test_longer_duration_keeps_common_prefix(self, room, geometry):
        short = simulate_rir(room, geometry, max_order=6, duration_s=0.25)
        long = simulate_rir(room, geometry, max_order=6, duration_s=0.5)
        np.testing.assert_array_equal(long.taps[: len(short)], short.taps)

    def test_source_outside_room(self, room):
        with pytest.raises(GeometryOutsideRoomError):
            simulate_rir(room, Geometry((6.0, 1.0, 1.0), (1.0, 1.0, 1.0)))

    def test_mic_on_wall_is_outside(self, room):
        with pytest.raises(GeometryOutsideRoomError):
            simulate_rir(room, Geometry((1.0, 1.0, 1.0), (0.0, 1.0, 1.0)))

    def test_duration_must_cover_direct_delay(self, room, geometry):
        with pytest.raises(DurationTooShortError):
            simulate_rir(room, geometry, duration_s=0.05)

    def test_negative_order_rejected(self, room, geometry):
        with pytest.raises(ConfigError):
            simulate_rir(room, geometry, max_order=-1)


class TestDefaultMaxOrder:
    def test_values(self):
        assert default_max_order(0.0) == 0
        assert default_max_order(0.5) == math.ceil(4 / math.log10(2))
        assert default_max_order(0.99) == 40

    def test_tail_below_threshold(self):
        for beta in (0.2, 0.5, 0.7, 0.8):
            assert beta ** default_max_order(beta) < 1e-4


class TestSampling:
    def test_deterministic_for_seed_and_stream(self):
        assert sample_room(SeededRng(42, 0)) == sample_room(SeededRng(42, 0))
        assert sample_room(SeededRng(42, 0)) != sample_room(SeededRng(42, 1))

    def test_ranges_and_constraints(self):
        rng = SeededRng(42, 0)
        for _ in range(10_000):
            room, geom = sample_room(rng)
            assert 22.5 <= room.volume_m3() <= 360.0
            assert 0.2 <= room.reflection_coeff <= 0.95
            assert geom.distance_m >= 0.3
            for point in (geom.source_xyz, geom.mic_xyz):
                for coord, size in zip(point, room.dimensions):
                    assert 0.5 <= coord <= size - 0.5

    def test_fixed_mic_is_kept(self, room):
        geom = sample_geometry(SeededRng(1, 2), room, RoomSamplingConfig(), mic_xyz=(2.0, 2.0, 1.5))
        assert geom.mic_xyz == (2.0, 2.0, 1.5)

    def test_impossible_separation_fails(self):
        config = RoomSamplingConfig(min_distance_m=50.0, max_attempts=10)
        with pytest.raises(SamplingFailureError):
            sample_room(SeededRng(0, 0), config)

    def test_degenerate_range_rejected(self):
        with pytest.raises(ConfigError):
            RoomSamplingConfig(length_range_m=(5.0, 5.0))


class TestRirFiles:
    def test_round_trip_with_sidecar(self, tmp_path, room, geometry):
        ir = simulate_rir(room, geometry, max_order=3, duration_s=0.3)
        sidecar = write_rir(ir, tmp_path / "room.wav")
        assert sidecar.name == "room.json"
        back = read_rir(tmp_path / "room.wav")
        assert back.room == room
        assert back.geometry == geometry
        assert back.direct_index == ir.direct_index
        np.testing.assert_array_equal(back.taps, ir.taps.astype(np.float32).astype(np.float64))

    def test_measured_ir_without_sidecar(self, tmp_path):
        taps = np.zeros(2000)
        taps[37] = -0.9
        taps[400] = 0.3
        write_rir(ImpulseResponse.from_taps(taps), tmp_path / "measured.wav")
        (tmp_path / "measured.json").unlink()
        back = read_rir(tmp_path / "measured.wav")
        assert back.direct_index == 37
        assert back.room is None
