"""Tests for the log-mel frontend, chunking and the feature cache."""

import math

import numpy as np
import pytest

from xanelab.audio import SAMPLE_RATE, AudioBuffer
from xanelab.errors import ShapeMismatchError, TooShortError, VersionMismatchError
from xanelab.features import (
    CHUNK_FRAMES,
    LOG_FLOOR,
    N_MELS,
    FeatureChunk,
    chunk,
    frame_count,
    mel_center_frequencies,
    mel_filterbank,
    melfb,
    read_feature_cache,
    write_feature_cache,
)


def white(n: int, seed: int = 0) -> AudioBuffer:
    return AudioBuffer(np.random.default_rng(seed).uniform(-0.5, 0.5, n))


class TestMelfb:
    def test_one_second_gives_100_frames(self):
        assert melfb(white(SAMPLE_RATE)).shape == (100, N_MELS)

    def test_frame_count_formula(self):
        rng = np.random.default_rng(3)
        for n in rng.integers(400, 40_000, size=100):
            assert frame_count(int(n)) == math.ceil(n / 160)
        for n in (400, 401, 1600, 16_159, 16_161):
            assert melfb(white(n)).shape[0] == math.ceil(n / 160)

    def test_silence_hits_the_floor(self):
        np.testing.assert_array_equal(melfb(AudioBuffer.silence(4000)), np.log(LOG_FLOOR))

    def test_tone_peaks_in_matching_band(self):
        centers = mel_center_frequencies()
        band = int(np.argmin(np.abs(centers - 1000.0)))
        t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
        features = melfb(AudioBuffer(0.5 * np.sin(2 * np.pi * centers[band] * t)))
        assert np.all(np.argmax(features, axis=1) == band)

    def test_doubling_shifts_by_log_four(self):
        x = white(8000, seed=5)
        base = melfb(x)
        above_floor = base > math.log(LOG_FLOOR) + 20
        assert above_floor.mean() > 0.99
        shift = melfb(AudioBuffer(2 * x.samples)) - base
        np.testing.assert_allclose(shift[above_floor], 2 * math.log(2), atol=1e-6)

    def test_deterministic(self):
        x = white(5000, seed=9)
        np.testing.assert_array_equal(melfb(x), melfb(x))

    def test_too_short(self):
        with pytest.raises(TooShortError):
            melfb(white(399))

    def test_filterbank_shape_and_span(self):
        fb = mel_filterbank()
        assert fb.shape == (N_MELS, 257)
        assert fb.max() == pytest.approx(1.0, abs=0.05)
        assert np.all(np.diff(mel_center_frequencies()) > 0)
        assert mel_center_frequencies()[-1] < SAMPLE_RATE / 2


class TestChunk:
    @pytest.mark.parametrize("n_frames,expected", [(100, 1), (199, 1), (300, 3)])
    def test_counts(self, n_frames, expected):
        assert len(chunk(np.zeros((n_frames, N_MELS)))) == expected

    def test_chunk_starts(self):
        features = np.arange(300, dtype=np.float64)[:, None] * np.ones((1, N_MELS))
        chunks = chunk(features, "utt")
        for k, c in enumerate(chunks):
            assert c.chunk_index == k
            assert c.utterance_id == "utt"
            assert c.matrix[0, 0] == 100 * k
            assert c.matrix.shape == (CHUNK_FRAMES, N_MELS)

    def test_too_few_frames(self):
        with pytest.raises(TooShortError):
            chunk(np.zeros((99, N_MELS)))

    def test_non_finite_rejected(self):
        bad = np.zeros((CHUNK_FRAMES, N_MELS))
        bad[3, 4] = np.inf
        with pytest.raises(ShapeMismatchError):
            FeatureChunk(bad)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        chunks = chunk(melfb(white(3 * SAMPLE_RATE)), "g1_000000")
        write_feature_cache(tmp_path / "cache" / "g1_000000", chunks)
        back = read_feature_cache(tmp_path / "cache" / "g1_000000")
        assert [(c.utterance_id, c.chunk_index) for c in back] == [("g1_000000", k) for k in range(3)]
        for a, b in zip(chunks, back):
            np.testing.assert_array_equal(a.matrix, b.matrix)
        assert (tmp_path / "cache" / "g1_000000.f32").stat().st_size == 3 * CHUNK_FRAMES * N_MELS * 4

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "c"
        write_feature_cache(path, chunk(np.zeros((100, N_MELS))))
        header = path.with_suffix(".json")
        header.write_text(header.read_text().replace('"version": 1', '"version": 99'))
        with pytest.raises(VersionMismatchError):
            read_feature_cache(path)
