"""Pytest configuration: local sources on sys.path and shared fixtures."""

import sys
from pathlib import Path

import pytest

# Tests run against the local tree, not an installed package
src_path = Path(__file__).parent.parent / "src"
if str(src_path) not in sys.path:
    sys.path.insert(0, str(src_path))

from xanelab.audio import SeededRng  # noqa: E402
from xanelab.speech import write_speech_corpus  # noqa: E402


@pytest.fixture
def rng():
    return SeededRng(1234, 0)


@pytest.fixture
def clean_dir(tmp_path):
    """Four synthetic speakers, three utterances each, 2-3 s long."""
    out = tmp_path / "clean"
    write_speech_corpus(out, n_speakers=4, utterances_per_speaker=3, seed=7, duration_range_s=(2.0, 3.0))
    return out


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """Two utterances per group from four synthetic speakers; shared by the training and embedding tests."""
    from xanelab.synth import SynthConfig, synthesize_corpus

    root = tmp_path_factory.mktemp("toy")
    write_speech_corpus(root / "clean", n_speakers=4, utterances_per_speaker=2, seed=3, duration_range_s=(2.0, 3.0))
    config = SynthConfig(utterances_per_group=2, rir_max_order=4, jobs=2)
    return synthesize_corpus(root / "clean", None, config, seed=21, out_dir=root / "corpus")
