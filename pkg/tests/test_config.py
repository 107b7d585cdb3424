"""Tests for TOML config files and run-config snapshots."""

import argparse
import json
from pathlib import Path

import pytest

from xanelab import __version__
from xanelab.config import RUN_CONFIG_NAME, RunConfig, load_config_file
from xanelab.errors import ConfigError

KNOWN = {
    "synth": {"seed", "jobs", "per_group"},
    "train": {"seed", "jobs", "epochs"},
    "make-speech": {"seed", "speakers"},
}


def write_toml(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "xanelab.toml"
    path.write_text(text)
    return path


class TestLoadConfigFile:
    def test_top_level_keys_apply_where_accepted(self, tmp_path):
        path = write_toml(tmp_path, "seed = 5\nper-group = 3\n")
        assert load_config_file(path, "synth", KNOWN) == {"seed": 5, "per_group": 3}
        assert load_config_file(path, "train", KNOWN) == {"seed": 5}

    def test_section_wins_over_top_level(self, tmp_path):
        path = write_toml(tmp_path, "seed = 5\n\n[train]\nseed = 9\nepochs = 2\n\n[synth]\njobs = 8\n")
        assert load_config_file(path, "train", KNOWN) == {"seed": 9, "epochs": 2}
        assert load_config_file(path, "synth", KNOWN) == {"seed": 5, "jobs": 8}

    def test_hyphenated_section_name(self, tmp_path):
        path = write_toml(tmp_path, '[make-speech]\nspeakers = 2\n')
        assert load_config_file(path, "make-speech", KNOWN) == {"speakers": 2}

    @pytest.mark.parametrize(
        "text",
        [
            "volume = 11\n",
            "[synth]\nepochs = 3\n",
            "[deploy]\nseed = 1\n",
        ],
    )
    def test_unknown_keys(self, tmp_path, text):
        with pytest.raises(ConfigError, match="unknown keys"):
            load_config_file(write_toml(tmp_path, text), "synth", KNOWN)

    def test_invalid_toml(self, tmp_path):
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_config_file(write_toml(tmp_path, "seed = = 1\n"), "synth", KNOWN)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "absent.toml", "synth", KNOWN)


class TestRunConfig:
    def test_snapshot_drops_internal_keys(self, tmp_path):
        namespace = argparse.Namespace(
            command="synth",
            func=print,
            config=tmp_path / "xanelab.toml",
            out=tmp_path / "corpus",
            noise_classes=["white", "babble"],
            seed=3,
        )
        run_config = RunConfig.from_namespace("synth", namespace)
        assert set(run_config.options) == {"out", "noise_classes", "seed"}
        assert run_config.options["out"] == str(tmp_path / "corpus")
        assert run_config.config_file == str(tmp_path / "xanelab.toml")

    def test_write_into_directory(self, tmp_path):
        written = RunConfig("train", {"epochs": 2}).write(tmp_path)
        assert written == tmp_path / RUN_CONFIG_NAME
        data = json.loads(written.read_text())
        assert data == {"command": "train", "version": __version__, "config_file": None, "options": {"epochs": 2}}

    def test_write_to_file_path(self, tmp_path):
        target = tmp_path / "nested" / "metrics.run_config.json"
        assert RunConfig("eval", {}).write(target) == target
        assert target.exists()
