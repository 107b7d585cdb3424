"""Basic tests for xanelab."""


def test_version():
    """Test that version is defined and matches the installed metadata and pyproject.toml."""
    import tomllib
    from importlib.metadata import PackageNotFoundError, version
    from pathlib import Path

    from xanelab import __version__

    pyproject_path = Path(__file__).parent.parent / "pyproject.toml"
    with open(pyproject_path, "rb") as f:
        expected_version = tomllib.load(f)["project"]["version"]

    assert __version__, "empty version"
    assert __version__ != "unknown"
    assert __version__.count(".") >= 1, f"Invalid version format: {__version__}"
    assert __version__ == expected_version
    try:
        installed = version("xanelab")
    except PackageNotFoundError:
        installed = expected_version
    assert __version__ == installed


def test_imports():
    """Test that all modules can be imported."""
    from xanelab import (
        acoustics,
        audio,
        cli,
        config,
        degrade,
        errors,
        evaluation,
        features,
        logging,
        model,
        rir,
        speech,
        synth,
        trainer,
    )

    for module in (acoustics, audio, cli, config, degrade, errors, evaluation, features, logging):
        assert module is not None
    for module in (model, rir, speech, synth, trainer):
        assert module is not None


def test_error_taxonomy():
    """Every library error derives from one of the three kinds the CLI maps to exit codes."""
    from xanelab import errors

    kinds = (errors.ConfigError, errors.DataError, errors.InvariantError)
    for name in dir(errors):
        obj = getattr(errors, name)
        if isinstance(obj, type) and issubclass(obj, errors.XaneError) and obj is not errors.XaneError:
            assert issubclass(obj, kinds), name
    assert issubclass(errors.ConfigError, ValueError)
    assert issubclass(errors.SilentSpeechError, errors.SilentInputError)
