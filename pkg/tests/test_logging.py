"""Tests for JSON log output and progress logging of the long-running jobs."""

import asyncio
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from xanelab.logging import JsonFormatter, get_memory_usage_mb, log_with_context, setup_logging
from xanelab.synth import CorpusSynthesizer, SynthConfig


@pytest.fixture
def captured(request):
    """A fresh logger writing to an in-memory stream."""
    stream = io.StringIO()
    logger = setup_logging(f"xanelab.test.{request.node.name}", "DEBUG", stream=stream)
    logger.propagate = False
    yield logger, stream
    for handler in list(logger.handlers):
        logger.removeHandler(handler)


def lines(stream: io.StringIO) -> list[dict]:
    return [json.loads(line) for line in stream.getvalue().splitlines() if line.strip()]


def test_one_json_object_per_line(captured):
    logger, stream = captured
    log_with_context(logger, "info", "Chunk labelled", {"utterance_id": "g1_u00000", "chunks": 3})
    log_with_context(logger, "warning", "Clipped samples", {"clipped_samples": 12})

    records = lines(stream)
    assert [r["level"] for r in records] == ["INFO", "WARNING"]
    assert records[0]["message"] == "Chunk labelled"
    assert records[0]["extra_fields"] == {"utterance_id": "g1_u00000", "chunks": 3}
    assert records[0]["logger"] == logger.name
    assert records[0]["timestamp"].endswith("+00:00")
    assert "thread" not in records[0]


def test_level_filtering(captured):
    logger, stream = captured
    setup_logging(logger.name, "WARNING")
    log_with_context(logger, "info", "hidden")
    log_with_context(logger, "error", "shown")
    assert [r["message"] for r in lines(stream)] == ["shown"]


def test_setup_is_idempotent(captured):
    logger, _ = captured
    assert setup_logging(logger.name, "INFO") is logger
    assert len(logger.handlers) == 1


def test_numpy_and_path_context(captured, tmp_path):
    logger, stream = captured
    context = {
        "snr_db": np.float32(12.5),
        "chunks": np.int64(3),
        "shape": np.array([100, 80]),
        "path": tmp_path / "model.xckpt",
    }
    log_with_context(logger, "debug", "Checkpoint written", context)
    fields = lines(stream)[0]["extra_fields"]
    assert fields == {"snr_db": 12.5, "chunks": 3, "shape": [100, 80], "path": str(tmp_path / "model.xckpt")}


def test_worker_thread_is_named(captured):
    logger, stream = captured
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="xanelab-synth") as pool:
        pool.submit(log_with_context, logger, "info", "from worker").result()
    assert lines(stream)[0]["thread"].startswith("xanelab-synth")


def test_exception_fields():
    try:
        raise ValueError("bad label")
    except ValueError:
        record = logging.LogRecord("xanelab", logging.ERROR, __file__, 1, "failed", None, sys.exc_info())
    payload = json.loads(JsonFormatter().format(record))
    assert payload["error_type"] == "ValueError"
    assert "bad label" in payload["error"]


def test_caller_is_recorded(caplog):
    with caplog.at_level(logging.INFO, logger="xanelab.test.caller"):
        log_with_context(logging.getLogger("xanelab.test.caller"), "info", "here")
    assert caplog.records[0].funcName == "test_caller_is_recorded"


def test_memory_usage_is_positive():
    assert get_memory_usage_mb() > 0


async def test_progress_reporter_logs_until_cancelled(clean_dir, tmp_path, caplog):
    """The background reporter emits progress on its interval and stops when the job finishes."""
    config = SynthConfig(utterances_per_group=1, rir_max_order=2, jobs=2, progress_interval=0.01)
    synthesizer = CorpusSynthesizer(clean_dir, tmp_path / "corpus", config, seed=5)

    with caplog.at_level(logging.INFO, logger="xanelab.synth"):
        task = asyncio.create_task(synthesizer._background_progress_reporter())
        await asyncio.sleep(0.05)
        task.cancel()
        with pytest.raises(asyncio.CancelledError):
            await task

    progress = [r for r in caplog.records if r.getMessage() == "Synthesis progress"]
    assert progress
    assert {"utterances_written", "memory_mb"} <= set(progress[0].extra_fields)
    synthesizer.executor.shutdown(wait=True)
