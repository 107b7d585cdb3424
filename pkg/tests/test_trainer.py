"""Tests for the training loop, metrics and run logs."""

import csv

import numpy as np
import pytest
import torch

from xanelab import trainer
from xanelab.errors import ConfigError, DivergedLossError, EmptyManifestError, MissingHeadError
from xanelab.model import LossTargets, ModelConfig, XaneModel, load_checkpoint, loss, read_checkpoint_header
from xanelab.speech import write_speech_corpus
from xanelab.synth import (
    CLASS_TASKS,
    REGRESSION_TASKS,
    ChunkLabel,
    SynthConfig,
    read_manifest,
    synthesize_corpus,
    write_manifest,
)
from xanelab.trainer import (
    METRIC_COLUMNS,
    TrainConfig,
    compute_metrics,
    compute_target_norm,
    evaluate,
    load_chunk_dataset,
    make_optimizer,
    read_metrics_csv,
    train,
    train_step,
    write_metrics_csv,
)


def label(**overrides) -> ChunkLabel:
    values = dict(
        c50_db=10.0,
        t60_ms=400.0,
        drr_db=2.0,
        c5_db=1.0,
        room_volume_m3=60.0,
        reflection_coeff=0.6,
        pesq=None,
        estoi=None,
        bitrate_kbps=256.0,
        snr_db=12.0,
        vad_fraction=0.9,
        noise_class="white",
        codec_class="uncompressed",
        overlap=False,
    )
    values.update(overrides)
    return ChunkLabel(**values)


def quick_config(**overrides) -> TrainConfig:
    values = dict(epochs=2, batch_size=8, jobs=2, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert (config.batch_size, config.epochs, config.learning_rate) == (64, 100, 1e-3)
        assert (config.beta1, config.beta2, config.eps) == (0.9, 0.999, 1e-8)
        assert config.patience == 10
        assert config.validation_fraction == 0.1

    def test_run_names(self):
        assert TrainConfig().run_name == "XANE"
        assert TrainConfig(ablation=("nc",)).run_name == "XANE-NC"
        assert TrainConfig(ablation=("no", "nn")).run_name == "XANE-NN/NO"

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr_schedule="cosine")
        with pytest.raises(ConfigError):
            TrainConfig(ablation=("nx",))


class TestTargetNorm:
    def test_skips_missing_and_guards_zero_spread(self):
        labels = [label(snr_db=10.0, c50_db=5.0), label(snr_db=None, c50_db=5.0), label(snr_db=20.0, c50_db=5.0)]
        mean, std = compute_target_norm(labels)
        j_snr, j_c50, j_pesq = (REGRESSION_TASKS.index(n) for n in ("snr_db", "c50_db", "pesq"))
        assert mean[j_snr] == 15.0 and std[j_snr] == 5.0
        assert mean[j_c50] == 5.0 and std[j_c50] == 1.0
        assert mean[j_pesq] == 0.0 and std[j_pesq] == 1.0

    def test_normalize_round_trip(self):
        model = XaneModel(ModelConfig(embed_dim=32)).double()
        model.set_target_norm(np.linspace(-50, 300, 11), np.linspace(0.1, 80, 11))
        values = torch.randn(6, 11, dtype=torch.float64) * 100
        torch.testing.assert_close(model.denormalize(model.normalize(values)), values, rtol=0, atol=1e-9)


class TestTrainStep:
    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_loss(self, seed):
        config = ModelConfig(embed_dim=32, model_dim=16, ff_dim=16, encoder_layers=1, n_mels=8, chunk_frames=10)
        model = XaneModel(config, seed=seed).double()
        g = torch.Generator().manual_seed(seed)
        features = torch.randn(8, 10, 8, generator=g, dtype=torch.float64)
        targets = LossTargets(
            regression=torch.randn(8, 11, generator=g, dtype=torch.float64),
            regression_mask=torch.ones(8, 11, dtype=torch.bool),
            classes={name: torch.randint(len(values), (8,), generator=g) for name, values in CLASS_TASKS.items()},
            class_mask={name: torch.ones(8, dtype=torch.bool) for name in CLASS_TASKS},
        )
        optimizer = make_optimizer(model, TrainConfig(learning_rate=1e-5))
        before = train_step(model, optimizer, features, targets)["total"]
        with torch.no_grad():
            after = loss(model(features), targets).total.item()
        assert after < before


class TestMetrics:
    def test_perfect_predictions(self):
        labels = [label(noise_class="music", overlap=True), label(c50_db=-3.0, codec_class="surrogate_music")]
        predicted = np.array([[np.nan if v is None else v for v in lab.regression_values()] for lab in labels])
        classes = {task: np.array([lab.class_index(task) for lab in labels]) for task in CLASS_TASKS}
        metrics = compute_metrics(predicted, classes, labels)
        assert metrics["c50_db_mae"] == 0.0
        assert metrics["pesq_mae"] is None
        assert metrics["noise_f1"] == metrics["codec_f1"] == metrics["overlap_f1"] == 1.0
        assert list(metrics) == list(METRIC_COLUMNS)

    def test_constant_mean_predictor_gives_mad(self):
        t60 = np.array([200.0, 350.0, 900.0, 410.0])
        labels = [label(t60_ms=float(v)) for v in t60]
        predicted = np.zeros((4, len(REGRESSION_TASKS)))
        predicted[:, REGRESSION_TASKS.index("t60_ms")] = t60.mean()
        metrics = compute_metrics(predicted, {}, labels)
        assert metrics["t60_ms_mae"] == pytest.approx(np.mean(np.abs(t60 - t60.mean())))
        assert metrics["noise_f1"] is None

    def test_csv_round_trip(self, tmp_path):
        metrics = {column: float(i) for i, column in enumerate(METRIC_COLUMNS)}
        metrics["codec_f1"] = None
        write_metrics_csv(tmp_path / "metrics.csv", metrics)
        assert read_metrics_csv(tmp_path / "metrics.csv") == metrics
        with open(tmp_path / "metrics.csv", newline="") as f:
            assert next(csv.reader(f)) == list(METRIC_COLUMNS)


class TestTrain:
    def test_writes_log_config_and_checkpoint(self, toy_manifest, tmp_path):
        result = train(toy_manifest, ModelConfig(embed_dim=32), quick_config(), tmp_path / "run")
        assert result.checkpoint.exists()
        assert (tmp_path / "run" / trainer.TRAIN_CONFIG_NAME).exists()
        with open(result.train_log, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0][:2] == ["epoch", "train_total"]
        assert "val_total" in rows[0]
        assert len(rows) == 3
        assert read_checkpoint_header(result.checkpoint)["extra"]["run_name"] == "XANE"

    def test_same_seed_same_curve(self, toy_manifest, tmp_path):
        a = train(toy_manifest, ModelConfig(embed_dim=32), quick_config(), tmp_path / "a")
        b = train(toy_manifest, ModelConfig(embed_dim=32), quick_config(), tmp_path / "b")
        assert a.history == b.history
        assert a.train_log.read_bytes() == b.train_log.read_bytes()

    def test_ablation_drops_head_everywhere(self, toy_manifest, tmp_path):
        result = train(toy_manifest, ModelConfig(embed_dim=32), quick_config(ablation=("nc",)), tmp_path / "nc")
        with open(result.train_log, newline="") as f:
            header = next(csv.reader(f))
        assert "train_codec" not in header and "train_noise" in header
        _, config = load_checkpoint(result.checkpoint)
        assert config.heads == ("noise", "overlap")

        metrics = evaluate(result.checkpoint, toy_manifest, jobs=2)
        assert list(metrics) == list(METRIC_COLUMNS)
        assert metrics["codec_f1"] is None
        assert metrics["noise_f1"] is not None
        with pytest.raises(MissingHeadError):
            evaluate(result.checkpoint, toy_manifest, require_heads=("codec",))

    def test_training_on_every_speaker(self, toy_manifest, tmp_path):
        result = train(
            toy_manifest, ModelConfig(embed_dim=32), quick_config(validation_fraction=0.0), tmp_path / "all"
        )
        with open(result.train_log, newline="") as f:
            header = next(csv.reader(f))
        assert not any(column.startswith("val_") for column in header)
        assert result.stopped_early is False

    def test_feature_cache_is_reused(self, toy_manifest, tmp_path):
        cache = tmp_path / "features" / "train"
        train(toy_manifest, ModelConfig(embed_dim=32), quick_config(epochs=1), tmp_path / "one", feature_cache=cache)
        assert cache.with_suffix(".f32").exists()
        entries = read_manifest(toy_manifest)
        fresh = load_chunk_dataset(toy_manifest, entries, jobs=2)
        reused = load_chunk_dataset(toy_manifest, entries, jobs=2, feature_cache=cache)
        np.testing.assert_array_equal(fresh.features, reused.features)

    def test_empty_manifest(self, tmp_path):
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text("")
        with pytest.raises(EmptyManifestError):
            train(manifest, ModelConfig(embed_dim=32), quick_config(), tmp_path / "out")

    def test_diverged_loss(self, toy_manifest, tmp_path, monkeypatch):
        monkeypatch.setattr(trainer, "train_step", lambda *args, **kwargs: {"total": float("nan")})
        with pytest.raises(DivergedLossError):
            train(toy_manifest, ModelConfig(embed_dim=32), quick_config(), tmp_path / "nan")


@pytest.mark.integration
def test_overfits_toy_corpus(tmp_path):
    """32 one-chunk utterances at dim 128: loss falls below 10% of epoch 1 and codec/overlap heads fit."""
    write_speech_corpus(tmp_path / "clean", 4, 4, seed=1, duration_range_s=(1.0, 1.5))
    config = SynthConfig(utterances_per_group=6, rir_max_order=6, jobs=4)
    manifest = synthesize_corpus(tmp_path / "clean", None, config, seed=3, out_dir=tmp_path / "corpus")
    small = tmp_path / "corpus" / "small.jsonl"
    write_manifest(small, read_manifest(manifest)[:32])

    train_config = TrainConfig(epochs=200, batch_size=64, validation_fraction=0.0, seed=0)
    result = train(small, ModelConfig(embed_dim=128), train_config, tmp_path / "run")
    first = result.history[0]["train"]["total"]
    assert min(record["train"]["total"] for record in result.history) < 0.1 * first

    metrics = evaluate(result.checkpoint, small)
    assert metrics["codec_f1"] >= 0.95
    assert metrics["overlap_f1"] >= 0.95
