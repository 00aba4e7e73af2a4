import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from src.configuration import load_config
from src.dataset import SampleStore
from src.errors import ConfigError, DomainError, NumericDivergenceError
from src.model import FusionModel, ModelConfig
from src.nn_core import Linear
from src.radar_dsp import RadarConfig
from src.synthgen import ClassLibrary, gen_dataset
from src.training import (
    ABLATION_SETS, EarlyStopping, TrainConfig, ablate_modalities, add_acoustic_noise, compute_metrics, evaluate,
    held_out_split, modality_label, parse_modalities, partition, run_training, snr_sweep, train_loop,
)

from conftest import AUDIO_WINDOW


def one_hot(labels, width):
    return np.eye(width)[np.asarray(labels)]


def quick_config(**overrides):
    values = dict(epochs=2, batch_size=8, learning_rate=1e-3, weight_decay=0.0, dropout=0.1,
                  early_stopping_patience=5, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


# -- metrics -----------------------------------------------------------------

def test_perfect_predictions():
    y_cls = np.array([0, 1, 2, 3, 4, 0])
    y_det = (y_cls != 0).astype(int)
    metrics = compute_metrics(y_det, y_cls, one_hot(y_det, 2), one_hot(y_cls, 5))
    assert metrics.detection_accuracy == 1.0
    assert metrics.detection_f1 == 1.0
    assert metrics.classification_accuracy == 1.0
    assert metrics.classification_f1 == 1.0
    assert metrics.drone_accuracy == 1.0
    assert np.array_equal(metrics.confusion, np.diag([2, 1, 1, 1, 1]))


def test_half_right_detection():
    y_det = np.array([1, 1, 0, 0])
    y_cls = np.array([1, 2, 0, 0])
    metrics = compute_metrics(y_det, y_cls, one_hot([1, 0, 0, 1], 2), one_hot(y_cls, 5))
    assert metrics.detection_accuracy == 0.5
    assert metrics.detection_f1 == pytest.approx(0.5)
    assert metrics.n == 4


def test_metrics_ignore_record_order():
    rng = np.random.default_rng(12)
    y_cls = rng.integers(0, 5, size=40)
    y_det = (y_cls != 0).astype(int)
    det_logits, cls_logits = rng.normal(size=(40, 2)), rng.normal(size=(40, 5))
    order = rng.permutation(40)
    base = compute_metrics(y_det, y_cls, det_logits, cls_logits)
    shuffled = compute_metrics(y_det[order], y_cls[order], det_logits[order], cls_logits[order])
    assert shuffled.as_row() == base.as_row()
    assert np.array_equal(shuffled.confusion, base.confusion)


def test_drone_accuracy_ignores_non_drone_logit():
    y_det = np.array([1, 1])
    y_cls = np.array([3, 4])
    cls_logits = np.array([[9.0, 0, 0, 5.0, 0], [9.0, 0, 0, 0, 5.0]])
    metrics = compute_metrics(y_det, y_cls, one_hot([1, 1], 2), cls_logits)
    assert metrics.classification_accuracy == 0.0
    assert metrics.drone_accuracy == 1.0


def test_drone_accuracy_without_drones():
    metrics = compute_metrics(np.zeros(3, int), np.zeros(3, int), one_hot([0, 0, 0], 2), one_hot([0, 0, 0], 5))
    assert math.isnan(metrics.drone_accuracy)


def test_metrics_of_nothing():
    with pytest.raises(DomainError):
        compute_metrics(np.array([]), np.array([]), np.zeros((0, 2)), np.zeros((0, 5)))


# -- configuration -----------------------------------------------------------

def test_parse_modalities():
    assert parse_modalities("acoustic, radar") == ("acoustic", "radar")
    assert parse_modalities(["radar"]) == ("radar",)
    with pytest.raises(ConfigError):
        parse_modalities("acoustic,sonar")
    with pytest.raises(ConfigError):
        parse_modalities(" , ")


def test_modality_labels():
    assert [modality_label(m) for m in ABLATION_SETS] == ["Acoustic + Range-Doppler", "Acoustic", "Range-Doppler"]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(test_fraction=0.6, validation_fraction=0.4)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(dropout=1.0)


def test_train_config_from_section():
    cfg = TrainConfig.from_dict(load_config(overrides=["train.modalities=radar"])["train"])
    assert cfg.modalities == ("radar",)
    assert cfg.batch_size == 64
    assert cfg.learning_rate == 5e-5


# -- early stopping and the training loop ------------------------------------

def test_early_stopping():
    module = Linear(2, 2, np.random.default_rng(0))
    stopper = EarlyStopping(patience=2)
    stops = [stopper(module, epoch, loss) for epoch, loss in enumerate([1.0, 0.9, 0.95, 0.96, 0.5], start=1)]
    assert stops == [False, False, False, True, False]
    assert stopper.best_epoch == 5
    assert stopper.best_loss == 0.5


def test_early_stopping_keeps_best_weights():
    module = Linear(2, 2, np.random.default_rng(0))
    stopper = EarlyStopping(patience=3)
    stopper(module, 1, 1.0)
    best = module.weight.data.copy()
    module.weight.data += 1.0
    stopper(module, 2, 2.0)
    assert np.array_equal(stopper.best_state["weight"], best)


def test_train_loop_runs(small_model_config, random_samples):
    model = FusionModel(small_model_config)
    result = train_loop(model, random_samples, random_samples[::2], quick_config())
    assert [e.epoch for e in result.log] == [1, 2]
    assert all(math.isfinite(e.train_loss) and math.isfinite(e.val_loss) for e in result.log)
    assert result.best_val_loss == min(e.val_loss for e in result.log)
    state = model.state_dict()
    assert all(np.array_equal(state[k], result.best_state[k]) for k in state)


def test_train_loop_is_deterministic(small_model_config, random_samples):
    logs = []
    for _ in range(2):
        result = train_loop(FusionModel(small_model_config), random_samples, random_samples[:5], quick_config())
        logs.append([(e.train_loss, e.val_loss) for e in result.log])
    assert logs[0] == logs[1]


def test_train_loop_reports_divergence(small_model_config, random_samples):
    broken = list(random_samples)
    broken[0] = replace(broken[0], acoustic=np.full(AUDIO_WINDOW, np.nan))
    with pytest.raises(NumericDivergenceError) as info:
        train_loop(FusionModel(small_model_config), broken, random_samples, quick_config(batch_size=16))
    assert info.value.epoch == 1


def test_train_loop_needs_data(small_model_config, random_samples):
    with pytest.raises(DomainError):
        train_loop(FusionModel(small_model_config), random_samples, [], quick_config())


# -- splits and experiments --------------------------------------------------

def test_partition(mini_dataset):
    cfg = quick_config()
    parts = partition(mini_dataset.records, cfg)
    test_ids = {r.sample_id for r in parts.test}
    validation_ids = {r.sample_id for r in parts.validation}
    train_ids = {r.sample_id for r in parts.train}
    assert not test_ids & train_ids
    assert not test_ids & validation_ids
    assert not validation_ids & train_ids
    assert sum(r.detection_label == 0 for r in parts.train) == sum(r.detection_label == 1 for r in parts.train)
    assert [r.sample_id for r in parts.test] == [r.sample_id for r in held_out_split(mini_dataset.records, cfg)[1]]


def test_held_out_split_ignores_modalities(mini_dataset):
    fused = held_out_split(mini_dataset.records, quick_config())[1]
    radar = held_out_split(mini_dataset.records, quick_config(modalities=("radar",)))[1]
    assert fused == radar


def test_run_training_is_reproducible(mini_dataset, small_radar, small_model_config):
    store = SampleStore(mini_dataset, small_radar, AUDIO_WINDOW)
    runs = [run_training(mini_dataset, store, small_model_config, quick_config()) for _ in range(2)]
    assert runs[0].test_metrics.as_row() == runs[1].test_metrics.as_row()
    assert [e.val_loss for e in runs[0].result.log] == [e.val_loss for e in runs[1].result.log]
    state = runs[0].model.state_dict()
    assert all(np.array_equal(state[k], runs[1].model.state_dict()[k]) for k in state)
    assert runs[0].test_metrics.n == 10


def test_ablation_shares_the_test_split(mini_dataset, small_radar, small_model_config):
    store = SampleStore(mini_dataset, small_radar, AUDIO_WINDOW)
    experiments = ablate_modalities(mini_dataset, store, small_model_config, quick_config(epochs=1))
    assert [e.modalities for e in experiments] == list(ABLATION_SETS)
    ids = [[s.sample_id for s in e.test_samples] for e in experiments]
    assert ids[0] == ids[1] == ids[2]


# -- noise -------------------------------------------------------------------

def test_acoustic_noise_leaves_radar_alone(random_samples):
    noisy = add_acoustic_noise(random_samples, 6.0, seed=0)
    for clean, dirty in zip(random_samples, noisy):
        assert np.array_equal(clean.radar, dirty.radar)
        assert not np.array_equal(clean.acoustic, dirty.acoustic)
        assert np.abs(dirty.acoustic).max() == pytest.approx(1.0)
    again = add_acoustic_noise(random_samples, 6.0, seed=0)
    assert all(np.array_equal(a.acoustic, b.acoustic) for a, b in zip(noisy, again))


def test_silent_segment_passes_through(random_samples, caplog):
    samples = [replace(random_samples[0], acoustic=np.zeros_like(random_samples[0].acoustic))] + list(random_samples[1:])
    with caplog.at_level(logging.WARNING):
        noisy = add_acoustic_noise(samples, 12.0, seed=0)
    assert len(noisy) == len(samples)
    assert not noisy[0].acoustic.any()
    assert not np.array_equal(noisy[1].acoustic, samples[1].acoustic)
    assert "1 silent segment" in caplog.text


def test_snr_sweep_rows(small_model_config, random_samples):
    fused = FusionModel(small_model_config)
    radar_only = FusionModel(replace(small_model_config, seed=6))
    rows = snr_sweep([(("acoustic", "radar"), fused), (("radar",), radar_only)], [6, 12, 18, 24],
                     random_samples, seed=0)
    assert [row["snr_db"] for row in rows] == ["6", "12", "18", "24", "clean"]
    assert list(rows[0]) == [
        "snr_db",
        "Acoustic + Range-Doppler detection_accuracy", "Acoustic + Range-Doppler classification_accuracy",
        "Range-Doppler detection_accuracy", "Range-Doppler classification_accuracy",
    ]
    # noise only touches the waveform
    assert len({row["Range-Doppler detection_accuracy"] for row in rows}) == 1


def test_snr_sweep_needs_levels(small_model_config, random_samples):
    with pytest.raises(ConfigError):
        snr_sweep([(("radar",), FusionModel(small_model_config))], [], random_samples, seed=0)


# -- desk-scale experiments --------------------------------------------------

@pytest.fixture(scope="module")
def desk_experiments(tmp_path_factory):
    config = load_config(preset="desk")
    radar_config = RadarConfig.from_dict(config["radar"])
    manifest = gen_dataset(ClassLibrary.from_dict(config["synth"]), 256, tmp_path_factory.mktemp("desk"),
                           seed=0, radar_config=radar_config, window=config["audio"]["window"],
                           hop=config["audio"]["hop"], progress=False)
    store = SampleStore(manifest, radar_config, config["audio"]["window"])
    model_config = ModelConfig.from_sections(config["model"], config["train"])
    return ablate_modalities(manifest, store, model_config, TrainConfig.from_dict(config["train"]))


@pytest.mark.slow
def test_desk_fused_model_accuracy(desk_experiments):
    fused, acoustic, radar = (e.test_metrics for e in desk_experiments)
    assert fused.detection_accuracy >= 0.95
    assert fused.classification_accuracy >= 0.85
    assert fused.classification_accuracy >= acoustic.classification_accuracy >= radar.classification_accuracy


@pytest.mark.slow
def test_desk_noise_trend(desk_experiments):
    fused, acoustic, _ = desk_experiments
    rows = snr_sweep([fused.pair(), acoustic.pair()], [6, 12, 18, 24], fused.test_samples, seed=0)
    acoustic_det = [row["Acoustic detection_accuracy"] for row in rows]
    assert all(a <= b for a, b in zip(acoustic_det, acoustic_det[1:]))
    assert rows[0]["snr_db"] == "6"
    assert rows[0]["Acoustic + Range-Doppler detection_accuracy"] >= rows[0]["Acoustic detection_accuracy"] + 0.05


@pytest.mark.slow
def test_desk_evaluation_is_repeatable(desk_experiments):
    fused = desk_experiments[0]
    assert evaluate(fused.model, fused.test_samples, fused.modalities).as_row() == fused.test_metrics.as_row()
