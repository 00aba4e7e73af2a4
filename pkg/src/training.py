"""
Training Module
Joint detection/classification training with early stopping, evaluation
metrics, modality ablations and acoustic noise sweeps
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score
from tqdm import tqdm

from src.acoustic import AudioClip, add_noise_at_snr, normalize, signal_power
from src.dataset import DatasetManifest, SampleRecord, SampleStore, balance_by_upsampling, stratified_split
from src.errors import ConfigError, DomainError, NumericDivergenceError, NumericError
from src.model import (
    MODALITIES, N_CLASSES, NON_DRONE, FusionModel, LabeledSample, LossConfig, ModelConfig, joint_loss,
)
from src.nn_core import Adam, count_parameters, no_grad

logger = logging.getLogger(__name__)

ABLATION_SETS = (("acoustic", "radar"), ("acoustic",), ("radar",))
MODALITY_LABELS = {"acoustic": "Acoustic", "radar": "Range-Doppler"}

# keyed sub-streams of the run seed
SPLIT_TEST, SPLIT_VALIDATION, UPSAMPLE, SHUFFLE = range(4)


def parse_modalities(text) -> Tuple[str, ...]:
    names = tuple(m.strip() for m in (text.split(",") if isinstance(text, str) else text) if m.strip())
    for name in names:
        if name not in MODALITIES:
            raise ConfigError(f"unknown modality '{name}' (known: {', '.join(MODALITIES)})")
    if not names:
        raise ConfigError("at least one modality must be active")
    return names


def modality_label(modalities: Sequence[str]) -> str:
    return " + ".join(MODALITY_LABELS[m] for m in modalities)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 5e-5
    weight_decay: float = 0.4
    dropout: float = 0.4
    loss_lambda: float = 1.0
    seed: int = 0
    early_stopping_patience: int = 8
    test_fraction: float = 0.15
    validation_fraction: float = 0.10
    modalities: Tuple[str, ...] = MODALITIES

    def __post_init__(self):
        for name in ("epochs", "batch_size", "early_stopping_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("test_fraction", "validation_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be in (0, 1), got {getattr(self, name)}")
        if self.test_fraction + self.validation_fraction >= 1:
            raise ConfigError("train.test_fraction + train.validation_fraction must be < 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("train.learning_rate must be > 0 and train.weight_decay >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"train.dropout must be in [0, 1), got {self.dropout}")
        if self.loss_lambda < 0:
            raise ConfigError(f"train.loss_lambda must be >= 0, got {self.loss_lambda}")
        parse_modalities(self.modalities)

    @classmethod
    def from_dict(cls, train: Dict) -> "TrainConfig":
        """Build from the 'train' config section"""
        return cls(
            epochs=train["epochs"],
            batch_size=train["batch_size"],
            learning_rate=train["learning_rate"],
            weight_decay=train["weight_decay"],
            dropout=train["dropout"],
            loss_lambda=train["loss_lambda"],
            seed=train["seed"],
            early_stopping_patience=train["early_stopping_patience"],
            test_fraction=train["test_fraction"],
            validation_fraction=train["validation_fraction"],
            modalities=parse_modalities(train["modalities"]),
        )


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    detection_accuracy: float
    detection_f1: float
    classification_accuracy: float
    classification_f1: float
    drone_accuracy: float
    confusion: np.ndarray
    n: int

    def as_row(self) -> Dict[str, float]:
        return {
            "detection_accuracy": self.detection_accuracy,
            "detection_f1": self.detection_f1,
            "classification_accuracy": self.classification_accuracy,
            "classification_f1": self.classification_f1,
            "drone_accuracy": self.drone_accuracy,
            "n": self.n,
        }


def compute_metrics(y_det: np.ndarray, y_cls: np.ndarray, det_logits: np.ndarray,
                    cls_logits: np.ndarray) -> Metrics:
    """
    Detection: argmax of the detection logits, binary F1 on the drone class.
    Classification: argmax over all 5 classes, macro-F1 over the classes
    present in y_cls. Drone accuracy: true drones only, argmax restricted to
    the 4 drone classes.
    """
    y_det = np.asarray(y_det)
    y_cls = np.asarray(y_cls)
    if y_det.size == 0:
        raise DomainError("no records to evaluate")
    pred_det = det_logits.argmax(axis=-1)
    pred_cls = cls_logits.argmax(axis=-1)

    drones = y_det == 1
    drone_accuracy = math.nan
    if drones.any():
        drone_logits = np.delete(cls_logits[drones], NON_DRONE, axis=-1)
        drone_classes = np.delete(np.arange(N_CLASSES), NON_DRONE)
        drone_accuracy = float(accuracy_score(y_cls[drones], drone_classes[drone_logits.argmax(axis=-1)]))

    return Metrics(
        detection_accuracy=float(accuracy_score(y_det, pred_det)),
        detection_f1=float(f1_score(y_det, pred_det, pos_label=1, average="binary", zero_division=0)),
        classification_accuracy=float(accuracy_score(y_cls, pred_cls)),
        classification_f1=float(f1_score(y_cls, pred_cls, labels=np.unique(y_cls), average="macro",
                                         zero_division=0)),
        drone_accuracy=drone_accuracy,
        confusion=confusion_matrix(y_cls, pred_cls, labels=np.arange(N_CLASSES)),
        n=int(y_det.size),
    )


def predict(model: FusionModel, samples: Sequence[LabeledSample], modalities: Sequence[str],
            batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits [N, 2] and [N, 5]"""
    model.eval()
    det, cls = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            outputs = model(samples[start:start + batch_size], modalities)
            det.append(outputs.det_logits.data)
            cls.append(outputs.cls_logits.data)
    return np.concatenate(det), np.concatenate(cls)


def evaluate(model: FusionModel, samples: Sequence[LabeledSample], modalities: Sequence[str] = MODALITIES,
             batch_size: int = 64) -> Metrics:
    if not samples:
        raise DomainError("no records to evaluate")
    det_logits, cls_logits = predict(model, samples, modalities, batch_size)
    return compute_metrics(
        np.array([s.y_det for s in samples]), np.array([s.y_cls for s in samples]), det_logits, cls_logits,
    )


def validate(model: FusionModel, samples: Sequence[LabeledSample], modalities: Sequence[str],
             loss_config: LossConfig, batch_size: int = 64) -> Tuple[float, Metrics]:
    """Eval-mode joint loss and metrics from a single pass"""
    model.eval()
    total = 0.0
    det, cls = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            outputs = model(batch, modalities)
            total += joint_loss(outputs, batch, loss_config).item() * len(batch)
            det.append(outputs.det_logits.data)
            cls.append(outputs.cls_logits.data)
    metrics = compute_metrics(np.array([s.y_det for s in samples]), np.array([s.y_cls for s in samples]),
                              np.concatenate(det), np.concatenate(cls))
    return total / len(samples), metrics


# ---------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_det_acc: float
    val_cls_acc: float


@dataclass
class TrainResult:
    best_state: Dict[str, np.ndarray]
    log: List[EpochLog]
    best_epoch: int
    best_val_loss: float


class EarlyStopping:
    """Tracks the best validation loss and stops after `patience` epochs without improvement"""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"early stopping patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state: Optional[Dict[str, np.ndarray]] = None
        self.stale = 0

    def __call__(self, model: FusionModel, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when training should stop"""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = model.state_dict()
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def train_loop(model: FusionModel, train: Sequence[LabeledSample], validation: Sequence[LabeledSample],
               cfg: TrainConfig, progress: bool = False) -> TrainResult:
    """
    Adam over seeded shuffled mini-batches with early stopping on the
    validation joint loss

    The model is left holding the best weights.

    Raises:
        NumericDivergenceError: the loss became NaN/Inf
    """
    if not train or not validation:
        raise DomainError(f"training needs non-empty train and validation sets ({len(train)}/{len(validation)})")

    optimizer = Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    loss_config = LossConfig(cfg.loss_lambda)
    stopper = EarlyStopping(cfg.early_stopping_patience)
    rng = np.random.default_rng([cfg.seed, SHUFFLE])
    log: List[EpochLog] = []
    step = 0

    logger.info(
        f"Training {modality_label(cfg.modalities)} model ({count_parameters(model)} parameters) on "
        f"{len(train)} samples, validating on {len(validation)}"
    )
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        total = 0.0
        batches = range(0, len(train), cfg.batch_size)
        for batch_index, start in enumerate(tqdm(batches, desc=f"Epoch {epoch}", leave=False,
                                                 disable=not progress), start=1):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            model.set_step(step)
            optimizer.zero_grad()
            try:
                loss = joint_loss(model(batch, cfg.modalities), batch, loss_config)
            except NumericError:
                raise NumericDivergenceError(epoch, batch_index, math.nan)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericDivergenceError(epoch, batch_index, value)
            loss.backward()
            optimizer.step()
            total += value * len(batch)
            step += 1

        val_loss, metrics = validate(model, validation, cfg.modalities, loss_config, cfg.batch_size)
        log.append(EpochLog(epoch, total / len(train), val_loss, metrics.detection_accuracy,
                            metrics.classification_accuracy))
        logger.info(
            f"Epoch {epoch}: train loss {total / len(train):.4f}, val loss {val_loss:.4f}, "
            f"val det acc {metrics.detection_accuracy:.4f}, val cls acc {metrics.classification_accuracy:.4f}"
        )
        if stopper(model, epoch, val_loss):
            logger.info(f"Early stopping after epoch {epoch}; best epoch {stopper.best_epoch}")
            break

    model.load_state_dict(stopper.best_state)
    return TrainResult(stopper.best_state, log, stopper.best_epoch, stopper.best_loss)


# ---------------------------------------------------------------- experiments

@dataclass
class Partition:
    train: List[SampleRecord]
    validation: List[SampleRecord]
    test: List[SampleRecord]


def held_out_split(records: Sequence[SampleRecord],
                   cfg: TrainConfig) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """The held-out test split of a run; depends only on the records, seed and test fraction"""
    return stratified_split(records, cfg.test_fraction, [cfg.seed, SPLIT_TEST])


def partition(records: Sequence[SampleRecord], cfg: TrainConfig) -> Partition:
    """Test split, validation carved from train, then upsampling of the train side only"""
    train, test = held_out_split(records, cfg)
    train, validation = stratified_split(train, cfg.validation_fraction, [cfg.seed, SPLIT_VALIDATION])
    train = balance_by_upsampling(train, [cfg.seed, UPSAMPLE])
    logger.info(f"Split: {len(train)} train (upsampled), {len(validation)} validation, {len(test)} test")
    return Partition(train, validation, test)


def load_samples(store: SampleStore, records: Sequence[SampleRecord], workers: int = 1) -> List[LabeledSample]:
    """Load each distinct record once; repeated records share their sample"""
    unique = list({r.sample_id: r for r in records}.values())
    loaded = dict(zip((r.sample_id for r in unique), store.load_many(unique, workers)))
    return [loaded[r.sample_id] for r in records]


@dataclass
class Experiment:
    modalities: Tuple[str, ...]
    model: FusionModel
    result: TrainResult
    test_metrics: Metrics
    test_samples: List[LabeledSample] = field(repr=False, default_factory=list)

    def pair(self) -> Tuple[Tuple[str, ...], FusionModel]:
        return self.modalities, self.model


def run_training(manifest: DatasetManifest, store: SampleStore, model_config: ModelConfig, cfg: TrainConfig,
                 workers: int = 1, progress: bool = False) -> Experiment:
    """Split, load, train one model and score it on the test split"""
    parts = partition(manifest.records, cfg)
    train = load_samples(store, parts.train, workers)
    validation = load_samples(store, parts.validation, workers)
    test = load_samples(store, parts.test, workers)

    model = FusionModel(replace(model_config, dropout=cfg.dropout, seed=cfg.seed))
    result = train_loop(model, train, validation, cfg, progress)
    metrics = evaluate(model, test, cfg.modalities, cfg.batch_size)
    logger.info(
        f"Test ({modality_label(cfg.modalities)}): det acc {metrics.detection_accuracy:.4f}, "
        f"cls acc {metrics.classification_accuracy:.4f}"
    )
    return Experiment(cfg.modalities, model, result, metrics, test)


def ablate_modalities(manifest: DatasetManifest, store: SampleStore, model_config: ModelConfig,
                      cfg: TrainConfig, workers: int = 1, progress: bool = False) -> List[Experiment]:
    """Train fused, acoustic-only and radar-only models from identical seeds and splits"""
    return [
        run_training(manifest, store, model_config, replace(cfg, modalities=modalities), workers, progress)
        for modalities in ABLATION_SETS
    ]


def _snr_key(snr_db: float) -> int:
    return int(round(snr_db * 100)) % (1 << 32)


def add_acoustic_noise(samples: Sequence[LabeledSample], snr_db: float, seed: int) -> List[LabeledSample]:
    """
    Noisy copies of samples: acoustic only, re-normalized; radar untouched

    Silent segments have no defined SNR and pass through unchanged.
    """
    noisy = []
    silent = 0
    for index, sample in enumerate(samples):
        if signal_power(sample.acoustic) == 0:
            silent += 1
            noisy.append(sample)
            continue
        waveform = add_noise_at_snr(sample.acoustic, snr_db, seed=[seed, _snr_key(snr_db), index])
        noisy.append(replace(sample, acoustic=normalize(AudioClip(waveform)).mono))
    if silent:
        logger.warning(f"{silent} silent segment(s) left without noise at {snr_db:g} dB")
    return noisy


def snr_sweep(models: Sequence[Tuple[Sequence[str], FusionModel]], snr_levels: Sequence[float],
              samples: Sequence[LabeledSample], seed: int, batch_size: int = 64) -> List[Dict]:
    """
    Evaluate clean-trained models on acoustically noised test samples

    models holds (active modalities, model) pairs, e.g. from Experiment.pair().

    Returns one row per SNR level plus a final clean row; every model sees
    the same noise realization.
    """
    if not snr_levels:
        raise ConfigError("SNR list must not be empty")
    rows = []
    for snr in list(snr_levels) + [None]:
        perturbed = list(samples) if snr is None else add_acoustic_noise(samples, snr, seed)
        row = {"snr_db": "clean" if snr is None else f"{snr:g}"}
        for modalities, model in models:
            metrics = evaluate(model, perturbed, modalities, batch_size)
            label = modality_label(modalities)
            row[f"{label} detection_accuracy"] = metrics.detection_accuracy
            row[f"{label} classification_accuracy"] = metrics.classification_accuracy
        logger.info(f"SNR {row['snr_db']}: {row}")
        rows.append(row)
    return rows
