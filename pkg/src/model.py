"""
Model Module
Dual-kernel raw-waveform acoustic encoder, range-Doppler encoder, transformer
fusion over modality tokens, and the detection/classification heads with
their jointly masked loss
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.checkpoint import load_checkpoint, save_checkpoint
from src.configuration import apply_values, default_config
from src.errors import ConfigError, DimensionError, DomainError, NumericError
from src.nn_core import (
    Conv1d, Conv2d, Dropout, Linear, Module, Parameter, Tensor, TransformerEncoderLayer,
    count_parameters, cross_entropy, global_avg_pool, relu, sigmoid, stack,
)

logger = logging.getLogger(__name__)

MODALITIES = ("acoustic", "radar")
N_DETECTION = 2
N_CLASSES = 5
NON_DRONE = 0


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Encoder1DConfig:
    small_kernel: int = 7
    large_kernel: int = 107
    downsample_kernel: int = 15
    downsample_stride: int = 8
    num_se_blocks: int = 5
    widths: Tuple[int, ...] = (16, 32, 64, 64, 128)
    embed_dim: int = 128
    se_reduction: int = 4

    def __post_init__(self):
        for name in ("small_kernel", "large_kernel", "downsample_kernel"):
            if getattr(self, name) % 2 == 0 or getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be odd and positive, got {getattr(self, name)}")
        if self.num_se_blocks < 1:
            raise ConfigError(f"model.blocks_1d must be >= 1, got {self.num_se_blocks}")
        if len(self.widths) != self.num_se_blocks:
            raise ConfigError(f"model.widths_1d has {len(self.widths)} entries for {self.num_se_blocks} blocks")
        if self.downsample_stride < 1:
            raise ConfigError(f"model.downsample_stride must be >= 1, got {self.downsample_stride}")

    @property
    def min_input_length(self) -> int:
        """Shortest waveform whose downsampled length still covers the large kernel"""
        pad = self.downsample_kernel // 2
        return (self.large_kernel - 1) * self.downsample_stride + self.downsample_kernel - 2 * pad


@dataclass(frozen=True)
class Encoder2DConfig:
    num_se_blocks: int = 4
    kernels: Tuple[int, ...] = (3, 3, 5, 7)
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 128
    se_reduction: int = 4
    stem_kernel: int = 3

    def __post_init__(self):
        if len(self.kernels) != self.num_se_blocks:
            raise ConfigError(f"model.kernels_2d has {len(self.kernels)} entries for {self.num_se_blocks} blocks")
        if len(self.widths) != self.num_se_blocks:
            raise ConfigError(f"model.widths_2d has {len(self.widths)} entries for {self.num_se_blocks} blocks")
        if any(k % 2 == 0 or k < 1 for k in self.kernels + (self.stem_kernel,)):
            raise ConfigError(f"2-D kernels must be odd and positive, got {self.kernels}")

    @property
    def min_map_size(self) -> int:
        return max(self.kernels + (self.stem_kernel,))


@dataclass(frozen=True)
class FusionConfig:
    n_heads: int = 8
    n_layers: int = 1
    embed_dim: int = 128
    ffn_hidden: int = 256
    n_modalities: int = len(MODALITIES)

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"model.embed_dim {self.embed_dim} not divisible by model.n_heads {self.n_heads}")
        if self.n_layers != 1:
            raise ConfigError(f"model.n_layers must be 1, got {self.n_layers}")


@dataclass(frozen=True)
class LossConfig:
    """Weight of the classification term (lambda)"""
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigError(f"train.loss_lambda must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class ModelConfig:
    acoustic: Encoder1DConfig = Encoder1DConfig()
    radar: Encoder2DConfig = Encoder2DConfig()
    fusion: FusionConfig = FusionConfig()
    head_hidden: int = 64
    dropout: float = 0.4
    seed: int = 0

    def __post_init__(self):
        dims = {self.acoustic.embed_dim, self.radar.embed_dim, self.fusion.embed_dim}
        if len(dims) != 1:
            raise ConfigError(f"encoder and fusion embedding dims differ: {sorted(dims)}")

    @classmethod
    def from_sections(cls, model: Dict[str, Any], train: Dict[str, Any]) -> "ModelConfig":
        """Build from the resolved 'model' and 'train' config sections"""
        return cls(
            acoustic=Encoder1DConfig(
                small_kernel=model["small_kernel"],
                large_kernel=model["large_kernel"],
                downsample_kernel=model["downsample_kernel"],
                downsample_stride=model["downsample_stride"],
                num_se_blocks=model["blocks_1d"],
                widths=tuple(model["widths_1d"]),
                embed_dim=model["embed_dim"],
                se_reduction=model["se_reduction"],
            ),
            radar=Encoder2DConfig(
                num_se_blocks=model["blocks_2d"],
                kernels=tuple(model["kernels_2d"]),
                widths=tuple(model["widths_2d"]),
                embed_dim=model["embed_dim"],
                se_reduction=model["se_reduction"],
            ),
            fusion=FusionConfig(
                n_heads=model["n_heads"],
                n_layers=model["n_layers"],
                embed_dim=model["embed_dim"],
                ffn_hidden=model["ffn_hidden"],
            ),
            head_hidden=model["head_hidden"],
            dropout=train["dropout"],
            seed=train["seed"],
        )

    def to_key_values(self) -> Dict[str, Any]:
        """Flat section.key map, readable back through the config loader"""
        return {
            "model.small_kernel": self.acoustic.small_kernel,
            "model.large_kernel": self.acoustic.large_kernel,
            "model.downsample_kernel": self.acoustic.downsample_kernel,
            "model.downsample_stride": self.acoustic.downsample_stride,
            "model.blocks_1d": self.acoustic.num_se_blocks,
            "model.widths_1d": list(self.acoustic.widths),
            "model.blocks_2d": self.radar.num_se_blocks,
            "model.kernels_2d": list(self.radar.kernels),
            "model.widths_2d": list(self.radar.widths),
            "model.se_reduction": self.acoustic.se_reduction,
            "model.embed_dim": self.fusion.embed_dim,
            "model.n_heads": self.fusion.n_heads,
            "model.n_layers": self.fusion.n_layers,
            "model.ffn_hidden": self.fusion.ffn_hidden,
            "model.head_hidden": self.head_hidden,
            "train.dropout": self.dropout,
            "train.seed": self.seed,
        }


# ---------------------------------------------------------------- data types

@dataclass
class LabeledSample:
    """One conditioned sample: waveform [L], range-Doppler map [H, W] and labels"""
    acoustic: Optional[np.ndarray]
    radar: Optional[np.ndarray]
    y_det: int
    y_cls: int
    sample_id: str = ""

    def __post_init__(self):
        if not 0 <= self.y_cls < N_CLASSES:
            raise DomainError(f"{self.sample_id}: class label {self.y_cls} outside 0..{N_CLASSES - 1}")
        if (self.y_det == 0) != (self.y_cls == NON_DRONE):
            raise DomainError(
                f"{self.sample_id}: detection label {self.y_det} inconsistent with class label {self.y_cls}"
            )


@dataclass
class ModelOutput:
    """Logits of a batch: det_logits [N, 2], cls_logits [N, 5]"""
    det_logits: Tensor
    cls_logits: Tensor

    def __post_init__(self):
        if self.det_logits.shape[-1] != N_DETECTION or self.cls_logits.shape[-1] != N_CLASSES:
            raise DimensionError(
                f"model output widths {self.det_logits.shape[-1]}/{self.cls_logits.shape[-1]}, "
                f"expected {N_DETECTION}/{N_CLASSES}"
            )
        if not (np.isfinite(self.det_logits.data).all() and np.isfinite(self.cls_logits.data).all()):
            raise NumericError("model produced non-finite logits")

    def __len__(self):
        return self.det_logits.shape[0]

    def detections(self) -> np.ndarray:
        return self.det_logits.data.argmax(axis=-1)

    def classes(self) -> np.ndarray:
        return self.cls_logits.data.argmax(axis=-1)


# ---------------------------------------------------------------- layers

class SEBlock(Module):
    """
    Residual conv block with squeeze-and-excitation channel gating

        h    = conv_b(relu(conv_a(x)))
        gate = sigmoid(excite(relu(squeeze(global_avg_pool(h)))))
        out  = h * gate + shortcut(x)

    The shortcut is the identity, or a 1x1 conv when channels change.
    """

    spatial_dims = 1

    def __init__(self, c_in: int, c_out: int, kernel: int, reduction: int, rng: np.random.Generator):
        if c_out < reduction:
            raise ConfigError(f"SE block with {c_out} channels can't use reduction {reduction}")
        conv = Conv1d if self.spatial_dims == 1 else Conv2d
        self.conv_a = conv(c_in, c_out, kernel, rng)
        self.conv_b = conv(c_out, c_out, kernel, rng)
        self.squeeze = Linear(c_out, c_out // reduction, rng)
        self.excite = Linear(c_out // reduction, c_out, rng)
        self.shortcut = conv(c_in, c_out, 1, rng) if c_in != c_out else None

    def gate(self, h: Tensor) -> Tensor:
        pooled = global_avg_pool(h, self.spatial_dims)
        return sigmoid(self.excite(relu(self.squeeze(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_b(relu(self.conv_a(x)))
        gate = self.gate(h)
        gate = gate.reshape(*gate.shape, *([1] * self.spatial_dims))
        residual = x if self.shortcut is None else self.shortcut(x)
        return h * gate + residual

    def mult_adds(self, input_shape):
        total, shape = self.conv_a.mult_adds(input_shape)
        ops, shape = self.conv_b.mult_adds(shape)
        total += ops
        total += self.squeeze.mult_adds((shape[0],))[0] + self.excite.mult_adds((self.squeeze.weight.shape[0],))[0]
        if self.shortcut is not None:
            total += self.shortcut.mult_adds(input_shape)[0]
        return total, shape


class SEBlock1d(SEBlock):
    spatial_dims = 1


class SEBlock2d(SEBlock):
    spatial_dims = 2


def _as_batch(x: Union[Tensor, np.ndarray], unbatched_ndim: int) -> Tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == unbatched_ndim:
        return x.reshape(1, *x.shape), True
    if x.ndim != unbatched_ndim + 1:
        raise DimensionError(f"expected a {unbatched_ndim}-D input or a batch of them, got shape {x.shape}")
    return x, False


class AcousticEncoder(Module):
    """Shared strided downsampling conv feeding a small-kernel and a large-kernel SE branch"""

    def __init__(self, config: Encoder1DConfig, rng: np.random.Generator):
        self.config = config
        self.downsample = Conv1d(1, config.widths[0], config.downsample_kernel, rng,
                                 stride=config.downsample_stride)
        self.small_branch = self._branch(config.small_kernel, rng)
        self.large_branch = self._branch(config.large_kernel, rng)
        self.projection = Linear(config.widths[-1], config.embed_dim, rng)

    def _branch(self, kernel: int, rng: np.random.Generator) -> List[SEBlock1d]:
        widths = (self.config.widths[0],) + tuple(self.config.widths)
        return [
            SEBlock1d(widths[i], widths[i + 1], kernel, self.config.se_reduction, rng)
            for i in range(self.config.num_se_blocks)
        ]

    def forward(self, wave: Union[Tensor, np.ndarray]) -> Tensor:
        """[1, L] -> [embed_dim], or [N, 1, L] -> [N, embed_dim]"""
        x, unbatched = _as_batch(wave, 2)
        length = x.shape[-1]
        if x.shape[1] != 1:
            raise DimensionError(f"acoustic input must have 1 channel, got {x.shape[1]}")
        if length < self.config.min_input_length:
            raise DimensionError(
                f"acoustic input of {length} samples is too short; "
                f"need at least {self.config.min_input_length}"
            )

        x = self.downsample(x)
        small, large = x, x
        for block in self.small_branch:
            small = block(small)
        for block in self.large_branch:
            large = block(large)
        embedding = self.projection(global_avg_pool(small + large, 1))
        return embedding.reshape(embedding.shape[-1]) if unbatched else embedding

    def mult_adds(self, input_shape):
        total, shape = self.downsample.mult_adds(input_shape)
        for branch in (self.small_branch, self.large_branch):
            branch_shape = shape
            for block in branch:
                ops, branch_shape = block.mult_adds(branch_shape)
                total += ops
        return total + self.projection.mult_adds((branch_shape[0],))[0], (self.config.embed_dim,)


class RangeDopplerEncoder(Module):
    """Conv stem followed by stride-1 SE blocks; no down-sampling anywhere"""

    def __init__(self, config: Encoder2DConfig, rng: np.random.Generator):
        self.config = config
        self.stem = Conv2d(1, config.widths[0], config.stem_kernel, rng)
        widths = (config.widths[0],) + tuple(config.widths)
        self.blocks = [
            SEBlock2d(widths[i], widths[i + 1], kernel, config.se_reduction, rng)
            for i, kernel in enumerate(config.kernels)
        ]
        self.projection = Linear(config.widths[-1], config.embed_dim, rng)

    def features(self, rd_map: Tensor) -> List[Tensor]:
        """Activations after the stem and after every block"""
        x = self.stem(rd_map)
        activations = [x]
        for block in self.blocks:
            x = block(x)
            activations.append(x)
        return activations

    def forward(self, rd_map: Union[Tensor, np.ndarray]) -> Tensor:
        """[1, H, W] -> [embed_dim], or [N, 1, H, W] -> [N, embed_dim]"""
        x, unbatched = _as_batch(rd_map, 3)
        height, width = x.shape[-2:]
        if x.shape[1] != 1:
            raise DimensionError(f"range-Doppler input must have 1 channel, got {x.shape[1]}")
        if min(height, width) < self.config.min_map_size:
            raise DimensionError(
                f"range-Doppler map {height}x{width} is smaller than the largest kernel "
                f"{self.config.min_map_size}"
            )
        embedding = self.projection(global_avg_pool(self.features(x)[-1], 2))
        return embedding.reshape(embedding.shape[-1]) if unbatched else embedding

    def mult_adds(self, input_shape):
        total, shape = self.stem.mult_adds(input_shape)
        for block in self.blocks:
            ops, shape = block.mult_adds(shape)
            total += ops
        return total + self.projection.mult_adds((shape[0],))[0], (self.config.embed_dim,)


class FusionTransformer(Module):
    """One token per active modality (embedding + modality vector), one encoder layer, mean pool"""

    def __init__(self, config: FusionConfig, dropout: float, rng: np.random.Generator, seed: int = 0):
        self.config = config
        self.modality_embedding = Parameter(rng.normal(0.0, 0.02, (config.n_modalities, config.embed_dim)))
        self.encoder = TransformerEncoderLayer(config.embed_dim, config.n_heads, config.ffn_hidden,
                                               dropout, rng, first_layer_id=0, seed=seed)

    def forward(self, embeddings: Sequence[Tensor], modality_ids: Sequence[int]) -> Tensor:
        """[T] embeddings of shape [d] (or [N, d]) -> fused [d] (or [N, d])"""
        if not 1 <= len(embeddings) <= self.config.n_modalities:
            raise ConfigError(f"fusion takes 1..{self.config.n_modalities} modalities, got {len(embeddings)}")
        if len(embeddings) != len(modality_ids):
            raise DimensionError(f"{len(embeddings)} embeddings for {len(modality_ids)} modality ids")
        for m in modality_ids:
            if not 0 <= m < self.config.n_modalities:
                raise ConfigError(f"unknown modality id {m}")

        tokens = stack([e + self.modality_embedding[m] for e, m in zip(embeddings, modality_ids)], axis=-2)
        return self.encoder(tokens).mean(axis=-2)

    def mult_adds(self, input_shape):
        return self.encoder.mult_adds(input_shape)[0], (self.config.embed_dim,)


class MLPHead(Module):
    """linear -> relu -> dropout -> linear"""

    def __init__(self, d_in: int, hidden: int, n_out: int, dropout: float, layer_id: int,
                 rng: np.random.Generator, seed: int = 0):
        self.hidden = Linear(d_in, hidden, rng)
        self.dropout = Dropout(dropout, layer_id, seed)
        self.output = Linear(hidden, n_out, rng)

    def forward(self, fused: Tensor) -> Tensor:
        return self.output(self.dropout(relu(self.hidden(fused))))

    def mult_adds(self, input_shape):
        ops, shape = self.hidden.mult_adds(input_shape)
        more, shape = self.output.mult_adds(shape)
        return ops + more, shape


# ---------------------------------------------------------------- model

def _modality_ids(modalities: Sequence[str]) -> List[int]:
    if not modalities:
        raise ConfigError("at least one modality must be active")
    ids = []
    for name in modalities:
        if name not in MODALITIES:
            raise ConfigError(f"unknown modality '{name}' (known: {', '.join(MODALITIES)})")
        ids.append(MODALITIES.index(name))
    return ids


class FusionModel(Module):
    """Encoders, transformer fusion and the two heads"""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.fusion.embed_dim
        self.acoustic_encoder = AcousticEncoder(config.acoustic, rng)
        self.radar_encoder = RangeDopplerEncoder(config.radar, rng)
        self.fusion = FusionTransformer(config.fusion, config.dropout, rng, seed=config.seed)
        self.detection = MLPHead(d, config.head_hidden, N_DETECTION, config.dropout, 2, rng, config.seed)
        self.classification = MLPHead(d, config.head_hidden, N_CLASSES, config.dropout, 3, rng, config.seed)
        self.assign_names()

    def set_step(self, step: int):
        """Advance the dropout streams to a new optimizer step"""
        for module in self.modules():
            if isinstance(module, Dropout):
                module.step = step

    def encode_acoustic(self, wave) -> Tensor:
        return self.acoustic_encoder(wave)

    def encode_range_doppler(self, rd_map) -> Tensor:
        return self.radar_encoder(rd_map)

    def fuse(self, embeddings: Sequence[Tensor], modality_ids: Sequence[int]) -> Tensor:
        return self.fusion(embeddings, modality_ids)

    def detection_head(self, fused: Tensor) -> Tensor:
        return self.detection(fused)

    def classification_head(self, fused: Tensor) -> Tensor:
        return self.classification(fused)

    def forward(self, samples: Union[LabeledSample, Sequence[LabeledSample]],
                modalities: Sequence[str] = MODALITIES) -> ModelOutput:
        """
        Batched forward over the active modalities

        Inactive modalities contribute no token at all, so single-modality
        models run the fusion layer with one token.
        """
        if isinstance(samples, LabeledSample):
            samples = [samples]
        if not samples:
            raise DomainError("forward called with an empty batch")
        ids = _modality_ids(modalities)

        embeddings = []
        for m in ids:
            if MODALITIES[m] == "acoustic":
                waves = np.stack([s.acoustic for s in samples])[:, None, :]
                embeddings.append(self.encode_acoustic(Tensor(waves)))
            else:
                maps = np.stack([s.radar for s in samples])[:, None, :, :]
                embeddings.append(self.encode_range_doppler(Tensor(maps)))

        fused = self.fuse(embeddings, ids)
        return ModelOutput(self.detection_head(fused), self.classification_head(fused))


def joint_loss(outputs: ModelOutput, labels: Sequence[LabeledSample], cfg: LossConfig = LossConfig()) -> Tensor:
    """
    mean over the batch of CE(det) + lambda * y_det * CE(cls)

    The classification term of a non-drone sample is multiplied by an exact
    zero, so it contributes no gradient to the classification head.
    """
    n = len(labels)
    if n == 0:
        raise DomainError("joint loss of an empty batch")
    if len(outputs) != n:
        raise DimensionError(f"{len(outputs)} outputs for {n} labels")

    y_det = np.array([s.y_det for s in labels], dtype=np.int64)
    y_cls = np.array([s.y_cls for s in labels], dtype=np.int64)
    detection = cross_entropy(outputs.det_logits, y_det)
    classification = cross_entropy(outputs.cls_logits, y_cls)
    return (detection + classification * (cfg.weight * y_det.astype(np.float64))).sum() / float(n)


def count_mult_adds(model: FusionModel, acoustic_length: int, radar_shape: Tuple[int, int],
                    modalities: Sequence[str] = MODALITIES) -> int:
    """Multiply-adds of one sample's forward pass, from layer shape arithmetic"""
    ids = _modality_ids(modalities)
    d = model.config.fusion.embed_dim
    total = 0
    if "acoustic" in modalities:
        total += model.acoustic_encoder.mult_adds((1, acoustic_length))[0]
    if "radar" in modalities:
        total += model.radar_encoder.mult_adds((1,) + tuple(radar_shape))[0]
    total += model.fusion.mult_adds((len(ids), d))[0]
    return total + model.detection.mult_adds((d,))[0] + model.classification.mult_adds((d,))[0]


def save_model(model: FusionModel, directory: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
    architecture = model.config.to_key_values()
    architecture.update(extra or {})
    return save_checkpoint(model.state_dict(), directory, architecture)


def load_model(directory: Path) -> Tuple[FusionModel, Dict[str, Optional[str]]]:
    """
    Rebuild a model from a checkpoint directory

    Returns:
        (model in eval mode, the raw architecture key-values)
    """
    state, architecture = load_checkpoint(directory)
    config = default_config()
    apply_values(config, {k: v for k, v in architecture.items() if k.split(".")[0] in ("model", "train")},
                 f"{directory}")
    model = FusionModel(ModelConfig.from_sections(config["model"], config["train"]))
    model.load_state_dict(state)
    logger.info(f"Loaded model with {count_parameters(model)} parameters from {directory}")
    return model.eval(), architecture
