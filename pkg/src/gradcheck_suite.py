"""
Gradient Check Suite
Central-difference checks of every layer primitive and of a toy fusion model
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from src.errors import GradCheckFailure
from src.model import (
    Encoder1DConfig, Encoder2DConfig, FusionConfig, FusionModel, FusionTransformer, LabeledSample, MLPHead,
    ModelConfig, SEBlock1d, SEBlock2d, joint_loss,
)
from src.nn_core import (
    MultiHeadSelfAttention, Tensor, TransformerEncoderLayer, conv1d, conv2d, cross_entropy, dropout,
    global_avg_pool, grad_check, layer_norm, linear, relu, sigmoid, softmax,
)

logger = logging.getLogger(__name__)

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@dataclass
class GradCheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        out = [
            f"{r.name:<24} max rel error {r.max_error:.3e} (tol {r.tolerance:g})  {'ok' if r.passed else 'FAIL'}"
            for r in self.results
        ]
        if self.all_passed:
            out.append("all layers pass")
        else:
            out.append(f"{len(self.failures())} of {len(self.results)} checks failed")
        return out

    def raise_for_failures(self):
        if not self.all_passed:
            names = ", ".join(r.name for r in self.failures())
            raise GradCheckFailure(f"gradient check failed for: {names}")


def _param(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Fixed random projection so every output coordinate carries a distinct weight"""
    weights = rng.normal(size=out.shape)
    return lambda value: (value * weights).sum()


def _scalar(forward: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    project = _projected(forward(), rng)
    return lambda: project(forward())


def _checked(module) -> List[Tensor]:
    """Parameters of a module minus attention key biases, whose gradient is identically zero"""
    return [p for name, p in module.named_parameters() if name != "k.bias" and not name.endswith(".k.bias")]


def _layer_checks(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tensor], Sequence[Tensor]]]:
    checks = []

    x = _param(rng, 2, 3, 11)
    w = _param(rng, 4, 3, 5)
    b = _param(rng, 4)
    checks.append(("conv1d", lambda: conv1d(x, w, b, stride=2, padding=2), [x, w, b]))

    x2 = _param(rng, 2, 2, 6, 5)
    w2 = _param(rng, 3, 2, 3, 3)
    b2 = _param(rng, 3)
    checks.append(("conv2d", lambda: conv2d(x2, w2, b2, padding=1), [x2, w2, b2]))

    xl = _param(rng, 4, 6)
    wl = _param(rng, 3, 6)
    bl = _param(rng, 3)
    checks.append(("linear", lambda: linear(xl, wl, bl), [xl, wl, bl]))

    # keep every coordinate at least 0.1 away from the kink
    away = rng.uniform(0.1, 1.0, size=(5, 4)) * rng.choice([-1.0, 1.0], size=(5, 4))
    xr = Tensor(away, requires_grad=True)
    checks.append(("relu", lambda: relu(xr), [xr]))

    xs = _param(rng, 5, 4)
    checks.append(("sigmoid", lambda: sigmoid(xs), [xs]))

    xp = _param(rng, 2, 3, 7)
    checks.append(("global_avg_pool", lambda: global_avg_pool(xp, 1), [xp]))

    xn = _param(rng, 3, 6)
    gain = _param(rng, 6)
    shift = _param(rng, 6)
    checks.append(("layer_norm", lambda: layer_norm(xn, gain, shift), [xn, gain, shift]))

    xd = _param(rng, 4, 5)
    checks.append(("dropout", lambda: dropout(xd, 0.3, True, seed=7, layer_id=1, step=3), [xd]))

    xm = _param(rng, 3, 5)
    checks.append(("softmax", lambda: softmax(xm, axis=-1), [xm]))
    return checks


def _loss_checks(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tensor], Sequence[Tensor]]]:
    logits = _param(rng, 4, 5)
    labels = np.array([0, 3, 1, 4])
    return [("cross_entropy", lambda: cross_entropy(logits, labels).sum(), [logits])]


def _module_checks(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tensor], Sequence[Tensor]]]:
    checks = []

    attention = MultiHeadSelfAttention(8, 2, rng)
    tokens = _param(rng, 2, 3, 8)
    checks.append(("multi_head_attention", lambda: attention(tokens), [tokens] + _checked(attention)))

    layer = TransformerEncoderLayer(8, 2, 16, 0.0, rng)
    tokens_t = _param(rng, 2, 8)
    checks.append(("transformer_layer", lambda: layer(tokens_t), [tokens_t] + _checked(layer)))

    se1 = SEBlock1d(3, 4, 3, 2, rng)
    x1 = _param(rng, 2, 3, 9)
    checks.append(("se_block_1d", lambda: se1(x1), [x1] + _checked(se1)))

    se2 = SEBlock2d(2, 4, 3, 2, rng)
    x2 = _param(rng, 1, 2, 5, 5)
    checks.append(("se_block_2d", lambda: se2(x2), [x2] + _checked(se2)))

    fusion = FusionTransformer(FusionConfig(n_heads=2, embed_dim=8, ffn_hidden=16), 0.0, rng)
    acoustic = _param(rng, 2, 8)
    radar = _param(rng, 2, 8)
    checks.append(("fuse", lambda: fusion([acoustic, radar], [0, 1]), [acoustic, radar] + _checked(fusion)))

    head = MLPHead(8, 8, 5, 0.0, 3, rng)
    fused = _param(rng, 3, 8)
    checks.append(("mlp_head", lambda: head(fused), [fused] + _checked(head)))
    return checks


def toy_model_config() -> ModelConfig:
    """Smallest architecture that still exercises every layer type"""
    return ModelConfig(
        acoustic=Encoder1DConfig(small_kernel=3, large_kernel=5, downsample_kernel=3, downsample_stride=2,
                                 num_se_blocks=1, widths=(4,), embed_dim=8, se_reduction=2),
        radar=Encoder2DConfig(num_se_blocks=1, kernels=(3,), widths=(4,), embed_dim=8, se_reduction=2),
        fusion=FusionConfig(n_heads=2, embed_dim=8, ffn_hidden=16),
        head_hidden=8,
        dropout=0.0,
    )


def check_toy_model(rng: np.random.Generator, eps: float = 1e-6, coords_per_tensor: int = 4) -> CheckResult:
    """Joint loss of a drone and a non-drone sample, sampled coordinates of every parameter"""
    model = FusionModel(toy_model_config())
    samples = [
        LabeledSample(rng.normal(size=32), rng.uniform(size=(8, 8)), y_det=1, y_cls=2, sample_id="drone"),
        LabeledSample(rng.normal(size=32), rng.uniform(size=(8, 8)), y_det=0, y_cls=0, sample_id="background"),
    ]
    error = grad_check(lambda: joint_loss(model(samples), samples), _checked(model), eps,
                       max_coords=coords_per_tensor, seed=int(rng.integers(1 << 31)))
    return CheckResult("end_to_end_toy_model", error, MODEL_TOLERANCE)


def run_suite(seed: int = 0, eps: float = 1e-6) -> GradCheckReport:
    """Every layer check plus the end-to-end toy model, in a fixed order"""
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, forward, inputs in _layer_checks(rng) + _module_checks(rng):
        error = grad_check(_scalar(forward, rng), inputs, eps)
        report.results.append(CheckResult(name, error, LAYER_TOLERANCE))
        logger.debug(f"{name}: {error:.3e}")
    for name, function, inputs in _loss_checks(rng):
        report.results.append(CheckResult(name, grad_check(function, inputs, eps), LAYER_TOLERANCE))
    report.results.append(check_toy_model(rng, eps))

    level = logging.INFO if report.all_passed else logging.WARNING
    logger.log(level, f"Gradient checks: {sum(r.passed for r in report.results)}/{len(report.results)} passed")
    return report
