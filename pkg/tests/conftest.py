"""
Shared fixtures: a small radar configuration, a small model configuration
and a generated mini dataset
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.model import Encoder1DConfig, Encoder2DConfig, FusionConfig, LabeledSample, ModelConfig  # noqa: E402
from src.radar_dsp import RadarConfig  # noqa: E402
from src.synthgen import ClassLibrary, gen_dataset  # noqa: E402
from config.settings import SYNTH_CONFIG  # noqa: E402

AUDIO_WINDOW = 1024
AUDIO_HOP = 512


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="also run desk-scale experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiments (multi-core machine, tens of minutes)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def small_radar():
    """64 samples x 16 chirps x 4 frames; unambiguous range 12.6 m covers the synthetic flights"""
    return RadarConfig(samples_per_chirp=64, chirps_per_frame=16, frames_per_capture=4, sampling_rate=2.5e6)


@pytest.fixture
def small_model_config():
    return ModelConfig(
        acoustic=Encoder1DConfig(small_kernel=3, large_kernel=9, downsample_kernel=7, downsample_stride=8,
                                 num_se_blocks=2, widths=(4, 8), embed_dim=16, se_reduction=2),
        radar=Encoder2DConfig(num_se_blocks=2, kernels=(3, 5), widths=(4, 8), embed_dim=16, se_reduction=2),
        fusion=FusionConfig(n_heads=2, embed_dim=16, ffn_hidden=32),
        head_hidden=16,
        dropout=0.1,
        seed=5,
    )


@pytest.fixture
def random_samples():
    """Ten samples, two per class, with inputs sized for small_model_config"""
    rng = np.random.default_rng(11)
    return [
        LabeledSample(
            acoustic=rng.normal(size=AUDIO_WINDOW),
            radar=rng.uniform(size=(16, 64)),
            y_det=int(label != 0),
            y_cls=label,
            sample_id=f"s{label}_{i}",
        )
        for label in range(5)
        for i in range(2)
    ]


@pytest.fixture
def library():
    return ClassLibrary.from_dict(SYNTH_CONFIG)


@pytest.fixture
def mini_dataset(tmp_path, small_radar, library):
    """5 classes x 8 samples written to disk; returns the manifest"""
    return gen_dataset(library, 8, tmp_path / "synthetic", seed=3, radar_config=small_radar,
                       window=AUDIO_WINDOW, hop=AUDIO_HOP, progress=False)
