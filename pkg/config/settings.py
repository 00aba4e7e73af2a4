"""
DroneFuse Configuration Settings
"""
from pathlib import Path

# Base Directory
BASE_DIR = Path(__file__).resolve().parent.parent

# Directory Paths
DATA_DIR = BASE_DIR / "data"
SYNTH_DIR = DATA_DIR / "synthetic"
RUNS_DIR = BASE_DIR / "runs"
LOGS_DIR = BASE_DIR / "logs"

# Radar Settings (AWR2243 capture)
RADAR_CONFIG = {
    "start_frequency": 77e9,  # Hz
    "samples_per_chirp": 256,
    "chirps_per_frame": 128,
    "frames_per_capture": 256,
    "sampling_rate": 10e6,  # samples/s
    "chirp_slope": 29.98e12,  # Hz/s
    "bandwidth": 0.76e9,  # Hz
    "chirp_repetition_interval": 1.014e-4,  # s, back-solved from 0.15 m/s
    "frame_period": 0.04,  # s
    "layout": "iq16le",
    "filter_zero_doppler": True,
    "window": False,  # Hann window before the FFTs
}

# CA-CFAR Settings
CFAR_CONFIG = {
    "guard_cells": 2,
    "training_cells": 4,
    "probability_of_false_alarm": 1e-3,
}

# Acoustic Settings
AUDIO_CONFIG = {
    "sample_rate": 16000,
    "window": 16000,  # 1 s segments
    "hop": 8000,  # 50% overlap
}

# Model Settings (full-size encoders)
MODEL_CONFIG = {
    "small_kernel": 7,
    "large_kernel": 107,
    "downsample_kernel": 15,
    "downsample_stride": 8,
    "blocks_1d": 5,
    "widths_1d": [16, 32, 64, 64, 128],
    "blocks_2d": 4,
    "kernels_2d": [3, 3, 5, 7],
    "widths_2d": [16, 32, 64, 128],
    "se_reduction": 4,
    "embed_dim": 128,
    "n_heads": 8,
    "n_layers": 1,
    "ffn_hidden": 256,
    "head_hidden": 64,
}

# Training Settings (hyperparameters stated for the fusion model)
TRAIN_CONFIG = {
    "epochs": 60,
    "batch_size": 64,
    "learning_rate": 5e-5,
    "weight_decay": 0.4,
    "dropout": 0.4,
    "loss_lambda": 1.0,
    "seed": 0,
    "early_stopping_patience": 8,
    "test_fraction": 0.15,
    "validation_fraction": 0.10,
    "modalities": "acoustic,radar",
}

# Noise sweep (SNR levels in dB; the clean row is always appended)
NOISE_CONFIG = {
    "snr_levels": [6.0, 12.0, 18.0, 24.0],
}

# Synthetic scene generator
SYNTH_CONFIG = {
    "n_per_class": 64,
    "seed": 0,
    "blade_pass_frequencies": [110.0, 160.0, 220.0, 300.0],
    "micro_doppler_offsets": [350.0, 500.0, 650.0, 800.0],  # Hz
    "harmonics": 6,
    "harmonic_decay": 0.7,
    "am_rate": 4.0,  # Hz
    "background_level": 0.01,  # relative power
    "bpf_jitter": 4.0,  # Hz
    "range_min": 3.0,  # m
    "range_max": 9.0,  # m
    "speed_max": 3.0,  # m/s
    "target_amplitude": 4096.0,  # ADC codes
    "noise_std": 8.0,  # ADC codes
    "clutter_amplitude": 2048.0,  # ADC codes
}

# Desk-scale presets: reduced radar frame and model so a full ablation
# trains on a desktop CPU. Merged over the defaults above.
DESK_RADAR_CONFIG = {
    "samples_per_chirp": 64,
    "chirps_per_frame": 32,
    "frames_per_capture": 8,
    "sampling_rate": 2.5e6,
}

DESK_AUDIO_CONFIG = {
    "window": 4096,
    "hop": 2048,
}

DESK_MODEL_CONFIG = {
    "downsample_stride": 16,
    "blocks_1d": 3,
    "widths_1d": [8, 16, 32],
    "kernels_2d": [3, 3, 5, 7],
    "widths_2d": [8, 8, 16, 16],
    "embed_dim": 32,
    "n_heads": 4,
    "ffn_hidden": 64,
    "head_hidden": 32,
}

DESK_TRAIN_CONFIG = {
    "learning_rate": 2e-3,
    "weight_decay": 1e-4,
    "dropout": 0.1,
    "batch_size": 32,
}

# Logging
LOG_CONFIG = {
    "log_file": LOGS_DIR / "dronefuse.log",
    "log_level": "INFO",
    "log_format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
}

# Sections understood by the config loader, in display order
SECTIONS = {
    "radar": RADAR_CONFIG,
    "cfar": CFAR_CONFIG,
    "audio": AUDIO_CONFIG,
    "model": MODEL_CONFIG,
    "train": TRAIN_CONFIG,
    "noise": NOISE_CONFIG,
    "synth": SYNTH_CONFIG,
}

DESK_PRESET = {
    "radar": DESK_RADAR_CONFIG,
    "audio": DESK_AUDIO_CONFIG,
    "model": DESK_MODEL_CONFIG,
    "train": DESK_TRAIN_CONFIG,
}

