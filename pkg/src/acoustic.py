"""
Acoustic Module
Loads and conditions microphone recordings: WAV decoding, mono mix-down,
peak normalization, fixed-length segmentation and SNR-controlled noise
"""
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.io import wavfile

from src.errors import ConfigError, DataIOError, DimensionError, DomainError, WavFormatError

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0

SeedLike = Union[int, Sequence[int]]


@dataclass
class AudioClip:
    """Waveform as [channels, samples] floats"""
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    @property
    def mono(self) -> np.ndarray:
        if self.channels != 1:
            raise DimensionError(f"expected a mono clip, got {self.channels} channels")
        return self.samples[0]


@dataclass
class AudioSegment:
    samples: np.ndarray
    source_id: str
    offset: int


def _chunks(data: bytes):
    """Yield (chunk id, payload offset, declared size) for every RIFF sub-chunk"""
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = int.from_bytes(data[pos + 4:pos + 8], "little")
        yield chunk_id, pos + 8, size
        pos += 8 + size + (size & 1)


def _validate_wav(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF":
        raise WavFormatError("RIFF header: missing 'RIFF' tag")
    if data[8:12] != b"WAVE":
        raise WavFormatError(f"RIFF header: form type is {data[8:12]!r}, expected b'WAVE'")

    fmt = None
    for chunk_id, start, size in _chunks(data):
        if chunk_id == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise WavFormatError(f"fmt chunk: size {size} too small")
            fmt = data[start:start + 16]
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError("data chunk: appears before the fmt chunk")
            if start + size > len(data):
                raise WavFormatError(
                    f"data chunk: declares {size} bytes but only {len(data) - start} are present (truncated)"
                )
            break
    else:
        raise WavFormatError("data chunk: not found")

    audio_format = int.from_bytes(fmt[0:2], "little")
    bits = int.from_bytes(fmt[14:16], "little")
    if audio_format not in (1, 0xFFFE):
        raise WavFormatError(f"fmt chunk: audio format {audio_format} unsupported, expected PCM (1)")
    if bits != 16:
        raise WavFormatError(f"fmt chunk: bits per sample {bits} unsupported, expected 16")


def load_wav(data: bytes) -> AudioClip:
    """
    Decode a 16-bit PCM RIFF/WAVE file

    PCM codes are divided by 32768 so samples fall in [-1, 1).

    Raises:
        WavFormatError: malformed header, non-PCM16 encoding or truncated data
    """
    _validate_wav(data)
    try:
        rate, pcm = wavfile.read(io.BytesIO(data))
    except ValueError as e:
        raise WavFormatError(f"wav decode: {e}")

    if pcm.dtype != np.int16:
        raise WavFormatError(f"fmt chunk: decoded sample type {pcm.dtype} unsupported, expected int16")

    samples = pcm.astype(np.float64) / PCM16_SCALE
    samples = samples[None, :] if samples.ndim == 1 else samples.T
    return AudioClip(samples, int(rate))


def load_wav_file(path: Path) -> AudioClip:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataIOError(f"wav file not found: {path}")
    try:
        return load_wav(data)
    except WavFormatError as e:
        raise WavFormatError(f"{path}: {e}")


def write_wav(clip: AudioClip) -> bytes:
    """Encode as PCM16; samples outside [-1, 1) are clipped"""
    codes = np.clip(np.rint(clip.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    buffer = io.BytesIO()
    wavfile.write(buffer, clip.sample_rate, codes[0] if clip.channels == 1 else codes.T)
    return buffer.getvalue()


def to_mono(clip: AudioClip) -> AudioClip:
    """Sample-wise mean of all channels"""
    if clip.channels == 1:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    return AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate)


def normalize(clip: AudioClip) -> AudioClip:
    """Peak normalization; all-zero clips come back unchanged"""
    if clip.length == 0:
        raise DimensionError("cannot normalize an empty clip")
    peak = np.abs(clip.samples).max()
    if peak == 0:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    return AudioClip(clip.samples / peak, clip.sample_rate)


def preprocess(clip: AudioClip) -> AudioClip:
    """Mono mix-down followed by peak normalization"""
    return normalize(to_mono(clip))


def segment(clip: AudioClip, window: int, hop: int, source_id: str = "") -> List[AudioSegment]:
    """
    Cut a mono clip into fixed windows at offsets 0, hop, 2*hop, ...

    The trailing partial window is dropped; a clip shorter than the window
    yields an empty list.
    """
    if window < 1 or hop < 1:
        raise ConfigError(f"segment window and hop must be >= 1, got window={window}, hop={hop}")
    samples = clip.mono

    return [
        AudioSegment(samples[offset:offset + window].copy(), source_id, offset)
        for offset in range(0, len(samples) - window + 1, hop)
    ]


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def add_noise_at_snr(x: np.ndarray, snr_db: float, seed: SeedLike) -> np.ndarray:
    """
    Add zero-mean Gaussian noise of variance power(x) / 10^(snr_db / 10)

    Raises:
        DomainError: x has zero power (SNR undefined)
    """
    x = np.asarray(x, dtype=np.float64)
    power = signal_power(x)
    if power == 0:
        raise DomainError("cannot set an SNR on a zero-power signal")

    rng = np.random.default_rng(seed)
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    return x + rng.normal(0.0, sigma, size=x.shape)


def measure_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    """
    10 log10(power(clean) / power(noisy - clean)) in dB

    Identical inputs return +inf.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise DimensionError(f"signal length {clean.shape} differs from noisy length {noisy.shape}")

    noise_power = signal_power(noisy - clean)
    if noise_power == 0:
        return math.inf
    power = signal_power(clean)
    if power == 0:
        return -math.inf
    return 10.0 * math.log10(power / noise_power)


def write_segment_f32(path: Path, samples: np.ndarray):
    """Raw little-endian float32 segment file"""
    np.asarray(samples, dtype="<f4").tofile(path)


def read_segment_f32(path: Path, offset: int = 0, length: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"segment file not found: {path}")
    count = -1 if length is None else length
    samples = np.fromfile(path, dtype="<f4", count=count, offset=4 * offset)
    if length is not None and samples.size != length:
        raise DataIOError(f"{path}: wanted {length} samples at offset {offset}, file holds {samples.size}")
    return samples.astype(np.float64)
