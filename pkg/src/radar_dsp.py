"""
Radar DSP Module
Parses raw FMCW captures and turns frames into clutter-filtered
range-Doppler maps and CA-CFAR detections
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np
from scipy import signal

from src.errors import ConfigError, DataIOError, DimensionError, SizeError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 3e8  # m/s, the value the radar datasheet arithmetic uses


@dataclass(frozen=True)
class RadarConfig:
    """FMCW chirp/frame parameters of one capture configuration"""
    start_frequency: float = 77e9
    samples_per_chirp: int = 256
    chirps_per_frame: int = 128
    frames_per_capture: int = 256
    sampling_rate: float = 10e6
    chirp_slope: float = 29.98e12
    bandwidth: float = 0.76e9
    chirp_repetition_interval: float = 1.014e-4
    frame_period: float = 0.04

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"radar.{f.name} must be > 0, got {getattr(self, f.name)}")

        swept = self.chirp_slope * self.samples_per_chirp / self.sampling_rate
        if abs(swept - self.bandwidth) > 0.02 * self.bandwidth:
            raise ConfigError(
                f"chirp_slope x sampling time sweeps {swept:.4g} Hz, "
                f"more than 2% away from bandwidth {self.bandwidth:.4g} Hz"
            )

        if self.chirps_per_frame * self.chirp_repetition_interval > self.frame_period:
            raise ConfigError(
                f"{self.chirps_per_frame} chirps x {self.chirp_repetition_interval} s "
                f"do not fit in frame_period {self.frame_period} s"
            )

    @property
    def carrier_wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.start_frequency

    @property
    def frame_shape(self):
        return (self.chirps_per_frame, self.samples_per_chirp)

    @classmethod
    def from_dict(cls, config: Dict) -> "RadarConfig":
        """Build from a settings section, ignoring keys that aren't fields"""
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in config.items() if k in names}
        for key in ("samples_per_chirp", "chirps_per_frame", "frames_per_capture"):
            if key in kwargs:
                kwargs[key] = int(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SampleLayout:
    """How complex ADC samples are laid out in a capture file"""
    name: str
    dtype: str
    order: str  # 'iq', 'qi' or 'dca1000'
    bytes_per_sample: int = 4


LAYOUTS = {
    "iq16le": SampleLayout("iq16le", "<i2", "iq"),
    "qi16le": SampleLayout("qi16le", "<i2", "qi"),
    "iq16be": SampleLayout("iq16be", ">i2", "iq"),
    # DCA1000 LVDS capture: two complex samples per 8 bytes, I0 I1 Q0 Q1
    "dca1000": SampleLayout("dca1000", "<i2", "dca1000"),
}


def get_layout(layout: Union[str, SampleLayout]) -> SampleLayout:
    if isinstance(layout, SampleLayout):
        return layout
    try:
        return LAYOUTS[layout]
    except KeyError:
        raise ConfigError(f"unknown sample layout '{layout}' (known: {', '.join(LAYOUTS)})")


@dataclass
class RadarCube:
    """Complex ADC samples indexed [frame][chirp][sample]"""
    data: np.ndarray
    config: RadarConfig

    def __post_init__(self):
        expected = (self.config.frames_per_capture,) + self.config.frame_shape
        if self.data.shape != expected:
            raise DimensionError(f"radar cube has shape {self.data.shape}, config expects {expected}")

    def frame(self, index: int) -> np.ndarray:
        return self.data[index]


@dataclass
class RangeDopplerMap:
    """Magnitudes indexed [doppler_bin][range_bin], zero Doppler centered"""
    magnitudes: np.ndarray
    range_resolution: float
    velocity_resolution: float
    zero_doppler_bin: int

    @property
    def shape(self):
        return self.magnitudes.shape

    @property
    def range_axis(self) -> np.ndarray:
        """Range in metres of every range bin"""
        return _axis(self.shape[1], self.range_resolution)

    @property
    def velocity_axis(self) -> np.ndarray:
        """Radial velocity in m/s of every Doppler bin"""
        return _axis(self.shape[0], self.velocity_resolution, self.zero_doppler_bin)


@dataclass(frozen=True)
class CfarConfig:
    guard_cells: int = 2
    training_cells: int = 4
    probability_of_false_alarm: float = 1e-3

    def __post_init__(self):
        if self.guard_cells < 0:
            raise ConfigError(f"cfar.guard_cells must be >= 0, got {self.guard_cells}")
        if self.training_cells < 1:
            raise ConfigError(f"cfar.training_cells must be >= 1, got {self.training_cells}")
        if not 0 < self.probability_of_false_alarm < 1:
            raise ConfigError(
                f"cfar.probability_of_false_alarm must be in (0, 1), got {self.probability_of_false_alarm}"
            )

    @property
    def window_size(self) -> int:
        return 2 * (self.guard_cells + self.training_cells) + 1

    @property
    def n_training(self) -> int:
        return self.window_size ** 2 - (2 * self.guard_cells + 1) ** 2

    @property
    def alpha(self) -> float:
        n = self.n_training
        return n * (self.probability_of_false_alarm ** (-1.0 / n) - 1.0)

    @classmethod
    def from_dict(cls, config: Dict) -> "CfarConfig":
        return cls(
            guard_cells=int(config.get("guard_cells", 2)),
            training_cells=int(config.get("training_cells", 4)),
            probability_of_false_alarm=float(config.get("probability_of_false_alarm", 1e-3)),
        )


class Detection(NamedTuple):
    doppler_bin: int
    range_bin: int
    cell_value: float
    threshold: float


@dataclass
class DetectionList:
    detections: List[Detection] = field(default_factory=list)

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def cells(self) -> set:
        return {(d.doppler_bin, d.range_bin) for d in self.detections}


# ---------------------------------------------------------------- capture I/O

def _decode(raw: np.ndarray, layout: SampleLayout) -> np.ndarray:
    raw = raw.astype(np.float64)
    if layout.order == "iq":
        return raw[0::2] + 1j * raw[1::2]
    if layout.order == "qi":
        return raw[1::2] + 1j * raw[0::2]
    quads = raw.reshape(-1, 4)
    return quads[:, :2].ravel() + 1j * quads[:, 2:].ravel()


def _encode(samples: np.ndarray, layout: SampleLayout) -> np.ndarray:
    i = np.clip(np.rint(samples.real), -32768, 32767)
    q = np.clip(np.rint(samples.imag), -32768, 32767)
    if layout.order == "dca1000":
        out = np.empty((i.size // 2, 4))
        out[:, :2] = i.reshape(-1, 2)
        out[:, 2:] = q.reshape(-1, 2)
        return out.ravel().astype(layout.dtype)
    out = np.empty(2 * i.size)
    first, second = (i, q) if layout.order == "iq" else (q, i)
    out[0::2] = first.ravel()
    out[1::2] = second.ravel()
    return out.astype(layout.dtype)


def _check_pairing(n_samples: int, layout: SampleLayout):
    if layout.order == "dca1000" and n_samples % 2:
        raise ConfigError(f"layout dca1000 needs an even number of complex samples, got {n_samples}")


def parse_radar_capture(data: bytes, config: RadarConfig, layout: Union[str, SampleLayout] = "iq16le") -> RadarCube:
    """
    Decode a raw capture into a [frame][chirp][sample] complex cube

    Integer ADC codes become floats without scaling.

    Raises:
        ConfigError: unknown layout tag
        SizeError: byte length doesn't match frames x chirps x samples
    """
    layout = get_layout(layout)
    n_samples = config.frames_per_capture * config.chirps_per_frame * config.samples_per_chirp
    _check_pairing(n_samples, layout)

    expected = n_samples * layout.bytes_per_sample
    if len(data) != expected:
        raise SizeError(f"radar capture ({layout.name})", expected, len(data))

    samples = _decode(np.frombuffer(data, dtype=layout.dtype), layout)
    cube = samples.reshape(config.frames_per_capture, config.chirps_per_frame, config.samples_per_chirp)
    return RadarCube(cube, config)


def serialize_radar_capture(cube: RadarCube, layout: Union[str, SampleLayout] = "iq16le") -> bytes:
    """Inverse of parse_radar_capture; values are rounded and clipped to int16"""
    layout = get_layout(layout)
    _check_pairing(cube.data.size, layout)
    return _encode(cube.data.ravel(), layout).tobytes()


def load_radar_frame(path: Path, config: RadarConfig, layout: Union[str, SampleLayout] = "iq16le",
                     frame_index: int = 0) -> np.ndarray:
    """
    Read a single frame of a capture without loading the whole file

    The file size is still validated against the full capture layout.
    """
    path = Path(path)
    layout = get_layout(layout)
    frame_samples = config.chirps_per_frame * config.samples_per_chirp
    _check_pairing(frame_samples, layout)
    frame_bytes = frame_samples * layout.bytes_per_sample

    try:
        size = path.stat().st_size
    except FileNotFoundError:
        raise DataIOError(f"radar capture not found: {path}")

    expected = frame_bytes * config.frames_per_capture
    if size != expected:
        raise SizeError(f"radar capture {path}", expected, size)
    if not 0 <= frame_index < config.frames_per_capture:
        raise DimensionError(
            f"frame index {frame_index} out of range for {config.frames_per_capture} frames in {path}"
        )

    with open(path, "rb") as f:
        f.seek(frame_index * frame_bytes)
        raw = np.frombuffer(f.read(frame_bytes), dtype=layout.dtype)
    return _decode(raw, layout).reshape(config.frame_shape)


# ---------------------------------------------------------------- processing

def _check_frame(frame: np.ndarray, config: Optional[RadarConfig]):
    if frame.ndim != 2:
        raise DimensionError(f"radar frame must be chirps x samples, got shape {frame.shape}")
    if config is not None and frame.shape != config.frame_shape:
        raise DimensionError(f"radar frame has shape {frame.shape}, config expects {config.frame_shape}")


def zero_doppler_filter(frame: np.ndarray, config: Optional[RadarConfig] = None) -> np.ndarray:
    """Remove static returns: subtract the slow-time mean of every fast-time column"""
    _check_frame(frame, config)
    return frame - frame.mean(axis=0, keepdims=True)


def _axis(n_bins: int, resolution: float, zero_bin: int = 0) -> np.ndarray:
    return (np.arange(n_bins) - zero_bin) * resolution


def range_resolution(config: RadarConfig) -> float:
    return SPEED_OF_LIGHT / (2.0 * config.bandwidth)


def velocity_resolution(config: RadarConfig) -> float:
    return config.carrier_wavelength / (2.0 * config.chirps_per_frame * config.chirp_repetition_interval)


def range_axis(config: RadarConfig) -> np.ndarray:
    """Range in metres of every range bin"""
    return _axis(config.samples_per_chirp, range_resolution(config))


def velocity_axis(config: RadarConfig) -> np.ndarray:
    """Radial velocity in m/s of every (centered) Doppler bin"""
    return _axis(config.chirps_per_frame, velocity_resolution(config), config.chirps_per_frame // 2)


def compute_range_doppler(frame: np.ndarray, config: RadarConfig, window: bool = False) -> RangeDopplerMap:
    """
    Range FFT along fast time, Doppler FFT along slow time

    Forward transforms are unnormalized. The Doppler axis is rotated so zero
    Doppler sits at bin chirps_per_frame // 2.
    """
    _check_frame(frame, config)
    if window:
        frame = frame * signal.windows.hann(config.samples_per_chirp, sym=False)[None, :]
        frame = frame * signal.windows.hann(config.chirps_per_frame, sym=False)[:, None]

    range_fft = np.fft.fft(frame, axis=1)
    doppler_fft = np.fft.fftshift(np.fft.fft(range_fft, axis=0), axes=0)

    return RangeDopplerMap(
        magnitudes=np.abs(doppler_fft),
        range_resolution=range_resolution(config),
        velocity_resolution=velocity_resolution(config),
        zero_doppler_bin=config.chirps_per_frame // 2,
    )


def process_frame(frame: np.ndarray, config: RadarConfig, filter_zero_doppler: bool = True,
                  window: bool = False) -> RangeDopplerMap:
    """Mixing output frame -> (clutter filter) -> range-Doppler map"""
    if filter_zero_doppler:
        frame = zero_doppler_filter(frame, config)
    return compute_range_doppler(frame, config, window=window)


def process_capture(cube: RadarCube, filter_zero_doppler: bool = True, window: bool = False,
                    workers: int = 1) -> List[RangeDopplerMap]:
    """Range-Doppler maps of every frame; result order never depends on workers"""
    def _one(index):
        return process_frame(cube.frame(index), cube.config, filter_zero_doppler, window)

    indices = range(cube.config.frames_per_capture)
    if workers <= 1:
        return [_one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, indices))


def cfar_2d(rd_map: Union[RangeDopplerMap, np.ndarray], cfg: CfarConfig) -> DetectionList:
    """
    2-D cell-averaging CFAR over a range-Doppler map

    Each cell whose full window fits is compared with alpha times the mean of
    its training ring (square ring outside the guard square). Border cells are
    never detected.

    Raises:
        ConfigError: window larger than the map
    """
    cells = rd_map.magnitudes if isinstance(rd_map, RangeDopplerMap) else np.asarray(rd_map, dtype=float)
    size = cfg.window_size
    if cells.shape[0] < size or cells.shape[1] < size:
        raise ConfigError(f"CFAR window {size}x{size} larger than map {cells.shape[0]}x{cells.shape[1]}")

    kernel = np.ones((size, size))
    inner = slice(cfg.training_cells, cfg.training_cells + 2 * cfg.guard_cells + 1)
    kernel[inner, inner] = 0.0

    # 'valid' keeps exactly the cells whose window fits
    noise = signal.correlate2d(cells, kernel, mode="valid") / cfg.n_training
    threshold = cfg.alpha * noise

    margin = cfg.guard_cells + cfg.training_cells
    under_test = cells[margin:cells.shape[0] - margin, margin:cells.shape[1] - margin]
    hits = np.argwhere(under_test > threshold)

    detections = [
        Detection(int(d + margin), int(r + margin), float(under_test[d, r]), float(threshold[d, r]))
        for d, r in hits
    ]
    logger.debug(f"CFAR: {len(detections)} detections, alpha={cfg.alpha:.3f}")
    return DetectionList(detections)


def to_model_input(rd_map: Union[RangeDopplerMap, np.ndarray]) -> np.ndarray:
    """log(1 + magnitude), min-max scaled to [0, 1]; constant maps become zeros"""
    mags = rd_map.magnitudes if isinstance(rd_map, RangeDopplerMap) else np.asarray(rd_map, dtype=float)
    if mags.size == 0:
        raise DimensionError("range-Doppler map is empty")

    x = np.log1p(mags)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)
