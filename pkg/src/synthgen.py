"""
Synthetic Scene Generator
Writes radar captures and WAV recordings of simulated drone flights in the
same on-disk formats as recorded data, plus their manifest
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from src.acoustic import AudioClip, normalize, write_wav
from src.dataset import CLASS_NAMES, DatasetManifest, SampleRecord, write_manifest
from src.errors import ConfigError, DataIOError, SpecError
from src.model import NON_DRONE
from src.radar_dsp import (
    SPEED_OF_LIGHT, RadarConfig, RadarCube, range_resolution, serialize_radar_capture, velocity_resolution,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class DroneAcousticSpec:
    """Rotor tone: harmonics of the blade-pass frequency under slow amplitude modulation"""
    blade_pass_frequency: float
    harmonics: int = 6
    harmonic_decay: float = 0.7
    am_rate: float = 4.0
    am_depth: float = 0.3
    background_level: float = 0.01
    tonal: bool = True

    def __post_init__(self):
        if self.tonal and not 50 < self.blade_pass_frequency < 2000:
            raise SpecError(f"blade-pass frequency {self.blade_pass_frequency} Hz outside (50, 2000)")
        if self.harmonics < 1:
            raise SpecError(f"harmonic count must be >= 1, got {self.harmonics}")
        if not 0 <= self.am_depth < 1:
            raise SpecError(f"modulation depth must be in [0, 1), got {self.am_depth}")
        if self.background_level < 0:
            raise SpecError(f"background level must be >= 0, got {self.background_level}")


@dataclass(frozen=True)
class RadarSceneSpec:
    """One frame's scene; target_range None means no target"""
    target_range: Optional[float] = None
    radial_velocity: float = 0.0
    target_amplitude: float = 4096.0
    micro_doppler_offset: Optional[float] = None
    micro_doppler_amplitude: float = 0.3
    clutter: Tuple[Tuple[float, float], ...] = ()
    noise_std: float = 8.0

    def validate(self, config: RadarConfig):
        max_range = config.samples_per_chirp * range_resolution(config)
        max_speed = config.chirps_per_frame / 2 * velocity_resolution(config)
        ranges = [r for r, _ in self.clutter]
        if self.target_range is not None:
            ranges.append(self.target_range)
            if abs(self.radial_velocity) >= max_speed:
                raise SpecError(f"radial velocity {self.radial_velocity} m/s beyond unambiguous {max_speed:.3f} m/s")
        for r in ranges:
            if not 0 <= r < max_range:
                raise SpecError(f"range {r} m outside unambiguous range [0, {max_range:.3f}) m")
        if self.noise_std < 0:
            raise SpecError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class ClassSignature:
    name: str
    acoustic: DroneAcousticSpec
    micro_doppler_offset: Optional[float]
    drone: bool


@dataclass(frozen=True)
class ClassLibrary:
    """Per-class signatures (index = class label) plus the jitter ranges of a flight"""
    classes: Tuple[ClassSignature, ...]
    bpf_jitter: float = 4.0
    range_min: float = 3.0
    range_max: float = 9.0
    speed_max: float = 3.0
    target_amplitude: float = 4096.0
    micro_doppler_amplitude: float = 0.3
    clutter_amplitude: float = 2048.0
    n_clutter: int = 2
    noise_std: float = 8.0

    def __post_init__(self):
        if len(self.classes) != len(CLASS_NAMES):
            raise SpecError(f"class library needs {len(CLASS_NAMES)} classes, got {len(self.classes)}")
        if self.classes[NON_DRONE].drone or not all(c.drone for i, c in enumerate(self.classes) if i != NON_DRONE):
            raise SpecError(f"class {NON_DRONE} must be the only non-drone class")
        fundamentals = sorted(c.acoustic.blade_pass_frequency for c in self.classes if c.drone)
        for low, high in zip(fundamentals, fundamentals[1:]):
            if high - low < 20:
                raise SpecError(f"blade-pass frequencies {low} and {high} Hz are closer than 20 Hz")
        if not 0 < self.range_min < self.range_max:
            raise SpecError(f"bad flight range interval [{self.range_min}, {self.range_max}]")

    @classmethod
    def from_dict(cls, synth: Dict) -> "ClassLibrary":
        """Build from the 'synth' config section"""
        bpfs = synth["blade_pass_frequencies"]
        offsets = synth["micro_doppler_offsets"]
        if len(bpfs) != len(CLASS_NAMES) - 1 or len(offsets) != len(CLASS_NAMES) - 1:
            raise ConfigError(
                f"synth.blade_pass_frequencies and synth.micro_doppler_offsets need "
                f"{len(CLASS_NAMES) - 1} entries each"
            )

        def tone(bpf: float, tonal: bool = True) -> DroneAcousticSpec:
            return DroneAcousticSpec(bpf, synth["harmonics"], synth["harmonic_decay"], synth["am_rate"],
                                     background_level=synth["background_level"], tonal=tonal)

        classes = [ClassSignature(CLASS_NAMES[NON_DRONE], tone(0.0, tonal=False), None, False)]
        classes += [
            ClassSignature(name, tone(float(bpf)), float(offset), True)
            for name, bpf, offset in zip(CLASS_NAMES[1:], bpfs, offsets)
        ]
        return cls(
            classes=tuple(classes),
            bpf_jitter=synth["bpf_jitter"],
            range_min=synth["range_min"],
            range_max=synth["range_max"],
            speed_max=synth["speed_max"],
            target_amplitude=synth["target_amplitude"],
            clutter_amplitude=synth["clutter_amplitude"],
            noise_std=synth["noise_std"],
        )


def synth_acoustic(spec: DroneAcousticSpec, duration: float, rate: int = 16000, seed=0) -> AudioClip:
    """
    Peak-normalized rotor tone plus Gaussian background

    Harmonics at or above Nyquist are left out. A non-tonal spec yields the
    background alone.

    Raises:
        SpecError: fundamental at or above Nyquist, or non-positive duration
    """
    if duration <= 0:
        raise SpecError(f"duration must be > 0, got {duration}")
    n = int(round(duration * rate))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate

    if spec.tonal:
        if spec.blade_pass_frequency >= rate / 2:
            raise SpecError(f"blade-pass frequency {spec.blade_pass_frequency} Hz aliases at {rate} Hz")
        phases = rng.uniform(0.0, 2 * np.pi, size=spec.harmonics + 1)
        tone = np.zeros(n)
        for h in range(1, spec.harmonics + 1):
            if h * spec.blade_pass_frequency >= rate / 2:
                break
            tone += spec.harmonic_decay ** (h - 1) * np.sin(2 * np.pi * h * spec.blade_pass_frequency * t + phases[h])
        tone *= 1.0 + spec.am_depth * np.sin(2 * np.pi * spec.am_rate * t + phases[0])
        power = float(np.mean(tone ** 2))
        samples = tone + rng.normal(0.0, math.sqrt(spec.background_level * power), size=n)
    else:
        samples = rng.normal(0.0, 1.0, size=n)

    return normalize(AudioClip(samples, rate))


def _beat(distance: float, config: RadarConfig) -> np.ndarray:
    """Fast-time phasor of a return at the given range"""
    f_beat = 2.0 * distance * config.chirp_slope / SPEED_OF_LIGHT
    return np.exp(2j * np.pi * f_beat * np.arange(config.samples_per_chirp) / config.sampling_rate)


def synth_radar_frame(spec: RadarSceneSpec, config: RadarConfig, seed=0) -> np.ndarray:
    """
    Beat-signal frame [chirps, samples] of one scene

        s[n, m] = A exp(j2pi(f_b m / f_s + f_d n T_r))  with f_b = 2RS/c, f_d = 2v/lambda

    plus symmetric micro-Doppler sidebands at f_d +/- offset, static clutter
    at zero Doppler and complex Gaussian noise.
    """
    spec.validate(config)
    slow_time = np.arange(config.chirps_per_frame)[:, None] * config.chirp_repetition_interval
    frame = np.zeros(config.frame_shape, dtype=np.complex128)

    if spec.target_range is not None:
        fast = _beat(spec.target_range, config)[None, :]
        f_doppler = 2.0 * spec.radial_velocity / config.carrier_wavelength
        frame += spec.target_amplitude * np.exp(2j * np.pi * f_doppler * slow_time) * fast
        if spec.micro_doppler_offset:
            sideband = spec.target_amplitude * spec.micro_doppler_amplitude
            for sign in (1.0, -1.0):
                f_md = f_doppler + sign * spec.micro_doppler_offset
                frame += sideband * np.exp(2j * np.pi * f_md * slow_time) * fast

    for distance, amplitude in spec.clutter:
        frame += amplitude * _beat(distance, config)[None, :]

    if spec.noise_std > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, spec.noise_std / math.sqrt(2), size=config.frame_shape + (2,))
        frame += noise[..., 0] + 1j * noise[..., 1]
    return frame


def _fold(position: float, low: float, high: float) -> Tuple[float, float]:
    """Reflect a path into [low, high]; returns (position, direction sign)"""
    span = high - low
    phase = (position - low) % (2 * span)
    if phase <= span:
        return low + phase, 1.0
    return high - (phase - span), -1.0


def flight_scenes(library: ClassLibrary, label: int, config: RadarConfig, rng: np.random.Generator,
                  n_frames: int) -> List[RadarSceneSpec]:
    """Per-frame scenes of one flight: the target moves radially and bounces inside the range interval"""
    signature = library.classes[label]
    clutter = tuple(
        (float(rng.uniform(0.5, library.range_min)), float(rng.uniform(0.5, 1.0) * library.clutter_amplitude))
        for _ in range(library.n_clutter)
    )
    start = rng.uniform(library.range_min, library.range_max)
    speed = rng.uniform(-library.speed_max, library.speed_max)
    md_offset = signature.micro_doppler_offset

    scenes = []
    for k in range(n_frames):
        if not signature.drone:
            scenes.append(RadarSceneSpec(None, clutter=clutter, noise_std=library.noise_std))
            continue
        # positive radial velocity closes range
        position, direction = _fold(start - speed * k * config.frame_period, library.range_min, library.range_max)
        scenes.append(RadarSceneSpec(
            target_range=float(position),
            radial_velocity=float(speed * direction),
            target_amplitude=library.target_amplitude,
            micro_doppler_offset=md_offset,
            micro_doppler_amplitude=library.micro_doppler_amplitude,
            clutter=clutter,
            noise_std=library.noise_std,
        ))
    return scenes


def _write_flight(library: ClassLibrary, label: int, flight: int, n_samples: int, out_dir: Path,
                  config: RadarConfig, window: int, hop: int, rate: int, layout: str,
                  seed: int) -> List[SampleRecord]:
    rng = np.random.default_rng([seed, label, flight])
    signature = library.classes[label]
    name = CLASS_NAMES[label]
    stem = f"flight_{flight:04d}"

    scenes = flight_scenes(library, label, config, rng, config.frames_per_capture)
    frames = [
        synth_radar_frame(scene, config, seed=[seed, label, flight, k])
        for k, scene in enumerate(scenes)
    ]
    capture = serialize_radar_capture(RadarCube(np.stack(frames), config), layout)

    tone = signature.acoustic
    if tone.tonal:
        tone = replace(tone, blade_pass_frequency=tone.blade_pass_frequency
                       + rng.uniform(-library.bpf_jitter, library.bpf_jitter))
    duration = (window + (n_samples - 1) * hop) / rate
    clip = synth_acoustic(tone, duration, rate, seed=[seed, label, flight, config.frames_per_capture])

    folder = out_dir / name
    try:
        folder.mkdir(parents=True, exist_ok=True)
        (folder / f"{stem}.bin").write_bytes(capture)
        (folder / f"{stem}.wav").write_bytes(write_wav(clip))
    except OSError as e:
        raise DataIOError(f"cannot write flight {name}/{stem}: {e}")

    return [
        SampleRecord(
            sample_id=f"{name}/{stem}/{k:04d}",
            acoustic_path=f"{name}/{stem}.wav",
            acoustic_offset=k * hop,
            radar_path=f"{name}/{stem}.bin",
            radar_frame=k,
            class_label=label,
            detection_label=int(signature.drone),
            provenance="synthetic",
        )
        for k in range(n_samples)
    ]


def gen_dataset(library: ClassLibrary, n_per_class: int, out_dir: Path, seed: int,
                radar_config: RadarConfig, window: int = 16000, hop: int = 8000, rate: int = 16000,
                layout: str = "iq16le", workers: int = 1, progress: bool = True) -> DatasetManifest:
    """
    Generate n_per_class samples per class and write manifest.jsonl

    Samples are grouped into flights of frames_per_capture frames; each flight
    is one capture file plus one WAV recording, and sample k of a flight pairs
    frame k with the audio segment at offset k * hop. Every flight draws from
    its own keyed stream, so worker count never changes the bytes written.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create output directory {out_dir}: {e}")

    per_flight = radar_config.frames_per_capture
    jobs = []
    for label in range(len(CLASS_NAMES)):
        for flight in range(math.ceil(n_per_class / per_flight)):
            jobs.append((label, flight, min(per_flight, n_per_class - flight * per_flight)))

    def run(job):
        label, flight, n_samples = job
        return _write_flight(library, label, flight, n_samples, out_dir, radar_config,
                             window, hop, rate, layout, seed)

    logger.info(f"Generating {n_per_class} samples x {len(CLASS_NAMES)} classes in {len(jobs)} flights")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(tqdm(pool.map(run, jobs), total=len(jobs), desc="Flights", disable=not progress))

    manifest = DatasetManifest([record for flight in results for record in flight], out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest
