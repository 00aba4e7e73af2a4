"""
Dataset Module
Sample manifests (JSON lines), indexing of recorded flights, conditioned
sample loading, stratified splitting and class balancing
"""
import json
import logging
import math
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.acoustic import load_wav_file, normalize, read_segment_f32, to_mono, AudioClip
from src.errors import BalanceError, ConfigError, DataIOError, DimensionError, DomainError, ParseError, SplitError
from src.model import LabeledSample, NON_DRONE
from src.radar_dsp import RadarConfig, get_layout, load_radar_frame, process_frame, to_model_input

logger = logging.getLogger(__name__)

CLASS_NAMES = (
    "non_drone",
    "matrice_300_rtk",
    "mavic_2_enterprise_dual",
    "phantom_4_pro_plus",
    "phantom_4_pro_v2",
)
PROVENANCES = ("real", "synthetic")

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class SampleRecord:
    """
    One training sample: an acoustic segment and a radar frame of the same flight

    Paths are relative to the manifest's directory.
    """
    sample_id: str
    acoustic_path: str
    acoustic_offset: int
    radar_path: str
    radar_frame: int
    class_label: int
    detection_label: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if not 0 <= self.class_label < len(CLASS_NAMES):
            raise DomainError(f"{self.sample_id}: class label {self.class_label} outside 0..{len(CLASS_NAMES) - 1}")
        if self.detection_label != int(self.class_label != NON_DRONE):
            raise DomainError(
                f"{self.sample_id}: detection label {self.detection_label} "
                f"inconsistent with class {CLASS_NAMES[self.class_label]}"
            )
        if self.provenance not in PROVENANCES:
            raise DomainError(f"{self.sample_id}: provenance must be one of {PROVENANCES}, got {self.provenance!r}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_label]

    def to_dict(self) -> Dict:
        record = asdict(self)
        record["class_name"] = self.class_name
        return record

    @classmethod
    def from_dict(cls, data: Dict) -> "SampleRecord":
        data = dict(data)
        class_name = data.pop("class_name", None)
        record = cls(**data)
        if class_name is not None and class_name != record.class_name:
            raise DomainError(f"{record.sample_id}: class_name {class_name!r} != table entry {record.class_name!r}")
        return record


@dataclass
class DatasetManifest:
    records: List[SampleRecord]
    root: Path = Path(".")
    class_names: Tuple[str, ...] = CLASS_NAMES

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def class_counts(self) -> Dict[int, int]:
        counts = defaultdict(int)
        for record in self.records:
            counts[record.class_label] += 1
        return dict(sorted(counts.items()))

    def subset(self, records: Sequence[SampleRecord]) -> "DatasetManifest":
        return DatasetManifest(list(records), self.root, self.class_names)


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    """One JSON object per line, keys sorted, records in manifest order"""
    path = Path(path)
    try:
        with open(path, "w") as f:
            for record in manifest.records:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write manifest {path}: {e}")
    logger.info(f"Wrote manifest with {len(manifest)} records to {path}")
    return path


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"manifest not found: {path}")

    records = []
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise ParseError(f"{path}:{line_number}: bad manifest record: {e}")
    logger.info(f"Loaded manifest with {len(records)} records from {path}")
    return DatasetManifest(records, path.parent)


# ---------------------------------------------------------------- recorded data

def _class_label(folder: str) -> Optional[int]:
    key = folder.lower().replace("-", "_").replace(" ", "_")
    for label, name in enumerate(CLASS_NAMES):
        if key == name or key == str(label) or key.startswith(f"{label}_"):
            return label
    return None


def index_real_dataset(root: Path, radar_config: RadarConfig, window: int, hop: int,
                       layout: str = "iq16le") -> DatasetManifest:
    """
    Build a manifest over recorded flights

    Expects one folder per class under root, each holding radar .bin captures
    and .wav recordings. Captures pair with recordings of the same file stem,
    otherwise by sorted order. Frame k of a capture pairs with the audio
    segment at offset k * hop; the pair count is capped by whichever runs out.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataIOError(f"dataset root not found: {root}")
    layout = get_layout(layout)
    capture_bytes = (radar_config.frames_per_capture * radar_config.chirps_per_frame * radar_config.samples_per_chirp
                     * layout.bytes_per_sample)

    records = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        label = _class_label(folder.name)
        if label is None:
            logger.warning(f"Skipping folder with no matching class: {folder.name}")
            continue

        captures = sorted(folder.glob("*.bin"))
        recordings = {p.stem: p for p in sorted(folder.glob("*.wav"))}
        if set(c.stem for c in captures) <= set(recordings):
            pairs = [(c, recordings[c.stem]) for c in captures]
        else:
            pairs = list(zip(captures, sorted(recordings.values())))
            if len(captures) != len(recordings):
                logger.warning(f"{folder.name}: {len(captures)} captures but {len(recordings)} recordings")

        for capture, recording in pairs:
            size = capture.stat().st_size
            if size != capture_bytes:
                logger.warning(f"Skipping {folder.name}/{capture.name}: expected {capture_bytes} bytes, got {size}")
                continue
            clip = load_wav_file(recording)
            n_segments = max(0, (clip.length - window) // hop + 1)
            count = min(n_segments, radar_config.frames_per_capture)
            for k in range(count):
                records.append(SampleRecord(
                    sample_id=f"{CLASS_NAMES[label]}/{capture.stem}/{k:04d}",
                    acoustic_path=recording.relative_to(root).as_posix(),
                    acoustic_offset=k * hop,
                    radar_path=capture.relative_to(root).as_posix(),
                    radar_frame=k,
                    class_label=label,
                    detection_label=int(label != NON_DRONE),
                    provenance="real",
                ))
            logger.debug(f"{capture.name} + {recording.name}: {count} samples")

    if not records:
        raise DataIOError(f"no paired captures and recordings found under {root}")
    manifest = DatasetManifest(records, root)
    logger.info(f"Indexed {len(records)} samples, per class: {manifest.class_counts()}")
    return manifest


# ---------------------------------------------------------------- loading

class SampleStore:
    """
    Loads conditioned model inputs for manifest records

    Radar: one frame read from disk -> (zero-Doppler filter) -> range-Doppler
    map -> log-scaled [0, 1] map. Acoustic: the recording is mixed to mono
    once and cached; each segment is then peak-normalized.
    """

    def __init__(self, manifest: DatasetManifest, radar_config: RadarConfig, window: int,
                 layout: str = "iq16le", filter_zero_doppler: bool = True, hann_window: bool = False):
        self.manifest = manifest
        self.radar_config = radar_config
        self.window = window
        self.layout = get_layout(layout)
        self.filter_zero_doppler = filter_zero_doppler
        self.hann_window = hann_window
        self._clips: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _recording(self, relative: str) -> np.ndarray:
        with self._lock:
            cached = self._clips.get(relative)
        if cached is None:
            cached = to_mono(load_wav_file(self.manifest.resolve(relative))).mono
            with self._lock:
                self._clips[relative] = cached
        return cached

    def acoustic(self, record: SampleRecord) -> np.ndarray:
        if record.acoustic_path.endswith(".f32"):
            samples = read_segment_f32(self.manifest.resolve(record.acoustic_path), record.acoustic_offset,
                                       self.window)
        else:
            recording = self._recording(record.acoustic_path)
            samples = recording[record.acoustic_offset:record.acoustic_offset + self.window]
            if samples.size != self.window:
                raise DimensionError(
                    f"{record.sample_id}: segment at offset {record.acoustic_offset} runs past the end "
                    f"of {record.acoustic_path} ({recording.size} samples)"
                )
        return normalize(AudioClip(samples)).mono

    def radar(self, record: SampleRecord) -> np.ndarray:
        frame = load_radar_frame(self.manifest.resolve(record.radar_path), self.radar_config,
                                 self.layout, record.radar_frame)
        rd_map = process_frame(frame, self.radar_config, self.filter_zero_doppler, self.hann_window)
        return to_model_input(rd_map)

    def load(self, record: SampleRecord) -> LabeledSample:
        return LabeledSample(
            acoustic=self.acoustic(record),
            radar=self.radar(record),
            y_det=record.detection_label,
            y_cls=record.class_label,
            sample_id=record.sample_id,
        )

    def load_many(self, records: Sequence[SampleRecord], workers: int = 1) -> List[LabeledSample]:
        """Load in record order; the worker count never changes the result"""
        if workers <= 1:
            return [self.load(r) for r in records]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.load, records))


# ---------------------------------------------------------------- splitting

def _check_fraction(fraction: float, name: str):
    if not 0 < fraction < 1:
        raise ConfigError(f"{name} must be in (0, 1), got {fraction}")


def stratified_split(records: Union[DatasetManifest, Sequence[SampleRecord]], test_fraction: float,
                     seed: SeedLike) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """
    Per-class random split

    Each class sends ceil(n * fraction) records (at least 1, at most n - 1)
    to the test side. Both sides keep the input order.

    Raises:
        SplitError: a class has fewer than 2 records
    """
    _check_fraction(test_fraction, "test fraction")
    records = list(records)
    by_class = defaultdict(list)
    for index, record in enumerate(records):
        by_class[record.class_label].append(index)

    rng = np.random.default_rng(seed)
    test_indices = set()
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 2:
            raise SplitError(f"class {CLASS_NAMES[label]} has {len(members)} record(s); a split needs at least 2")
        n_test = math.ceil(round(len(members) * test_fraction, 9))
        n_test = min(max(n_test, 1), len(members) - 1)
        chosen = rng.permutation(len(members))[:n_test]
        test_indices.update(members[i] for i in chosen)

    train = [r for i, r in enumerate(records) if i not in test_indices]
    test = [r for i, r in enumerate(records) if i in test_indices]
    return train, test


def balance_by_upsampling(records: Sequence[SampleRecord], seed: SeedLike) -> List[SampleRecord]:
    """
    Resample non-drone records with replacement until they match the drone total

    Drone records are untouched; appended copies follow the originals.

    Raises:
        BalanceError: no drone or no non-drone records
    """
    records = list(records)
    non_drone = [r for r in records if r.detection_label == 0]
    n_drone = len(records) - len(non_drone)
    if not non_drone or not n_drone:
        raise BalanceError(f"need both sides to balance: {len(non_drone)} non-drone, {n_drone} drone records")

    deficit = n_drone - len(non_drone)
    if deficit <= 0:
        return records
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(non_drone), size=deficit)
    logger.info(f"Upsampling non-drone records from {len(non_drone)} to {n_drone}")
    return records + [non_drone[i] for i in picks]
