import logging

import numpy as np
import pytest

from src.acoustic import AudioClip, write_wav
from src.dataset import (
    CLASS_NAMES, DatasetManifest, SampleRecord, SampleStore, balance_by_upsampling, index_real_dataset,
    read_manifest, stratified_split, write_manifest,
)
from src.errors import BalanceError, ConfigError, DataIOError, DomainError, ParseError, SplitError
from src.radar_dsp import RadarCube, serialize_radar_capture

from conftest import AUDIO_HOP, AUDIO_WINDOW


def make_records(counts):
    """counts[label] records per class"""
    return [
        SampleRecord(
            sample_id=f"{CLASS_NAMES[label]}/f/{i:05d}",
            acoustic_path=f"{CLASS_NAMES[label]}/f.wav",
            acoustic_offset=0,
            radar_path=f"{CLASS_NAMES[label]}/f.bin",
            radar_frame=i,
            class_label=label,
            detection_label=int(label != 0),
        )
        for label, n in enumerate(counts)
        for i in range(n)
    ]


def test_record_label_consistency():
    with pytest.raises(DomainError):
        SampleRecord("x", "a.wav", 0, "a.bin", 0, class_label=2, detection_label=0)
    with pytest.raises(DomainError):
        SampleRecord("x", "a.wav", 0, "a.bin", 0, class_label=0, detection_label=0, provenance="scraped")


def test_manifest_round_trip(tmp_path):
    manifest = DatasetManifest(make_records([2, 1, 1, 1, 1]), tmp_path)
    write_manifest(manifest, tmp_path / "manifest.jsonl")
    loaded = read_manifest(tmp_path / "manifest.jsonl")
    assert loaded.records == manifest.records
    assert loaded.root == tmp_path
    assert '"class_name": "non_drone"' in (tmp_path / "manifest.jsonl").read_text().splitlines()[0]


def test_manifest_bad_line(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"sample_id": "x"\n')
    with pytest.raises(ParseError):
        read_manifest(path)


def test_manifest_missing(tmp_path):
    with pytest.raises(DataIOError):
        read_manifest(tmp_path / "manifest.jsonl")


def test_split_fifteen_per_class():
    records = make_records([100] * 5)
    train, test = stratified_split(records, 0.15, seed=0)
    assert DatasetManifest(test).class_counts() == {label: 15 for label in range(5)}
    assert len(train) == 425


def test_split_partitions_the_set():
    records = make_records([37, 12, 25, 9, 40])
    train, test = stratified_split(records, 0.2, seed=[1, 0])
    ids_train = {r.sample_id for r in train}
    ids_test = {r.sample_id for r in test}
    assert not ids_train & ids_test
    assert ids_train | ids_test == {r.sample_id for r in records}


def test_split_is_deterministic():
    records = make_records([30] * 5)
    assert stratified_split(records, 0.15, seed=4) == stratified_split(records, 0.15, seed=4)
    assert stratified_split(records, 0.15, seed=4)[1] != stratified_split(records, 0.15, seed=5)[1]


def test_split_at_collected_counts():
    records = make_records([2432, 2048, 2048, 2048, 2048])
    _, test = stratified_split(records, 0.15, seed=0)
    assert abs(len(test) - 1598) <= 3


def test_split_needs_two_per_class():
    with pytest.raises(SplitError):
        stratified_split(make_records([5, 1, 5, 5, 5]), 0.15, seed=0)


def test_split_fraction_range():
    with pytest.raises(ConfigError):
        stratified_split(make_records([5] * 5), 1.0, seed=0)


def test_upsampling_at_collected_counts():
    records = make_records([2432, 2048, 2048, 2048, 2048])
    balanced = balance_by_upsampling(records, seed=0)
    assert sum(r.detection_label == 0 for r in balanced) == 8192
    assert sum(r.detection_label == 1 for r in balanced) == 8192
    assert balanced[:len(records)] == records


def test_upsampling_single_non_drone_record():
    records = make_records([1, 10])
    balanced = balance_by_upsampling(records, seed=0)
    copies = [r for r in balanced if r.detection_label == 0]
    assert len(copies) == 10
    assert all(r == records[0] for r in copies)


def test_upsampling_leaves_balanced_set_alone():
    records = make_records([8, 2, 2, 2, 2])
    assert balance_by_upsampling(records, seed=0) == records


def test_upsampling_needs_both_sides():
    with pytest.raises(BalanceError):
        balance_by_upsampling(make_records([0, 3, 3]), seed=0)
    with pytest.raises(BalanceError):
        balance_by_upsampling(make_records([3]), seed=0)


def test_sample_store_shapes(mini_dataset, small_radar):
    store = SampleStore(mini_dataset, small_radar, AUDIO_WINDOW)
    sample = store.load(mini_dataset.records[-1])
    assert sample.acoustic.shape == (AUDIO_WINDOW,)
    assert np.abs(sample.acoustic).max() == pytest.approx(1.0)
    assert sample.radar.shape == small_radar.frame_shape
    assert sample.radar.max() == 1.0
    assert sample.y_det == 1


def test_sample_store_workers_agree(mini_dataset, small_radar):
    store = SampleStore(mini_dataset, small_radar, AUDIO_WINDOW)
    serial = store.load_many(mini_dataset.records, workers=1)
    threaded = store.load_many(mini_dataset.records, workers=4)
    for a, b in zip(serial, threaded):
        assert a.sample_id == b.sample_id
        assert np.array_equal(a.radar, b.radar)
        assert np.array_equal(a.acoustic, b.acoustic)


def write_flight(folder, stem, small_radar, n_audio):
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(len(stem))
    shape = (small_radar.frames_per_capture,) + small_radar.frame_shape
    cube = RadarCube(rng.integers(-100, 100, size=shape) + 1j * rng.integers(-100, 100, size=shape), small_radar)
    (folder / f"{stem}.bin").write_bytes(serialize_radar_capture(cube))
    (folder / f"{stem}.wav").write_bytes(write_wav(AudioClip(rng.uniform(-0.5, 0.5, size=n_audio))))


def test_index_real_dataset(tmp_path, small_radar):
    full = AUDIO_WINDOW + 3 * AUDIO_HOP
    write_flight(tmp_path / "non_drone", "take1", small_radar, full)
    write_flight(tmp_path / "1_matrice", "take1", small_radar, full)
    # audio long enough for two segments only
    write_flight(tmp_path / "phantom_4_pro_v2", "take7", small_radar, AUDIO_WINDOW + AUDIO_HOP)
    (tmp_path / "notes").mkdir()

    manifest = index_real_dataset(tmp_path, small_radar, AUDIO_WINDOW, AUDIO_HOP)
    assert manifest.class_counts() == {0: 4, 1: 4, 4: 2}
    assert all(r.provenance == "real" for r in manifest)
    assert manifest.records[1].sample_id == "matrice_300_rtk/take1/0001"
    assert {r.acoustic_offset for r in manifest if r.class_label == 4} == {0, AUDIO_HOP}

    store = SampleStore(manifest, small_radar, AUDIO_WINDOW)
    assert store.load(manifest.records[0]).radar.shape == small_radar.frame_shape


def test_index_skips_truncated_capture(tmp_path, small_radar, caplog):
    full = AUDIO_WINDOW + 3 * AUDIO_HOP
    write_flight(tmp_path / "non_drone", "take1", small_radar, full)
    write_flight(tmp_path / "non_drone", "take2", small_radar, full)
    capture = tmp_path / "non_drone" / "take2.bin"
    capture.write_bytes(capture.read_bytes()[:-4])

    with caplog.at_level(logging.WARNING):
        manifest = index_real_dataset(tmp_path, small_radar, AUDIO_WINDOW, AUDIO_HOP)
    assert manifest.class_counts() == {0: 4}
    assert {r.radar_path for r in manifest} == {"non_drone/take1.bin"}
    assert "take2.bin" in caplog.text


def test_index_empty_root(tmp_path, small_radar):
    with pytest.raises(DataIOError):
        index_real_dataset(tmp_path, small_radar, AUDIO_WINDOW, AUDIO_HOP)
