from dataclasses import replace

import numpy as np
import pytest
from scipy import signal
from sklearn.neighbors import NearestCentroid

from src.dataset import read_manifest
from src.errors import ConfigError, SpecError
from src.radar_dsp import RadarConfig, process_frame
from src.synthgen import (
    MANIFEST_NAME, ClassLibrary, DroneAcousticSpec, RadarSceneSpec, flight_scenes, gen_dataset, synth_acoustic,
    synth_radar_frame,
)

from config.settings import SYNTH_CONFIG
from conftest import AUDIO_HOP, AUDIO_WINDOW

FULL = RadarConfig()


def test_pure_tone_peak():
    spec = DroneAcousticSpec(160.0, harmonics=1, am_depth=0.0, background_level=0.0)
    clip = synth_acoustic(spec, duration=1.0, seed=0)
    spectrum = np.abs(np.fft.rfft(clip.mono))
    assert np.fft.rfftfreq(clip.length, 1 / 16000)[spectrum.argmax()] == pytest.approx(160.0)
    assert np.abs(clip.mono).max() == pytest.approx(1.0)


def test_harmonics_above_nyquist_are_dropped():
    spec = DroneAcousticSpec(1500.0, harmonics=8, background_level=0.0)
    clip = synth_acoustic(spec, duration=0.5, rate=4000, seed=0)
    freqs, psd = signal.welch(clip.mono, fs=4000, nperseg=400)
    assert freqs[psd.argmax()] == pytest.approx(1500.0, abs=10)
    # the second harmonic would alias to 1 kHz
    assert psd[np.argmin(np.abs(freqs - 1000.0))] < 1e-6 * psd.max()


def test_non_drone_audio_is_broadband():
    library = ClassLibrary.from_dict(SYNTH_CONFIG)
    _, psd = signal.welch(synth_acoustic(library.classes[0].acoustic, 1.0, seed=1).mono, fs=16000, nperseg=256)
    assert psd[1:-1].max() / np.median(psd[1:-1]) < 2.0

    _, tonal = signal.welch(synth_acoustic(library.classes[2].acoustic, 1.0, seed=1).mono, fs=16000, nperseg=256)
    assert tonal.max() / np.median(tonal) > 100.0


def test_drone_tone_peaks_on_a_harmonic(library):
    rng = np.random.default_rng(13)
    for signature in library.classes[1:]:
        for seed in range(3):
            bpf = signature.acoustic.blade_pass_frequency + rng.uniform(-library.bpf_jitter, library.bpf_jitter)
            clip = synth_acoustic(replace(signature.acoustic, blade_pass_frequency=bpf), 1.0, seed=seed)
            spectrum = np.abs(np.fft.rfft(clip.mono))
            peak = np.fft.rfftfreq(clip.length, 1 / 16000)[spectrum.argmax()]
            harmonics = bpf * np.arange(1, signature.acoustic.harmonics + 1)
            assert np.abs(harmonics - peak).min() <= 1.0


def test_classes_separate_by_nearest_centroid(library):
    rng = np.random.default_rng(14)

    def features(label, seed):
        spec = library.classes[label].acoustic
        if spec.tonal:
            jitter = rng.uniform(-library.bpf_jitter, library.bpf_jitter)
            spec = replace(spec, blade_pass_frequency=spec.blade_pass_frequency + jitter, background_level=0.0)
        _, psd = signal.welch(synth_acoustic(spec, 0.5, seed=seed).mono, fs=16000, nperseg=256)
        return psd / psd.sum()

    labels = np.repeat(np.arange(5), 8)
    train = np.array([features(label, [0, i]) for i, label in enumerate(labels)])
    test = np.array([features(label, [1, i]) for i, label in enumerate(labels)])
    classifier = NearestCentroid().fit(train, labels)
    assert np.mean(classifier.predict(test) == labels) >= 0.9


def test_acoustic_is_seeded():
    spec = DroneAcousticSpec(220.0)
    assert np.array_equal(synth_acoustic(spec, 0.5, seed=[1, 2]).mono, synth_acoustic(spec, 0.5, seed=[1, 2]).mono)
    assert not np.array_equal(synth_acoustic(spec, 0.5, seed=1).mono, synth_acoustic(spec, 0.5, seed=2).mono)


def test_acoustic_spec_limits():
    with pytest.raises(SpecError):
        DroneAcousticSpec(30.0)
    with pytest.raises(SpecError):
        DroneAcousticSpec(160.0, am_depth=1.0)
    with pytest.raises(SpecError):
        synth_acoustic(DroneAcousticSpec(160.0), duration=0.0)


def test_target_lands_in_expected_bins():
    frame = synth_radar_frame(RadarSceneSpec(target_range=10.0, radial_velocity=3.0), FULL, seed=0)
    rd_map = process_frame(frame, FULL)
    assert divmod(int(rd_map.magnitudes.argmax()), rd_map.shape[1]) == (84, 51)


def test_micro_doppler_sidebands():
    spec = RadarSceneSpec(target_range=10.0, radial_velocity=0.0, micro_doppler_offset=650.0, noise_std=0.0,
                          micro_doppler_amplitude=0.5)
    rd_map = process_frame(synth_radar_frame(spec, FULL), FULL, filter_zero_doppler=True)
    # 650 Hz is about 8.4 Doppler bins away from zero
    column = rd_map.magnitudes[:, 51]
    peaks = sorted(np.argsort(column)[-2:])
    assert peaks == [56, 72]


def test_clutter_removed_by_filter():
    spec = RadarSceneSpec(clutter=((1.5, 2048.0), (2.5, 1024.0)))
    frame = synth_radar_frame(spec, FULL, seed=4)
    unfiltered = process_frame(frame, FULL, filter_zero_doppler=False).magnitudes.max()
    filtered = process_frame(frame, FULL, filter_zero_doppler=True).magnitudes.max()
    assert 20 * np.log10(unfiltered / filtered) >= 40.0


def test_scene_outside_unambiguous_range(small_radar):
    with pytest.raises(SpecError):
        synth_radar_frame(RadarSceneSpec(target_range=13.0), small_radar)
    with pytest.raises(SpecError):
        synth_radar_frame(RadarSceneSpec(target_range=5.0, radial_velocity=50.0), small_radar)


def test_flight_stays_inside_range_interval(library):
    rng = np.random.default_rng(0)
    scenes = flight_scenes(library, 3, FULL, rng, 200)
    assert all(library.range_min <= s.target_range <= library.range_max for s in scenes)
    assert all(abs(s.radial_velocity) <= library.speed_max for s in scenes)
    assert all(s.micro_doppler_offset == 650.0 for s in scenes)
    assert all(s.target_range is None for s in flight_scenes(library, 0, FULL, rng, 5))


def test_library_rejects_close_fundamentals():
    synth = dict(SYNTH_CONFIG, blade_pass_frequencies=[110.0, 120.0, 220.0, 300.0])
    with pytest.raises(SpecError):
        ClassLibrary.from_dict(synth)


def test_library_needs_one_entry_per_drone_class():
    with pytest.raises(ConfigError):
        ClassLibrary.from_dict(dict(SYNTH_CONFIG, micro_doppler_offsets=[350.0]))


def test_gen_dataset_counts(tmp_path, small_radar, library):
    manifest = gen_dataset(library, 4, tmp_path, seed=0, radar_config=small_radar,
                           window=AUDIO_WINDOW, hop=AUDIO_HOP, progress=False)
    assert len(manifest) == 20
    assert manifest.class_counts() == {label: 4 for label in range(5)}
    assert read_manifest(tmp_path / MANIFEST_NAME).records == manifest.records
    assert (tmp_path / "non_drone" / "flight_0000.bin").stat().st_size == 4 * 16 * 64 * 4
    assert manifest.records[5].sample_id == "matrice_300_rtk/flight_0000/0001"


def test_gen_dataset_partial_flight(tmp_path, small_radar, library):
    manifest = gen_dataset(library, 6, tmp_path, seed=0, radar_config=small_radar,
                           window=AUDIO_WINDOW, hop=AUDIO_HOP, progress=False)
    assert len(manifest) == 30
    assert [r.radar_frame for r in manifest if r.class_label == 1] == [0, 1, 2, 3, 0, 1]


def test_gen_dataset_is_reproducible(tmp_path, small_radar, library):
    a = gen_dataset(library, 4, tmp_path / "a", seed=9, radar_config=small_radar,
                    window=AUDIO_WINDOW, hop=AUDIO_HOP, workers=1, progress=False)
    b = gen_dataset(library, 4, tmp_path / "b", seed=9, radar_config=small_radar,
                    window=AUDIO_WINDOW, hop=AUDIO_HOP, workers=3, progress=False)
    files = sorted(p.relative_to(a.root) for p in a.root.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b.root) for p in b.root.rglob("*") if p.is_file())
    for relative in files:
        assert (a.root / relative).read_bytes() == (b.root / relative).read_bytes()


def test_gen_dataset_seed_changes_data(tmp_path, small_radar, library):
    gen_dataset(library, 4, tmp_path / "a", seed=1, radar_config=small_radar,
                window=AUDIO_WINDOW, hop=AUDIO_HOP, progress=False)
    gen_dataset(library, 4, tmp_path / "b", seed=2, radar_config=small_radar,
                window=AUDIO_WINDOW, hop=AUDIO_HOP, progress=False)
    relative = "phantom_4_pro_plus/flight_0000.bin"
    assert (tmp_path / "a" / relative).read_bytes() != (tmp_path / "b" / relative).read_bytes()


def test_gen_dataset_rejects_empty_request(tmp_path, small_radar, library):
    with pytest.raises(ConfigError):
        gen_dataset(library, 0, tmp_path, seed=0, radar_config=small_radar, progress=False)


def test_desk_radar_covers_flights(library):
    desk = replace(FULL, samples_per_chirp=64, chirps_per_frame=32, frames_per_capture=8, sampling_rate=2.5e6)
    scenes = flight_scenes(library, 1, desk, np.random.default_rng(3), 8)
    for scene in scenes:
        scene.validate(desk)
