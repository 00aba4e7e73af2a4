"""
Example Usage of DroneFuse Components

This script demonstrates how to use DroneFuse programmatically
without the command line.
"""
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

# Add project to path
sys.path.insert(0, str(Path(__file__).parent))

from src.acoustic import add_noise_at_snr, measure_snr
from src.configuration import load_config
from src.dataset import SampleStore
from src.gradcheck_suite import run_suite
from src.model import FusionModel, ModelConfig, count_mult_adds
from src.nn_core import count_parameters
from src.radar_dsp import CfarConfig, RadarConfig, cfar_2d, process_frame, range_resolution, velocity_resolution
from src.synthgen import ClassLibrary, DroneAcousticSpec, RadarSceneSpec, gen_dataset, synth_acoustic, synth_radar_frame
from src.training import TrainConfig, run_training


def example_1_range_doppler():
    """Example: Range-Doppler map and CFAR of one simulated frame"""
    print("=" * 60)
    print("Example 1: Range-Doppler Map")
    print("=" * 60)

    config = RadarConfig()
    print(f"\nRange resolution:    {range_resolution(config):.4f} m")
    print(f"Velocity resolution: {velocity_resolution(config):.4f} m/s")

    # A target at 10 m closing at 3 m/s, in front of a static wall at 2 m
    scene = RadarSceneSpec(target_range=10.0, radial_velocity=3.0, clutter=((2.0, 2048.0),))
    frame = synth_radar_frame(scene, config, seed=1)

    for filtered in (False, True):
        rd_map = process_frame(frame, config, filter_zero_doppler=filtered)
        detections = cfar_2d(rd_map, CfarConfig())
        doppler, range_bin = divmod(int(rd_map.magnitudes.argmax()), rd_map.shape[1])
        print(f"\nZero-Doppler filter {'on' if filtered else 'off'}:")
        print(f"  Peak at Doppler bin {doppler}, range bin {range_bin}")
        print(f"  CFAR detections: {len(detections)}")

    print("\n✅ Done!\n")


def example_2_acoustic_noise():
    """Example: Rotor tone at a controlled SNR"""
    print("=" * 60)
    print("Example 2: Acoustic Noise")
    print("=" * 60)

    clip = synth_acoustic(DroneAcousticSpec(blade_pass_frequency=160.0), duration=1.0, seed=3)
    for snr in (24, 12, 6):
        noisy = add_noise_at_snr(clip.mono, snr, seed=[3, snr])
        print(f"  target {snr:>2} dB -> measured {measure_snr(clip.mono, noisy):.2f} dB")

    print("\n✅ Done!\n")


def example_3_train_desk_model():
    """Example: Generate a small synthetic dataset and train a desk-scale model"""
    print("=" * 60)
    print("Example 3: Desk-Scale Training")
    print("=" * 60)

    config = load_config(preset="desk")
    radar_config = RadarConfig.from_dict(config["radar"])

    with tempfile.TemporaryDirectory() as tmp:
        print("\nGenerating 5 classes x 32 samples...")
        manifest = gen_dataset(ClassLibrary.from_dict(config["synth"]), 32, Path(tmp), seed=0,
                               radar_config=radar_config, window=config["audio"]["window"],
                               hop=config["audio"]["hop"])
        store = SampleStore(manifest, radar_config, config["audio"]["window"])

        cfg = replace(TrainConfig.from_dict(config["train"]), epochs=5)
        experiment = run_training(manifest, store, ModelConfig.from_sections(config["model"], config["train"]),
                                  cfg, progress=True)

    metrics = experiment.test_metrics
    print(f"\nBest epoch: {experiment.result.best_epoch}")
    print(f"Detection accuracy:      {metrics.detection_accuracy:.3f}")
    print(f"Classification accuracy: {metrics.classification_accuracy:.3f}")
    print("\n✅ Done!\n")


def example_4_gradient_checks():
    """Example: Finite-difference checks of every layer"""
    print("=" * 60)
    print("Example 4: Gradient Checks")
    print("=" * 60)

    report = run_suite()
    for line in report.lines():
        print(f"  {line}")
    print("\n✅ Done!\n")


def example_5_model_size():
    """Example: Parameter and multiply-add counts of both presets"""
    print("=" * 60)
    print("Example 5: Model Size")
    print("=" * 60)

    for preset in ("full", "desk"):
        config = load_config(preset=preset)
        model = FusionModel(ModelConfig.from_sections(config["model"], config["train"]))
        radar_config = RadarConfig.from_dict(config["radar"])
        mult_adds = count_mult_adds(model, config["audio"]["window"], radar_config.frame_shape)
        print(f"\n{preset}:")
        print(f"  Parameters: {count_parameters(model):,}")
        print(f"  Mult-adds:  {mult_adds:,}")

    print("\n✅ Done!\n")


def main():
    """Run all examples"""
    print("\n" + "=" * 60)
    print(" DroneFuse - Example Usage Script")
    print("=" * 60)
    print("\nChoose an example to run:")
    print("1. Range-Doppler Map")
    print("2. Acoustic Noise")
    print("3. Desk-Scale Training")
    print("4. Gradient Checks")
    print("5. Model Size")
    print("6. Run All Examples")
    print("0. Exit")

    choice = input("\nEnter choice (0-6): ").strip()

    examples = {
        '1': example_1_range_doppler,
        '2': example_2_acoustic_noise,
        '3': example_3_train_desk_model,
        '4': example_4_gradient_checks,
        '5': example_5_model_size,
    }

    if choice == '0':
        print("\nGoodbye!")
        return
    elif choice == '6':
        print("\nRunning all examples...\n")
        for func in examples.values():
            func()
            input("\nPress Enter to continue to next example...")
    elif choice in examples:
        examples[choice]()
    else:
        print("\nInvalid choice!")


if __name__ == "__main__":
    main()
