"""
DroneFuse - Radar + Acoustic Drone Detection and Classification
Main Entry Point

Usage:
    python main.py rd-map capture.bin --cfar          # Range-Doppler map of one frame
    python main.py synth --preset desk --n-per-class 256
    python main.py train data/synthetic/manifest.jsonl --preset desk
    python main.py ablate data/synthetic/manifest.jsonl --preset desk
    python main.py noise-sweep MANIFEST CHECKPOINT [CHECKPOINT ...]
    python main.py gradcheck
    python main.py --help                             # Show help
"""
import sys
import logging
from pathlib import Path
import argparse

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from config.settings import (  # noqa: E402
    LOG_CONFIG, LOGS_DIR, NOISE_CONFIG, RADAR_CONFIG, RUNS_DIR, SYNTH_CONFIG, SYNTH_DIR, TRAIN_CONFIG,
)

__version__ = "1.0.0"

logger = logging.getLogger("dronefuse")

# Keys a checkpoint carries besides its architecture, so eval and noise-sweep
# condition inputs and re-derive the test split exactly as training did
RUN_SECTIONS = ("radar", "audio")
RUN_TRAIN_KEYS = ("train.seed", "train.test_fraction", "train.validation_fraction", "train.modalities",
                  "train.batch_size")

# Training flags of train and ablate, folded into the overrides after --set
TRAIN_FLAGS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "weight_decay": "train.weight_decay",
    "dropout": "train.dropout",
    "test_fraction": "train.test_fraction",
}


def check_dependencies():
    """
    Check if all required dependencies are installed
    Returns True if all OK, False if missing dependencies
    """
    missing_packages = []
    required_packages = [
        ('numpy', 'numpy'),
        ('scipy', 'scipy'),
        ('sklearn', 'scikit-learn'),
        ('PIL', 'Pillow'),
        ('tqdm', 'tqdm'),
        ('dotenv', 'python-dotenv'),
    ]

    for module_name, package_name in required_packages:
        try:
            __import__(module_name)
        except ImportError:
            missing_packages.append(package_name)

    if missing_packages:
        print("error: dependency: missing packages: " + ", ".join(missing_packages), file=sys.stderr)
        print("Install them with: pip install -r requirements.txt", file=sys.stderr)
        return False
    return True


def setup_logging(level: str = None, quiet: bool = False):
    """Setup logging configuration"""
    LOGS_DIR.mkdir(parents=True, exist_ok=True)
    console = logging.StreamHandler()
    if quiet:
        console.setLevel(logging.WARNING)

    logging.basicConfig(
        level=level or LOG_CONFIG['log_level'],
        format=LOG_CONFIG['log_format'],
        handlers=[
            logging.FileHandler(LOG_CONFIG['log_file']),
            console
        ],
        force=True,
    )


def show_progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


# ---------------------------------------------------------------- shared plumbing

def resolve_config(args):
    """Defaults < --config file < --set overrides < training flags < --seed"""
    from src.configuration import load_config, flatten

    overrides = list(args.overrides)
    for dest, key in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"synth.seed={args.seed}"]
    config = load_config(args.config, overrides, args.preset)
    logger.info(f"Configuration ({args.preset} preset): {flatten(config)}")
    return config


def adopt_checkpoint_run(config, architecture, origin: str):
    """Take the data conditioning and split keys a checkpoint was trained with"""
    from src.configuration import apply_values

    carried = {
        key: value for key, value in architecture.items()
        if key.split(".")[0] in RUN_SECTIONS or key in RUN_TRAIN_KEYS
    }
    apply_values(config, carried, origin)
    logger.debug(f"Adopted from {origin}: {carried}")


def run_extras(config):
    """The RUN_SECTIONS and RUN_TRAIN_KEYS values of a resolved config, for save_model"""
    from src.configuration import flatten

    values = flatten(config, RUN_SECTIONS)
    values.update({key: value for key, value in flatten(config, ["train"]).items() if key in RUN_TRAIN_KEYS})
    return values


def open_store(config, manifest):
    from src.dataset import SampleStore
    from src.radar_dsp import RadarConfig

    radar = config["radar"]
    return SampleStore(manifest, RadarConfig.from_dict(radar), config["audio"]["window"], radar["layout"],
                       radar["filter_zero_doppler"], radar["window"])


def output_dir(path: Path) -> Path:
    from src.errors import DataIOError

    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create output directory {path}: {e}")
    return path


def write_experiment(experiment, directory: Path, config) -> Path:
    """Checkpoint, training log, test metrics and confusion matrix of one trained model"""
    from src.dataset import CLASS_NAMES
    from src.model import save_model
    from src.reporting import write_confusion_csv, write_metrics, write_training_log

    directory = output_dir(directory)
    extras = run_extras(config)
    extras["train.modalities"] = ",".join(experiment.modalities)
    save_model(experiment.model, directory / "checkpoint", extras)
    write_training_log(experiment.result.log, directory / "training_log.csv")
    metrics = experiment.test_metrics.as_row()
    metrics["best_epoch"] = experiment.result.best_epoch
    write_metrics(metrics, directory / "metrics.csv")
    write_confusion_csv(experiment.test_metrics.confusion, CLASS_NAMES, directory / "confusion.csv")
    return directory


def print_metrics(title: str, metrics):
    print("\n" + "=" * 60)
    print(f"  {title}")
    print("=" * 60)
    for key, value in metrics.as_row().items():
        print(f"  {key:<26} {value:.4f}" if isinstance(value, float) else f"  {key:<26} {value}")


# ---------------------------------------------------------------- commands

def cmd_rd_map(args):
    """Range-Doppler map (CSV + heatmap) of one frame, optionally with CFAR detections"""
    from src.radar_dsp import (
        CfarConfig, RadarConfig, cfar_2d, load_radar_frame, process_frame, range_resolution, velocity_resolution,
    )
    from src.reporting import save_heatmap, write_detections_csv, write_rd_map_csv

    config = resolve_config(args)
    radar_config = RadarConfig.from_dict(config["radar"])
    frame = load_radar_frame(args.capture, radar_config, args.layout or config["radar"]["layout"], args.frame)
    rd_map = process_frame(frame, radar_config, args.filter_zero_doppler, config["radar"]["window"])
    logger.info(
        f"Frame {args.frame}: range resolution {range_resolution(radar_config):.4f} m, "
        f"velocity resolution {velocity_resolution(radar_config):.4f} m/s"
    )

    out_dir = output_dir(args.out_dir)
    stem = f"{args.capture.stem}_frame{args.frame:04d}"
    write_rd_map_csv(rd_map, out_dir / f"{stem}_rd_map.csv")

    detections = None
    if args.cfar:
        detections = cfar_2d(rd_map, CfarConfig.from_dict(config["cfar"]))
        write_detections_csv(detections, rd_map, out_dir / f"{stem}_detections.csv")
        logger.info(f"CFAR: {len(detections)} detections")
    save_heatmap(rd_map, out_dir / f"{stem}_rd_map.png", detections=detections)

    doppler, range_bin = divmod(int(rd_map.magnitudes.argmax()), rd_map.shape[1])
    print(f"peak: doppler bin {doppler}, range bin {range_bin}, "
          f"{range_bin * rd_map.range_resolution:.2f} m, "
          f"{(doppler - rd_map.zero_doppler_bin) * rd_map.velocity_resolution:+.2f} m/s")


def cmd_synth(args):
    """Generate a synthetic dataset and its manifest"""
    from src.errors import UsageError
    from src.radar_dsp import RadarConfig
    from src.synthgen import ClassLibrary, MANIFEST_NAME, gen_dataset

    config = resolve_config(args)
    n_per_class = args.n_per_class if args.n_per_class is not None else config["synth"]["n_per_class"]
    if n_per_class < 1:
        raise UsageError(f"--n-per-class must be >= 1, got {n_per_class}")

    manifest = gen_dataset(
        ClassLibrary.from_dict(config["synth"]),
        n_per_class,
        args.out_dir,
        config["synth"]["seed"],
        RadarConfig.from_dict(config["radar"]),
        window=config["audio"]["window"],
        hop=config["audio"]["hop"],
        rate=config["audio"]["sample_rate"],
        layout=config["radar"]["layout"],
        workers=args.threads,
        progress=show_progress(args),
    )
    print(f"{args.out_dir / MANIFEST_NAME} ({len(manifest)} records)")


def cmd_index(args):
    """Build a manifest over a recorded dataset folder"""
    from src.dataset import index_real_dataset, write_manifest
    from src.radar_dsp import RadarConfig

    config = resolve_config(args)
    manifest = index_real_dataset(args.root, RadarConfig.from_dict(config["radar"]), config["audio"]["window"],
                                  config["audio"]["hop"], config["radar"]["layout"])
    out = args.out or args.root / "manifest.jsonl"
    write_manifest(manifest, out)
    print(f"{out} ({len(manifest)} records)")


def cmd_train(args):
    """Train one model on a manifest and score it on the held-out split"""
    from src.dataset import read_manifest
    from src.model import ModelConfig
    from src.training import TrainConfig, run_training

    config = resolve_config(args)
    if args.modalities:
        config["train"]["modalities"] = args.modalities
    manifest = read_manifest(args.manifest)
    cfg = TrainConfig.from_dict(config["train"])
    experiment = run_training(manifest, open_store(config, manifest),
                              ModelConfig.from_sections(config["model"], config["train"]), cfg,
                              workers=args.threads, progress=show_progress(args))
    directory = write_experiment(experiment, args.out_dir, config)
    print_metrics(f"Test metrics ({len(experiment.test_samples)} samples)", experiment.test_metrics)
    print(f"\nCheckpoint: {directory / 'checkpoint'}")


def load_evaluation_samples(args, config, manifest):
    """Test split of the checkpoint's run, or every record with --all"""
    from src.training import TrainConfig, held_out_split, load_samples

    records = manifest.records
    if not args.all:
        records = held_out_split(records, TrainConfig.from_dict(config["train"]))[1]
    return load_samples(open_store(config, manifest), records, args.threads)


def cmd_eval(args):
    """Metrics and confusion matrix of a checkpoint"""
    from src.dataset import CLASS_NAMES, read_manifest
    from src.model import load_model
    from src.reporting import write_confusion_csv, write_metrics
    from src.training import evaluate, parse_modalities

    config = resolve_config(args)
    model, architecture = load_model(args.checkpoint)
    adopt_checkpoint_run(config, architecture, str(args.checkpoint))
    manifest = read_manifest(args.manifest)
    samples = load_evaluation_samples(args, config, manifest)

    metrics = evaluate(model, samples, parse_modalities(config["train"]["modalities"]),
                       config["train"]["batch_size"])
    out_dir = output_dir(args.out_dir)
    write_metrics(metrics.as_row(), out_dir / "metrics.csv")
    write_confusion_csv(metrics.confusion, CLASS_NAMES, out_dir / "confusion.csv")
    print_metrics(f"Evaluation of {args.checkpoint} ({len(samples)} samples)", metrics)


def cmd_ablate(args):
    """Fused, acoustic-only and radar-only models under identical seeds and splits"""
    from src.dataset import read_manifest
    from src.model import ModelConfig
    from src.reporting import write_table
    from src.training import TrainConfig, ablate_modalities, modality_label

    config = resolve_config(args)
    manifest = read_manifest(args.manifest)
    experiments = ablate_modalities(manifest, open_store(config, manifest),
                                    ModelConfig.from_sections(config["model"], config["train"]),
                                    TrainConfig.from_dict(config["train"]), args.threads, show_progress(args))

    rows = []
    for experiment in experiments:
        write_experiment(experiment, args.out_dir / "+".join(experiment.modalities), config)
        row = {"modalities": modality_label(experiment.modalities)}
        row.update({k: v for k, v in experiment.test_metrics.as_row().items()
                    if k in ("detection_accuracy", "detection_f1", "classification_accuracy", "classification_f1")})
        rows.append(row)
    table = write_table(rows, args.out_dir / "ablation.csv")

    print("\n" + "=" * 60)
    print("  Performance with different modalities")
    print("=" * 60)
    for row in rows:
        print(f"  {row['modalities']:<28} det {row['detection_accuracy']:.4f}  "
              f"cls {row['classification_accuracy']:.4f}")
    print(f"\n{table}")


def cmd_noise_sweep(args):
    """Evaluate checkpoints on the test split with acoustic noise at each SNR"""
    from src.dataset import read_manifest
    from src.model import load_model
    from src.reporting import write_table
    from src.training import parse_modalities, snr_sweep

    config = resolve_config(args)
    models = []
    for checkpoint in args.checkpoints:
        model, architecture = load_model(checkpoint)
        if not models:
            adopt_checkpoint_run(config, architecture, str(checkpoint))
        modalities = parse_modalities(architecture.get("train.modalities") or config["train"]["modalities"])
        models.append((modalities, model))

    manifest = read_manifest(args.manifest)
    samples = load_evaluation_samples(args, config, manifest)
    snr_levels = args.snr if args.snr is not None else config["noise"]["snr_levels"]
    rows = snr_sweep(models, snr_levels, samples, config["train"]["seed"], config["train"]["batch_size"])
    table = write_table(rows, output_dir(args.out_dir) / "noise_sweep.csv")
    print(table)


def cmd_gradcheck(args):
    """Finite-difference gradient checks of every layer"""
    from src.gradcheck_suite import run_suite

    report = run_suite(seed=args.seed if args.seed is not None else 0)
    for line in report.lines():
        print(line)
    if args.out:
        output_dir(args.out.parent)
        args.out.write_text("\n".join(report.lines()) + "\n")
    report.raise_for_failures()


def cmd_info(args):
    """Parameter and multiply-add counts of a checkpoint"""
    from src.model import count_mult_adds, load_model
    from src.nn_core import count_parameters
    from src.radar_dsp import RadarConfig
    from src.training import modality_label, parse_modalities

    config = resolve_config(args)
    model, architecture = load_model(args.checkpoint)
    adopt_checkpoint_run(config, architecture, str(args.checkpoint))
    modalities = parse_modalities(config["train"]["modalities"])
    radar_config = RadarConfig.from_dict(config["radar"])
    mult_adds = count_mult_adds(model, config["audio"]["window"], radar_config.frame_shape, modalities)

    print(f"modalities: {modality_label(modalities)}")
    print(f"parameters: {count_parameters(model)}")
    for name in ("acoustic_encoder", "radar_encoder", "fusion", "detection", "classification"):
        print(f"  {name:<18} {count_parameters(getattr(model, name))}")
    print(f"mult-adds per sample: {mult_adds} ({2 * mult_adds / 1e9:.3f} GFLOPs)")


# ---------------------------------------------------------------- parser

COMMANDS = {
    "rd-map": cmd_rd_map,
    "synth": cmd_synth,
    "index": cmd_index,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "noise-sweep": cmd_noise_sweep,
    "gradcheck": cmd_gradcheck,
    "info": cmd_info,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='Key-value config file (section.key=value lines)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override a config value (repeatable)')
    common.add_argument('--preset', choices=['full', 'desk'], default='full',
                        help='Built-in defaults: full-size or desk-scale')
    common.add_argument('--seed', type=int, help='Run seed (overrides train.seed and synth.seed)')
    common.add_argument('--threads', type=int, default=1, help='Worker threads for data loading/generation')
    common.add_argument('--quiet', action='store_true', help='Only warnings and errors on the console')
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        default=LOG_CONFIG['log_level'], help='Logging level')

    # unset flags stay out of the namespace
    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument('--epochs', type=int, default=argparse.SUPPRESS,
                       help=f"Training epochs (default: {TRAIN_CONFIG['epochs']})")
    hyper.add_argument('--batch-size', type=int, default=argparse.SUPPRESS,
                       help=f"Mini-batch size (default: {TRAIN_CONFIG['batch_size']})")
    hyper.add_argument('--lr', type=float, default=argparse.SUPPRESS,
                       help=f"Adam learning rate (default: {TRAIN_CONFIG['learning_rate']})")
    hyper.add_argument('--weight-decay', type=float, default=argparse.SUPPRESS,
                       help=f"Weight decay (default: {TRAIN_CONFIG['weight_decay']})")
    hyper.add_argument('--dropout', type=float, default=argparse.SUPPRESS,
                       help=f"Dropout rate (default: {TRAIN_CONFIG['dropout']})")
    hyper.add_argument('--test-fraction', type=float, default=argparse.SUPPRESS,
                       help=f"Held-out test fraction (default: {TRAIN_CONFIG['test_fraction']})")

    parser = argparse.ArgumentParser(
        description='DroneFuse - Radar + acoustic drone detection and classification',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f'DroneFuse {__version__}')
    parser.add_argument('--skip-check', action='store_true', help='Skip dependency check')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    def add(name: str, help_text: str, *extra: argparse.ArgumentParser) -> argparse.ArgumentParser:
        return commands.add_parser(name, parents=[common, *extra], help=help_text, description=help_text,
                                   formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    rd_map = add('rd-map', 'Range-Doppler map of one capture frame')
    rd_map.add_argument('capture', type=Path, help='Radar capture (.bin)')
    rd_map.add_argument('--frame', type=int, default=0, help='Frame index')
    rd_map.add_argument('--layout', default=None, help=f"Sample layout (default: radar.layout, {RADAR_CONFIG['layout']})")
    rd_map.add_argument('--filter-zero-doppler', action='store_true', help='Remove static clutter first')
    rd_map.add_argument('--cfar', action='store_true', help='Run CA-CFAR and write the detection list')
    rd_map.add_argument('--out-dir', type=Path, default=RUNS_DIR / 'rd_map', help='Output directory')

    synth = add('synth', 'Generate a synthetic dataset')
    synth.add_argument('--n-per-class', type=int, default=None,
                       help=f"Samples per class (default: synth.n_per_class, {SYNTH_CONFIG['n_per_class']})")
    synth.add_argument('--out-dir', type=Path, default=SYNTH_DIR, help='Output directory')

    index = add('index', 'Build a manifest over a recorded dataset (one folder per class)')
    index.add_argument('root', type=Path, help='Dataset root')
    index.add_argument('--out', type=Path, default=None, help='Manifest path (default: ROOT/manifest.jsonl)')

    train = add('train', 'Train a model', hyper)
    train.add_argument('manifest', type=Path, help='Dataset manifest (.jsonl)')
    train.add_argument('--modalities', default=None, help='Comma-separated subset of acoustic,radar')
    train.add_argument('--out-dir', type=Path, default=RUNS_DIR / 'train', help='Output directory')

    evaluate = add('eval', 'Evaluate a checkpoint on its test split')
    evaluate.add_argument('checkpoint', type=Path, help='Checkpoint directory')
    evaluate.add_argument('manifest', type=Path, help='Dataset manifest (.jsonl)')
    evaluate.add_argument('--all', action='store_true', help='Evaluate every record, not just the test split')
    evaluate.add_argument('--out-dir', type=Path, default=RUNS_DIR / 'eval', help='Output directory')

    ablate = add('ablate', 'Train fused, acoustic-only and radar-only models', hyper)
    ablate.add_argument('manifest', type=Path, help='Dataset manifest (.jsonl)')
    ablate.add_argument('--out-dir', type=Path, default=RUNS_DIR / 'ablate', help='Output directory')

    sweep = add('noise-sweep', 'Accuracy under acoustic noise at several SNRs')
    sweep.add_argument('manifest', type=Path, help='Dataset manifest (.jsonl)')
    sweep.add_argument('checkpoints', type=Path, nargs='+', help='Checkpoint directories')
    sweep.add_argument('--snr', type=float, nargs='+', default=None,
                       help=f"SNR levels in dB (default: noise.snr_levels, {NOISE_CONFIG['snr_levels']})")
    sweep.add_argument('--all', action='store_true', help='Use every record, not just the test split')
    sweep.add_argument('--out-dir', type=Path, default=RUNS_DIR / 'noise', help='Output directory')

    gradcheck = add('gradcheck', 'Finite-difference gradient checks of every layer')
    gradcheck.add_argument('--out', type=Path, default=None, help='Also write the report to this file')

    info = add('info', 'Parameter and multiply-add counts of a checkpoint')
    info.add_argument('checkpoint', type=Path, help='Checkpoint directory')
    return parser


def main(argv=None):
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Check dependencies (unless skipped)
    if not args.skip_check and not check_dependencies():
        sys.exit(1)

    # Setup logging
    try:
        setup_logging(args.log_level, args.quiet)
    except OSError as e:
        # If logging setup fails, continue anyway
        print(f"Warning: Logging setup failed: {e}", file=sys.stderr)

    from src.errors import DroneFuseError

    try:
        COMMANDS[args.command](args)
    except DroneFuseError as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"error: {e.code_name}: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        sys.exit(5)
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        print(f"error: internal: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
