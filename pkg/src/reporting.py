"""
Reporting Module
CSV result files and range-Doppler heatmap images
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from src.errors import DataIOError
from src.radar_dsp import DetectionList, RangeDopplerMap

logger = logging.getLogger(__name__)

PCM16_FULL_SCALE = 32768.0


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.9g}"
    return str(value)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote {path}")
    return path


def write_rd_map_csv(rd_map: RangeDopplerMap, path: Path) -> Path:
    """Magnitudes; rows are Doppler bins (velocity in column 0), columns range bins"""
    velocities = rd_map.velocity_axis
    header = ["velocity_mps\\range_m"] + [_fmt(r) for r in rd_map.range_axis]
    rows = [[velocities[d]] + list(rd_map.magnitudes[d]) for d in range(rd_map.shape[0])]
    return _write_rows(path, header, rows)


def write_detections_csv(detections: DetectionList, rd_map: RangeDopplerMap, path: Path) -> Path:
    velocities, ranges = rd_map.velocity_axis, rd_map.range_axis
    rows = [
        [d.doppler_bin, d.range_bin, velocities[d.doppler_bin], ranges[d.range_bin], d.cell_value, d.threshold]
        for d in detections
    ]
    header = ["doppler_bin", "range_bin", "velocity_mps", "range_m", "cell_value", "threshold"]
    return _write_rows(path, header, rows)


def write_training_log(log: Sequence, path: Path) -> Path:
    rows = [[e.epoch, e.train_loss, e.val_loss, e.val_det_acc, e.val_cls_acc] for e in log]
    return _write_rows(path, ["epoch", "train_loss", "val_loss", "val_det_acc", "val_cls_acc"], rows)


def write_table(rows: List[Dict], path: Path) -> Path:
    """Rows of dicts sharing the first row's keys"""
    if not rows:
        raise DataIOError(f"nothing to write to {path}")
    header = list(rows[0])
    return _write_rows(path, header, [[row[k] for k in header] for row in rows])


def write_confusion_csv(confusion: np.ndarray, class_names: Sequence[str], path: Path) -> Path:
    """Rows are true classes, columns predicted classes"""
    rows = [[name] + list(confusion[i]) for i, name in enumerate(class_names)]
    return _write_rows(path, ["true\\predicted"] + list(class_names), rows)


def write_metrics(metrics: Dict, path: Path) -> Path:
    return _write_rows(path, ["metric", "value"], [[k, v] for k, v in metrics.items()])


def heatmap_image(rd_map: RangeDopplerMap, dynamic_range_db: float = 100.0,
                  detections: Optional[DetectionList] = None) -> Image.Image:
    """
    8-bit image of the map on a fixed dBFS scale

    0 dBFS is a full-scale int16 tone summed coherently over the frame; the
    bottom of the range maps to black. Pixel (row, col) is (Doppler, range)
    bin. Detections, if given, are outlined in white.
    """
    n_doppler, n_range = rd_map.shape
    full_scale = PCM16_FULL_SCALE * n_doppler * n_range
    with np.errstate(divide="ignore"):
        dbfs = 20.0 * np.log10(rd_map.magnitudes / full_scale)
    levels = np.clip((dbfs + dynamic_range_db) / dynamic_range_db, 0.0, 1.0)
    image = Image.fromarray(np.round(levels * 255).astype(np.uint8))

    if detections:
        draw = ImageDraw.Draw(image)
        for d in detections:
            draw.rectangle([d.range_bin - 1, d.doppler_bin - 1, d.range_bin + 1, d.doppler_bin + 1],
                           outline=255)
    return image


def save_heatmap(rd_map: RangeDopplerMap, path: Path, dynamic_range_db: float = 100.0,
                 detections: Optional[DetectionList] = None) -> Path:
    path = Path(path)
    try:
        heatmap_image(rd_map, dynamic_range_db, detections).save(path)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote heatmap {path}")
    return path
