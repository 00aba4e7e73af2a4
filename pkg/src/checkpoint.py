"""
Checkpoint Module
Weights as a JSON manifest (name -> shape, dtype, byte offset) plus one flat
little-endian float64 blob; the architecture config sits beside them
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.configuration import read_key_values, write_key_values
from src.errors import DataIOError, SizeError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "weights.json"
BLOB_FILE = "weights.bin"
ARCHITECTURE_FILE = "model.cfg"
BLOB_DTYPE = "<f8"


def save_checkpoint(state: Dict[str, np.ndarray], directory: Path,
                    architecture: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write a checkpoint directory

    Args:
        state: Parameter name -> array
        directory: Output directory (created if needed)
        architecture: Flat key-value model config stored as model.cfg

    Returns:
        The checkpoint directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    with open(directory / BLOB_FILE, "wb") as blob:
        for name in sorted(state):
            values = np.ascontiguousarray(state[name], dtype=BLOB_DTYPE)
            blob.write(values.tobytes())
            entries.append({"name": name, "shape": list(values.shape), "dtype": BLOB_DTYPE, "offset": offset})
            offset += values.nbytes

    manifest = {"format": 1, "total_bytes": offset, "tensors": entries}
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    if architecture is not None:
        write_key_values(directory / ARCHITECTURE_FILE, architecture, header="model architecture")

    logger.info(f"Saved checkpoint with {len(entries)} tensors ({offset} bytes) to {directory}")
    return directory


def load_checkpoint(directory: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Optional[str]]]:
    """
    Read a checkpoint directory

    Returns:
        (state dict, architecture key-values; empty if model.cfg is absent)
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    blob_path = directory / BLOB_FILE
    if not manifest_path.exists() or not blob_path.exists():
        raise DataIOError(f"not a checkpoint directory (missing {MANIFEST_FILE} or {BLOB_FILE}): {directory}")

    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise SizeError(str(blob_path), manifest["total_bytes"], len(blob))

    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(blob, dtype=entry["dtype"], count=count, offset=entry["offset"])
        state[entry["name"]] = values.reshape(entry["shape"]).astype(np.float64)

    architecture_path = directory / ARCHITECTURE_FILE
    architecture = read_key_values(architecture_path) if architecture_path.exists() else {}
    return state, architecture
