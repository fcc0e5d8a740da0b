"""Dataset splits as raw little-endian tensors with a JSON sidecar."""
import json
import logging
from pathlib import Path
from typing import Tuple

import numpy as np

from services.errors import ContractViolation
from services.synthetic import GENERATOR_NAME, Split, SyntheticDataset, SyntheticSpec

logger = logging.getLogger(__name__)

FLOAT_DTYPE = '<f8'
LABEL_DTYPE = '<i8'


def save_split(split: Split, directory: Path, seed: int, spec: SyntheticSpec) -> Path:
    """Write <name>.bin, <name>.labels.bin and the <name>.json sidecar"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_file = directory / f"{split.name}.bin"
    labels_file = directory / f"{split.name}.labels.bin"
    sidecar = directory / f"{split.name}.json"

    split.raw.astype(FLOAT_DTYPE).tofile(data_file)
    split.labels.astype(LABEL_DTYPE).tofile(labels_file)
    sidecar.write_text(json.dumps({
        'name': split.name,
        'shape': list(split.raw.shape),
        'dtype': FLOAT_DTYPE,
        'label_dtype': LABEL_DTYPE,
        'data_file': data_file.name,
        'labels_file': labels_file.name,
        'seed': seed,
        'generator': GENERATOR_NAME,
        'spec': spec.to_dict(),
    }, indent=2, sort_keys=True))
    logger.info("Saved split %s (%d samples) to %s", split.name, len(split), sidecar)
    return sidecar


def save_dataset(dataset: SyntheticDataset, directory: Path) -> Tuple[Path, Path, Path]:
    return tuple(
        save_split(split, directory, dataset.seed, dataset.spec)
        for split in (dataset.train, dataset.test, dataset.ood)
    )


def load_split(sidecar: Path) -> Split:
    sidecar = Path(sidecar)
    if not sidecar.is_file():
        raise FileNotFoundError(f"dataset sidecar not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    shape = tuple(meta['shape'])
    raw = np.fromfile(sidecar.parent / meta['data_file'], dtype=meta['dtype'])
    labels = np.fromfile(sidecar.parent / meta['labels_file'], dtype=meta['label_dtype'])
    if raw.size != int(np.prod(shape)) or labels.size != shape[0]:
        raise ContractViolation(f"{sidecar}: tensor payload does not match shape {shape}")
    return Split(
        name=meta['name'],
        raw=raw.astype(np.float64).reshape(shape),
        labels=labels.astype(np.int64)
    )
