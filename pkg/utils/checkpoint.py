"""Versioned binary checkpoints for a model head and its feature network.

Layout, all little-endian:

    b"MGPROTO" | version u32 | C u32 | M u32 | D u32
    per class: M priors (f64), then the M×D means row-major (f64)
    optional network section:
        b"NET1" | array count u32
        per array: name length u32 | name (utf-8) | ndim u32 | shape (u32 each) | data (f64)
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from services.density import ModelHead
from services.errors import CheckpointFormatError
from services.network import PARAMETER_NAMES, TinyNet

logger = logging.getLogger(__name__)

MAGIC = b"MGPROTO"
FORMAT_VERSION = 1
NET_MAGIC = b"NET1"
FLOAT = np.dtype('<f8')


@dataclass(frozen=True, eq=False)
class Checkpoint:
    head: ModelHead
    net: Optional[TinyNet] = None


class _Reader:
    def __init__(self, payload: bytes, source: Path):
        self._payload = payload
        self._offset = 0
        self._source = source

    @property
    def exhausted(self) -> bool:
        return self._offset >= len(self._payload)

    def take(self, size: int) -> bytes:
        if self._offset + size > len(self._payload):
            raise CheckpointFormatError(f"{self._source}: truncated checkpoint")
        chunk = self._payload[self._offset:self._offset + size]
        self._offset += size
        return chunk

    def uint32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * FLOAT.itemsize), dtype=FLOAT).astype(np.float64)


def encode(head: ModelHead, net: Optional[TinyNet] = None) -> bytes:
    parts = [MAGIC, struct.pack('<4I', FORMAT_VERSION, head.num_classes, head.num_prototypes, head.dim)]
    for mix in head.classes:
        parts.append(mix.priors.astype(FLOAT).tobytes())
        parts.append(mix.means.astype(FLOAT).tobytes(order='C'))
    if net is not None:
        parts.append(NET_MAGIC + struct.pack('<I', len(PARAMETER_NAMES)))
        for name in PARAMETER_NAMES:
            value = net.params[name]
            encoded = name.encode('utf-8')
            parts.append(struct.pack('<I', len(encoded)) + encoded)
            parts.append(struct.pack(f'<{1 + value.ndim}I', value.ndim, *value.shape))
            parts.append(value.astype(FLOAT).tobytes(order='C'))
    return b''.join(parts)


def decode(payload: bytes, source: Path = Path('<memory>')) -> Checkpoint:
    reader = _Reader(payload, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic")
    version = reader.uint32()
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    num_classes, num_prototypes, dim = reader.uint32(), reader.uint32(), reader.uint32()
    if min(num_classes, num_prototypes, dim) == 0:
        raise CheckpointFormatError(f"{source}: empty head (C={num_classes}, M={num_prototypes}, D={dim})")

    priors, means = [], []
    for _ in range(num_classes):
        priors.append(reader.floats(num_prototypes))
        means.append(reader.floats(num_prototypes * dim).reshape(num_prototypes, dim))
    head = ModelHead.from_arrays(np.stack(means), np.stack(priors))

    if reader.exhausted:
        return Checkpoint(head=head)
    if reader.take(len(NET_MAGIC)) != NET_MAGIC:
        raise CheckpointFormatError(f"{source}: unexpected trailing data")
    params: Dict[str, np.ndarray] = {}
    for _ in range(reader.uint32()):
        name = reader.take(reader.uint32()).decode('utf-8')
        shape = tuple(reader.uint32() for _ in range(reader.uint32()))
        params[name] = reader.floats(int(np.prod(shape))).reshape(shape)
    if not reader.exhausted:
        raise CheckpointFormatError(f"{source}: unexpected trailing data")
    return Checkpoint(head=head, net=TinyNet(params))


def save_checkpoint(path: Path, head: ModelHead, net: Optional[TinyNet] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(head, net))
    logger.info("Saved checkpoint (C=%d, M=%d, D=%d) to %s",
                head.num_classes, head.num_prototypes, head.dim, path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), path)


def export_json(path: Path, head: ModelHead) -> Path:
    """Human-readable mirror of the head, for inspection only"""
    path = Path(path)
    document = {
        'format': MAGIC.decode('ascii'),
        'version': FORMAT_VERSION,
        'num_classes': head.num_classes,
        'num_prototypes': head.num_prototypes,
        'dim': head.dim,
        'covariance_diag': head.classes[0].covariance_diag,
        'classes': [
            {'class_id': mix.class_id, 'priors': mix.priors.tolist(), 'means': mix.means.tolist()}
            for mix in head.classes
        ],
    }
    path.write_text(json.dumps(document, indent=2))
    return path
