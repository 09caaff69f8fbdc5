"""
Formato de pesos CSPT1.

Disposición (todo little-endian):

    b"CSPT1"
    uint32  longitud del bloque de metadatos
    bytes   metadatos JSON UTF-8 (claves ordenadas)
    uint32  cantidad de tensores
    por tensor, en orden alfabético de nombre:
        uint16  longitud del nombre
        bytes   nombre UTF-8
        uint8   número de dimensiones
        uint32  cada dimensión
        float32 valores en orden C
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from apps.core.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'CSPT1'


def save_checkpoint(path, state: Dict[str, np.ndarray], metadata: Dict[str, Any] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode('utf-8')

    chunks = [MAGIC, struct.pack('<I', len(meta_bytes)), meta_bytes, struct.pack('<I', len(state))]
    for name in sorted(state):
        values = np.ascontiguousarray(state[name], dtype='<f4')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', values.ndim))
        chunks.append(struct.pack(f'<{values.ndim}I', *values.shape))
        chunks.append(values.tobytes())

    with open(path, 'wb') as handle:
        handle.write(b''.join(chunks))
    logger.info(f"Checkpoint guardado: {path} ({len(state)} tensores)")
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"No se pudo leer {path}: {e}") from e

    reader = _Reader(payload, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: no es un archivo CSPT1")
    meta_length, = reader.unpack('<I')
    try:
        metadata = json.loads(reader.take(meta_length).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: metadatos ilegibles ({e})") from e

    count, = reader.unpack('<I')
    state = {}
    for _ in range(count):
        name_length, = reader.unpack('<H')
        name = reader.take(name_length).decode('utf-8')
        ndim, = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape)
        state[name] = values.astype(np.float32)
    if reader.offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - reader.offset} bytes sobrantes")
    return state, metadata


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"{self.path}: archivo truncado en byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
