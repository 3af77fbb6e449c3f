"""Формат чекпоинта в одном файле.

    HYPERVQ-CKPT 1\\n
    <manifest length in bytes>\\n
    <manifest: JSON, sorted keys>
    <payload: tensors back to back, row-major little-endian float64>

Манифест перечисляет тензоры как {name, shape, offset, nbytes} по имени
плюс произвольный объект ``meta``. Одинаковые state и meta всегда дают
одинаковые байты.
"""
import hashlib
import json
import logging
from typing import Any, Dict, Tuple

import aiofiles
import numpy as np

from core.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'HYPERVQ-CKPT 1\n'
PAYLOAD_DTYPE = np.dtype('<f8')


def encode_checkpoint(state: Dict[str, np.ndarray], meta: Dict[str, Any] = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(state):
        array = np.ascontiguousarray(np.asarray(state[name], dtype=np.float64)).astype(PAYLOAD_DTYPE, copy=False)
        raw = array.tobytes(order='C')
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({'meta': meta or {}, 'tensors': entries}, sort_keys=True,
                          separators=(',', ':'), ensure_ascii=False).encode('utf-8')
    return MAGIC + f"{len(manifest)}\n".encode('ascii') + manifest + b''.join(chunks)


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad header")
    rest = data[len(MAGIC):]
    newline = rest.find(b'\n')
    if newline <= 0:
        raise CheckpointError("corrupt checkpoint: missing manifest length")
    try:
        length = int(rest[:newline].decode('ascii'))
        manifest = json.loads(rest[newline + 1:newline + 1 + length].decode('utf-8'))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from None
    payload = rest[newline + 1 + length:]

    state: Dict[str, np.ndarray] = {}
    for entry in manifest.get('tensors', []):
        start, nbytes = entry['offset'], entry['nbytes']
        shape = tuple(entry['shape'])
        if start + nbytes > len(payload) or nbytes != int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize:
            raise CheckpointError(f"corrupt checkpoint: tensor '{entry['name']}' is truncated")
        array = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=nbytes // PAYLOAD_DTYPE.itemsize, offset=start)
        state[entry['name']] = array.astype(np.float64).reshape(shape)
    return state, manifest.get('meta', {})


def save_checkpoint(path: str, state: Dict[str, np.ndarray], meta: Dict[str, Any] = None) -> str:
    data = encode_checkpoint(state, meta)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info(f"Checkpoint saved: {path} ({len(state)} tensors, {len(data)} bytes)")
    return hashlib.sha256(data).hexdigest()


async def save_checkpoint_async(path: str, state: Dict[str, np.ndarray], meta: Dict[str, Any] = None) -> str:
    data = encode_checkpoint(state, meta)
    async with aiofiles.open(path, 'wb') as f:
        await f.write(data)
    logger.info(f"Checkpoint saved: {path} ({len(state)} tensors, {len(data)} bytes)")
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return decode_checkpoint(data)


def file_digest(path: str) -> str:
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def state_digest(state: Dict[str, np.ndarray]) -> str:
    """SHA-256 только тензоров, без meta"""
    return hashlib.sha256(encode_checkpoint(state)).hexdigest()
