import asyncio
import json

import numpy as np
import pytest

from core.errors import CheckpointError
from utils.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    file_digest,
    load_checkpoint,
    save_checkpoint,
    save_checkpoint_async,
    state_digest,
)


def sample_state(rng):
    return {
        'encoder.weight': rng.standard_normal((2, 3, 4)),
        'bias': np.array([np.pi, -0.0, 1e-300]),
        'quantizer.schedule_step': np.asarray(7.0),
    }


def test_encoding_layout(rng):
    data = encode_checkpoint(sample_state(rng), {'quantizer': 'hypervq'})
    assert data.startswith(MAGIC)
    rest = data[len(MAGIC):]
    length_line, _, body = rest.partition(b'\n')
    manifest = json.loads(body[:int(length_line)])
    names = [entry['name'] for entry in manifest['tensors']]
    assert names == sorted(names)
    assert manifest['meta'] == {'quantizer': 'hypervq'}
    payload = body[int(length_line):]
    assert len(payload) == sum(entry['nbytes'] for entry in manifest['tensors'])


def test_roundtrip_is_bit_exact(rng):
    state = sample_state(rng)
    decoded, meta = decode_checkpoint(encode_checkpoint(state, {'seed': 3}))
    assert meta == {'seed': 3}
    assert decoded.keys() == state.keys()
    for name in state:
        assert decoded[name].shape == np.shape(state[name])
        assert decoded[name].tobytes() == np.asarray(state[name], dtype='<f8').tobytes()


def test_encoding_is_deterministic(rng):
    state = sample_state(rng)
    shuffled = dict(reversed(list(state.items())))
    assert encode_checkpoint(state, {'b': 1, 'a': 2}) == encode_checkpoint(shuffled, {'a': 2, 'b': 1})
    assert state_digest(state) == state_digest(shuffled)


def test_bad_header_and_truncation(rng):
    data = encode_checkpoint(sample_state(rng))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b'NOT-A-CHECKPOINT' + data)
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-8])
    with pytest.raises(CheckpointError):
        decode_checkpoint(MAGIC + b'12\n{not json}')


def test_save_and_load(tmp_path, rng):
    state = sample_state(rng)
    path = str(tmp_path / 'model.ckpt')
    digest = save_checkpoint(path, state, {'k': 'v'})
    assert digest == file_digest(path)
    loaded, meta = load_checkpoint(path)
    assert meta == {'k': 'v'}
    assert np.array_equal(loaded['encoder.weight'], state['encoder.weight'])


def test_async_save_writes_identical_bytes(tmp_path, rng):
    state = sample_state(rng)
    sync_path, async_path = str(tmp_path / 'a.ckpt'), str(tmp_path / 'b.ckpt')
    save_checkpoint(sync_path, state)
    digest = asyncio.run(save_checkpoint_async(async_path, state))
    assert open(sync_path, 'rb').read() == open(async_path, 'rb').read()
    assert digest == file_digest(async_path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'absent.ckpt'))
