import struct

import numpy as np
import pytest

from config import RunConfig
from core.errors import ConfigError, DatasetFormatError
from services.dataset_service import (
    CorruptionConfig,
    ImageDataset,
    corrupt,
    iter_batches,
    load_dataset,
    load_idx,
    load_mnist,
    synth_images,
    synth_mixture,
    to_uint8,
    write_idx,
)


def write_fixture(tmp_path, rng, n=2, suffix=''):
    pixels = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    images_path = str(tmp_path / f'images-idx3-ubyte{suffix}')
    labels_path = str(tmp_path / f'labels-idx1-ubyte{suffix}')
    write_idx(images_path, pixels)
    write_idx(labels_path, labels)
    return pixels, labels, images_path, labels_path


def test_idx_roundtrip_is_pixel_exact(tmp_path, rng):
    pixels, labels, images_path, labels_path = write_fixture(tmp_path, rng)
    dataset = load_idx(images_path, labels_path)
    assert dataset.images.shape == (2, 1, 28, 28)
    assert np.array_equal(to_uint8(dataset.images), pixels)
    assert np.array_equal(dataset.labels, labels)


def test_idx_writer_is_byte_exact(tmp_path, rng):
    pixels, _, images_path, _ = write_fixture(tmp_path, rng)
    raw = open(images_path, 'rb').read()
    assert raw[:4] == b'\x00\x00\x08\x03'
    assert struct.unpack('>3I', raw[4:16]) == (2, 28, 28)
    assert raw[16:] == pixels.tobytes()
    rewritten = str(tmp_path / 'again')
    write_idx(rewritten, to_uint8(load_idx(images_path).images))
    assert open(rewritten, 'rb').read() == raw


def test_gzip_files_are_read_transparently(tmp_path, rng):
    pixels, labels, images_path, labels_path = write_fixture(tmp_path, rng, n=3, suffix='.gz')
    with open(images_path, 'rb') as f:
        assert f.read(2) == b'\x1f\x8b'
    dataset = load_idx(images_path, labels_path)
    assert np.array_equal(to_uint8(dataset.images), pixels)


def test_bad_magic_names_the_value(tmp_path):
    path = tmp_path / 'bad'
    path.write_bytes(struct.pack('>I', 0x12345678) + b'\x00' * 16)
    with pytest.raises(DatasetFormatError, match='0x12345678'):
        load_idx(str(path))


def test_truncated_file(tmp_path, rng):
    _, _, images_path, _ = write_fixture(tmp_path, rng)
    raw = open(images_path, 'rb').read()
    truncated = tmp_path / 'short'
    truncated.write_bytes(raw[:-10])
    with pytest.raises(DatasetFormatError, match='truncated'):
        load_idx(str(truncated))


def test_count_mismatch(tmp_path, rng):
    _, _, images_path, _ = write_fixture(tmp_path, rng, n=2)
    labels_path = str(tmp_path / 'three-labels')
    write_idx(labels_path, np.zeros(3, dtype=np.uint8))
    with pytest.raises(DatasetFormatError, match='count mismatch'):
        load_idx(images_path, labels_path)


def test_load_mnist_from_directory(tmp_path, rng):
    write_idx(str(tmp_path / 't10k-images-idx3-ubyte.gz'), rng.integers(0, 256, (5, 28, 28), dtype=np.uint8))
    write_idx(str(tmp_path / 't10k-labels-idx1-ubyte'), rng.integers(0, 10, 5, dtype=np.uint8))
    dataset = load_mnist(str(tmp_path), 'test', limit=3)
    assert len(dataset) == 3
    with pytest.raises(DatasetFormatError):
        load_mnist(str(tmp_path), 'train')


def test_dataset_validation():
    with pytest.raises(DatasetFormatError):
        ImageDataset(np.zeros((2, 8, 8)))
    with pytest.raises(DatasetFormatError):
        ImageDataset(np.full((1, 1, 2, 2), 1.5))
    with pytest.raises(DatasetFormatError):
        ImageDataset(np.zeros((2, 1, 2, 2)), np.zeros(3))


def test_synth_mixture_is_reproducible():
    first = synth_mixture(3, 10, 2, 5.0, np.random.default_rng(4))
    second = synth_mixture(3, 10, 2, 5.0, np.random.default_rng(4))
    assert np.array_equal(first.points, second.points)
    assert np.array_equal(first.labels, second.labels)
    with pytest.raises(ConfigError):
        synth_mixture(3, 10, 2, 0.0, np.random.default_rng(4))


def test_synth_images_are_labelled_and_in_range(rng):
    dataset = synth_images(4, 5, 8, rng)
    assert dataset.images.shape == (20, 1, 8, 8)
    assert sorted(set(dataset.labels.tolist())) == [0, 1, 2, 3]
    assert dataset.images.min() >= 0 and dataset.images.max() <= 1


def test_corrupt_disabled_is_identity(rng):
    dataset = synth_images(2, 3, 8, rng)
    same = corrupt(dataset, CorruptionConfig(0.0, 0.0, 0.0), np.random.default_rng(0))
    assert np.array_equal(same.images, dataset.images)


def test_corrupt_stays_in_unit_range_and_is_seeded(rng):
    dataset = synth_images(2, 5, 8, rng)
    first = corrupt(dataset, CorruptionConfig(noise_sigma=0.5), np.random.default_rng(1))
    second = corrupt(dataset, CorruptionConfig(noise_sigma=0.5), np.random.default_rng(1))
    assert first.images.min() >= 0 and first.images.max() <= 1
    assert np.array_equal(first.images, second.images)
    assert np.array_equal(first.labels, dataset.labels)


def test_double_flip_restores_images(rng):
    dataset = synth_images(2, 3, 8, rng)
    flip = CorruptionConfig(max_rotation=0.0, flip_prob=1.0, noise_sigma=0.0)
    once = corrupt(dataset, flip, np.random.default_rng(0))
    assert np.array_equal(once.images, dataset.images[..., ::-1])
    twice = corrupt(once, flip, np.random.default_rng(0))
    assert np.array_equal(twice.images, dataset.images)


def test_corruption_config_validation():
    with pytest.raises(ConfigError):
        CorruptionConfig(noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        CorruptionConfig(flip_prob=2.0)


def test_iter_batches_covers_everything(rng):
    images = np.arange(10.0).reshape(10, 1, 1, 1)
    labels = np.arange(10)
    seen = []
    for batch, batch_labels in iter_batches(images, labels, 4, rng):
        assert np.array_equal(batch[:, 0, 0, 0], batch_labels)
        seen.extend(batch_labels.tolist())
    assert sorted(seen) == list(range(10))
    with pytest.raises(ConfigError):
        list(iter_batches(images, labels, 0))


def test_synth_splits_share_templates():
    config = RunConfig(dataset='synth', image_size=8, synth_classes=3, train_size=30, test_size=9)
    train, test = load_dataset(config, data_dir='unused')
    again, _ = load_dataset(config, data_dir='unused')
    assert len(train) == 30 and len(test) == 9
    assert np.array_equal(train.images, again.images)
    for k in range(3):
        gap = np.abs(train.images[train.labels == k].mean(axis=0) - test.images[test.labels == k].mean(axis=0))
        assert gap.max() < 0.25
