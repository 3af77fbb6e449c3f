import asyncio
import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import aiofiles
import aiohttp
import numpy as np
from scipy import ndimage

from core.errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
IDX_UBYTE = 0x08

MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte.gz',
    'train_labels': 'train-labels-idx1-ubyte.gz',
    'test_images': 't10k-images-idx3-ubyte.gz',
    'test_labels': 't10k-labels-idx1-ubyte.gz',
}


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    split: str = 'train'

    def __post_init__(self):
        """Картинки (N, C, H, W) в [0, 1], меток столько же"""
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetFormatError("image values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DatasetFormatError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None and self.labels.size else 0

    def take(self, count: int) -> 'ImageDataset':
        """Первые count примеров; count <= 0 оставляет всё"""
        if count <= 0 or count >= len(self):
            return self
        labels = self.labels[:count] if self.labels is not None else None
        return ImageDataset(self.images[:count], labels, self.split)


@dataclass
class VectorDataset:
    points: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class CorruptionConfig:
    max_rotation: float = 30.0
    flip_prob: float = 0.5
    noise_sigma: float = 0.1

    def __post_init__(self):
        """Проверка параметров искажений"""
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be non-negative, got {self.noise_sigma}")
        if not (0 <= self.flip_prob <= 1):
            raise ConfigError(f"flip probability must lie in [0, 1], got {self.flip_prob}")
        if self.max_rotation < 0:
            raise ConfigError(f"max rotation must be non-negative, got {self.max_rotation}")


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path: str) -> bytes:
    """Читает файл, распаковывая gzip по сигнатуре"""
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:2] == b'\x1f\x8b':
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path: str, expected_magic: int) -> np.ndarray:
    """Разбирает заголовок IDX и данные"""
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: file too short for an IDX header")
    magic, = struct.unpack('>I', raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = struct.unpack(f'>{ndim}I', raw[4:header_size])
    expected = int(np.prod(dims))
    payload = len(raw) - header_size
    if payload < expected:
        raise DatasetFormatError(f"{path}: truncated payload, {payload} bytes for {expected} values")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_size).reshape(dims)


def load_idx(images_path: str, labels_path: Optional[str] = None, split: str = 'train') -> ImageDataset:
    """Читает IDX с картинками (и, если есть, с метками), обычный или gzip"""
    pixels = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGE_MAGIC)
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABEL_MAGIC)
        if len(labels) != len(pixels):
            raise DatasetFormatError(
                f"count mismatch: {len(pixels)} images in {images_path}, {len(labels)} labels in {labels_path}"
            )
    images = pixels.astype(np.float64)[:, None, :, :] / 255.0
    logger.info(f"Loaded {len(images)} images of {pixels.shape[1]}x{pixels.shape[2]} from {images_path}")
    return ImageDataset(images, labels, split)


def write_idx(path: str, data: np.ndarray):
    """Пишет массив uint8 в IDX; суффикс .gz включает сжатие"""
    data = np.asarray(data)
    if data.dtype != np.uint8:
        raise DatasetFormatError(f"IDX writer expects uint8 data, got {data.dtype}")
    header = struct.pack('>I', (IDX_UBYTE << 8) | data.ndim) + struct.pack(f'>{data.ndim}I', *data.shape)
    raw = header + np.ascontiguousarray(data).tobytes()
    if path.endswith('.gz'):
        raw = gzip.compress(raw, mtime=0)
    with open(path, 'wb') as f:
        f.write(raw)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """(N, 1, H, W) значения в [0, 1] -> байты (N, H, W)"""
    return np.rint(np.asarray(images)[:, 0] * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------

def _find(data_dir: str, filename: str) -> Optional[str]:
    """Путь к архиву или к распакованному файлу"""
    for candidate in (filename, filename[:-3]):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    return None


def load_mnist(data_dir: str, split: str = 'train', limit: int = 0) -> ImageDataset:
    """Сплит MNIST из data_dir, не больше limit примеров"""
    images_path = _find(data_dir, MNIST_FILES[f'{split}_images'])
    labels_path = _find(data_dir, MNIST_FILES[f'{split}_labels'])
    if images_path is None or labels_path is None:
        raise DatasetFormatError(f"MNIST {split} files not found in {data_dir}")
    return load_idx(images_path, labels_path, split).take(limit)


async def fetch_mnist(data_dir: str, mirror: str) -> Tuple[Dict[str, str], Optional[str]]:
    """Скачивает недостающие архивы MNIST; возвращает (пути, текст ошибки или None)"""
    os.makedirs(data_dir, exist_ok=True)
    paths: Dict[str, str] = {}
    try:
        async with aiohttp.ClientSession() as session:
            for key, filename in MNIST_FILES.items():
                existing = _find(data_dir, filename)
                if existing:
                    paths[key] = existing
                    continue
                url = mirror.rstrip('/') + '/' + filename
                target = os.path.join(data_dir, filename)
                async with session.get(url, timeout=aiohttp.ClientTimeout(total=300)) as response:
                    if response.status != 200:
                        return paths, f"HTTP {response.status} for {url}"
                    async with aiofiles.open(target, 'wb') as f:
                        async for chunk in response.content.iter_chunked(65536):
                            await f.write(chunk)
                logger.info(f"Downloaded {url} -> {target}")
                paths[key] = target
    except asyncio.TimeoutError:
        return paths, f"timeout while downloading MNIST from {mirror}"
    except aiohttp.ClientError as e:
        logger.error(f"MNIST download error: {e}", exc_info=True)
        return paths, str(e)
    return paths, None


# ---------------------------------------------------------------------------
# Синтетические данные
# ---------------------------------------------------------------------------

def synth_mixture(num_clusters: int, n_per: int, dim: int, separation: float,
                  rng: np.random.Generator, scatter: float = 1.0) -> VectorDataset:
    """Гауссовы облака, ближайшая пара центров ровно на расстоянии ``separation``"""
    if separation <= 0:
        raise ConfigError(f"separation must be positive, got {separation}")
    centres = rng.standard_normal((num_clusters, dim))
    if num_clusters > 1:
        gaps = np.linalg.norm(centres[:, None, :] - centres[None, :, :], axis=-1)
        gaps[np.diag_indices(num_clusters)] = np.inf
        centres *= separation / gaps.min()
    else:
        centres[:] = 0.0
    labels = np.repeat(np.arange(num_clusters), n_per)
    points = centres[labels] + scatter * rng.standard_normal((len(labels), dim))
    return VectorDataset(points, labels)


def synth_images(num_classes: int, n_per: int, image_size: int, rng: np.random.Generator,
                 noise: float = 0.05, split: str = 'train') -> ImageDataset:
    """Размеченные картинки: сглаженный случайный шаблон на класс плюс шум пикселей"""
    raw = (rng.random((num_classes, image_size, image_size)) > 0.75).astype(np.float64)
    templates = np.stack([ndimage.gaussian_filter(t, sigma=image_size / 14.0) for t in raw])
    peak = templates.reshape(num_classes, -1).max(axis=1)
    templates /= np.where(peak > 0, peak, 1.0)[:, None, None]
    labels = np.repeat(np.arange(num_classes), n_per)
    order = rng.permutation(len(labels))
    labels = labels[order]
    images = templates[labels] + noise * rng.standard_normal((len(labels), image_size, image_size))
    return ImageDataset(np.clip(images, 0.0, 1.0)[:, None], labels, split)


# ---------------------------------------------------------------------------
# Искажения
# ---------------------------------------------------------------------------

def corrupt(dataset: ImageDataset, ops: CorruptionConfig, rng: np.random.Generator) -> ImageDataset:
    """Случайный поворот (билинейно, заполнение нулём), отражение по горизонтали и гауссов шум с обрезкой"""
    images = dataset.images.copy()
    n = len(images)
    angles = rng.uniform(-ops.max_rotation, ops.max_rotation, size=n)
    flips = rng.random(n) < ops.flip_prob
    if ops.max_rotation > 0:
        for i in range(n):
            images[i] = ndimage.rotate(images[i], angles[i], axes=(2, 1), reshape=False,
                                       order=1, mode='constant', cval=0.0)
    if ops.flip_prob > 0:
        images[flips] = images[flips][..., ::-1]
    if ops.noise_sigma > 0:
        images = images + rng.normal(0.0, ops.noise_sigma, size=images.shape)
    return ImageDataset(np.clip(images, 0.0, 1.0), dataset.labels, f"{dataset.split}-corrupted")


def iter_batches(images: np.ndarray, labels: Optional[np.ndarray], batch_size: int,
                 rng: Optional[np.random.Generator] = None, shuffle: bool = True
                 ) -> Iterator[Tuple[np.ndarray, Optional[np.ndarray]]]:
    """Мини-пакеты в перемешанном (при rng) или исходном порядке"""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    order = rng.permutation(len(images)) if shuffle and rng is not None else np.arange(len(images))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield images[idx], (labels[idx] if labels is not None else None)


def load_dataset(config, data_dir: str) -> Tuple[ImageDataset, ImageDataset]:
    """Сплиты train и test по RunConfig"""
    if config.dataset == 'mnist':
        return (load_mnist(data_dir, 'train', config.train_size),
                load_mnist(data_dir, 'test', config.test_size))
    rng = np.random.default_rng(config.seed + 1)
    per_train = max(1, config.train_size // config.synth_classes)
    per_test = max(1, config.test_size // config.synth_classes)
    # один и тот же набор шаблонов для обоих сплитов
    full = synth_images(config.synth_classes, per_train + per_test, config.image_size, rng)
    by_class = [np.flatnonzero(full.labels == k) for k in range(config.synth_classes)]
    train_idx = np.sort(np.concatenate([idx[:per_train] for idx in by_class]))
    test_idx = np.sort(np.concatenate([idx[per_train:] for idx in by_class]))
    return (ImageDataset(full.images[train_idx], full.labels[train_idx], 'train'),
            ImageDataset(full.images[test_idx], full.labels[test_idx], 'test'))
