import logging

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import ConfigError, ShapeError
from services.quantizer_base import (
    EmbeddingCodebook,
    Quantizer,
    QuantizeResult,
    build_result,
    commitment_loss,
    flatten_latents,
)

logger = logging.getLogger(__name__)

DEFAULT_BETA = 0.25
SCAN_CHUNK = 4096
# Сглаживание Лапласа для размеров кластеров в EMA
EMA_EPSILON = 1e-5


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Полный перебор по квадрату расстояния, при равенстве побеждает первый индекс"""
    if codebook.shape[0] == 0:
        raise ShapeError("empty codebook")
    if z.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f"latent dimension {z.shape[-1]} does not match codebook dimension {codebook.shape[-1]}")
    indices = np.empty(z.shape[0], dtype=np.int64)
    for start in range(0, z.shape[0], SCAN_CHUNK):
        block = z[start:start + SCAN_CHUNK]
        diff = block[:, None, :] - codebook[None, :, :]
        indices[start:start + SCAN_CHUNK] = np.argmin(np.sum(diff * diff, axis=-1), axis=1)
    return indices


def _kmeans_select(flat: DiffTensor, codebook: EmbeddingCodebook, beta: float):
    """Ближайший код, straight-through и commitment loss"""
    indices = nearest_codes(flat.values, codebook.weight.values)
    selected = dc.matmul(dc.one_hot(indices, codebook.num_codes), codebook.weight)
    aux = commitment_loss(flat, selected, beta)
    z_q = dc.straight_through(selected.values, flat)
    return z_q, indices, aux, selected


def kmeans_quantize(z_e, codebook: EmbeddingCodebook, beta: float = DEFAULT_BETA) -> QuantizeResult:
    """Функциональная версия KmeansVQ над готовым кодбуком"""
    z_e = dc.as_tensor(z_e)
    flat = flatten_latents(z_e, codebook.dim, 'kmeansvq')
    z_q, indices, aux, _ = _kmeans_select(flat, codebook, beta)
    return build_result(z_e.shape, z_q, indices, aux, None, codebook.num_codes)


class KmeansVQ(Quantizer):
    """Ближайший сосед в кодбуке с commitment loss; кодбук может обновляться через EMA вместо градиентов"""

    name = 'kmeansvq'

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator, beta: float = DEFAULT_BETA,
                 ema: bool = False, ema_decay: float = 0.99):
        super().__init__(num_codes, dim, rng)
        if beta < 0:
            raise ConfigError(f"beta must be non-negative, got {beta}")
        if not (0 < ema_decay < 1):
            raise ConfigError(f"ema_decay must lie in (0, 1), got {ema_decay}")
        self.beta = float(beta)
        self.ema = ema
        self.ema_decay = float(ema_decay)
        self.codebook_vectors = EmbeddingCodebook(num_codes, dim, rng, trainable=not ema)
        if ema:
            self.ema_cluster_size = DiffTensor(np.ones(num_codes), name='ema_cluster_size')
            self.ema_weight = DiffTensor(self.codebook_vectors.weight.values.copy(), name='ema_weight')

    def quantize_flat(self, z: DiffTensor):
        if not self.ema:
            z_q, indices, aux, _ = _kmeans_select(z, self.codebook_vectors, self.beta)
            return z_q, indices, aux, None

        indices = nearest_codes(z.values, self.codebook_vectors.weight.values)
        selected = self.codebook_vectors.weight.values[indices]
        aux = self.beta * dc.mean(dc.sum((z - selected) ** 2, axis=-1))
        if self.mode == 'train':
            self._ema_update(z.values, indices)
        return dc.straight_through(selected, z), indices, aux, None

    def _ema_update(self, z: np.ndarray, indices: np.ndarray):
        """EMA размеров кластеров и сумм латентов, кодбук их отношение"""
        encodings = np.zeros((z.shape[0], self.num_codes))
        encodings[np.arange(z.shape[0]), indices] = 1.0
        decay = self.ema_decay
        size = self.ema_cluster_size.values * decay + (1.0 - decay) * encodings.sum(axis=0)
        total = size.sum()
        size = (size + EMA_EPSILON) / (total + self.num_codes * EMA_EPSILON) * total
        self.ema_cluster_size.values[...] = size
        self.ema_weight.values[...] = self.ema_weight.values * decay + (1.0 - decay) * (encodings.T @ z)
        self.codebook_vectors.weight.values[...] = self.ema_weight.values / size[:, None]

    def codebook(self) -> np.ndarray:
        return self.codebook_vectors.weight.values.copy()

