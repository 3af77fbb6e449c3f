import logging
import math
from typing import Optional

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import ShapeError
from services.quantizer_base import (
    EmbeddingCodebook,
    QuantizeResult,
    ScheduledQuantizer,
    TemperatureSchedule,
    argmax_lowest,
    build_result,
    flatten_latents,
    gumbel_softmax_sample,
    zero_loss,
)

logger = logging.getLogger(__name__)


def _gumbel_select(flat: DiffTensor, codebook: EmbeddingCodebook, weight: DiffTensor, bias: DiffTensor,
                   schedule: TemperatureSchedule, mode: str, rng: np.random.Generator, hard: bool):
    """Линейные логиты и взвешенная сумма строк кодбука"""
    if weight.shape != (flat.shape[-1], codebook.num_codes):
        raise ShapeError(
            f"projection {weight.shape} does not map latent dim {flat.shape[-1]} to {codebook.num_codes} codes"
        )
    logits = dc.matmul(flat, weight) + bias
    selection = gumbel_softmax_sample(logits, schedule.temperature, hard=hard, rng=rng, mode=mode)
    indices = argmax_lowest(selection.values)
    z_q = dc.matmul(selection, codebook.weight)
    if mode == 'train':
        schedule.advance()
    return z_q, indices, zero_loss(), logits


def gumbelvq_forward(z_e, codebook: EmbeddingCodebook, projection_weight, projection_bias,
                     schedule: TemperatureSchedule, mode: str = 'train',
                     rng: Optional[np.random.Generator] = None, hard: bool = True) -> QuantizeResult:
    """Функциональная версия GumbelVQ"""
    z_e = dc.as_tensor(z_e)
    flat = flatten_latents(z_e, codebook.dim, 'gumbelvq')
    rng = rng if rng is not None else np.random.default_rng()
    z_q, indices, aux, logits = _gumbel_select(
        flat, codebook, dc.as_tensor(projection_weight), dc.as_tensor(projection_bias), schedule, mode, rng, hard
    )
    return build_result(z_e.shape, z_q, indices, aux, logits, codebook.num_codes)


class GumbelVQ(ScheduledQuantizer):
    """Логиты даёт линейный слой, код выбирается Gumbel-softmax из свободной матрицы эмбеддингов"""

    name = 'gumbelvq'

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator,
                 schedule: Optional[TemperatureSchedule] = None, hard: bool = True):
        super().__init__(num_codes, dim, rng, schedule=schedule, hard=hard)
        self.codebook_vectors = EmbeddingCodebook(num_codes, dim, rng)
        bound = 1.0 / math.sqrt(dim)
        self.projection_weight = dc.parameter(rng.uniform(-bound, bound, size=(dim, num_codes)), name='projection_weight')
        self.projection_bias = dc.parameter(np.zeros(num_codes), name='projection_bias')

    def quantize_flat(self, z: DiffTensor):
        return _gumbel_select(z, self.codebook_vectors, self.projection_weight, self.projection_bias,
                              self.schedule, self.mode, self._rng, self.hard)

    def codebook(self) -> np.ndarray:
        return self.codebook_vectors.weight.values.copy()

