import logging
from typing import Optional

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import ShapeError
from core.geometry import BallConfig
from services.hypervq_quantizer import HyperplaneBank, hypervq_logits
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


def _hyper_embmat_select(flat: DiffTensor, planes: HyperplaneBank, codebook: EmbeddingCodebook,
                         schedule: TemperatureSchedule, cfg: BallConfig, mode: str,
                         rng: np.random.Generator, hard: bool):
    """Логиты гиперболической MLR и взвешенная сумма строк матрицы эмбеддингов"""
    if codebook.num_codes != planes.num_planes or codebook.dim != planes.dim:
        raise ShapeError(
            f"embedding matrix {codebook.weight.shape} does not match {planes.num_planes} planes of dim {planes.dim}"
        )
    logits = hypervq_logits(flat, planes, cfg)
    selection = gumbel_softmax_sample(logits, schedule.temperature, hard=hard, rng=rng, mode=mode)
    indices = argmax_lowest(selection.values)
    z_q = dc.matmul(selection, codebook.weight)
    if mode == 'train':
        schedule.advance()
    return z_q, indices, zero_loss(), logits


def hyper_embmat_forward(z_e, planes: HyperplaneBank, codebook: EmbeddingCodebook, schedule: TemperatureSchedule,
                         cfg: BallConfig, mode: str = 'train', rng: Optional[np.random.Generator] = None,
                         hard: bool = True) -> QuantizeResult:
    """Функциональная версия HyperEmbMatVQ"""
    z_e = dc.as_tensor(z_e)
    flat = flatten_latents(z_e, planes.dim, 'hyperembmatvq')
    rng = rng if rng is not None else np.random.default_rng()
    z_q, indices, aux, logits = _hyper_embmat_select(flat, planes, codebook, schedule, cfg, mode, rng, hard)
    return build_result(z_e.shape, z_q, indices, aux, logits, planes.num_planes)


class HyperEmbMatVQ(ScheduledQuantizer):
    """Выбор гиперболической MLR, векторы кодов из свободной матрицы эмбеддингов"""

    name = 'hyperembmatvq'

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator,
                 ball: Optional[BallConfig] = None, schedule: Optional[TemperatureSchedule] = None,
                 hard: bool = True):
        super().__init__(num_codes, dim, rng, schedule=schedule, hard=hard)
        self.ball = ball or BallConfig()
        self.planes = HyperplaneBank(num_codes, dim, rng, self.ball)
        self.codebook_vectors = EmbeddingCodebook(num_codes, dim, rng)

    def quantize_flat(self, z: DiffTensor):
        return _hyper_embmat_select(z, self.planes, self.codebook_vectors, self.schedule, self.ball,
                                    self.mode, self._rng, self.hard)

    def codebook(self) -> np.ndarray:
        return self.codebook_vectors.weight.values.copy()

    def after_step(self):
        self.planes.resample_degenerate(self._rng)
