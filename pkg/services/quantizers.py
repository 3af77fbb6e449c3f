import logging
from typing import Optional

import numpy as np

from core.diffcore import DiffTensor
from core.errors import ConfigError
from core.geometry import BallConfig
from services.gumbel_quantizer import GumbelVQ
from services.hyper_embmat_quantizer import HyperEmbMatVQ
from services.hyper_kmeans_quantizer import HyperKmeansVQ
from services.hypervq_quantizer import HyperVQ
from services.kmeans_quantizer import KmeansVQ
from services.quantizer_base import Quantizer, TemperatureSchedule, zero_loss

logger = logging.getLogger(__name__)


class IdentityQuantizer(Quantizer):
    """Отладочный режим без квантования: VQVAE становится обычным автоэнкодером"""

    name = 'identity'

    def __init__(self, dim: int, rng: Optional[np.random.Generator] = None):
        super().__init__(1, dim, rng)

    def quantize_flat(self, z: DiffTensor):
        return z, np.zeros(z.shape[0], dtype=np.int64), zero_loss(), None

    def codebook(self) -> np.ndarray:
        """Кодбука нет, одна нулевая строка"""
        return np.zeros((1, self.dim))


QUANTIZERS = {
    'hypervq': HyperVQ,
    'kmeansvq': KmeansVQ,
    'gumbelvq': GumbelVQ,
    'hyperkmeansvq': HyperKmeansVQ,
    'hyperembmatvq': HyperEmbMatVQ,
    'identity': IdentityQuantizer,
}


def build_schedule(config, total_steps: int) -> TemperatureSchedule:
    """tau_decay > 0 задаёт decay явно, иначе он выводится из числа шагов"""
    if config.tau_decay > 0:
        return TemperatureSchedule(config.tau_max, config.tau_min, config.tau_decay)
    return TemperatureSchedule.for_steps(total_steps, config.tau_max, config.tau_min)


def get_quantizer(name: str, config, rng: np.random.Generator, total_steps: int = 1) -> Quantizer:
    """Создаёт квантизатор ``name`` по RunConfig"""
    if name not in QUANTIZERS:
        raise ConfigError(f"unknown quantizer '{name}', expected one of: {', '.join(QUANTIZERS)}")

    k, d = config.num_codes, config.latent_dim
    ball = BallConfig(config.curvature, config.boundary_eps)

    if name == 'hypervq':
        quantizer = HyperVQ(k, d, rng, ball=ball, schedule=build_schedule(config, total_steps),
                            hard=config.gumbel_hard)
    elif name == 'kmeansvq':
        quantizer = KmeansVQ(k, d, rng, beta=config.beta, ema=config.kmeans_ema, ema_decay=config.ema_decay)
    elif name == 'gumbelvq':
        quantizer = GumbelVQ(k, d, rng, schedule=build_schedule(config, total_steps), hard=config.gumbel_hard)
    elif name == 'hyperkmeansvq':
        quantizer = HyperKmeansVQ(k, d, rng, beta=config.beta, ball=ball)
    elif name == 'hyperembmatvq':
        quantizer = HyperEmbMatVQ(k, d, rng, ball=ball, schedule=build_schedule(config, total_steps),
                                  hard=config.gumbel_hard)
    else:
        quantizer = IdentityQuantizer(d, rng)

    logger.info(f"Built quantizer {name}: K={quantizer.num_codes}, d={d}, "
                f"trainable tensors={len(quantizer.parameters())}")
    return quantizer
