import logging
from typing import Optional, Sequence, Union

import numpy as np

from core import diffcore as dc
from core import geometry as geo
from core.diffcore import DiffTensor
from core.errors import ConfigError, GeometryError
from core.geometry import BallConfig, BallPoint
from services.kmeans_quantizer import DEFAULT_BETA
from services.quantizer_base import (
    Quantizer,
    QuantizeResult,
    build_result,
    commitment_loss,
    flatten_latents,
)

logger = logging.getLogger(__name__)

BallCodebook = Union[DiffTensor, np.ndarray, Sequence[BallPoint]]


def _ball_points(codebook: BallCodebook, cfg: BallConfig) -> DiffTensor:
    """Кодбук на шаре как таблица (K, d) с проверкой границы"""
    if isinstance(codebook, (list, tuple)) and codebook and isinstance(codebook[0], BallPoint):
        points = DiffTensor(np.stack([p.coords.values for p in codebook]))
    else:
        points = dc.as_tensor(codebook)
    if points.ndim != 2 or points.shape[0] == 0:
        raise GeometryError(f"ball codebook must be a non-empty (K, d) table, got shape {points.shape}")
    sq = np.sum(points.values ** 2, axis=-1)
    if np.any(cfg.curvature * sq >= 1.0) or not np.all(np.isfinite(points.values)):
        raise GeometryError("ball codebook has points outside the ball")
    return points


def nearest_ball_codes(z_h: np.ndarray, points: np.ndarray, cfg: BallConfig) -> np.ndarray:
    """Индекс геодезически ближайшей точки кодбука для каждой строки, при равенстве первый"""
    with dc.no_grad():
        table = geo.pairwise_distance(z_h, points, cfg.curvature).values
    return np.argmin(table, axis=1)


def _hyper_kmeans_select(flat: DiffTensor, points: DiffTensor, beta: float, cfg: BallConfig):
    """Ближайшая точка шара, commitment loss считается в касательном пространстве"""
    with dc.no_grad():
        z_h = geo.safe_project_tensor(geo.exp_map_origin_tensor(flat.values, cfg.curvature), cfg).values
    indices = nearest_ball_codes(z_h, points.values, cfg)
    tangent_codes = geo.log_map_origin_tensor(points, cfg.curvature)
    selected = dc.matmul(dc.one_hot(indices, points.shape[0]), tangent_codes)
    aux = commitment_loss(flat, selected, beta)
    return dc.straight_through(selected.values, flat), indices, aux


def hyper_kmeans_quantize(z_e, codebook_on_ball: BallCodebook, beta: float = DEFAULT_BETA,
                          cfg: Optional[BallConfig] = None) -> QuantizeResult:
    """Ближайшая точка кодбука по расстоянию Пуанкаре; квантованный латент возвращается в касательное пространство"""
    cfg = cfg or BallConfig()
    z_e = dc.as_tensor(z_e)
    points = _ball_points(codebook_on_ball, cfg)
    flat = flatten_latents(z_e, points.shape[1], 'hyperkmeansvq')
    z_q, indices, aux = _hyper_kmeans_select(flat, points, beta, cfg)
    return build_result(z_e.shape, z_q, indices, aux, None, points.shape[0])


class HyperKmeansVQ(Quantizer):
    """KmeansVQ с кодбуком на шаре Пуанкаре.

    Точки кодбука заданы касательными векторами в нуле и переводятся в шар
    через exp_0, поэтому обычный шаг Adam не выводит их за границу.
    """

    name = 'hyperkmeansvq'

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator, beta: float = DEFAULT_BETA,
                 ball: Optional[BallConfig] = None):
        super().__init__(num_codes, dim, rng)
        if num_codes < 2:
            raise ConfigError(f"a codebook needs at least 2 vectors, got {num_codes}")
        self.beta = float(beta)
        self.ball = ball or BallConfig()
        init = rng.uniform(-1.0 / num_codes, 1.0 / num_codes, size=(num_codes, dim))
        self.tangent_codes = dc.parameter(init, name='tangent_codes')

    def points(self) -> DiffTensor:
        """Точки кодбука на шаре"""
        return geo.safe_project_tensor(geo.exp_map_origin_tensor(self.tangent_codes, self.ball.curvature), self.ball)

    def quantize_flat(self, z: DiffTensor):
        z_q, indices, aux = _hyper_kmeans_select(z, self.points(), self.beta, self.ball)
        return z_q, indices, aux, None

    def codebook(self) -> np.ndarray:
        with dc.no_grad():
            return geo.log_map_origin_tensor(self.points(), self.ball.curvature).values.copy()
