import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core import diffcore as dc
from core import geometry as geo
from core.diffcore import DiffTensor
from core.errors import ConfigError, GeometryError
from core.geometry import BallConfig, TangentVector
from services.layers import Module
from services.quantizer_base import (
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

# Нормали короче этого порога пересэмплируются после шага оптимизатора
DEGENERATE_NORMAL = 1e-8
OFFSET_INIT = 0.1


@dataclass(frozen=True)
class HyperbolicHyperplane:
    """Однонаправленная гиперплоскость: нормаль ``a`` в касательном пространстве нуля и сдвиг ``r``"""
    a: TangentVector
    r: float

    def __post_init__(self):
        """Нормаль и сдвиг должны быть конечными"""
        if not np.all(np.isfinite(self.a.coords.values)) or not math.isfinite(self.r):
            raise GeometryError("hyperplane parameters must be finite")

    def foot_point(self, config: BallConfig) -> np.ndarray:
        """Основание гиперплоскости на шаре"""
        return geo.hyperplane_foot_point(self.a.coords, np.asarray(self.r), config.curvature).values

    def representative(self) -> np.ndarray:
        """r * a / |a|: касательный вектор, чей exp_0 и есть основание гиперплоскости"""
        return hypervq_codebook_arrays(self.a.coords.values[None, :], np.asarray([self.r]))[0]


class HyperplaneBank(Module):
    """K обучаемых гиперплоскостей: матрица нормалей (K, d) и вектор сдвигов (K,)"""

    def __init__(self, num_planes: int, dim: int, rng: np.random.Generator, ball: Optional[BallConfig] = None):
        if num_planes < 2:
            raise ConfigError(f"need at least 2 hyperplanes, got {num_planes}")
        self.normals = dc.parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(num_planes, dim)), name='normals')
        self.offsets = dc.parameter(rng.uniform(-OFFSET_INIT, OFFSET_INIT, size=num_planes), name='offsets')
        self.ball = ball or BallConfig()

    @property
    def num_planes(self) -> int:
        return self.normals.shape[0]

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def planes(self) -> List[HyperbolicHyperplane]:
        """Копии плоскостей как отдельные объекты"""
        return [
            HyperbolicHyperplane(TangentVector(self.normals.values[k].copy()), float(self.offsets.values[k]))
            for k in range(self.num_planes)
        ]

    def resample_degenerate(self, rng: np.random.Generator) -> int:
        """Пересэмплирует почти нулевые нормали; возвращает их число"""
        norms = np.linalg.norm(self.normals.values, axis=1)
        bad = np.flatnonzero(norms < DEGENERATE_NORMAL)
        for k in bad:
            self.normals.values[k] = rng.normal(0.0, 1.0 / math.sqrt(self.dim), size=self.dim)
            self.offsets.values[k] = rng.uniform(-OFFSET_INIT, OFFSET_INIT)
        if bad.size:
            logger.warning(f"Re-sampled {bad.size} degenerate hyperplane(s): {bad.tolist()}")
        return int(bad.size)


def _check_normals(normals: np.ndarray):
    """Нулевая нормаль не задаёт гиперплоскость"""
    norms = np.linalg.norm(normals, axis=-1)
    if np.any(norms == 0):
        raise GeometryError(f"degenerate hyperplane normal at index {int(np.flatnonzero(norms == 0)[0])}")


def hypervq_logits(z_e, planes: HyperplaneBank, cfg: BallConfig) -> DiffTensor:
    """Знаковые счёты гиперболической MLR спроецированных латентов для каждой плоскости.

    z_e (..., d) переводится в шар через exp_0, обрезается по безопасной оболочке
    и сравнивается с K плоскостями, на выходе логиты (..., K).
    """
    z_e = dc.as_tensor(z_e)
    if z_e.shape[-1] != planes.dim:
        raise GeometryError(f"latent dimension {z_e.shape[-1]} does not match plane dimension {planes.dim}")
    _check_normals(planes.normals.values)
    z_h = geo.safe_project_tensor(geo.exp_map_origin_tensor(z_e, cfg.curvature), cfg)
    z_h = dc.reshape(z_h, z_h.shape[:-1] + (1, planes.dim))
    return geo.hyperplane_score_tensor(z_h, planes.normals, planes.offsets, cfg.curvature)


def hypervq_codebook_tensor(normals, offsets) -> DiffTensor:
    """Дифференцируемая версия кодбука r_k * a_k / |a_k|"""
    normals, offsets = dc.as_tensor(normals), dc.as_tensor(offsets)
    _check_normals(normals.values)
    unit = normals / dc.l2_norm(normals, keepdims=True)
    return dc.reshape(offsets, offsets.shape + (1,)) * unit


def hypervq_codebook_arrays(normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Кодбук из голых массивов нормалей и сдвигов"""
    normals = np.asarray(normals, dtype=np.float64)
    _check_normals(normals)
    return np.asarray(offsets, dtype=np.float64)[:, None] * normals / np.linalg.norm(normals, axis=1, keepdims=True)


def hypervq_codebook(planes: HyperplaneBank, cfg: Optional[BallConfig] = None) -> np.ndarray:
    """Строки кодбука r_k * a_k / |a_k| массивом (K, d).

    Строки лежат в касательном пространстве нуля; ``cfg``, если передан, должен
    совпадать с шаром, для которого построены плоскости.
    """
    if cfg is not None and cfg != planes.ball:
        raise GeometryError(f"ball config {cfg} does not match the hyperplane bank's {planes.ball}")
    return hypervq_codebook_arrays(planes.normals.values, planes.offsets.values)


def _hypervq_select(flat: DiffTensor, planes: HyperplaneBank, schedule: TemperatureSchedule, cfg: BallConfig,
                    mode: str, rng: np.random.Generator, hard: bool
                    ) -> Tuple[DiffTensor, np.ndarray, DiffTensor, DiffTensor]:
    """Логиты, выбор Gumbel-softmax и z_q как взвешенная сумма строк кодбука"""
    logits = hypervq_logits(flat, planes, cfg)
    selection = gumbel_softmax_sample(logits, schedule.temperature, hard=hard, rng=rng, mode=mode)
    indices = argmax_lowest(selection.values)
    z_q = dc.matmul(selection, hypervq_codebook_tensor(planes.normals, planes.offsets))
    if mode == 'train':
        schedule.advance()
    return z_q, indices, zero_loss(), logits


def hypervq_forward(z_e, planes: HyperplaneBank, schedule: TemperatureSchedule, cfg: BallConfig,
                    mode: str = 'train', rng: Optional[np.random.Generator] = None,
                    hard: bool = True) -> QuantizeResult:
    """Функциональная версия HyperVQ над готовыми плоскостями"""
    z_e = dc.as_tensor(z_e)
    flat = flatten_latents(z_e, planes.dim, 'hypervq')
    rng = rng if rng is not None else np.random.default_rng()
    z_q, indices, aux, logits = _hypervq_select(flat, planes, schedule, cfg, mode, rng, hard)
    return build_result(z_e.shape, z_q, indices, aux, logits, planes.num_planes)


class HyperVQ(ScheduledQuantizer):
    """Код выбирается гиперболической MLR по K гиперплоскостям, строка k кодбука равна r_k * a_k / |a_k|"""

    name = 'hypervq'

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator,
                 ball: Optional[BallConfig] = None, schedule: Optional[TemperatureSchedule] = None,
                 hard: bool = True):
        super().__init__(num_codes, dim, rng, schedule=schedule, hard=hard)
        self.ball = ball or BallConfig()
        self.planes = HyperplaneBank(num_codes, dim, rng, self.ball)

    def quantize_flat(self, z: DiffTensor):
        return _hypervq_select(z, self.planes, self.schedule, self.ball, self.mode, self._rng, self.hard)

    def codebook(self) -> np.ndarray:
        return hypervq_codebook(self.planes, self.ball)

    def after_step(self):
        """Вырожденные нормали пересэмплируются после шага"""
        self.planes.resample_degenerate(self._rng)

