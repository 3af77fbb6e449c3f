"""Операции шара Пуанкаре на примитивах diffcore.

Функции принимают DiffTensor или массивы с размерностью шара на последней оси
(ведущие оси с broadcast): один и тот же код считает отдельные точки, пакеты
латентов и попарные таблицы N×K, градиенты проходят через всё.
``BallPoint`` и ``TangentVector`` проверяют инварианты на границе API.
"""
import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import GeometryError

logger = logging.getLogger(__name__)

DEFAULT_CURVATURE = 1.0
DEFAULT_BOUNDARY_EPS = 1e-5

# Относительный отступ от границы шара: несколько ulp у 1.0
BOUNDARY_NUDGE = 16 * np.finfo(np.float64).eps
# Насколько аргумент artanh может выйти за 1 из-за округления
DOMAIN_SLACK = 1e-7

Coords = Union[DiffTensor, np.ndarray, list, tuple]


@dataclass(frozen=True)
class BallConfig:
    curvature: float = DEFAULT_CURVATURE
    boundary_eps: float = DEFAULT_BOUNDARY_EPS

    def __post_init__(self):
        """Кривизна положительна, eps внутри (0, 1)"""
        if not (self.curvature > 0 and math.isfinite(self.curvature)):
            raise GeometryError(f"curvature must be positive and finite, got {self.curvature}")
        if not (0 < self.boundary_eps < 1):
            raise GeometryError(f"boundary_eps must lie in (0, 1), got {self.boundary_eps}")

    @property
    def sqrt_c(self) -> float:
        return math.sqrt(self.curvature)

    @property
    def radius(self) -> float:
        """Радиус шара 1/sqrt(c)"""
        return 1.0 / self.sqrt_c

    @property
    def shell_radius(self) -> float:
        """Наибольшая норма после safe_project: (1 - eps) / sqrt(c)"""
        return (1.0 - self.boundary_eps) / self.sqrt_c


@dataclass(frozen=True)
class BallPoint:
    coords: DiffTensor
    config: BallConfig

    def __post_init__(self):
        """Координаты конечны и строго внутри шара"""
        object.__setattr__(self, 'coords', dc.as_tensor(self.coords))
        values = self.coords.values
        if not np.all(np.isfinite(values)):
            raise GeometryError("ball point has non-finite coordinates")
        sq = np.sum(values * values, axis=-1)
        if np.any(self.config.curvature * sq >= 1.0):
            raise GeometryError(
                f"point outside the ball: c*|x|^2 = {float(np.max(self.config.curvature * sq))!r} >= 1"
            )

    @classmethod
    def origin(cls, dim: int, config: BallConfig) -> 'BallPoint':
        """Начало координат шара размерности dim"""
        return cls(DiffTensor(np.zeros(dim)), config)

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]


@dataclass(frozen=True)
class TangentVector:
    """Касательный вектор; в нуле, если базовая точка не передана отдельно"""
    coords: DiffTensor

    def __post_init__(self):
        """Касательный вектор должен быть конечным"""
        object.__setattr__(self, 'coords', dc.as_tensor(self.coords))
        if not np.all(np.isfinite(self.coords.values)):
            raise GeometryError("tangent vector has non-finite entries")

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]


def _coords(value) -> DiffTensor:
    """Координаты точки или вектора как тензор"""
    if isinstance(value, (BallPoint, TangentVector)):
        return value.coords
    return dc.as_tensor(value)


def _same_space(x: BallPoint, y: BallPoint):
    """Обе точки из одного шара одной размерности"""
    if x.config != y.config:
        raise GeometryError(f"mismatched ball configs: {x.config} vs {y.config}")
    if x.dim != y.dim:
        raise GeometryError(f"dimension mismatch: {x.dim} vs {y.dim}")


def _sqnorm(x: DiffTensor) -> DiffTensor:
    """Квадрат нормы по последней оси"""
    return dc.dot(x, x, keepdims=True)


def _unit_domain(t: DiffTensor) -> DiffTensor:
    """Возвращает внутрь (-1, 1) аргументы artanh, округлившиеся до ±1"""
    worst = float(np.max(np.abs(t.values))) if t.size else 0.0
    assert worst < 1.0 + DOMAIN_SLACK, f"artanh argument {worst!r} is outside its domain"
    limit = np.nextafter(1.0, 0.0)
    if worst > limit:
        t = dc.clamp(t, -limit, limit)
    return t


def _safe_norm(x: DiffTensor) -> DiffTensor:
    """Норма, отжатая от нуля, чтобы деление на неё было безопасным"""
    # tanh(s)/s и artanh(s)/s → 1 при s → 0; вместо деления на ноль
    return dc.clamp(dc.l2_norm(x, keepdims=True), lo=1e-15)


# ---------------------------------------------------------------------------
# Тензорные операции (последняя ось: размерность шара)
# ---------------------------------------------------------------------------

def project(x: Coords, c: float) -> DiffTensor:
    """Возвращает точки, округлившиеся на границу или за неё, чуть внутрь"""
    x = dc.as_tensor(x)
    max_norm = (1.0 - BOUNDARY_NUDGE) / math.sqrt(c)
    norm = dc.l2_norm(x, keepdims=True)
    outside = norm.values > max_norm
    if not np.any(outside):
        return x
    scale = dc.where(outside, max_norm / dc.clamp(norm, lo=max_norm), 1.0)
    return x * scale


def mobius_add_tensor(x: Coords, y: Coords, c: float) -> DiffTensor:
    """Сложение Мёбиуса x ⊕_c y"""
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    xy = dc.dot(x, y, keepdims=True)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    numerator = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    denominator = 1.0 + 2.0 * c * xy + (c * c) * x2 * y2
    return project(numerator / denominator, c)


def conformal_factor_tensor(x: Coords, c: float) -> DiffTensor:
    """Конформный множитель 2 / (1 - c|x|^2), с keepdims"""
    x = dc.as_tensor(x)
    return 2.0 / (1.0 - c * _sqnorm(x))


def exp_map_origin_tensor(v: Coords, c: float) -> DiffTensor:
    """exp_0: касательное пространство в нуле -> шар"""
    v = dc.as_tensor(v)
    sqrt_c = math.sqrt(c)
    scaled = sqrt_c * _safe_norm(v)
    return project(dc.tanh(scaled) / scaled * v, c)


def log_map_origin_tensor(y: Coords, c: float) -> DiffTensor:
    """log_0: шар -> касательное пространство в нуле"""
    y = dc.as_tensor(y)
    sqrt_c = math.sqrt(c)
    scaled = sqrt_c * _safe_norm(y)
    return dc.artanh(_unit_domain(scaled)) / scaled * y


def exp_map_tensor(x: Coords, v: Coords, c: float) -> DiffTensor:
    """exp_x через сложение Мёбиуса и конформный множитель"""
    x, v = dc.as_tensor(x), dc.as_tensor(v)
    sqrt_c = math.sqrt(c)
    norm = _safe_norm(v)
    step = dc.tanh(sqrt_c * conformal_factor_tensor(x, c) * norm / 2.0) / (sqrt_c * norm) * v
    return mobius_add_tensor(x, project(step, c), c)


def log_map_tensor(x: Coords, y: Coords, c: float) -> DiffTensor:
    """log_x, обратное к exp_x"""
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    sqrt_c = math.sqrt(c)
    w = mobius_add_tensor(-x, y, c)
    norm = _safe_norm(w)
    factor = 2.0 / (sqrt_c * conformal_factor_tensor(x, c))
    return factor * dc.artanh(_unit_domain(sqrt_c * norm)) / norm * w


def distance_tensor(x: Coords, y: Coords, c: float) -> DiffTensor:
    """Геодезическое расстояние; ведущие оси с broadcast, последняя сворачивается"""
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    sqrt_c = math.sqrt(c)
    w = mobius_add_tensor(-x, y, c)
    return (2.0 / sqrt_c) * dc.artanh(_unit_domain(sqrt_c * dc.l2_norm(w)))


def pairwise_distance(x: Coords, y: Coords, c: float) -> DiffTensor:
    """Таблица (N, K) геодезических расстояний между (N, d) и (K, d)"""
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    return distance_tensor(dc.reshape(x, (x.shape[0], 1, x.shape[-1])),
                           dc.reshape(y, (1, y.shape[0], y.shape[-1])), c)


def safe_project_tensor(p: Coords, config: BallConfig) -> DiffTensor:
    """Точки вне оболочки (1 - eps)/sqrt(c) возвращаются на неё по лучу"""
    p = dc.as_tensor(p)
    if not np.all(np.isfinite(p.values)):
        raise GeometryError("safe_project: non-finite input")
    shell = config.shell_radius
    norm = dc.l2_norm(p, keepdims=True)
    outside = norm.values > shell
    if not np.any(outside):
        return p
    scale = dc.where(outside, shell / dc.clamp(norm, lo=shell), 1.0)
    out = p * scale
    # округление может оставить норму на ulp выше оболочки
    over = np.sqrt(np.sum(out.values * out.values, axis=-1, keepdims=True)) > shell
    if np.any(over):
        out = dc.where(over, out * (1.0 - 8 * np.finfo(np.float64).eps), out)
    return out


def hyperplane_foot_point(a: Coords, r: Coords, c: float) -> DiffTensor:
    """Основание гиперплоскости q = exp_0(r · a/|a|) для нормалей a (..., d) и сдвигов r (...)"""
    a = dc.as_tensor(a)
    r = dc.as_tensor(r)
    unit = a / dc.l2_norm(a, keepdims=True)
    return exp_map_origin_tensor(dc.reshape(r, r.shape + (1,)) * unit, c)


def hyperplane_score_tensor(x: Coords, a: Coords, r: Coords, c: float) -> DiffTensor:
    """Знаковое расстояние от x до однонаправленной гиперплоскости (a, r), умноженное на ‖a‖.

    x (..., d) делает broadcast с a (..., d) и r (...); результат формы (...).
    """
    x, a, r = dc.as_tensor(x), dc.as_tensor(a), dc.as_tensor(r)
    a_norm_values = np.sqrt(np.sum(a.values * a.values, axis=-1))
    if np.any(a_norm_values == 0):
        raise GeometryError("degenerate hyperplane: normal vector has zero norm")
    sqrt_c = math.sqrt(c)
    q = hyperplane_foot_point(a, r, c)
    w = mobius_add_tensor(-q, x, c)
    a_norm = dc.l2_norm(a)
    inner = dc.dot(w, a)
    w2 = dc.dot(w, w)
    argument = 2.0 * sqrt_c * inner / ((1.0 - c * w2) * a_norm)
    return a_norm / sqrt_c * dc.asinh(argument)


# ---------------------------------------------------------------------------
# Типизированный API
# ---------------------------------------------------------------------------

def mobius_add(x: BallPoint, y: BallPoint) -> BallPoint:
    """Сложение Мёбиуса двух точек одного шара"""
    _same_space(x, y)
    return BallPoint(mobius_add_tensor(x.coords, y.coords, x.config.curvature), x.config)


def conformal_factor(x: BallPoint) -> float:
    """λ_x^c = 2 / (1 - c|x|^2); в нуле равен 2"""
    return float(conformal_factor_tensor(x.coords, x.config.curvature).values.reshape(()))


def exp_map(x: BallPoint, v: TangentVector) -> BallPoint:
    """Экспоненциальное отображение в точке x"""
    if x.dim != v.dim:
        raise GeometryError(f"dimension mismatch: point {x.dim} vs tangent {v.dim}")
    return BallPoint(exp_map_tensor(x.coords, v.coords, x.config.curvature), x.config)


def exp_map_origin(v: TangentVector, config: BallConfig) -> BallPoint:
    """Экспоненциальное отображение в нуле"""
    return BallPoint(exp_map_origin_tensor(_coords(v), config.curvature), config)


def log_map(x: BallPoint, y: BallPoint) -> TangentVector:
    """Логарифмическое отображение в точке x"""
    _same_space(x, y)
    return TangentVector(log_map_tensor(x.coords, y.coords, x.config.curvature))


def log_map_origin(y: BallPoint) -> TangentVector:
    """Логарифмическое отображение в нуле"""
    return TangentVector(log_map_origin_tensor(y.coords, y.config.curvature))


def distance(x: BallPoint, y: BallPoint) -> float:
    """Геодезическое расстояние между двумя точками"""
    _same_space(x, y)
    return float(distance_tensor(x.coords, y.coords, x.config.curvature).values.reshape(()))


def safe_project(p: Coords, config: BallConfig) -> BallPoint:
    """Проекция произвольного вектора внутрь шара"""
    return BallPoint(safe_project_tensor(_coords(p), config), config)


def hyperplane_signed_score(x: BallPoint, a: TangentVector, r: float) -> float:
    """Знаковый счёт точки относительно гиперплоскости (a, r)"""
    if x.dim != a.dim:
        raise GeometryError(f"dimension mismatch: point {x.dim} vs normal {a.dim}")
    score = hyperplane_score_tensor(x.coords, a.coords, np.asarray(r, dtype=float), x.config.curvature)
    return float(score.values.reshape(()))
