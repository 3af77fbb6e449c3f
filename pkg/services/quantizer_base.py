"""Общая обвязка всех вариантов квантизатора.

Квантизатор получает латенты энкодера с латентной размерностью на последней
оси, разворачивает их в (M, d), выбирает по коду на строку и возвращает
квантованные латенты исходной формы вместе с индексами, дополнительным loss
и гистограммой использования кодов.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import ConfigError, DomainError, ShapeError
from services.layers import Module

logger = logging.getLogger(__name__)

MODES = ('train', 'eval')

# Доля шагов обучения, за которую температура опускается до tau_min
TAU_DECAY_FRACTION = 0.7


class TemperatureSchedule:
    """Экспоненциально убывающая температура Gumbel: tau(j) = max(tau_max * decay^j, tau_min)"""

    def __init__(self, tau_max: float = 2.0, tau_min: float = 0.5, decay: float = 1.0, step: int = 0):
        """decay = 1 оставляет температуру постоянной"""
        if not (0 < tau_min <= tau_max):
            raise ConfigError(f"temperature bounds must satisfy 0 < tau_min <= tau_max, got {tau_min}, {tau_max}")
        if not (0 < decay <= 1):
            raise ConfigError(f"temperature decay must lie in (0, 1], got {decay}")
        self.tau_max = float(tau_max)
        self.tau_min = float(tau_min)
        self.decay = float(decay)
        self.step = int(step)

    @classmethod
    def for_steps(cls, total_steps: int, tau_max: float = 2.0, tau_min: float = 0.5,
                  fraction: float = TAU_DECAY_FRACTION) -> 'TemperatureSchedule':
        """Подбирает decay так, чтобы tau дошла до tau_min за fraction * total_steps шагов"""
        horizon = max(1.0, fraction * max(1, total_steps))
        decay = (tau_min / tau_max) ** (1.0 / horizon) if tau_max > 0 else 1.0
        return cls(tau_max=tau_max, tau_min=tau_min, decay=decay)

    def temperature_at(self, step: int) -> float:
        """Температура на шаге step"""
        return max(self.tau_max * self.decay ** step, self.tau_min)

    @property
    def temperature(self) -> float:
        """Температура на текущем шаге"""
        return self.temperature_at(self.step)

    def advance(self):
        """Следующий шаг расписания"""
        self.step += 1

    def __repr__(self):
        return (f"TemperatureSchedule(tau_max={self.tau_max}, tau_min={self.tau_min}, "
                f"decay={self.decay}, step={self.step})")


@dataclass
class QuantizeResult:
    z_q: DiffTensor
    indices: np.ndarray
    aux_loss: DiffTensor
    usage_counts: np.ndarray
    logits: Optional[DiffTensor] = None

    @property
    def perplexity(self) -> float:
        """exp энтропии использования кодов в пакете"""
        total = self.usage_counts.sum()
        if total == 0:
            return 1.0
        p = self.usage_counts[self.usage_counts > 0] / total
        return float(math.exp(-np.sum(p * np.log(p))))


def argmax_lowest(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """argmax, при равенстве побеждает меньший индекс"""
    # np.argmax/np.argmin already return the first index on ties
    return np.argmax(values, axis=axis)


def gumbel_softmax_sample(logits, tau: float, hard: bool = True,
                          rng: Optional[np.random.Generator] = None, mode: str = 'train') -> DiffTensor:
    """Выбор Gumbel-softmax по последней оси.

    В режиме eval шума нет, результат это one-hot от argmax.
    В режиме train мягкая выборка равна softmax((logits + g) / tau); при
    ``hard`` прямой проход отдаёт one-hot её argmax, а градиент идёт через
    мягкую выборку.
    """
    logits = dc.as_tensor(logits)
    if not tau > 0:
        raise DomainError(f"gumbel temperature must be positive, got {tau}")
    num_classes = logits.shape[-1]
    if mode == 'eval':
        return dc.one_hot(argmax_lowest(logits.values), num_classes)

    rng = rng if rng is not None else np.random.default_rng()
    u = np.maximum(rng.random(logits.shape), np.finfo(np.float64).tiny)
    gumbel = -np.log(-np.log(u))
    soft = dc.softmax((logits + gumbel) / tau)
    if not hard:
        return soft
    return dc.straight_through(dc.one_hot(argmax_lowest(soft.values), num_classes), soft)


class EmbeddingCodebook(Module):
    """Матрица K x d свободных векторов кодбука"""

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator, trainable: bool = True):
        if num_codes < 2:
            raise ConfigError(f"a codebook needs at least 2 vectors, got {num_codes}")
        init = rng.uniform(-1.0 / num_codes, 1.0 / num_codes, size=(num_codes, dim))
        self.weight = DiffTensor(init, requires_grad=trainable, name='codebook')

    @property
    def num_codes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def check_finite(self):
        """Кодбук не должен содержать nan или inf"""
        if not np.all(np.isfinite(self.weight.values)):
            raise DomainError("codebook contains non-finite entries")


def commitment_loss(z_e: DiffTensor, z_q_cb: DiffTensor, beta: float) -> DiffTensor:
    """|sg[z_e] - z_q|^2 + beta * |z_e - sg[z_q]|^2: квадрат нормы по строке, среднее по строкам"""
    codebook_term = dc.mean(dc.sum((dc.stop_gradient(z_e) - z_q_cb) ** 2, axis=-1))
    commit_term = dc.mean(dc.sum((z_e - dc.stop_gradient(z_q_cb)) ** 2, axis=-1))
    return codebook_term + beta * commit_term


class Quantizer(Module):
    """Базовый класс: наследники реализуют ``quantize_flat`` над строками (M, d)"""

    name = 'base'

    def __init__(self, num_codes: int, dim: int, rng: Optional[np.random.Generator] = None):
        if dim < 1:
            raise ConfigError(f"latent dimension must be positive, got {dim}")
        self.num_codes = int(num_codes)
        self.dim = int(dim)
        self.mode = 'train'
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def train(self) -> 'Quantizer':
        """Режим обучения: шум Gumbel и шаг расписания включены"""
        self.mode = 'train'
        return self

    def eval(self) -> 'Quantizer':
        """Режим оценки: детерминированный выбор кода"""
        self.mode = 'eval'
        return self

    def quantize_flat(self, z: DiffTensor) -> Tuple[DiffTensor, np.ndarray, DiffTensor, Optional[DiffTensor]]:
        """(z_q, indices, aux_loss, logits) для строк (M, d)"""
        raise NotImplementedError

    def codebook(self) -> np.ndarray:
        """Векторы кодбука в латентном (касательном) пространстве, форма (K, d)"""
        raise NotImplementedError

    def after_step(self):
        """Вызывается циклом обучения после каждого шага оптимизатора"""

    def forward(self, z_e) -> QuantizeResult:
        """Квантует латенты (..., d) в текущем режиме"""
        if self.mode not in MODES:
            raise ConfigError(f"unknown quantizer mode '{self.mode}'")
        z_e = dc.as_tensor(z_e)
        flat = flatten_latents(z_e, self.dim, self.name)
        z_q, indices, aux_loss, logits = self.quantize_flat(flat)
        return build_result(z_e.shape, z_q, indices, aux_loss, logits, self.num_codes)

    def __call__(self, z_e) -> QuantizeResult:
        return self.forward(z_e)


def flatten_latents(z_e: DiffTensor, dim: int, owner: str = 'quantizer') -> DiffTensor:
    """(..., d) -> (M, d) с проверкой латентной размерности"""
    if z_e.ndim < 1 or z_e.shape[-1] != dim:
        raise ShapeError(f"{owner}: expected latents with last dimension {dim}, got {z_e.shape}")
    return dc.reshape(z_e, (-1, dim))


def build_result(shape: Tuple[int, ...], z_q: DiffTensor, indices: np.ndarray, aux_loss: DiffTensor,
                 logits: Optional[DiffTensor], num_codes: int) -> QuantizeResult:
    """Возвращает плоские выходы (M, ...) на латентную сетку"""
    indices = np.asarray(indices, dtype=np.int64)
    usage = np.bincount(indices.ravel(), minlength=num_codes).astype(np.int64)
    if logits is not None:
        logits = dc.reshape(logits, tuple(shape[:-1]) + (logits.shape[-1],))
    return QuantizeResult(
        z_q=dc.reshape(z_q, shape),
        indices=indices.reshape(shape[:-1]),
        aux_loss=aux_loss,
        usage_counts=usage,
        logits=logits,
    )


def zero_loss() -> DiffTensor:
    """Нулевой дополнительный loss"""
    return DiffTensor(np.zeros(()))


class ScheduledQuantizer(Quantizer):
    """Квантизатор с выбором кода через Gumbel-softmax по расписанию температуры"""

    def __init__(self, num_codes: int, dim: int, rng: Optional[np.random.Generator] = None,
                 schedule: Optional[TemperatureSchedule] = None, hard: bool = True):
        super().__init__(num_codes, dim, rng)
        self.schedule = schedule or TemperatureSchedule()
        self.hard = hard

    def extra_state(self):
        """Шаг расписания сохраняется в чекпоинте"""
        return {'schedule_step': np.asarray(float(self.schedule.step))}

    def load_extra_state(self, state):
        """Восстанавливает шаг расписания"""
        if 'schedule_step' in state:
            self.schedule.step = int(np.asarray(state['schedule_step']).reshape(()))
