import logging
import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import CheckpointError

logger = logging.getLogger(__name__)


class Module:
    """Базовый класс: параметры это атрибуты DiffTensor, подмодули это атрибуты Module"""

    def named_tensors(self, prefix: str = '') -> Iterator[Tuple[str, DiffTensor]]:
        """Все тензоры модуля и подмодулей с точечными именами"""
        for key, value in vars(self).items():
            if key.startswith('_'):
                continue
            if isinstance(value, DiffTensor):
                yield f"{prefix}{key}", value
            elif isinstance(value, Module):
                yield from value.named_tensors(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{prefix}{key}.{i}.")

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, DiffTensor]]:
        """Только обучаемые тензоры"""
        for name, tensor in self.named_tensors(prefix):
            if tensor.requires_grad:
                yield name, tensor

    def parameters(self) -> List[DiffTensor]:
        """Список обучаемых тензоров для оптимизатора"""
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        """Сбрасывает градиенты"""
        for _, tensor in self.named_tensors():
            tensor.grad = None

    def freeze(self):
        """Переводит все тензоры модуля в режим без градиентов"""
        for _, tensor in self.named_tensors():
            tensor.requires_grad = False
            tensor.grad = None

    def extra_state(self) -> Dict[str, np.ndarray]:
        """Состояние вне тензоров (счётчики, расписания), которое должно пережить чекпоинт"""
        return {}

    def load_extra_state(self, state: Dict[str, np.ndarray]):
        """Восстанавливает состояние из extra_state; по умолчанию его нет"""
        pass

    def named_modules(self, prefix: str = '') -> Iterator[Tuple[str, 'Module']]:
        """Сам модуль и все вложенные, с префиксами имён"""
        yield prefix, self
        for key, value in vars(self).items():
            if key.startswith('_'):
                continue
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def state_dict(self, prefix: str = '') -> Dict[str, np.ndarray]:
        """Копии всех тензоров плюс extra_state каждого подмодуля"""
        state = {name: tensor.values.copy() for name, tensor in self.named_tensors(prefix)}
        for module_prefix, module in self.named_modules(prefix):
            for name, array in module.extra_state().items():
                state[f"{module_prefix}{name}"] = np.asarray(array, dtype=np.float64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = ''):
        """Загружает веса на месте; формы должны совпадать"""
        for name, tensor in self.named_tensors(prefix):
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor '{name}'")
            array = np.asarray(state[name], dtype=np.float64)
            if array.shape != tensor.shape:
                raise CheckpointError(
                    f"tensor '{name}' has shape {array.shape} in checkpoint, model expects {tensor.shape}"
                )
            tensor.values[...] = array
        for module_prefix, module in self.named_modules(prefix):
            module.load_extra_state(
                {k[len(module_prefix):]: v for k, v in state.items() if k.startswith(module_prefix)}
            )


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Равномерная инициализация в ±1/sqrt(fan_in)"""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Свёртка с квадратным ядром и смещением"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = dc.parameter(_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = dc.parameter(_uniform(rng, (out_channels,), fan_in))
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> DiffTensor:
        """(N, C, H, W) -> (N, O, H', W')"""
        out = dc.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + dc.reshape(self.bias, (1, -1, 1, 1))


class ConvTranspose2d(Module):
    """Транспонированная свёртка для апсемплинга в декодере"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_in = out_channels * kernel_size * kernel_size
        self.weight = dc.parameter(_uniform(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in))
        self.bias = dc.parameter(_uniform(rng, (out_channels,), fan_in))
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> DiffTensor:
        """Транспонированная свёртка плюс смещение по каналам"""
        out = dc.conv_transpose2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + dc.reshape(self.bias, (1, -1, 1, 1))


class Linear(Module):
    """Полносвязный слой, вес хранится как (in, out)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = dc.parameter(_uniform(rng, (in_features, out_features), in_features))
        self.bias = dc.parameter(_uniform(rng, (out_features,), in_features))

    def __call__(self, x) -> DiffTensor:
        """x @ W + b"""
        return dc.matmul(x, self.weight) + self.bias


class ResidualBlock(Module):
    """x + conv1x1(relu(conv3x3(relu(x))))"""

    def __init__(self, channels: int, hidden_channels: int, rng: np.random.Generator):
        self.conv3 = Conv2d(channels, hidden_channels, 3, rng, padding=1)
        self.conv1 = Conv2d(hidden_channels, channels, 1, rng)

    def __call__(self, x) -> DiffTensor:
        return x + self.conv1(dc.relu(self.conv3(dc.relu(x))))
