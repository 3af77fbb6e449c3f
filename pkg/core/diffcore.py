"""Минимальное автодифференцирование в обратном режиме поверх numpy.

Каждая операция хранит на своём выходе родителей и правило обратного прохода.
``backward`` собирает граф, достижимый от скалярного loss, сортирует его
топологически и один раз проходит в обратном порядке. Граф строится заново на
каждом прямом проходе и не делится между потоками, глобальной ленты нет.
"""
import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DomainError, GradientMissingError, GraphError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    """Включена ли запись графа в текущем потоке"""
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """Отключает запись графа в текущем потоке (eval, метрики)"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class DiffTensor:
    # ndarray <op> DiffTensor falls through to the reflected DiffTensor operator
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        """Значения приводятся к float64"""
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['DiffTensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        """Лист графа: параметр или константа"""
        return self._backward is None and not self._released

    def item(self) -> float:
        """Значение одноэлементного тензора как float"""
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> 'DiffTensor':
        """Копия без истории и без градиента"""
        return DiffTensor(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Обратный проход от этого (скалярного) тензора"""
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.values)

    # Арифметика
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(values, name: Optional[str] = None) -> DiffTensor:
    """Обучаемый лист со своей копией буфера"""
    return DiffTensor(np.array(values, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(value) -> DiffTensor:
    """Оборачивает массив или число в константный тензор"""
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(value)


def _result(values: np.ndarray, parents: Sequence[DiffTensor], backward_fn) -> DiffTensor:
    """Выход операции; граф записывается только если он нужен"""
    out = DiffTensor(values)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Сворачивает градиент после broadcast обратно к форме операнда"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: DiffTensor, b: DiffTensor, op: str):
    """Проверяет совместимость форм для поэлементной операции"""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Граф и обратный проход
# ---------------------------------------------------------------------------

class Graph:
    """Узлы, достижимые от выхода; родители раньше потомков"""

    def __init__(self, nodes: List[DiffTensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: DiffTensor) -> 'Graph':
        """Итеративный обход в глубину, без рекурсии"""
        order: List[DiffTensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            if node._released:
                raise GraphError("graph was already consumed by backward(); run a new forward pass")
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def release(self):
        """Освобождает замыкания: повторный backward по графу запрещён"""
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True


def backward(loss: DiffTensor):
    """Заполняет .grad у всех листьев, достижимых от скалярного loss"""
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph was already consumed by backward(); run a new forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    graph = Graph.from_output(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad, dtype=DTYPE), parent.shape)
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    graph.release()


# ---------------------------------------------------------------------------
# Поэлементные примитивы
# ---------------------------------------------------------------------------

def add(a, b) -> DiffTensor:
    """Поэлементная сумма с broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b) -> DiffTensor:
    """Поэлементная разность с broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> DiffTensor:
    """Поэлементное произведение с broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> DiffTensor:
    """Поэлементное деление с broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'div')
    av, bv = a.values, b.values
    return _result(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a) -> DiffTensor:
    a = as_tensor(a)
    return _result(-a.values, (a,), lambda g: (-g,))


def pow(a, exponent: float) -> DiffTensor:
    """Степень с постоянным показателем"""
    a = as_tensor(a)
    exponent = float(exponent)
    av = a.values
    if not exponent.is_integer() and np.any(av < 0):
        raise DomainError(f"pow: negative base with non-integer exponent {exponent}")
    return _result(av ** exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1.0),))


def sqrt(a) -> DiffTensor:
    """Квадратный корень, отрицательный аргумент запрещён"""
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a.values)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> DiffTensor:
    """Экспонента"""
    a = as_tensor(a)
    out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> DiffTensor:
    """Натуральный логарифм, только положительный аргумент"""
    a = as_tensor(a)
    av = a.values
    if np.any(av <= 0):
        raise DomainError("log: non-positive argument")
    return _result(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> DiffTensor:
    """Гиперболический тангенс"""
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def artanh(a) -> DiffTensor:
    """Обратный тангенс, только |a| < 1"""
    a = as_tensor(a)
    av = a.values
    if np.any(np.abs(av) >= 1.0):
        worst = float(np.max(np.abs(av)))
        raise DomainError(f"artanh: |argument| must be < 1, got {worst!r}")
    return _result(np.arctanh(av), (a,), lambda g: (g / (1.0 - av * av),))


def asinh(a) -> DiffTensor:
    """Обратный гиперболический синус"""
    a = as_tensor(a)
    av = a.values
    return _result(np.arcsinh(av), (a,), lambda g: (g / np.sqrt(1.0 + av * av),))


def relu(a) -> DiffTensor:
    """max(a, 0), градиент в нуле равен нулю"""
    a = as_tensor(a)
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> DiffTensor:
    """Обрезка значений; градиент проходит только внутри [lo, hi]"""
    a = as_tensor(a)
    av = a.values
    mask = np.ones(av.shape, dtype=bool)
    if lo is not None:
        mask &= av >= lo
    if hi is not None:
        mask &= av <= hi
    return _result(np.clip(av, lo, hi), (a,), lambda g: (g * mask,))


def where(condition, a, b) -> DiffTensor:
    """Берёт a там, где condition истинно, иначе b; condition константа"""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    _check_broadcast(a, b, 'where')
    return _result(
        np.where(cond, a.values, b.values),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


def stop_gradient(a) -> DiffTensor:
    """Значение без градиента"""
    return DiffTensor(as_tensor(a).values)


def straight_through(hard, soft) -> DiffTensor:
    """Значение ``hard`` в прямом проходе, весь градиент уходит в ``soft``"""
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return _result(hard.values.copy(), (soft,), lambda g: (g,))


def one_hot(indices: np.ndarray, num_classes: int) -> DiffTensor:
    """Постоянная матрица (N, K) из индексов"""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (num_classes,), dtype=DTYPE)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return DiffTensor(out)


# ---------------------------------------------------------------------------
# Редукции и форма
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    """Оси в неотрицательном виде"""
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    """Сумма по осям"""
    a = as_tensor(a)
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.values, axis=axes, keepdims=keepdims), (a,), _backward)


def mean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    """Среднее по осям"""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) / float(count)


def dot(a, b, axis: int = -1, keepdims: bool = False) -> DiffTensor:
    """Скалярное произведение по оси (по умолчанию последней)"""
    return sum(mul(a, b), axis=axis, keepdims=keepdims)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> DiffTensor:
    """Евклидова норма; в нуле градиент равен нулю"""
    a = as_tensor(a)
    av = a.values
    norm = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * av / safe, 0.0),)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _result(out, (a,), _backward)


def broadcast(a, shape) -> DiffTensor:
    """Явный broadcast к форме"""
    a = as_tensor(a)
    try:
        out = np.array(np.broadcast_to(a.values, tuple(shape)))
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g,))


def reshape(a, shape) -> DiffTensor:
    """Новая форма того же числа элементов"""
    a = as_tensor(a)
    original = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {original} into {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(original),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> DiffTensor:
    """Перестановка осей"""
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    """Склейка по оси"""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> DiffTensor:
    """Матричное произведение, с пакетными осями как в numpy"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _result(
        np.matmul(av, bv),
        (a, b),
        lambda g: (np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)),
    )


# ---------------------------------------------------------------------------
# Softmax и функции потерь
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> DiffTensor:
    """Устойчивый softmax по оси"""
    a = as_tensor(a)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _result(
        out, (a,), lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    )


def cross_entropy(logits, labels) -> DiffTensor:
    """Средний минус лог-правдоподобия целых меток под softmax(logits)"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    n = logits.shape[0]
    shifted = logits.values - np.max(logits.values, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(n), labels]
    loss = np.mean(lse - picked)

    def _backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _result(np.asarray(loss), (logits,), _backward)


def mse(pred, target) -> DiffTensor:
    """Среднеквадратичная ошибка по всем элементам"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.values - target.values
    n = diff.size
    return _result(
        np.asarray(np.mean(diff * diff)),
        (pred, target),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
    )


# ---------------------------------------------------------------------------
# Свёртки (NCHW)
# ---------------------------------------------------------------------------

def _conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Размер выхода свёртки по одной оси"""
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> DiffTensor:
    """x: (N, C, H, W), weight: (O, C, kh, kw) -> (N, O, H', W')"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    n, c, h, w = x.shape
    _, _, kh, kw = weight.shape
    ho = _conv_output_size(h, kh, stride, padding)
    wo = _conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wv = weight.values
    out = np.zeros((n, wv.shape[0], ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.einsum('nchw,oc->nohw', patch, wv[:, :, i, j], optimize=True)

    def _backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                gw[:, :, i, j] = np.einsum('nohw,nchw->oc', g, patch, optimize=True)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    'nohw,oc->nchw', g, wv[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw

    return _result(out, (x, weight), _backward)


def conv_transpose2d(x, weight, stride: int = 1, padding: int = 0) -> DiffTensor:
    """x: (N, C, H, W), weight: (C, O, kh, kw) -> (N, O, (H-1)*s - 2p + kh, ...)"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} vs weight {weight.shape}")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: padding {padding} too large for input {h}x{w}")

    xv, wv = x.values, weight.values
    full = np.zeros((n, o, full_h, full_w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += np.einsum(
                'nchw,co->nohw', xv, wv[:, :, i, j], optimize=True
            )
    out = full[:, :, padding:padding + ho, padding:padding + wo]

    def _backward(g):
        gfull = np.zeros((n, o, full_h, full_w), dtype=DTYPE)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                window = gfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
                gx += np.einsum('nohw,co->nchw', window, wv[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum('nchw,nohw->co', xv, window, optimize=True)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, weight), _backward)


# ---------------------------------------------------------------------------
# Оптимизатор
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        """Проверка гиперпараметров оптимизатора"""
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: Sequence[DiffTensor], state: AdamState, clear_grads: bool = True):
    """Один шаг Adam с поправкой смещения, на месте"""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.values) for p in params]
        state.second_moment = [np.zeros_like(p.values) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeError(f"Adam state tracks {len(state.first_moment)} parameters, got {len(params)}")

    missing = [p.name or str(i) for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise GradientMissingError(f"no gradient for parameters: {', '.join(missing)}")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ShapeError(f"Adam moment {m.shape} does not match parameter {p.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if clear_grads:
            p.grad = None


class Adam:
    """Хранит список параметров и их AdamState"""

    def __init__(self, params: Sequence[DiffTensor], learning_rate: float = 3e-4, **kwargs):
        self.params = list(params)
        self.state = AdamState(learning_rate=learning_rate, **kwargs)

    def step(self):
        """Шаг оптимизатора; градиенты обнуляются"""
        adam_step(self.params, self.state)

    def zero_grad(self):
        """Сбрасывает градиенты параметров"""
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Проверка градиентов
# ---------------------------------------------------------------------------

def gradcheck(
    fn: Callable[..., DiffTensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-6,
    rtol: float = 1e-4,
    floor: float = 1e-3,
    seed: int = 0,
) -> Tuple[bool, float]:
    """Сравнивает аналитические градиенты с центральными конечными разностями.

    Выход сворачивается с фиксированными случайными весами, поэтому проверять
    можно и нескалярные функции. Относительная ошибка считается как
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    Возвращает (passed, худшая относительная ошибка).
    """
    inputs = [np.array(x, dtype=DTYPE) for x in inputs]
    rng = np.random.default_rng(seed)

    tensors = [DiffTensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    backward(sum(mul(out, weights)))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]

    def _objective(arrays):
        with no_grad():
            return float(np.sum(fn(*[DiffTensor(a) for a in arrays]).values * weights))

    worst = 0.0
    for idx, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        for pos in np.ndindex(x.shape):
            shifted = [a.copy() for a in inputs]
            shifted[idx][pos] = x[pos] + step
            plus = _objective(shifted)
            shifted[idx][pos] = x[pos] - step
            minus = _objective(shifted)
            numeric[pos] = (plus - minus) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[idx]), np.abs(numeric)), floor)
        err = np.abs(analytic[idx] - numeric) / denom
        if err.size:
            worst = max(worst, float(np.max(err)))
    return worst < rtol, worst
