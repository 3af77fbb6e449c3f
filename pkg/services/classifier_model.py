import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import ConfigError, FrozenParameterError
from services.dataset_service import iter_batches
from services.layers import Conv2d, Linear, Module

logger = logging.getLogger(__name__)


class ClassifierHead(Module):
    """conv3x3 + ReLU, глобальное усреднение, два полносвязных слоя"""

    def __init__(self, in_channels: int, hidden: int, num_classes: int, rng: np.random.Generator):
        if num_classes < 2:
            raise ConfigError(f"classifier needs at least 2 classes, got {num_classes}")
        self.conv = Conv2d(in_channels, hidden, 3, rng, padding=1)
        self.fc1 = Linear(hidden, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self.num_classes = num_classes

    def __call__(self, features) -> DiffTensor:
        x = dc.relu(self.conv(features))
        pooled = dc.mean(x, axis=(2, 3))
        return self.fc2(dc.relu(self.fc1(pooled)))


@dataclass
class ClassifierRecord:
    step: int
    loss: float
    accuracy: float


def _frozen_tensors(backbone) -> List[DiffTensor]:
    """Все тензоры backbone, которые должны оставаться замороженными"""
    if isinstance(backbone, Module):
        return [t for _, t in backbone.named_tensors()]
    return list(backbone.parameters())


def check_frozen(backbone):
    """Ни один тензор backbone не должен требовать градиент"""
    thawed = [t.name or str(i) for i, t in enumerate(_frozen_tensors(backbone)) if t.requires_grad]
    if thawed:
        raise FrozenParameterError(f"backbone is not frozen: {len(thawed)} tensor(s) still require grad")


def classifier_step(batch: np.ndarray, labels: np.ndarray, backbone, head: ClassifierHead,
                    optimizer: dc.Adam, step: int = 0) -> ClassifierRecord:
    """Шаг cross-entropy по голове; backbone только выдаёт признаки"""
    check_frozen(backbone)
    features = backbone.features(DiffTensor(batch))
    logits = head(features)
    loss = dc.cross_entropy(logits, labels)
    dc.backward(loss)
    touched = [t.name or str(i) for i, t in enumerate(_frozen_tensors(backbone)) if t.grad is not None]
    if touched:
        raise FrozenParameterError(f"gradient reached frozen backbone tensors: {', '.join(touched)}")
    optimizer.step()
    accuracy = float(np.mean(np.argmax(logits.values, axis=1) == labels))
    return ClassifierRecord(step=step, loss=loss.item(), accuracy=accuracy)


def evaluate_classifier(backbone, head: ClassifierHead, images: np.ndarray, labels: np.ndarray,
                        batch_size: int = 256) -> float:
    """Доля верных ответов без графа"""
    correct = 0
    with dc.no_grad():
        for batch, batch_labels in iter_batches(images, labels, batch_size, shuffle=False):
            logits = head(backbone.features(DiffTensor(batch)))
            correct += int(np.sum(np.argmax(logits.values, axis=1) == batch_labels))
    return correct / max(1, len(images))


def train_classifier(backbone, head: ClassifierHead, images: np.ndarray, labels: np.ndarray,
                     rng: np.random.Generator, epochs: int = 5, batch_size: int = 128,
                     learning_rate: float = 3e-4,
                     epoch_callback: Optional[Callable[[int, float, float], None]] = None) -> List[ClassifierRecord]:
    """Обучает только голову; epoch_callback(эпоха, средний loss, точность на train)"""
    optimizer = dc.Adam(head.parameters(), learning_rate=learning_rate)
    history: List[ClassifierRecord] = []
    step = 0
    for epoch in range(epochs):
        losses, hits, seen = [], 0.0, 0
        for batch, batch_labels in iter_batches(images, labels, batch_size, rng):
            record = classifier_step(batch, batch_labels, backbone, head, optimizer, step)
            history.append(record)
            losses.append(record.loss)
            hits += record.accuracy * len(batch)
            seen += len(batch)
            step += 1
        accuracy = hits / max(1, seen)
        logger.info(f"Classifier epoch {epoch + 1}/{epochs}: loss {np.mean(losses):.4f}, accuracy {accuracy:.4f}")
        if epoch_callback:
            epoch_callback(epoch + 1, float(np.mean(losses)), accuracy)
    return history
