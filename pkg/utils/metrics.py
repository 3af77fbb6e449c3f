"""Метрики оценки: использование кодбука, качество кластеров, ошибка реконструкции"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.metrics import silhouette_samples

from core import diffcore as dc
from core import geometry as geo
from core.errors import DomainError

logger = logging.getLogger(__name__)

SILHOUETTE_SPACES = ('euclidean', 'poincare')


@dataclass
class ClusterAssignment:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.labels.shape != (len(self.points),):
            raise DomainError(f"cluster assignment needs (N, d) points and N labels, "
                              f"got {self.points.shape} and {self.labels.shape}")

    @property
    def clusters(self) -> np.ndarray:
        return np.unique(self.labels)

    def require_clusters(self, minimum: int = 2):
        if len(self.clusters) < minimum:
            raise DomainError(f"need at least {minimum} clusters, got {len(self.clusters)}")


def usage_histogram(indices: np.ndarray, num_codes: int) -> np.ndarray:
    return np.bincount(np.asarray(indices, dtype=np.int64).ravel(), minlength=num_codes)


def perplexity(usage_counts: np.ndarray) -> float:
    """exp энтропии Шеннона по использованию кодов; 1 при коллапсе, K при равномерном"""
    counts = np.asarray(usage_counts, dtype=np.float64)
    total = counts.sum()
    if counts.size == 0 or total <= 0:
        raise DomainError("perplexity of an empty histogram")
    p = counts[counts > 0] / total
    return float(math.exp(-np.sum(p * np.log(p))))


def distance_matrix(points: np.ndarray, space: str = 'euclidean', curvature: float = 1.0) -> np.ndarray:
    if space == 'euclidean':
        return cdist(points, points)
    if space == 'poincare':
        with dc.no_grad():
            table = geo.pairwise_distance(points, points, curvature).values
        # округление даёт несимметричность порядка ulp
        table = 0.5 * (table + table.T)
        np.fill_diagonal(table, 0.0)
        return table
    raise DomainError(f"unknown distance space '{space}', expected one of {SILHOUETTE_SPACES}")


def silhouette(assign: ClusterAssignment, space: str = 'euclidean', curvature: float = 1.0) -> float:
    """Средний silhouette по точкам; одиночные кластеры и a = b = 0 дают 0"""
    assign.require_clusters(2)
    if len(assign.clusters) == len(assign.points):
        return 0.0
    distances = distance_matrix(assign.points, space, curvature)
    scores = silhouette_samples(distances, assign.labels, metric='precomputed')
    return float(np.mean(scores))


def davies_bouldin(assign: ClusterAssignment) -> float:
    """Среднее по кластерам худшего (S_i + S_j) / M_ij; совпавшие центроиды с разбросом дают +inf"""
    assign.require_clusters(2)
    clusters = assign.clusters
    centroids = np.stack([assign.points[assign.labels == k].mean(axis=0) for k in clusters])
    scatter = np.array([
        np.mean(np.linalg.norm(assign.points[assign.labels == k] - centroids[i], axis=1))
        for i, k in enumerate(clusters)
    ])
    gaps = cdist(centroids, centroids)
    worst = np.zeros(len(clusters))
    for i in range(len(clusters)):
        ratios = []
        for j in range(len(clusters)):
            if i == j:
                continue
            spread = scatter[i] + scatter[j]
            if gaps[i, j] > 0:
                ratios.append(spread / gaps[i, j])
            else:
                ratios.append(math.inf if spread > 0 else 0.0)
        worst[i] = max(ratios)
    return float(np.mean(worst))


def reconstruction_mse(model, images: np.ndarray, batch_size: int = 256, threads: int = 1) -> float:
    """Средняя по пикселям квадратичная ошибка; пакеты можно считать в потоках, сумма в исходном порядке"""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return 0.0
    if hasattr(model, 'eval'):
        model.eval()
    batches = [images[start:start + batch_size] for start in range(0, len(images), batch_size)]

    def _sse(batch: np.ndarray) -> float:
        diff = np.asarray(model.reconstruct(batch)) - batch
        return float(np.sum(diff * diff))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partial = list(pool.map(_sse, batches))
    else:
        partial = [_sse(b) for b in batches]
    total = 0.0
    for value in partial:
        total += value
    return total / images.size


def cluster_metrics(points: np.ndarray, labels: np.ndarray, space: str = 'euclidean', curvature: float = 1.0,
                    max_points: int = 0, rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """Silhouette и Davies-Bouldin, при необходимости на детерминированной подвыборке; nan, если не определены"""
    if max_points > 0 and len(points) > max_points:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(len(points), size=max_points, replace=False))
        points, labels = points[keep], labels[keep]
    assign = ClusterAssignment(points, labels)
    if len(assign.clusters) < 2:
        logger.warning(f"Only {len(assign.clusters)} code(s) in use, cluster metrics are undefined")
        return {'silhouette': math.nan, 'davies_bouldin': math.nan}
    return {
        'silhouette': silhouette(assign, space, curvature),
        'davies_bouldin': davies_bouldin(assign),
    }
