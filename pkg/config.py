import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional

from dotenv import dotenv_values, load_dotenv

from core.errors import ConfigError

load_dotenv()

# Paths
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.getenv('HYPERVQ_DATA_DIR', os.path.join(BASE_DIR, 'data'))
LOGS_DIR = os.getenv('HYPERVQ_LOGS_DIR', os.path.join(BASE_DIR, 'logs'))
LOG_LEVEL = os.getenv('HYPERVQ_LOG_LEVEL', 'INFO').upper()

# MNIST mirror (gzip IDX archives)
MNIST_MIRROR = os.getenv('HYPERVQ_MNIST_MIRROR', 'https://storage.googleapis.com/cvdf-datasets/mnist/')

# Exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

QUANTIZER_NAMES = ('hypervq', 'kmeansvq', 'gumbelvq', 'hyperkmeansvq', 'hyperembmatvq', 'identity')
DATASETS = ('mnist', 'synth')
SILHOUETTE_SPACES = ('euclidean', 'poincare')

# Output file names inside --out
CHECKPOINT_FILE = 'model.ckpt'
HEAD_CHECKPOINT_FILE = 'classifier.ckpt'
TRAIN_LOG_FILE = 'train.log'
CLASSIFIER_LOG_FILE = 'classifier.log'
METRICS_FILE = 'metrics.txt'
EMBEDDINGS_FILE = 'embeddings.txt'
CODEBOOK_FILE = 'codebook.txt'
CODEBOOK_IMAGES_FILE = 'codebook_decoded-idx3-ubyte'
REPORT_FILE = 'report.txt'

# Messages
DESCRIPTION = """
HyperVQ: vector quantization as hyperbolic multinomial logistic regression.

Train a VQVAE with one of five quantizers, fit a small classifier on its frozen
features, evaluate cluster quality, export the codebook and compare runs.
"""

ERROR_MESSAGES = {
    'config': "❌ Invalid configuration",
    'checkpoint': "📁 Checkpoint cannot be used",
    'dataset': "📁 Dataset cannot be read",
    'numerical': "⚠️ Numerical failure during training",
    'network': "🌐 Download failed, check the connection or set HYPERVQ_MNIST_MIRROR",
    'unknown': "❓ Unexpected error",
}

STATUS_TRAINING = "🏋️ Training {quantizer} VQVAE on {dataset} ({steps} steps)"
STATUS_EVALUATING = "🔎 Evaluating {checkpoint}"
STATUS_COMPLETE = "✅ Done: {path}"


@dataclass
class RunConfig:
    quantizer: str = 'hypervq'
    num_codes: int = 16
    latent_dim: int = 3
    curvature: float = 1.0
    boundary_eps: float = 1e-5
    beta: float = 0.25
    tau_max: float = 2.0
    tau_min: float = 0.5
    tau_decay: float = 0.0
    gumbel_hard: bool = True
    kmeans_ema: bool = False
    ema_decay: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 128
    epochs: int = 20
    max_steps: int = 0
    seed: int = 0
    dataset: str = 'mnist'
    train_size: int = 10000
    test_size: int = 2000
    hidden_channels: int = 32
    residual_blocks: int = 2
    downsample: int = 4
    image_size: int = 28
    synth_classes: int = 10
    noise_sigma: float = 0.1
    max_rotation: float = 30.0
    flip_prob: float = 0.5
    classifier_hidden: int = 32
    classifier_epochs: int = 5
    device_threads: int = 1
    out_dir: str = 'runs'
    silhouette_space: str = 'euclidean'
    max_eval_points: int = 2000

    def validate(self) -> 'RunConfig':
        def check(condition: bool, message: str):
            if not condition:
                raise ConfigError(message)

        check(self.quantizer in QUANTIZER_NAMES,
              f"unknown quantizer '{self.quantizer}', expected one of: {', '.join(QUANTIZER_NAMES)}")
        check(self.dataset in DATASETS, f"unknown dataset '{self.dataset}', expected one of: {', '.join(DATASETS)}")
        check(self.silhouette_space in SILHOUETTE_SPACES,
              f"silhouette_space must be one of: {', '.join(SILHOUETTE_SPACES)}")
        check(self.num_codes >= 2, f"num_codes must be >= 2, got {self.num_codes}")
        check(self.latent_dim >= 1, f"latent_dim must be >= 1, got {self.latent_dim}")
        check(self.curvature > 0 and math.isfinite(self.curvature),
              f"curvature must be positive and finite, got {self.curvature}")
        check(0 < self.boundary_eps < 1, f"boundary_eps must lie in (0, 1), got {self.boundary_eps}")
        check(self.beta >= 0, f"beta must be >= 0, got {self.beta}")
        check(0 < self.tau_min <= self.tau_max, f"need 0 < tau_min <= tau_max, got {self.tau_min}, {self.tau_max}")
        check(0 <= self.tau_decay <= 1, f"tau_decay must lie in [0, 1], got {self.tau_decay}")
        check(0 < self.ema_decay < 1, f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        check(self.learning_rate > 0, f"learning_rate must be positive, got {self.learning_rate}")
        check(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        check(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        check(self.max_steps >= 0, f"max_steps must be >= 0, got {self.max_steps}")
        check(self.seed >= 0, f"seed must be >= 0, got {self.seed}")
        check(self.train_size >= 1 and self.test_size >= 1, "train_size and test_size must be >= 1")
        check(self.hidden_channels >= 1, f"hidden_channels must be >= 1, got {self.hidden_channels}")
        check(self.residual_blocks >= 0, f"residual_blocks must be >= 0, got {self.residual_blocks}")
        check(self.downsample >= 1 and not self.downsample & (self.downsample - 1),
              f"downsample must be a power of two, got {self.downsample}")
        check(self.image_size >= 1 and self.image_size % self.downsample == 0,
              f"image_size {self.image_size} must be a positive multiple of downsample {self.downsample}")
        check(self.synth_classes >= 2, f"synth_classes must be >= 2, got {self.synth_classes}")
        check(self.noise_sigma >= 0, f"noise_sigma must be >= 0, got {self.noise_sigma}")
        check(0 <= self.max_rotation <= 180, f"max_rotation must lie in [0, 180], got {self.max_rotation}")
        check(0 <= self.flip_prob <= 1, f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        check(self.classifier_hidden >= 1, f"classifier_hidden must be >= 1, got {self.classifier_hidden}")
        check(self.classifier_epochs >= 1, f"classifier_epochs must be >= 1, got {self.classifier_epochs}")
        check(self.device_threads >= 1, f"device_threads must be >= 1, got {self.device_threads}")
        check(self.max_eval_points >= 0, f"max_eval_points must be >= 0, got {self.max_eval_points}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'RunConfig':
        return build_run_config(values)


_TRUE = ('true', '1', 'yes', 'on')
_FALSE = ('false', '0', 'no', 'off')


def _convert(name: str, kind: type, raw: Any) -> Any:
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: '{raw}' is not a {kind.__name__}") from None
    return text


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    """Типизированный RunConfig из плоского словаря; ключи без учёта регистра, неизвестные отклоняются"""
    known = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in known:
            raise ConfigError(f"unknown config key '{key}'")
        if raw is None:
            raise ConfigError(f"config key '{key}' has no value")
        kind = type(getattr(RunConfig, name))
        kwargs[name] = _convert(name, kind, raw)
    return RunConfig(**kwargs).validate()


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Файл KEY=VALUE (необязательно) плюс флаги CLI; флаг важнее файла"""
    values: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        values.update({k.lower(): v for k, v in dotenv_values(path).items()})
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key.lower()] = value
    return build_run_config(values)
