"""Свёрточный VQVAE: энкодер, сменный квантизатор, зеркальный декодер.

Между свёрточными блоками латентная сетка имеет вид (B, d, H', W'), через
квантизатор она проходит как (B, H', W', d): латентная размерность всегда
на последней оси.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from core import diffcore as dc
from core import geometry as geo
from core.diffcore import DiffTensor
from core.errors import ConfigError, NumericalError, ShapeError
from core.geometry import BallConfig
from services.dataset_service import iter_batches
from services.layers import Conv2d, ConvTranspose2d, Module, ResidualBlock
from services.quantizer_base import Quantizer, QuantizeResult

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    height: int = 28
    width: int = 28
    hidden_channels: int = 32
    residual_blocks: int = 2
    latent_dim: int = 3
    downsample: int = 4

    def __post_init__(self):
        """downsample степень двойки и делит размер картинки"""
        ds = self.downsample
        if ds < 1 or ds & (ds - 1):
            raise ConfigError(f"downsample must be a power of two, got {ds}")
        if self.height % ds or self.width % ds:
            raise ConfigError(f"image size {self.height}x{self.width} is not divisible by downsample {ds}")
        for name in ('in_channels', 'hidden_channels', 'latent_dim'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.residual_blocks < 0:
            raise ConfigError(f"residual_blocks must be non-negative, got {self.residual_blocks}")

    @property
    def stages(self) -> int:
        """Число свёрток с шагом 2"""
        return int(math.log2(self.downsample))

    @property
    def latent_shape(self):
        """(d, H', W') латентной сетки"""
        return self.latent_dim, self.height // self.downsample, self.width // self.downsample


@dataclass(frozen=True)
class DecoderConfig:
    out_channels: int
    height: int
    width: int
    hidden_channels: int
    residual_blocks: int
    latent_dim: int
    upsample: int

    @classmethod
    def mirror(cls, encoder: EncoderConfig) -> 'DecoderConfig':
        """Декодер, зеркальный энкодеру"""
        return cls(
            out_channels=encoder.in_channels,
            height=encoder.height,
            width=encoder.width,
            hidden_channels=encoder.hidden_channels,
            residual_blocks=encoder.residual_blocks,
            latent_dim=encoder.latent_dim,
            upsample=encoder.downsample,
        )

    @property
    def stages(self) -> int:
        return int(math.log2(self.upsample))


class Encoder(Module):
    """Свёртки 4x4 с шагом 2, residual-блоки, проекция 1x1 в латентную размерность"""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        h = config.hidden_channels
        if config.stages:
            self.stem = [
                Conv2d(config.in_channels if i == 0 else h, h, 4, rng, stride=2, padding=1)
                for i in range(config.stages)
            ]
        else:
            self.stem = [Conv2d(config.in_channels, h, 3, rng, padding=1)]
        self.blocks = [ResidualBlock(h, h, rng) for _ in range(config.residual_blocks)]
        self.project = Conv2d(h, config.latent_dim, 1, rng)

    def __call__(self, x) -> DiffTensor:
        """(B, C, H, W) -> (B, d, H', W')"""
        x = dc.as_tensor(x)
        cfg = self.config
        if x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(
                f"encoder expects (B, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}"
            )
        for conv in self.stem:
            x = dc.relu(conv(x))
        for block in self.blocks:
            x = block(x)
        return self.project(dc.relu(x))


class Decoder(Module):
    """Подъём 1x1, residual-блоки, транспонированные свёртки 4x4 до разрешения картинки"""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        h = config.hidden_channels
        self.lift = Conv2d(config.latent_dim, h, 1, rng)
        self.blocks = [ResidualBlock(h, h, rng) for _ in range(config.residual_blocks)]
        if config.stages:
            self.head = [
                ConvTranspose2d(h, config.out_channels if i == config.stages - 1 else h, 4, rng, stride=2, padding=1)
                for i in range(config.stages)
            ]
        else:
            self.head = [Conv2d(h, config.out_channels, 3, rng, padding=1)]

    def __call__(self, z, strict: bool = True) -> DiffTensor:
        """strict=False допускает любую пространственную сетку, например 1x1 для отдельных кодов"""
        z = dc.as_tensor(z)
        cfg = self.config
        expected = (cfg.latent_dim, cfg.height // cfg.upsample, cfg.width // cfg.upsample)
        if z.ndim != 4 or z.shape[1] != cfg.latent_dim or (strict and z.shape[1:] != expected):
            raise ShapeError(f"decoder expects (B, {', '.join(map(str, expected))}), got {z.shape}")
        x = self.lift(z)
        for block in self.blocks:
            x = block(x)
        x = dc.relu(x)
        for i, layer in enumerate(self.head):
            x = layer(x)
            if i < len(self.head) - 1:
                x = dc.relu(x)
        return x


@dataclass
class VQVAEOutput:
    reconstruction: DiffTensor
    z_e: DiffTensor
    quantized: QuantizeResult


class VQVAE(Module):
    def __init__(self, encoder_config: EncoderConfig, quantizer: Quantizer, rng: np.random.Generator):
        """Размерность квантизатора должна совпадать с выходом энкодера"""
        if quantizer.dim != encoder_config.latent_dim:
            raise ConfigError(
                f"quantizer latent dim {quantizer.dim} differs from encoder output {encoder_config.latent_dim}"
            )
        self.encoder = Encoder(encoder_config, rng)
        self.quantizer = quantizer
        self.decoder = Decoder(DecoderConfig.mirror(encoder_config), rng)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def train(self) -> 'VQVAE':
        """Переводит квантизатор в режим обучения"""
        self.quantizer.train()
        return self

    def eval(self) -> 'VQVAE':
        """Переводит квантизатор в режим оценки"""
        self.quantizer.eval()
        return self

    def encode(self, x) -> DiffTensor:
        return self.encoder(x)

    def quantize(self, z_e: DiffTensor) -> QuantizeResult:
        """Квантует сетку (B, d, H', W'); z_q в результате той же раскладки"""
        result = self.quantizer(dc.transpose(z_e, (0, 2, 3, 1)))
        result.z_q = dc.transpose(result.z_q, (0, 3, 1, 2))
        return result

    def decode(self, z_q) -> DiffTensor:
        return self.decoder(z_q)

    def decode_codes(self, codebook: Optional[np.ndarray] = None) -> np.ndarray:
        """Каждый код как латент 1x1 через декодер: (K, C, s, s), s = downsample"""
        codes = self.quantizer.codebook() if codebook is None else np.asarray(codebook, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[1] != self.config.latent_dim:
            raise ShapeError(f"codebook must be (K, {self.config.latent_dim}), got {codes.shape}")
        with dc.no_grad():
            return self.decoder(codes[:, :, None, None], strict=False).values

    def forward(self, x) -> VQVAEOutput:
        """encode, quantize, decode за один проход"""
        z_e = self.encode(x)
        quantized = self.quantize(z_e)
        return VQVAEOutput(self.decode(quantized.z_q), z_e, quantized)

    __call__ = forward

    def features(self, x) -> DiffTensor:
        """Замороженные квантованные признаки для головы классификатора"""
        mode = self.quantizer.mode
        self.eval()
        try:
            with dc.no_grad():
                return self.quantize(self.encode(x)).z_q
        finally:
            self.quantizer.mode = mode

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Реконструкция без графа в текущем режиме квантизатора"""
        with dc.no_grad():
            return self.forward(DiffTensor(images)).reconstruction.values


@dataclass
class StepRecord:
    step: int
    loss: float
    reconstruction_loss: float
    aux_loss: float
    perplexity: float
    tau: Optional[float] = None


def _temperature(quantizer: Quantizer) -> Optional[float]:
    """Текущая температура, если у квантизатора есть расписание"""
    schedule = getattr(quantizer, 'schedule', None)
    return schedule.temperature if schedule is not None else None


def vqvae_step(batch: np.ndarray, model: VQVAE, optimizer: dc.Adam, step: int = 0) -> StepRecord:
    """Один шаг Adam по MSE(x, decode(z_q)) плюс дополнительный loss квантизатора"""
    model.train()
    tau = _temperature(model.quantizer)
    x = DiffTensor(batch)
    out = model(x)
    reconstruction = dc.mse(out.reconstruction, x)
    loss = reconstruction + out.quantized.aux_loss
    if not np.isfinite(loss.item()):
        raise NumericalError(
            f"non-finite loss at step {step}: reconstruction={reconstruction.item()!r}, "
            f"aux={out.quantized.aux_loss.item()!r}, quantizer={model.quantizer.name}"
        )
    dc.backward(loss)
    optimizer.step()
    model.quantizer.after_step()

    for name, tensor in model.named_parameters():
        if not np.all(np.isfinite(tensor.values)):
            raise NumericalError(f"parameter '{name}' became non-finite at step {step}")

    return StepRecord(
        step=step,
        loss=loss.item(),
        reconstruction_loss=reconstruction.item(),
        aux_loss=out.quantized.aux_loss.item(),
        perplexity=out.quantized.perplexity,
        tau=tau,
    )


def train_vqvae(model: VQVAE, images: np.ndarray, rng: np.random.Generator, batch_size: int = 128,
                epochs: int = 1, learning_rate: float = 3e-4, max_steps: int = 0,
                progress_callback: Optional[Callable[[int, int, StepRecord], None]] = None) -> List[StepRecord]:
    """Эпохи по перемешанным мини-пакетам; max_steps > 0 останавливает раньше"""
    optimizer = dc.Adam(model.parameters(), learning_rate=learning_rate)
    per_epoch = math.ceil(len(images) / batch_size)
    total = per_epoch * epochs if max_steps <= 0 else min(max_steps, per_epoch * epochs)
    history: List[StepRecord] = []
    step = 0
    for epoch in range(epochs):
        for batch, _ in iter_batches(images, None, batch_size, rng):
            if max_steps > 0 and step >= max_steps:
                return history
            record = vqvae_step(batch, model, optimizer, step)
            history.append(record)
            step += 1
            if progress_callback:
                progress_callback(step, total, record)
        if history:
            logger.info(f"Epoch {epoch + 1}/{epochs} done, last loss {history[-1].loss:.6f}")
    return history


@dataclass
class Embeddings:
    latents: np.ndarray
    projected: np.ndarray
    indices: np.ndarray
    sample_index: np.ndarray
    usage_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def extract_embeddings(model: VQVAE, images: np.ndarray, batch_size: int = 256,
                       ball: Optional[BallConfig] = None) -> Embeddings:
    """Латенты каждой позиции (до проекции), их проекция в шар и индексы кодов"""
    ball = ball or getattr(model.quantizer, 'ball', None) or BallConfig()
    mode = model.quantizer.mode
    model.eval()
    latents, indices, owners = [], [], []
    try:
        with dc.no_grad():
            for start in range(0, len(images), batch_size):
                z_e = model.encode(DiffTensor(images[start:start + batch_size]))
                result = model.quantize(z_e)
                grid = np.transpose(z_e.values, (0, 2, 3, 1))
                latents.append(grid.reshape(-1, grid.shape[-1]))
                indices.append(result.indices.reshape(-1))
                per_image = grid.shape[1] * grid.shape[2]
                owners.append(np.repeat(np.arange(start, start + grid.shape[0]), per_image))
    finally:
        model.quantizer.mode = mode

    latents = np.concatenate(latents) if latents else np.zeros((0, model.quantizer.dim))
    indices = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
    with dc.no_grad():
        projected = geo.safe_project_tensor(geo.exp_map_origin_tensor(latents, ball.curvature), ball).values
    return Embeddings(
        latents=latents,
        projected=projected,
        indices=indices,
        sample_index=np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64),
        usage_counts=np.bincount(indices, minlength=model.quantizer.num_codes),
    )
