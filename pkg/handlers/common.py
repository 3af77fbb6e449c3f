"""Общие части обработчиков команд: конфиг, данные, модель, записи, коды выхода"""
import argparse
import asyncio
import logging
import os
from typing import Awaitable, Callable, Dict, Iterable, Optional, Tuple

import aiofiles
import numpy as np

import config as settings
from config import RunConfig, load_run_config
from core.errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    GeometryError,
    HyperVQError,
    NumericalError,
    ShapeError,
)
from services.dataset_service import MNIST_FILES, ImageDataset, fetch_mnist, load_dataset
from services.quantizers import get_quantizer
from services.vqvae_model import VQVAE, EncoderConfig
from utils.checkpoint import load_checkpoint
from utils.formatters import format_error_message

logger = logging.getLogger(__name__)

Command = Callable[[argparse.Namespace], Awaitable[int]]


def add_common_arguments(parser: argparse.ArgumentParser, checkpoint: bool = False):
    parser.add_argument('--config', help='KEY=VALUE run configuration file')
    parser.add_argument('--seed', type=int, help='random seed (overrides the config file)')
    parser.add_argument('--out', help='output directory (overrides out_dir)')
    parser.add_argument('--quantizer', help=f"one of: {', '.join(settings.QUANTIZER_NAMES)}")
    parser.add_argument('--device-threads', type=int, dest='device_threads', help='worker threads for evaluation')
    if checkpoint:
        parser.add_argument('--checkpoint', required=True, help='VQVAE checkpoint file')


def overrides_from_args(args: argparse.Namespace) -> Dict[str, object]:
    return {
        'seed': getattr(args, 'seed', None),
        'out_dir': getattr(args, 'out', None),
        'quantizer': getattr(args, 'quantizer', None),
        'device_threads': getattr(args, 'device_threads', None),
    }


def resolve_config(args: argparse.Namespace, checkpoint_meta: Optional[dict] = None) -> RunConfig:
    """Файл конфига плюс флаги; без --config основой служит конфиг из чекпоинта"""
    overrides = overrides_from_args(args)
    if args.config or not checkpoint_meta:
        return load_run_config(args.config, overrides)
    base = dict(checkpoint_meta.get('config', {}))
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(base)


def encoder_config(config: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        in_channels=1,
        height=config.image_size if config.dataset == 'synth' else 28,
        width=config.image_size if config.dataset == 'synth' else 28,
        hidden_channels=config.hidden_channels,
        residual_blocks=config.residual_blocks,
        latent_dim=config.latent_dim,
        downsample=config.downsample,
    )


def build_model(config: RunConfig, total_steps: int = 1) -> VQVAE:
    """Новая модель; все начальные веса из seed конфига"""
    rng = np.random.default_rng(config.seed)
    quantizer = get_quantizer(config.quantizer, config, rng, total_steps)
    return VQVAE(encoder_config(config), quantizer, rng)


def load_model(path: str, args: argparse.Namespace) -> Tuple[VQVAE, RunConfig, dict]:
    state, meta = load_checkpoint(path)
    config = resolve_config(args, meta)
    model = build_model(config)
    model.load_state_dict(state)
    logger.info(f"Loaded {config.quantizer} VQVAE from {path}")
    return model, config, meta


async def load_data(config: RunConfig) -> Tuple[ImageDataset, ImageDataset]:
    if config.dataset == 'mnist':
        missing = [f for f in MNIST_FILES.values()
                   if not any(os.path.exists(os.path.join(settings.DATA_DIR, name)) for name in (f, f[:-3]))]
        if missing:
            logger.info(f"MNIST files missing in {settings.DATA_DIR}, downloading from {settings.MNIST_MIRROR}")
            _, error = await fetch_mnist(settings.DATA_DIR, settings.MNIST_MIRROR)
            if error:
                print(format_error_message('network', error))
                raise DatasetFormatError(f"MNIST is not available: {error}")
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(None, load_dataset, config, settings.DATA_DIR)


def output_dir(config: RunConfig) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return config.out_dir


async def write_lines(path: str, lines: Iterable[str], append: bool = False):
    async with aiofiles.open(path, 'a' if append else 'w', encoding='utf-8') as f:
        for line in lines:
            await f.write(line + '\n')


async def run_guarded(name: str, command: Command, args: argparse.Namespace) -> int:
    """Запускает команду и переводит ошибки библиотеки в коды выхода"""
    try:
        return await command(args)
    except NumericalError as e:
        logger.error(f"{name}: {e}", exc_info=True)
        print(format_error_message('numerical', str(e)))
        return settings.EXIT_NUMERICAL_ERROR
    except ConfigError as e:
        logger.error(f"{name}: {e}")
        print(format_error_message('config', str(e)))
        return settings.EXIT_CONFIG_ERROR
    except CheckpointError as e:
        logger.error(f"{name}: {e}")
        print(format_error_message('checkpoint', str(e)))
        return settings.EXIT_CONFIG_ERROR
    except DatasetFormatError as e:
        logger.error(f"{name}: {e}")
        print(format_error_message('dataset', str(e)))
        return settings.EXIT_CONFIG_ERROR
    except (ShapeError, GeometryError, HyperVQError) as e:
        logger.error(f"{name}: {e}", exc_info=True)
        print(format_error_message('config', str(e)))
        return settings.EXIT_CONFIG_ERROR
