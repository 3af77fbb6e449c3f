import argparse
import asyncio
import logging
import math
import os
import time

import numpy as np

import config as settings
from handlers.common import (
    add_common_arguments,
    build_model,
    load_data,
    output_dir,
    resolve_config,
    run_guarded,
    write_lines,
)
from services.vqvae_model import StepRecord, extract_embeddings, train_vqvae
from utils.checkpoint import save_checkpoint_async
from utils.formatters import format_duration, format_metric_record, format_record, format_training_status
from utils.metrics import perplexity, reconstruction_mse

logger = logging.getLogger(__name__)

# каждые N шагов пишем прогресс в человеческий лог
PROGRESS_EVERY = 50


def step_line(record: StepRecord) -> str:
    return format_record(
        step=record.step,
        loss=record.loss,
        reconstruction_loss=record.reconstruction_loss,
        aux_loss=record.aux_loss,
        perplexity=record.perplexity,
        tau=record.tau,
    )


def total_steps(config, num_images: int) -> int:
    per_epoch = math.ceil(num_images / config.batch_size)
    full = per_epoch * config.epochs
    return full if config.max_steps <= 0 else min(config.max_steps, full)


async def cmd_train_vqvae(config) -> dict:
    """Обучает VQVAE и пишет model.ckpt и train.log в config.out_dir"""
    out = output_dir(config)
    train, test = await load_data(config)
    steps = total_steps(config, len(train))
    print(settings.STATUS_TRAINING.format(quantizer=config.quantizer, dataset=config.dataset, steps=steps))

    model = build_model(config, steps)
    rng = np.random.default_rng(config.seed)
    started = time.monotonic()

    def on_progress(step: int, total: int, record: StepRecord):
        if step % PROGRESS_EVERY == 0 or step == total:
            logger.info(format_training_status(step, total, record.loss, record.perplexity, record.tau))

    loop = asyncio.get_running_loop()
    history = await loop.run_in_executor(
        None,
        lambda: train_vqvae(model, train.images, rng, batch_size=config.batch_size, epochs=config.epochs,
                            learning_rate=config.learning_rate, max_steps=config.max_steps,
                            progress_callback=on_progress),
    )
    logger.info(f"Training finished: {len(history)} steps in {format_duration(time.monotonic() - started)}")

    model.eval()
    test_mse = await loop.run_in_executor(
        None, reconstruction_mse, model, test.images, 256, config.device_threads
    )
    usage = extract_embeddings(model, test.images).usage_counts
    summary = [
        format_metric_record('final_loss', history[-1].loss if history else math.nan, split='train'),
        format_metric_record('reconstruction_mse', test_mse, split='test'),
        format_metric_record('perplexity', perplexity(usage) if usage.sum() else math.nan, split='test'),
    ]

    log_path = os.path.join(out, settings.TRAIN_LOG_FILE)
    await write_lines(log_path, [step_line(r) for r in history] + summary)

    meta = {
        'config': config.to_dict(),
        'quantizer': config.quantizer,
        'steps': len(history),
        'total_steps': steps,
    }
    checkpoint_path = os.path.join(out, settings.CHECKPOINT_FILE)
    digest = await save_checkpoint_async(checkpoint_path, model.state_dict(), meta)
    logger.info(f"Checkpoint sha256 {digest}")
    print(settings.STATUS_COMPLETE.format(path=checkpoint_path))
    return {'checkpoint': checkpoint_path, 'log': log_path, 'sha256': digest, 'history': history}


async def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    await cmd_train_vqvae(config)
    return settings.EXIT_OK


def register(subparsers):
    parser = subparsers.add_parser('train-vqvae', help='train a VQVAE with the chosen quantizer')
    add_common_arguments(parser)
    parser.set_defaults(func=lambda args: run_guarded('train-vqvae', handle, args))
