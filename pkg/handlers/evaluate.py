import argparse
import asyncio
import logging
import os
from typing import List

import numpy as np

import config as settings
from handlers.common import add_common_arguments, load_data, load_model, output_dir, run_guarded, write_lines
from services.dataset_service import CorruptionConfig, ImageDataset, corrupt
from services.vqvae_model import VQVAE, Embeddings, extract_embeddings
from utils.formatters import format_metric_record, format_record
from utils.metrics import cluster_metrics, perplexity, reconstruction_mse

logger = logging.getLogger(__name__)


def embedding_lines(embeddings: Embeddings, split: str) -> List[str]:
    lines = []
    for i in range(len(embeddings.indices)):
        lines.append(format_record(
            split=split,
            sample=int(embeddings.sample_index[i]),
            code=int(embeddings.indices[i]),
            latent=",".join(repr(float(v)) for v in embeddings.latents[i]),
            projected=",".join(repr(float(v)) for v in embeddings.projected[i]),
        ))
    return lines


def evaluate_split(model: VQVAE, dataset: ImageDataset, config, split: str):
    """Записи метрик одного сплита и его эмбеддинги"""
    model.eval()
    mse = reconstruction_mse(model, dataset.images, threads=config.device_threads)
    embeddings = extract_embeddings(model, dataset.images)
    usage = embeddings.usage_counts
    points = embeddings.projected if config.silhouette_space == 'poincare' else embeddings.latents
    # подвыборка детерминирована: один и тот же seed для всех квантизаторов
    clusters = cluster_metrics(points, embeddings.indices, config.silhouette_space, config.curvature,
                               config.max_eval_points, np.random.default_rng(config.seed))
    tags = {'split': split, 'quantizer': config.quantizer}
    records = [
        format_metric_record('reconstruction_mse', mse, **tags),
        format_metric_record('perplexity', perplexity(usage) if usage.sum() else float('nan'), **tags),
        format_metric_record('codes_used', int(np.count_nonzero(usage)), **tags),
        format_metric_record('silhouette', clusters['silhouette'], space=config.silhouette_space, **tags),
        format_metric_record('davies_bouldin', clusters['davies_bouldin'], **tags),
    ]
    return records, embeddings


async def cmd_eval(checkpoint_path: str, args: argparse.Namespace, dump_embeddings: bool = False) -> dict:
    """Реконструкция, использование кодбука и качество кластеров на чистом и искажённом test"""
    print(settings.STATUS_EVALUATING.format(checkpoint=checkpoint_path))
    model, config, _ = load_model(checkpoint_path, args)
    out = output_dir(config)
    _, test = await load_data(config)
    ops = CorruptionConfig(config.max_rotation, config.flip_prob, config.noise_sigma)
    corrupted = corrupt(test, ops, np.random.default_rng(config.seed + 2))

    loop = asyncio.get_running_loop()
    records, dumps = [], []
    for split, dataset in (('clean', test), ('corrupted', corrupted)):
        split_records, embeddings = await loop.run_in_executor(None, evaluate_split, model, dataset, config, split)
        records.extend(split_records)
        if dump_embeddings:
            dumps.extend(embedding_lines(embeddings, split))
        for line in split_records:
            logger.info(line)

    metrics_path = os.path.join(out, settings.METRICS_FILE)
    await write_lines(metrics_path, records)
    result = {'metrics': metrics_path, 'records': records}
    if dump_embeddings:
        result['embeddings'] = os.path.join(out, settings.EMBEDDINGS_FILE)
        await write_lines(result['embeddings'], dumps)
    print(settings.STATUS_COMPLETE.format(path=metrics_path))
    return result


async def handle(args: argparse.Namespace) -> int:
    await cmd_eval(args.checkpoint, args, args.dump_embeddings)
    return settings.EXIT_OK


def register(subparsers):
    parser = subparsers.add_parser('eval', help='evaluate a trained VQVAE on clean and corrupted test data')
    add_common_arguments(parser, checkpoint=True)
    parser.add_argument('--dump-embeddings', action='store_true', dest='dump_embeddings',
                        help='also write per-position latents and codes')
    parser.set_defaults(func=lambda args: run_guarded('eval', handle, args))
