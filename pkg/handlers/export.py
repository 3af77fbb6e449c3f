import argparse
import asyncio
import logging
import os
from typing import Dict

import numpy as np

import config as settings
from handlers.common import add_common_arguments, load_model, output_dir, run_guarded, write_lines
from services.dataset_service import to_uint8, write_idx

logger = logging.getLogger(__name__)


def codebook_lines(codebook: np.ndarray):
    """Строка на код через запятую, кратчайшая запись float без потерь"""
    return [",".join(repr(float(v)) for v in row) for row in np.asarray(codebook, dtype=np.float64)]


def decoded_codebook_bytes(decoded: np.ndarray) -> np.ndarray:
    """Декодированные коды (K, 1, s, s) в байты IDX; значения вне [0, 1] обрезаются"""
    return to_uint8(np.clip(decoded, 0.0, 1.0))


async def cmd_export_codebook(checkpoint_path: str, args: argparse.Namespace,
                              decode: bool = False) -> Dict[str, str]:
    model, config, _ = load_model(checkpoint_path, args)
    codebook = model.quantizer.codebook()
    out = output_dir(config)
    paths = {'codebook': os.path.join(out, settings.CODEBOOK_FILE)}
    await write_lines(paths['codebook'], codebook_lines(codebook))
    logger.info(f"Exported {codebook.shape[0]}x{codebook.shape[1]} codebook of {config.quantizer} "
                f"to {paths['codebook']}")

    if decode:
        decoded = model.decode_codes(codebook)
        paths['images'] = os.path.join(out, settings.CODEBOOK_IMAGES_FILE)
        loop = asyncio.get_running_loop()
        await loop.run_in_executor(None, write_idx, paths['images'], decoded_codebook_bytes(decoded))
        logger.info(f"Decoded {decoded.shape[0]} codes to {decoded.shape[2]}x{decoded.shape[3]} "
                    f"images in {paths['images']}")

    for path in paths.values():
        print(settings.STATUS_COMPLETE.format(path=path))
    return paths


async def handle(args: argparse.Namespace) -> int:
    await cmd_export_codebook(args.checkpoint, args, decode=args.decode)
    return settings.EXIT_OK


def register(subparsers):
    parser = subparsers.add_parser('export-codebook', help='write the Euclidean codebook of a checkpoint')
    add_common_arguments(parser, checkpoint=True)
    parser.add_argument('--decode', action='store_true',
                        help='also run every code through the decoder as a 1x1 latent (IDX images)')
    parser.set_defaults(func=lambda args: run_guarded('export-codebook', handle, args))
