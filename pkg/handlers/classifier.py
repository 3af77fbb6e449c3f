import argparse
import asyncio
import logging
import os

import numpy as np

import config as settings
from core.errors import DatasetFormatError, FrozenParameterError
from handlers.common import add_common_arguments, load_data, load_model, output_dir, run_guarded, write_lines
from services.classifier_model import ClassifierHead, evaluate_classifier, train_classifier
from utils.checkpoint import file_digest, save_checkpoint_async, state_digest
from utils.formatters import format_metric_record, format_record

logger = logging.getLogger(__name__)


async def cmd_train_classifier(checkpoint_path: str, args: argparse.Namespace) -> dict:
    """Обучает только голову классификатора на квантованных признаках замороженного VQVAE"""
    model, config, _ = load_model(checkpoint_path, args)
    backbone_sha = file_digest(checkpoint_path)
    model.freeze()
    before = state_digest(model.state_dict())

    out = output_dir(config)
    train, test = await load_data(config)
    if train.labels is None or test.labels is None:
        raise DatasetFormatError("classifier head needs a labelled dataset")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1

    rng = np.random.default_rng(config.seed)
    head = ClassifierHead(config.latent_dim, config.classifier_hidden, num_classes, rng)
    lines = []

    def on_epoch(epoch: int, loss: float, accuracy: float):
        lines.append(format_record(epoch=epoch, loss=loss, train_accuracy=accuracy))

    loop = asyncio.get_running_loop()
    await loop.run_in_executor(
        None,
        lambda: train_classifier(model, head, train.images, train.labels, rng, epochs=config.classifier_epochs,
                                 batch_size=config.batch_size, learning_rate=config.learning_rate,
                                 epoch_callback=on_epoch),
    )
    accuracy = await loop.run_in_executor(None, evaluate_classifier, model, head, test.images, test.labels)

    if state_digest(model.state_dict()) != before:
        raise FrozenParameterError("backbone weights changed while training the classifier head")

    lines.append(format_metric_record('test_accuracy', accuracy, quantizer=config.quantizer))
    log_path = os.path.join(out, settings.CLASSIFIER_LOG_FILE)
    await write_lines(log_path, lines)

    meta = {
        'backbone_sha256': backbone_sha,
        'num_classes': num_classes,
        'hidden': config.classifier_hidden,
        'quantizer': config.quantizer,
        'test_accuracy': accuracy,
    }
    head_path = os.path.join(out, settings.HEAD_CHECKPOINT_FILE)
    await save_checkpoint_async(head_path, head.state_dict(), meta)
    logger.info(f"Classifier test accuracy {accuracy:.4f} ({config.quantizer})")
    print(settings.STATUS_COMPLETE.format(path=head_path))
    return {'checkpoint': head_path, 'log': log_path, 'accuracy': accuracy}


async def handle(args: argparse.Namespace) -> int:
    await cmd_train_classifier(args.checkpoint, args)
    return settings.EXIT_OK


def register(subparsers):
    parser = subparsers.add_parser('train-classifier', help='train a classifier head on frozen VQVAE features')
    add_common_arguments(parser, checkpoint=True)
    parser.set_defaults(func=lambda args: run_guarded('train-classifier', handle, args))
