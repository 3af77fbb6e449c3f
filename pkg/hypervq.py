import argparse
import asyncio
import logging
import os
import sys

# Добавляем текущую директорию в путь для импортов
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import DESCRIPTION, EXIT_CONFIG_ERROR, LOG_LEVEL, LOGS_DIR
from handlers import classifier, evaluate, export, report, train


def setup_logging():
    """Лог в файл и в консоль"""
    os.makedirs(LOGS_DIR, exist_ok=True)

    log_format = '[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s'
    date_format = '%Y-%m-%d %H:%M:%S'

    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format=log_format,
        datefmt=date_format,
        handlers=[
            logging.FileHandler(os.path.join(LOGS_DIR, 'hypervq.log'), encoding='utf-8'),
            logging.StreamHandler(sys.stdout),
        ]
    )

    # Отключаем избыточные логи от библиотек
    logging.getLogger('aiohttp').setLevel(logging.WARNING)
    logging.getLogger('asyncio').setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hypervq', description=DESCRIPTION,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subparsers = parser.add_subparsers(dest='command', required=True)
    # порядок регистрации = порядок в --help
    for module in (train, classifier, evaluate, export, report):
        module.register(subparsers)
    return parser


async def run(argv=None) -> int:
    """Разбирает argv и запускает одну подкоманду; возвращает код выхода процесса"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG_ERROR if e.code else 0
    return await args.func(args)


async def main() -> int:
    setup_logging()
    logger = logging.getLogger(__name__)
    try:
        return await run()
    except Exception as e:
        logger.error(f"Critical error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        sys.exit(130)
