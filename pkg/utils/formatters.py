import math
from typing import Any, Dict, Optional

from config import ERROR_MESSAGES


def format_value(value: Any) -> str:
    """Значение для key=value записи: float через repr, чтобы перечитывался без потерь"""
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(float(value))
    if hasattr(value, 'item'):
        return format_value(value.item())
    return str(value).replace(' ', '_')


def format_record(**fields) -> str:
    """Одна строка лога: поля в порядке передачи, без временных меток"""
    return " ".join(f"{key}={format_value(value)}" for key, value in fields.items())


def format_metric_record(name: str, value: float, **tags) -> str:
    return format_record(name=name, value=float(value), **tags)


def parse_record(line: str) -> Dict[str, str]:
    fields = {}
    for token in line.split():
        key, sep, value = token.partition('=')
        if sep:
            fields[key] = value
    return fields


def format_duration(seconds):
    """Форматирует длительность из секунд в H:MM:SS или MM:SS"""
    if seconds is None or seconds < 0:
        return "N/A"
    seconds = int(seconds)
    hours, rest = divmod(seconds, 3600)
    minutes, seconds = divmod(rest, 60)
    if hours:
        return f"{hours}:{minutes:02d}:{seconds:02d}"
    return f"{minutes}:{seconds:02d}"


def format_progress_bar(progress: float, length: int = 10):
    """Создает прогресс-бар из символов"""
    if progress < 0:
        progress = 0
    elif progress > 100:
        progress = 100

    filled = int((progress / 100) * length)
    empty = length - filled

    bar = "▓" * filled + "░" * empty
    return f"[{bar}] {progress:.0f}%"


def format_training_status(step: int, total: int, loss: float, perplexity: float, tau: Optional[float] = None):
    """Строка прогресса обучения для человеческого лога"""
    progress = 100.0 * step / total if total else 100.0
    status = f"{format_progress_bar(progress, 20)} step {step}/{total} loss {loss:.5f} perplexity {perplexity:.2f}"
    if tau is not None:
        status += f" tau {tau:.3f}"
    return status


def format_error_message(error_type: str, details: str = None):
    """Форматирует сообщение об ошибке"""
    message = ERROR_MESSAGES.get(error_type, ERROR_MESSAGES['unknown'])

    if details:
        message += f"\n  details: {details}"

    return message
