class HyperVQError(Exception):
    """Базовый класс всех ошибок библиотеки"""


class ShapeError(HyperVQError, ValueError):
    pass


class DomainError(HyperVQError, ValueError):
    """Аргумент вне области определения примитива (artanh(±1), log(0), ...)"""


class GraphError(HyperVQError, RuntimeError):
    """Неверное использование графа autodiff (нескалярный loss, повторный backward)"""


class GeometryError(HyperVQError, ValueError):
    """Неверная конфигурация шара, точка вне шара, вырожденная гиперплоскость"""


class ConfigError(HyperVQError, ValueError):
    pass


class NumericalError(HyperVQError, ArithmeticError):
    """Нечисловой loss или параметры во время обучения"""


class DatasetFormatError(HyperVQError, ValueError):
    pass


class CheckpointError(HyperVQError, ValueError):
    pass


class FrozenParameterError(HyperVQError, RuntimeError):
    pass


class GradientMissingError(HyperVQError, RuntimeError):
    pass
