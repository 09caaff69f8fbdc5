"""
Jerarquía de errores del proyecto.

Los servicios lanzan estas excepciones; los comandos de gestión las convierten
en CommandError para que el proceso termine con código distinto de cero.
"""


class CuneispotError(Exception):
    """Error base de cuneispot."""


class ConfigError(CuneispotError):
    """Configuración inválida (clave desconocida, valor fuera de rango)."""


class TensorError(CuneispotError):
    """Error del motor de tensores."""


class DimensionError(TensorError):
    """Formas incompatibles entre operandos."""


class ParameterError(TensorError):
    """Hiperparámetro de una operación fuera de rango."""


class NonFiniteError(TensorError):
    """Aparecieron NaN o Inf en un paso hacia adelante o hacia atrás."""


class CheckpointError(CuneispotError):
    """Archivo de pesos ilegible o incompatible."""


class MeshParseError(CuneispotError):
    """Malla PLY/OBJ mal formada."""

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.offset = offset
        location = []
        if self.path:
            location.append(self.path)
        if line is not None:
            location.append(f"línea {line}")
        if offset is not None:
            location.append(f"byte {offset}")
        prefix = f"{', '.join(location)}: " if location else ''
        super().__init__(f"{prefix}{message}")


class DatasetError(CuneispotError):
    """Error en el manejo de anotaciones, parches o particiones."""


class AnnotationError(DatasetError):
    """Documento de anotación inválido."""


class SplitError(DatasetError):
    """Partición imposible (por ejemplo, muy pocos segmentos)."""


class TransformError(DatasetError):
    """Transformación afín singular."""


class TrainingDivergedError(CuneispotError):
    """La pérdida dejó de ser finita durante el entrenamiento."""


class EvaluationError(CuneispotError):
    """No se pudo evaluar (checkpoint o conjunto de prueba inválido)."""
