from collections.abc import Mapping
from typing import Any, Dict, Type

from rest_framework import serializers

from apps.core.exceptions import ConfigError


class StrictSerializer(serializers.Serializer):
    """
    Serializer de validación que rechaza claves que no declara.

    Los serializers anidados heredan el mismo comportamiento, así que una
    clave desconocida se reporta en cualquier nivel del documento.
    """

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Clave desconocida.'] for key in unknown})
        return super().to_internal_value(data)


def flatten_errors(errors: Any, prefix: str = '') -> list:
    """Convierte los errores anidados de DRF en líneas 'ruta: mensaje'."""
    if isinstance(errors, Mapping):
        lines = []
        for key, value in errors.items():
            path = f"{prefix}.{key}" if prefix and key != 'non_field_errors' else (prefix or str(key))
            lines.extend(flatten_errors(value, path))
        return lines
    if isinstance(errors, (list, tuple)):
        lines = []
        for index, value in enumerate(errors):
            if isinstance(value, (Mapping, list, tuple)):
                lines.extend(flatten_errors(value, f"{prefix}[{index}]"))
            else:
                lines.append(f"{prefix}: {value}" if prefix else str(value))
        return lines
    return [f"{prefix}: {errors}" if prefix else str(errors)]


def validate_payload(serializer_class: Type[serializers.Serializer], data: Any,
                     error_class: Type[Exception] = ConfigError, source: str = '') -> Dict:
    """
    Valida `data` con el serializer y devuelve los datos validados.

    Los errores se convierten en `error_class` con todas las rutas afectadas.
    """
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        detail = '; '.join(flatten_errors(serializer.errors))
        where = f"{source}: " if source else ''
        raise error_class(f"{where}{detail}")
    return serializer.validated_data
