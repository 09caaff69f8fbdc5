from django.db import models


class TimeStampedModel(models.Model):
    """
    Modelo base que agrega created_at y updated_at.
    """
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        abstract = True


class EstadoCorrida(models.TextChoices):
    """Estados de una corrida registrada (entrenamiento o evaluación)."""
    PENDIENTE = 'PENDIENTE', 'Pendiente'
    ENTRENANDO = 'ENTRENANDO', 'Entrenando'
    COMPLETADO = 'COMPLETADO', 'Completado'
    ERROR = 'ERROR', 'Error'
