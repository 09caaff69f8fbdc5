from django.db import models

from apps.core.models import EstadoCorrida, TimeStampedModel


class TrainingRun(TimeStampedModel):
    """
    Registro de una corrida de entrenamiento. Los artefactos JSON en disco son
    la fuente de verdad; este registro es solo bitácora.
    """
    config_hash = models.CharField(max_length=16, db_index=True)
    preset = models.CharField(max_length=10)
    assignment_mode = models.CharField(max_length=20)
    seed = models.IntegerField(default=0)
    estado = models.CharField(max_length=20, choices=EstadoCorrida.choices, default=EstadoCorrida.PENDIENTE)

    epochs_run = models.IntegerField(default=0)
    best_epoch = models.IntegerField(null=True, blank=True)
    best_val_ap50 = models.FloatField(null=True, blank=True)
    history = models.JSONField(default=list)
    checkpoint_path = models.CharField(max_length=500, blank=True)
    completado_at = models.DateTimeField(null=True, blank=True)
    error_mensaje = models.TextField(blank=True)

    class Meta:
        db_table = 'corridas_entrenamiento'
        verbose_name = 'Corrida de Entrenamiento'
        verbose_name_plural = 'Corridas de Entrenamiento'
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.preset}/{self.assignment_mode} seed={self.seed} - {self.estado}"
