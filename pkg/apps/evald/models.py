from django.db import models

from apps.core.models import TimeStampedModel


class EvaluationRecord(TimeStampedModel):
    """Resultado de una evaluación; el informe completo queda en `report`."""
    training_run = models.ForeignKey('training.TrainingRun', on_delete=models.SET_NULL, null=True, blank=True,
                                     related_name='evaluaciones')
    checkpoint_path = models.CharField(max_length=500)
    test_descriptor = models.JSONField(default=dict)
    ap50 = models.FloatField(null=True, blank=True)
    ap75 = models.FloatField(null=True, blank=True)
    ap90 = models.FloatField(null=True, blank=True)
    report = models.JSONField(default=dict)

    class Meta:
        db_table = 'evaluaciones'
        verbose_name = 'Evaluación'
        verbose_name_plural = 'Evaluaciones'
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.checkpoint_path} AP@50={self.ap50}"
