# Generated by Django 4.2.24 on 2026-10-19 10:02

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('config_hash', models.CharField(db_index=True, max_length=16)),
                ('preset', models.CharField(max_length=10)),
                ('assignment_mode', models.CharField(max_length=20)),
                ('seed', models.IntegerField(default=0)),
                ('estado', models.CharField(choices=[('PENDIENTE', 'Pendiente'), ('ENTRENANDO', 'Entrenando'), ('COMPLETADO', 'Completado'), ('ERROR', 'Error')], default='PENDIENTE', max_length=20)),
                ('epochs_run', models.IntegerField(default=0)),
                ('best_epoch', models.IntegerField(blank=True, null=True)),
                ('best_val_ap50', models.FloatField(blank=True, null=True)),
                ('history', models.JSONField(default=list)),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('completado_at', models.DateTimeField(blank=True, null=True)),
                ('error_mensaje', models.TextField(blank=True)),
            ],
            options={
                'verbose_name': 'Corrida de Entrenamiento',
                'verbose_name_plural': 'Corridas de Entrenamiento',
                'db_table': 'corridas_entrenamiento',
                'ordering': ['-created_at'],
            },
        ),
    ]
