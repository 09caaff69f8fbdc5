# Generated by Django 4.2.24 on 2026-10-19 10:02

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
        ('training', '0001_initial'),
    ]

    operations = [
        migrations.CreateModel(
            name='EvaluationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('checkpoint_path', models.CharField(max_length=500)),
                ('test_descriptor', models.JSONField(default=dict)),
                ('ap50', models.FloatField(blank=True, null=True)),
                ('ap75', models.FloatField(blank=True, null=True)),
                ('ap90', models.FloatField(blank=True, null=True)),
                ('report', models.JSONField(default=dict)),
                ('training_run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.SET_NULL, related_name='evaluaciones', to='training.trainingrun')),
            ],
            options={
                'verbose_name': 'Evaluación',
                'verbose_name_plural': 'Evaluaciones',
                'db_table': 'evaluaciones',
                'ordering': ['-created_at'],
            },
        ),
    ]
