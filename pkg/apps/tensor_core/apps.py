from django.apps import AppConfig


class TensorCoreConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.tensor_core'
