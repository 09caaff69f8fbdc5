from django.apps import AppConfig


class MeshlightConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.meshlight'
