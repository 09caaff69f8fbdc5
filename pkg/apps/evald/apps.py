from django.apps import AppConfig


class EvaldConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.evald'
