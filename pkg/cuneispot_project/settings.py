"""
Django settings for cuneispot_project project.

Generated by 'django-admin startproject' using Django 4.2.24.

For more information on this file, see
https://docs.djangoproject.com/en/4.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path
from decouple import config, Csv
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# La herramienta no sirve tráfico web; la clave solo existe porque Django la exige
SECRET_KEY = config('SECRET_KEY', default='cuneispot-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='127.0.0.1,localhost', cast=Csv())


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Third party apps
    'rest_framework',

    # Local apps
    'apps.core',
    'apps.tensor_core',
    'apps.meshlight',
    'apps.datapipe',
    'apps.detector',
    'apps.training',
    'apps.evald',
    'apps.cli',
]

MIDDLEWARE = []

TEMPLATES = []


# Database
# https://docs.djangoproject.com/en/4.2/ref/settings/#databases
# Solo guarda el registro de corridas (entrenamientos y evaluaciones)

DATABASES = {
    'default': dj_database_url.config(
        default=config('DATABASE_URL', default=f'sqlite:///{BASE_DIR / "db.sqlite3"}'),
        conn_max_age=600,
    )
}


# Internationalization
# https://docs.djangoproject.com/en/4.2/topics/i18n/

LANGUAGE_CODE = 'es'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

# Default primary key field type
# https://docs.djangoproject.com/en/4.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# =============================================================================
# CUNEISPOT
# =============================================================================

# Rutas por defecto de datos y salidas (RunConfig.paths las puede sobreescribir)
CUNEISPOT_DATA_ROOT = config('CUNEISPOT_DATA_ROOT', default=str(BASE_DIR / 'data'))
CUNEISPOT_OUTPUT_DIR = config('CUNEISPOT_OUTPUT_DIR', default=str(BASE_DIR / 'runs'))

# Pruebas de aceptación de extremo a extremo (lentas, varios minutos)
CUNEISPOT_SLOW_TESTS = config('CUNEISPOT_SLOW_TESTS', default=False, cast=bool)

# Nivel de log: error | info | debug
_LOG_LEVELS = {'error': 'ERROR', 'info': 'INFO', 'debug': 'DEBUG'}
CUNEISPOT_LOG = config('CUNEISPOT_LOG', default='info').strip().lower()
CUNEISPOT_LOG_LEVEL = _LOG_LEVELS.get(CUNEISPOT_LOG, 'INFO')

# DRF solo se usa para validar documentos JSON (configuración y anotaciones)
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}

# LOGGING CONFIGURATION
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '[{levelname}] {asctime} {name}: {message}',
            'style': '{',
        },
        'simple': {
            'format': '[{levelname}] {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
        'console_simple': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': CUNEISPOT_LOG_LEVEL,
    },
    'loggers': {
        'django': {
            'handlers': ['console_simple'],
            'level': 'WARNING',
            'propagate': False,
        },
        'apps': {
            'handlers': ['console'],
            'level': CUNEISPOT_LOG_LEVEL,
            'propagate': False,
        },
        'cuneispot_project': {
            'handlers': ['console'],
            'level': CUNEISPOT_LOG_LEVEL,
            'propagate': False,
        },
    },
}
