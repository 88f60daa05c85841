"""
Django settings for the segmentation workbench.

Only the parts of Django the workbench uses are configured here: installed
apps (for management commands and the test runner) and logging. There is no
web surface and no database.
"""

from pathlib import Path
import os

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

SECRET_KEY = os.environ.get('MEDSEG_SECRET_KEY', 'medseg-local-only')

DEBUG = os.environ.get('MEDSEG_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'core',
    'corpus',
    'diffusion',
    'network',
    'evaluation',
    'training',
]

DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# mensagens ao usuário em inglês
LANGUAGE_CODE = 'en-us'

USE_TZ = True


# Pastas padrão de dados e de saídas

MEDSEG_DATA_ROOT = Path(os.environ.get('MEDSEG_DATA_ROOT', BASE_DIR / 'data'))
MEDSEG_RUNS_ROOT = Path(os.environ.get('MEDSEG_RUNS_ROOT', BASE_DIR / 'runs'))

# 'auto' escolhe cuda quando disponível
MEDSEG_DEVICE = os.environ.get('MEDSEG_DEVICE', 'auto')

MEDSEG_SLOW_TESTS = os.environ.get('MEDSEG_SLOW_TESTS', '0') == '1'


# Logging

LOG_LEVEL = os.environ.get('MEDSEG_LOG_LEVEL', 'INFO').upper()
LOG_FORMAT = os.environ.get('MEDSEG_LOG_FORMAT', 'json')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'json': {
            '()': 'pythonjsonlogger.json.JsonFormatter',
            'fmt': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
        'text': {
            'format': '%(asctime)s %(levelname)-7s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'json' if LOG_FORMAT == 'json' else 'text',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app: {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False}
        for app in INSTALLED_APPS
    },
}
