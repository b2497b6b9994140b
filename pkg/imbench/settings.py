"""
Django settings for the imbench project.

imbench has no web surface: Django provides the settings layer, the
management-command CLI, the cache framework and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path
from decouple import config


# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='imbench-local')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    # Third party apps
    'rest_framework',

    # Local apps
    'cube',
    'skysim',
    'contamination',
    'restore',
    'clean',
    'evaluate',
    'pipeline',
]

# No database: every artifact is a file
DATABASES = {}

TIME_ZONE = 'UTC'

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Cache for covariance factorizations
CACHES = {
    'default': {
        'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
        'LOCATION': 'imbench-factors',
        'OPTIONS': {
            'MAX_ENTRIES': 64,
        }
    }
}

# Cache timeouts (in seconds)
CACHE_TIMEOUT = {
    'COVARIANCE_FACTOR': 3600,  # 1 hour
}


# Logging
LOG_LEVEL = config('LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'pipeline': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'pipeline',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
}


# Pipeline
IMBENCH_THREADS = config('IMBENCH_THREADS', default=1, cast=int)
IMBENCH_PROFILE = config('IMBENCH_PROFILE', default='desk')
IMBENCH_OUTPUT_DIR = config('IMBENCH_OUTPUT_DIR', default=str(BASE_DIR / 'runs'))

# Profile defaults; a run config file overrides any of these keys
PIPELINE_PROFILES = {
    # Full-size mock: 512x512 patch, 800-820 MHz band, channel averaging by 20
    'paper': {
        'run': {'seed': 2024},
        'sky': {
            'ra_min': 20.0, 'ra_max': 50.0,
            'dec_min': 25.0, 'dec_max': 55.0,
            'n_pix': 512,
            'center_frequency_mhz': 810.0,
            'channel_width_khz': 18.5,
            'n_channels': 1080,
        },
        'rfi': {
            'broadband_rate': 0.012,
            'broadband_width_min': 20, 'broadband_width_max': 120,
            'broadband_duration_min': 200, 'broadband_duration_max': 2000,
            'narrowband_channel_prob': 0.02,
            'outlier_rate': 0.002,
        },
        'preprocess': {'downsample_factor': 20},
        'evaluate': {'patch_size': 256, 'max_patches': 2000},
    },
    # Desk-scale mock for CI and laptops
    'desk': {
        'run': {'seed': 2024},
        'sky': {
            'ra_min': 20.0, 'ra_max': 50.0,
            'dec_min': 25.0, 'dec_max': 55.0,
            'n_pix': 128,
            'center_frequency_mhz': 810.0,
            'channel_width_khz': 92.5,
            'n_channels': 216,
        },
        'rfi': {
            'broadband_rate': 0.3,
            # bursts narrower than a tenth of the band stay visible to per-cycle flagging
            'broadband_width_min': 4, 'broadband_width_max': 16,
            'broadband_duration_min': 50, 'broadband_duration_max': 400,
            'narrowband_channel_prob': 0.02,
            'outlier_rate': 0.001,
        },
        'flagging': {'outlier_passes': 3},
        'restore': {'clip_sigma': 5.0},
        'preprocess': {'downsample_factor': 4},
        'evaluate': {'patch_size': 32, 'max_patches': 600},
    },
}
