from django.apps import AppConfig


class CubeConfig(AppConfig):
    name = 'cube'
    verbose_name = 'Spectral cubes and masks'
