from django.apps import AppConfig


class SkysimConfig(AppConfig):
    name = 'skysim'
    verbose_name = 'Mock sky simulation'
