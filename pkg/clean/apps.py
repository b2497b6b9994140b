from django.apps import AppConfig


class CleanConfig(AppConfig):
    name = 'clean'
    verbose_name = 'Foreground removal'
