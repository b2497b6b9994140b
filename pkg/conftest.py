import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'imbench.settings')
django.setup()
