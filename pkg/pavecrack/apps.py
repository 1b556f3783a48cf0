"""App configuration; registering the app exposes its management commands."""

from __future__ import annotations

from django.apps import AppConfig


class PavecrackConfig(AppConfig):
    name = 'pavecrack'
    verbose_name = 'Pavement crack detection'
