#!/usr/bin/env python3
"""Django entry point: ``python manage.py <command>`` and ``python manage.py test pavecrack``."""

import os
import sys

from django.core.management import execute_from_command_line

if __name__ == "__main__":
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "pavecrack_project.settings")
    execute_from_command_line(sys.argv)
