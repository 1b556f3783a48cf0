"""
Initialization file for the Django project. This file intentionally
keeps the package namespace clean; the toolkit's settings live in
``settings.py`` and all domain code lives in the ``pavecrack`` app.
"""
