# spinnoise/utils/__init__.py