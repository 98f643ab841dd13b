# __init__.py
# Package name uses underscores (task_blocking); the distribution name in
# pyproject.toml uses dashes (task-blocking).

__version__ = "0.1.0"
