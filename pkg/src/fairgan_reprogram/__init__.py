"""Reprogramming a VAE-based FairGAN pipeline onto new tabular datasets and tasks."""

from importlib import resources

__version__ = "0.1.0"


def schema_path(name: str):
    """Path of a bundled schema descriptor, e.g. ``schema_path("compas")``."""
    return resources.files(__package__) / "schemas" / f"{name}.json"
