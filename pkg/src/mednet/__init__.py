"""Multiscale encoder-decoder segmentation of grayscale texture mosaics.

Submodules import numpy lazily relative to the CLI entry point so that
thread-pool environment variables set by `mednet --threads` take effect.
"""

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "network", "losses", "data", "synth", "stitch",
               "metrics", "train", "config", "cli", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
