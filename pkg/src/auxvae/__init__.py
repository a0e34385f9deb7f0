"""Auxiliary-information-guided disentangled representation learning on a
self-contained reverse-mode differentiation engine.

Submodules are imported lazily so the CLI can configure threading before
any numeric library loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "nn", "genmodel", "objective", "metrics", "datagen",
               "trainer", "experiments", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
