"""Offline multi-task multi-agent RL on a self-contained skirmish simulator.

Subpackages are imported lazily so the CLI can configure BLAS threading
before numpy is pulled in.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "optim",
    "rnn",
    "checkpoint",
    "entities",
    "network",
    "dropout",
    "mixer",
    "env",
    "data",
    "trainer",
    "diagnostics",
    "config",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
