"""Poset-structured safety projection for learned control policies.

Submodules are imported lazily so that the command line can pin thread
counts before numpy is loaded.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "SafetyPoset": "poset",
    "LinearExtension": "poset",
    "enumerate_linear_extensions": "poset",
    "maximal_elements": "poset",
    "parse_poset": "poset",
    "project": "geometry",
    "Halfspace": "geometry",
    "sequential_project": "composition",
    "solve": "qp",
    "QpProblem": "qp",
    "make_scenario": "scenarios",
    "init_state": "learner",
    "train": "learner",
    "benchmark": "sim",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    mod = _EXPORTS.get(name)
    if mod is None:
        raise AttributeError(f"module 'posetsafe' has no attribute {name!r}")
    return getattr(importlib.import_module(f".{mod}", __name__), name)
