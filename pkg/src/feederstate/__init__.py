"""Simultaneous feeder topology, outage, and state estimation."""

from importlib import resources

from .network import (  # noqa: F401
    PHASES,
    Network,
    classify_lines,
    energized_set,
    islands,
    load_network,
    load_network_file,
    serialize,
)
from .powerflow import StateTruth, solve_powerflow  # noqa: F401
from .estimator import (  # noqa: F401
    EstimationError,
    EstimationResult,
    EstimatorOptions,
    classify_undetectable,
    estimate,
    flat_start,
    substitute_missing,
)

__version__ = "0.1.0"


def corpus_path(name: str = "feeder25.json"):
    """Filesystem path of a shipped corpus file."""
    return resources.files("feederstate.data").joinpath(name)


def load_corpus(name: str = "feeder25.json") -> Network:
    """Load a shipped corpus network by file name."""
    import json

    return load_network(json.loads(corpus_path(name).read_text(encoding="utf-8")))
