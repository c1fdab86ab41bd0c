"""
Reconstruction of density fields with smooth pill-shaped bars.

The analytic layers build on each other: signed distances to a pill
(:mod:`.geometry`), smooth transitions to pseudo-densities
(:mod:`.transition`), aggregation over pills (:mod:`.aggregation`),
projection onto a finite-element grid (:mod:`.grid`) and the tracking and
reward objectives (:mod:`.objective`).  :mod:`.solver` minimizes them under
bounds and length constraints, :mod:`.pipeline` stages the runs and
:mod:`.workflow` / :mod:`.cli` drive everything from a config file.
"""

__version__ = "0.1.0"

from .aggregation import AggregatorSpec  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .grid import DesignVector, GridSpec  # noqa: E402
from .objective import ConstraintSet, TargetField  # noqa: E402
from .solver import SolveOptions, minimize  # noqa: E402
from .transition import TransitionSpec  # noqa: E402

__all__ = [
    "AggregatorSpec",
    "ConstraintSet",
    "DesignVector",
    "GridSpec",
    "RunConfig",
    "SolveOptions",
    "TargetField",
    "TransitionSpec",
    "load_config",
    "minimize",
]
