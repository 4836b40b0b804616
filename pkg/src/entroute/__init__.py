"""Utility-optimal single-path entanglement routing toolkit.

Solvers for joint route + rate/fidelity allocation on quantum repeater
networks: an exact mixed-integer convex formulation, its relaxation bound,
a min-congestion bound, two randomized heuristics, and a brute-force
certification oracle.
"""

from entroute.measures import MeasureKind
from entroute.topology import (
    DemandSet,
    LinkPhysics,
    NetworkModel,
    RoutingMatrix,
    TopologyError,
    compute_link_constant,
    load_demands,
    load_topology,
)

__all__ = [
    "DemandSet",
    "LinkPhysics",
    "MeasureKind",
    "NetworkModel",
    "RoutingMatrix",
    "TopologyError",
    "compute_link_constant",
    "load_demands",
    "load_topology",
]

__version__ = "0.1.0"
