"""Brute-force ground truth: enumerate routings, evaluate each, keep the best.

Deliberately dumb: depth-first simple-path enumeration per demand, a
Cartesian product over the per-demand path lists, and one fixed-route
allocation solve per routing.  No pruning or bounding, so it stays an
independent check on the MICP machinery at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from entroute import qnum, routing_micp, topology


class OracleRefusal(RuntimeError):
    """Routing product exceeds the configured cap."""

    def __init__(self, product, cap):
        super().__init__(
            f"routing product {product} exceeds max_routings {cap}")
        self.product = product
        self.cap = cap


@dataclass(frozen=True)
class PathEnumeration:
    paths: tuple      # node tuples, lexicographic by node sequence
    complete: bool    # False if truncated at max_paths


def enumerate_simple_paths(network, s, t, max_paths=None):
    """All simple s-t paths, depth-first, lexicographic by node sequence."""
    if s == t:
        raise ValueError("s and t must differ")
    paths = []
    truncated = False
    stack = [s]
    on_stack = {s}

    def rec(v):
        nonlocal truncated
        if truncated:
            return
        if v == t:
            paths.append(tuple(stack))
            if max_paths is not None and len(paths) >= max_paths:
                truncated = True
            return
        for w, _j in network.neighbors(v):
            if w in on_stack:
                continue
            stack.append(w)
            on_stack.add(w)
            rec(w)
            stack.pop()
            on_stack.remove(w)
            if truncated:
                return

    rec(s)
    return PathEnumeration(tuple(paths), not truncated)


@dataclass(frozen=True)
class RouteCatalog:
    """Per-demand simple-path lists and the overall incidence matrix."""

    paths_per_demand: tuple   # tuple of tuples of node tuples
    incidence: np.ndarray     # (l, r) with r = sum of per-demand counts

    @property
    def p(self):
        return [len(paths) for paths in self.paths_per_demand]

    @property
    def r(self):
        return int(self.incidence.shape[1])


def build_catalog(network, demands, max_paths=None):
    per_demand = []
    columns = []
    for s, t in demands:
        enum = enumerate_simple_paths(network, s, t, max_paths)
        if not enum.complete:
            raise OracleRefusal(math.inf, max_paths)
        per_demand.append(enum.paths)
        for path in enum.paths:
            col = np.zeros(network.l, dtype=np.uint8)
            for u, v in zip(path[:-1], path[1:]):
                col[network.link_between(u, v)] = 1
            columns.append(col)
    incidence = np.array(columns, dtype=np.uint8).T if columns \
        else np.zeros((network.l, 0), dtype=np.uint8)
    return RouteCatalog(tuple(per_demand), incidence)


@dataclass
class OracleResult:
    feasible: bool
    solution: routing_micp.RoutingSolution | None
    best_indices: tuple | None
    catalog: RouteCatalog
    n_evaluated: int


def brute_force_optimum(network, demands, kinds, variant="hat",
                        max_routings=10 ** 6, pwl_points=512, epsilon=None):
    """Exact maximizer over all single-path routings.

    Ties in log-utility are broken by the lexicographically smallest tuple
    of per-demand path indices (enumeration order is deterministic).  If a
    demand has no simple path at all, no routing exists and the instance is
    reported as having no positive-utility solution.
    """
    catalog = build_catalog(network, demands)
    counts = catalog.p
    if any(c == 0 for c in counts):
        return OracleResult(False, None, None, catalog, 0)
    product = 1
    for c in counts:
        product *= c
        if product > max_routings:
            raise OracleRefusal(math.prod(counts), max_routings)

    solver = qnum.AllocationSolver(network, demands, kinds, variant,
                                   pwl_points, epsilon)
    best_value = -math.inf
    best = None
    n_eval = 0
    indices = [0] * demands.k

    def routing_for(idx):
        node_paths = [catalog.paths_per_demand[i][idx[i]]
                      for i in range(demands.k)]
        return topology.routing_from_paths(network, demands, node_paths)

    while True:
        routing = routing_for(indices)
        alloc = solver.solve(routing)
        n_eval += 1
        if alloc.log_utility > best_value + 1e-12:
            best_value = alloc.log_utility
            best = (tuple(indices), routing, alloc)
        # Lexicographic increment over the index tuple.
        pos = demands.k - 1
        while pos >= 0:
            indices[pos] += 1
            if indices[pos] < counts[pos]:
                break
            indices[pos] = 0
            pos -= 1
        if pos < 0:
            break

    idx, routing, alloc = best
    solution = routing_micp.solution_from_rates(
        network, demands, routing, kinds, alloc.rates, variant, pwl_points)
    return OracleResult(True, solution, idx, catalog, n_eval)
