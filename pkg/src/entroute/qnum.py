"""Fixed-route utility maximization: optimal rates for a given routing.

This is the inner solve used by the oracle and both randomized heuristics:
with the routing matrix fixed, maximize sum_i [ln x_i + Fhat_i(z_i)] over
rates x subject to link capacities, where z_i is the end-to-end log Werner
parameter induced by the congestion on demand i's path.  The program is
concave; Fhat is realized through the same PWL tables the MICP uses, so
values are directly comparable across solvers.

AllocationSolver compiles the CVXPY program once with the routing matrix as
a parameter; repeated solves over different routings (the oracle's inner
loop) then skip canonicalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from entroute import convexcore, measures
from entroute.measures import MeasureKind

# Interior margin on congestion; the optimum is interior anyway because
# utility diverges to -inf as any used link saturates.  V_FLOOR is the
# matching lower bound on per-link log Werner contributions: it removes the
# flat recession rays of unused links (which make conic solvers report
# spurious dual infeasibility) without excluding any point with sigma under
# the cap.
SIGMA_CAP = 1.0 - 1e-9
V_FLOOR = math.log(1.0 - SIGMA_CAP)


class AllocationError(RuntimeError):
    """Solve failure in the fixed-route allocation program."""


def default_epsilon(network):
    """Minimum positive rate, shared with the MICP's indicator gating."""
    return 1e-6 * float(np.min(network.d))


def congestion_profile(network, routing, rates):
    """Per-link congestion and per-demand log Werner sums for an allocation.

    Masked sums keep a saturated unused link's -inf out of other demands'
    z values.
    """
    A = np.asarray(routing.matrix, dtype=float)
    x = np.asarray(rates, dtype=float)
    sigma = (A @ x) / network.d
    with np.errstate(divide="ignore"):
        link_log = np.log(np.maximum(1.0 - sigma, 0.0))
    z = np.array([link_log[A[:, i] > 0].sum() for i in range(A.shape[1])])
    return sigma, z


@dataclass(frozen=True)
class AllocationResult:
    """Optimal allocation for one routing.

    log_utility is the solver's objective: sum_i ln x_i + PWL(z_i) with the
    shared solver tables (the canonical value for cross-solver comparison).
    envelope_log_utility re-evaluates with the exact envelope formula and
    exact_log_utility with the true measure transform F (that one is -inf
    whenever some z_i falls at or below the separability threshold).
    """

    rates: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    z_solver: np.ndarray
    per_demand: np.ndarray
    log_utility: float
    envelope_log_utility: float
    exact_log_utility: float
    envelope_variant: str
    positive_utility_feasible: bool


def _exact_envelope_value(kind, variant, z):
    model = measures.envelope(kind)
    if z <= model.z_min:
        return -math.inf
    zc = min(z, 0.0)
    return measures.eval_envelope(model, zc) if variant == "hat" \
        else measures.eval_under(model, zc)


def _exact_measure_value(kind, z):
    if z <= measures.z_min(kind):
        return -math.inf
    f = measures.eval_measure(kind, math.exp(min(z, 0.0)))
    return math.log(f) if f > 0.0 else -math.inf


class AllocationSolver:
    """Reusable fixed-route allocation program for one (network, demands).

    Rates carry the same epsilon lower bound as the MICP's indicator
    gating, so a fixed routing is evaluated over exactly the feasible set
    its binary-feasible MICP counterpart has.
    """

    def __init__(self, network, demands, kinds, variant="hat",
                 pwl_points=512, epsilon=None):
        if len(kinds) != demands.k:
            raise ValueError("one measure kind per demand required")
        self.network = network
        self.demands = demands
        self.kinds = tuple(kinds)
        self.variant = variant
        self.epsilon = default_epsilon(network) if epsilon is None \
            else float(epsilon)
        self.tables = [measures.solver_table(kind, variant, pwl_points)
                       for kind in self.kinds]
        l, k = network.l, demands.k

        self._A = cp.Parameter((l, k), nonneg=True)
        x = cp.Variable(k)
        sig = cp.Variable(l)
        v = cp.Variable(l)
        z = cp.Variable(k)
        u = cp.Variable(k)
        r = cp.Variable(k)
        cons = [
            x >= self.epsilon,
            sig == cp.multiply(self._A @ x, 1.0 / network.d),
            sig <= SIGMA_CAP,
            v <= cp.log(1.0 - sig),
            v <= 0.0,
            v >= V_FLOOR,
            z == self._A.T @ v,
            r <= cp.log(x),
        ]
        for i, table in enumerate(self.tables):
            cons.append(u[i] <= table.slopes * z[i] + table.intercepts)
        self._x, self._z = x, z
        self._problem = cp.Problem(cp.Minimize(-cp.sum(r) - cp.sum(u)), cons)

    def solve(self, routing):
        """Optimal AllocationResult for a validated RoutingMatrix."""
        self._A.value = np.asarray(routing.matrix, dtype=float)
        status, _ = convexcore.run_conic_solve(self._problem)
        if status != convexcore.STATUS_OPTIMAL:
            raise AllocationError(
                f"allocation solve failed with status {status!r}")

        x = np.maximum(np.asarray(self._x.value, dtype=float), 1e-300)
        z_solver = np.asarray(self._z.value, dtype=float)
        return self._assemble(routing, x, z_solver)

    def _assemble(self, routing, x, z_solver):
        sigma, z = congestion_profile(self.network, routing, x)
        per_demand = np.empty(self.demands.k)
        env_total, exact_total = 0.0, 0.0
        feasible = True
        for i, kind in enumerate(self.kinds):
            lnx = math.log(x[i])
            per_demand[i] = lnx + self.tables[i].evaluate(z[i])
            env = _exact_envelope_value(kind, self.variant, z[i])
            exa = _exact_measure_value(kind, z[i])
            env_total += lnx + env
            exact_total += lnx + exa
            if not math.isfinite(exa):
                feasible = False
        return AllocationResult(
            rates=x, sigma=sigma, z=z, z_solver=z_solver,
            per_demand=per_demand, log_utility=float(per_demand.sum()),
            envelope_log_utility=env_total, exact_log_utility=exact_total,
            envelope_variant=self.variant,
            positive_utility_feasible=feasible)


def optimize_allocation(network, demands, routing, kinds, variant="hat",
                        pwl_points=512, epsilon=None):
    """One-shot fixed-route allocation solve."""
    return AllocationSolver(network, demands, kinds, variant, pwl_points,
                            epsilon).solve(routing)


def recompute_log_utility(network, demands, routing, kinds, rates,
                          variant="hat", pwl_points=512):
    """Canonical objective value implied by an allocation (for audits)."""
    x = np.asarray(rates, dtype=float)
    _sigma, z = congestion_profile(network, routing, x)
    total = 0.0
    for i, kind in enumerate(kinds):
        table = measures.solver_table(kind, variant, pwl_points)
        total += math.log(x[i]) + table.evaluate(z[i])
    return float(total)
