"""Link-based mixed-integer convex formulation of single-path routing.

Variables per demand i and directed link j' (undirected j):

    x[i,j']   rate on the directed link          (2kl continuous)
    y[i,j']   indicator of a positive rate       (2kl binary)
    sigma[j]  congestion fraction of link j      (l)
    gamma[i,j] y+[i,j]*sigma[j] via McCormick    (kl)
    v[i,j]    log Werner contribution            (kl)
    z[i]      end-to-end log Werner parameter    (k)

which matches the 6kl+k+l structural count with 2kl binaries.  The
perspective terms t[i,j'] (outgoing links of each source) and the PWL
hypograph values u[i] are auxiliary.  The objective minimizes
sum_i (lambda_i - Fhat_i(z_i)) with lambda_i the perspective realization
of -ln(rate at the source).

Binary-feasible optima are in one-to-one correspondence with single-path
routings; decoding walks the unique positive-allocation path per demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from entroute import convexcore, measures, qnum, topology
from entroute.convexcore import BnBConfig, ConvexProgram
from entroute.topology import TopologyError


class MicpError(ValueError):
    """Structural problem in the MICP build (infeasible demand etc.)."""


@dataclass
class MicpModel:
    """A built program plus the index maps needed to decode solutions."""

    program: ConvexProgram
    network: object
    demands: object
    kinds: tuple
    variant: str
    epsilon: float
    ix_x: np.ndarray      # (k, 2l) variable indices
    ix_y: np.ndarray      # (k, 2l)
    ix_sigma: np.ndarray  # (l,)
    ix_gamma: np.ndarray  # (k, l)
    ix_v: np.ndarray      # (k, l)
    ix_z: np.ndarray      # (k,)
    ix_u: np.ndarray      # (k,)
    ix_t: dict            # (i, jp) -> index, jp over delta_out[s_i]
    tables: list
    pwl_points: int


@dataclass(frozen=True)
class RoutingSolution:
    """Decoded routing with its allocation and utility values.

    log_utility is the canonical PWL-realized objective (what the solver
    maximized); envelope_log_utility re-evaluates the exact envelope
    formula, exact_log_utility the true measure transform.
    """

    routing: topology.RoutingMatrix
    rates: np.ndarray
    z: np.ndarray
    per_demand: np.ndarray
    log_utility: float
    envelope_log_utility: float
    exact_log_utility: float
    kinds: tuple
    variant: str


def default_epsilon(network):
    """Gating constant: small relative to the weakest link capacity."""
    return qnum.default_epsilon(network)


def _build(network, demands, kinds, variant, epsilon, pwl_points,
           relaxed=False, keep_family="incoming", strengthen=True):
    if len(kinds) != demands.k:
        raise MicpError("one measure kind per demand required")
    demands.validate_against(network)
    l, k = network.l, demands.k
    for i, (s, t) in enumerate(demands):
        if not network.delta_out[s] or not network.delta_in[t]:
            raise MicpError(
                f"demand {i} structurally infeasible: no outgoing link at "
                "its source or no incoming link at its target")

    tables = [measures.solver_table(kind, variant, pwl_points)
              for kind in kinds]
    d = network.d
    prog = ConvexProgram("routing-relaxation" if relaxed else "routing-micp")

    ix_x = np.empty((k, 2 * l), dtype=int)
    ix_y = np.empty((k, 2 * l), dtype=int)
    for i in range(k):
        for jp in range(2 * l):
            ix_x[i, jp] = prog.add_variable(
                f"x[{i},{jp}]", 0.0, float(d[jp // 2]))
    for i in range(k):
        for jp in range(2 * l):
            ix_y[i, jp] = prog.add_variable(
                f"y[{i},{jp}]", 0.0, 1.0, binary=not relaxed)
    ix_sigma = np.array([prog.add_variable(f"sigma[{j}]", 0.0, 1.0)
                         for j in range(l)])
    ix_gamma = np.array([[prog.add_variable(f"gamma[{i},{j}]", 0.0, 1.0)
                          for j in range(l)] for i in range(k)])
    # The v floor mirrors qnum's interior congestion cap; it also removes
    # flat recession rays that trip conic infeasibility detection.
    ix_v = np.array([[prog.add_variable(f"v[{i},{j}]", qnum.V_FLOOR, 0.0)
                      for j in range(l)] for i in range(k)])
    ix_z = np.array([prog.add_variable(f"z[{i}]", l * qnum.V_FLOOR, 0.0)
                     for i in range(k)])
    ix_u = np.array([prog.add_variable(f"u[{i}]", aux=True)
                     for i in range(k)])

    # Capacity: total bidirectional allocation on each undirected link.
    for j in range(l):
        coeffs = {}
        for i in range(k):
            for jp in network.directed_pair(j):
                coeffs[ix_x[i, jp]] = 1.0
        prog.add_lin_le(coeffs, float(d[j]))

    # Flow conservation of x at intermediate nodes.
    for i, (s, t) in enumerate(demands):
        for vtx in range(network.n):
            if vtx in (s, t):
                continue
            coeffs = {}
            for jp in network.delta_in[vtx]:
                coeffs[ix_x[i, jp]] = coeffs.get(ix_x[i, jp], 0.0) + 1.0
            for jp in network.delta_out[vtx]:
                coeffs[ix_x[i, jp]] = coeffs.get(ix_x[i, jp], 0.0) - 1.0
            if coeffs:
                prog.add_lin_eq(coeffs, 0.0)

    # Indicator gating x <= d*y and x >= eps*y.
    for i in range(k):
        for jp in range(2 * l):
            dj = float(d[jp // 2])
            prog.add_lin_le({ix_x[i, jp]: 1.0, ix_y[i, jp]: -dj}, 0.0)
            prog.add_lin_le({ix_x[i, jp]: -1.0, ix_y[i, jp]: epsilon}, 0.0)

    # Degree constraints on y.  The relaxation keeps only one inequality
    # family; with the y-flow rows below the other is implied.
    for i, (s, t) in enumerate(demands):
        for vtx in range(network.n):
            if vtx != s and (not relaxed or keep_family == "incoming"):
                coeffs = {ix_y[i, jp]: 1.0 for jp in network.delta_in[vtx]}
                if coeffs:
                    prog.add_lin_le(coeffs, 1.0)
            if vtx != t and (not relaxed or keep_family == "outgoing"):
                coeffs = {ix_y[i, jp]: 1.0 for jp in network.delta_out[vtx]}
                if coeffs:
                    prog.add_lin_le(coeffs, 1.0)
        prog.add_lin_eq({ix_y[i, jp]: 1.0
                         for jp in network.delta_out[s]}, 1.0)
        prog.add_lin_eq({ix_y[i, jp]: 1.0
                         for jp in network.delta_in[s]}, 0.0)
        prog.add_lin_eq({ix_y[i, jp]: 1.0
                         for jp in network.delta_out[t]}, 0.0)
        prog.add_lin_eq({ix_y[i, jp]: 1.0
                         for jp in network.delta_in[t]}, 1.0)

    # Congestion definition sigma_j = sum_{i, j' in pair(j)} x/d_j.
    for j in range(l):
        coeffs = {ix_sigma[j]: 1.0}
        for i in range(k):
            for jp in network.directed_pair(j):
                coeffs[ix_x[i, jp]] = -1.0 / float(d[j])
        prog.add_lin_eq(coeffs, 0.0)

    # Exact McCormick rows for gamma = y+ * sigma (y+ binary, sigma in [0,1]).
    for i in range(k):
        for j in range(l):
            jp0, jp1 = network.directed_pair(j)
            g = ix_gamma[i, j]
            prog.add_lin_le({g: 1.0, ix_y[i, jp0]: -1.0, ix_y[i, jp1]: -1.0},
                            0.0)
            prog.add_lin_le({g: 1.0, ix_sigma[j]: -1.0}, 0.0)
            prog.add_lin_le({g: -1.0, ix_sigma[j]: 1.0,
                             ix_y[i, jp0]: 1.0, ix_y[i, jp1]: 1.0}, 1.0)

    # Log Werner epigraph v <= ln(1 - gamma) and z = sum_j v.
    for i in range(k):
        for j in range(l):
            prog.add_log_epigraph(ix_v[i, j], {ix_gamma[i, j]: -1.0}, 1.0)
        coeffs = {ix_z[i]: 1.0}
        for j in range(l):
            coeffs[ix_v[i, j]] = -1.0
        prog.add_lin_eq(coeffs, 0.0)

    if relaxed or strengthen:
        # y-flow conservation and the directed-pair cap: automatically true
        # at binary y, explicit here to tighten continuous relaxations.
        for i, (s, t) in enumerate(demands):
            for vtx in range(network.n):
                if vtx in (s, t):
                    continue
                coeffs = {}
                for jp in network.delta_in[vtx]:
                    coeffs[ix_y[i, jp]] = coeffs.get(ix_y[i, jp], 0.0) + 1.0
                for jp in network.delta_out[vtx]:
                    coeffs[ix_y[i, jp]] = coeffs.get(ix_y[i, jp], 0.0) - 1.0
                if coeffs:
                    prog.add_lin_eq(coeffs, 0.0)
            for j in range(l):
                jp0, jp1 = network.directed_pair(j)
                prog.add_lin_le({ix_y[i, jp0]: 1.0, ix_y[i, jp1]: 1.0}, 1.0)

    # Objective: perspective rate terms minus the PWL hypograph values.
    objective = {}
    ix_t = {}
    for i, (s, _t) in enumerate(demands):
        for jp in network.delta_out[s]:
            t_idx = prog.add_variable(f"t[{i},{jp}]", aux=True)
            prog.add_perspective(t_idx, ix_x[i, jp], ix_y[i, jp])
            objective[t_idx] = 1.0
            ix_t[(i, jp)] = t_idx
    for i in range(k):
        prog.add_pwl_hypograph(ix_u[i], ix_z[i], tables[i].slopes,
                               tables[i].intercepts)
        objective[ix_u[i]] = -1.0
    prog.set_objective(objective)

    return MicpModel(prog, network, demands, tuple(kinds), variant, epsilon,
                     ix_x, ix_y, ix_sigma, ix_gamma, ix_v, ix_z, ix_u, ix_t,
                     tables, pwl_points)


def build_micp(network, demands, kinds, variant="hat", epsilon=None,
               pwl_points=512, strengthen=True):
    """Build the exact single-path routing MICP."""
    eps = default_epsilon(network) if epsilon is None else float(epsilon)
    if eps <= 0:
        raise MicpError("epsilon must be positive")
    return _build(network, demands, kinds, variant, eps, pwl_points,
                  relaxed=False, strengthen=strengthen)


def build_relaxation(network, demands, kinds, variant="hat", epsilon=None,
                     pwl_points=512, keep_family="incoming"):
    """Continuous relaxation with y-flow rows; keeps one degree family."""
    if keep_family not in ("incoming", "outgoing"):
        raise MicpError("keep_family must be 'incoming' or 'outgoing'")
    eps = default_epsilon(network) if epsilon is None else float(epsilon)
    return _build(network, demands, kinds, variant, eps, pwl_points,
                  relaxed=True, keep_family=keep_family)


def extract_routing(model, x_solution):
    """Walk each demand's positive-allocation path out of a solution.

    Residual cycles disjoint from a path would be strictly dominated at an
    optimum; if the binary support contains more than the walked path the
    decode rejects the solution rather than guess.
    """
    x = np.asarray(x_solution, dtype=float)
    net, demands = model.network, model.demands
    node_paths = []
    for i, (s, t) in enumerate(demands):
        active = {jp for jp in range(2 * net.l)
                  if x[model.ix_y[i, jp]] > 0.5}
        path = [s]
        used = []
        vtx = s
        visited = {s}
        while vtx != t:
            nxt = [jp for jp in net.delta_out[vtx] if jp in active]
            if len(nxt) == 0:
                raise MicpError(
                    f"demand {i}: no active outgoing link at node {vtx} "
                    "(zero allocation)")
            if len(nxt) > 1:
                raise MicpError(f"demand {i}: flow splitting at node {vtx}")
            jp = nxt[0]
            vtx = int(net.dir_head[jp])
            if vtx in visited:
                raise MicpError(f"demand {i}: cycle detected in decode")
            visited.add(vtx)
            path.append(vtx)
            used.append(jp)
        leftovers = active.difference(used)
        if leftovers:
            raise MicpError(
                f"demand {i}: active links off the decoded path "
                f"({sorted(leftovers)})")
        node_paths.append(tuple(path))
    return topology.routing_from_paths(net, demands, node_paths)


def solution_from_rates(network, demands, routing, kinds, rates, variant,
                        pwl_points=512, log_utility=None):
    """Assemble a RoutingSolution, recomputing all utility flavors."""
    x = np.asarray(rates, dtype=float)
    _sigma, z = qnum.congestion_profile(network, routing, x)
    per_demand = np.empty(demands.k)
    env_total = exact_total = 0.0
    for i, kind in enumerate(kinds):
        table = measures.solver_table(kind, variant, pwl_points)
        lnx = math.log(x[i])
        per_demand[i] = lnx + table.evaluate(z[i])
        env_total += lnx + qnum._exact_envelope_value(kind, variant, z[i])
        exact_total += lnx + qnum._exact_measure_value(kind, z[i])
    canonical = float(per_demand.sum())
    if log_utility is None:
        log_utility = canonical
    elif abs(log_utility - canonical) > 1e-5 * max(1.0, abs(canonical)):
        raise MicpError(
            f"reported utility {log_utility} disagrees with the value "
            f"recomputed from the allocation {canonical}")
    return RoutingSolution(routing, x, z, per_demand, float(log_utility),
                           env_total, exact_total, tuple(kinds), variant)


def micp_point(model, routing, alloc):
    """Assemble the full MICP variable vector realizing a fixed routing.

    Used to seed branch-and-bound with a feasible incumbent.  Returns None
    when the allocation violates the epsilon gating (degenerate rates).
    """
    net, demands = model.network, model.demands
    if np.any(alloc.rates < model.epsilon * (1.0 + 1e-9)):
        return None
    x = np.zeros(model.program.n_variables)
    A = np.asarray(routing.matrix, dtype=float)
    sigma = (A @ alloc.rates) / net.d
    if np.any(sigma > qnum.SIGMA_CAP):
        return None
    x[model.ix_sigma] = sigma
    for i, path in enumerate(routing.node_paths):
        dir_ids = [_directed_id(net, u, v)
                   for u, v in zip(path[:-1], path[1:])]
        for jp in dir_ids:
            x[model.ix_x[i, jp]] = alloc.rates[i]
            x[model.ix_y[i, jp]] = 1.0
        for j in range(net.l):
            if routing.matrix[j, i]:
                gamma = sigma[j]
                x[model.ix_gamma[i, j]] = gamma
                x[model.ix_v[i, j]] = math.log(max(1.0 - gamma, 1e-300))
        x[model.ix_z[i]] = x[model.ix_v[i]].sum()
        x[model.ix_u[i]] = model.tables[i].evaluate(x[model.ix_z[i]])
    for (i, jp), t_idx in model.ix_t.items():
        if x[model.ix_y[i, jp]] > 0.5:
            x[t_idx] = -math.log(x[model.ix_x[i, jp]])
    return x


def shortest_path_incumbent(model):
    """Feasible seed: every demand on its BFS shortest path."""
    net, demands = model.network, model.demands
    try:
        paths = [topology.bfs_path(net, s, t) for s, t in demands]
        routing = topology.routing_from_paths(net, demands, paths)
        solver = qnum.AllocationSolver(net, demands, model.kinds,
                                       model.variant, model.pwl_points,
                                       model.epsilon)
        alloc = solver.solve(routing)
    except (TopologyError, qnum.AllocationError):
        return None
    return micp_point(model, routing, alloc)


@dataclass
class ExactResult:
    solution: RoutingSolution
    bnb: convexcore.BnBResult
    model: MicpModel


def solve_exact(network, demands, kinds, variant="hat", epsilon=None,
                pwl_points=512, config=None, strengthen=True):
    """Solve the MICP to optimality; decode and cross-check the incumbent."""
    model = build_micp(network, demands, kinds, variant, epsilon, pwl_points,
                       strengthen=strengthen)
    hint = shortest_path_incumbent(model)
    bnb = convexcore.branch_and_bound(model.program, config or BnBConfig(),
                                      incumbent_hint=hint)
    if bnb.status == convexcore.STATUS_INFEASIBLE or bnb.x is None:
        raise MicpError(f"MICP solve returned {bnb.status}")
    routing = extract_routing(model, bnb.x)
    # Rate per demand: the common flow on its decoded first hop.
    rates = np.empty(demands.k)
    for i, path in enumerate(routing.node_paths):
        jp = _directed_id(network, path[0], path[1])
        rates[i] = bnb.x[model.ix_x[i, jp]]
    solution = solution_from_rates(network, demands, routing, kinds, rates,
                                   variant, pwl_points,
                                   log_utility=-bnb.objective)
    return ExactResult(solution, bnb, model)


def _directed_id(network, u, v):
    j = network.link_between(u, v)
    if j is None:
        raise MicpError(f"no link between nodes {u} and {v}")
    jp0, jp1 = network.directed_pair(j)
    return jp0 if network.dir_tail[jp0] == u else jp1


@dataclass
class RelaxationReport:
    bound_log_utility: float
    result: convexcore.SolveResult
    model: MicpModel


def relaxation_upper_bound(network, demands, kinds, variant="hat",
                           epsilon=None, pwl_points=512,
                           keep_family="incoming"):
    """Upper bound on the optimal log-utility from the relaxed program."""
    model = build_relaxation(network, demands, kinds, variant, epsilon,
                             pwl_points, keep_family)
    result = convexcore.solve_relaxation(model.program)
    if not result.ok:
        raise MicpError(f"relaxation solve failed: {result.status}")
    return RelaxationReport(-result.objective, result, model)


@dataclass
class BracketReport:
    """Approximation-error bracket from the hat and breve runs."""

    utility_hat: float
    utility_breve: float
    gap: float
    certificate_exact: bool
    solution_hat: RoutingSolution
    solution_breve: RoutingSolution | None


def bracket_approximation_error(network, demands, kinds, epsilon=None,
                                pwl_points=512, config=None):
    """Bound the envelope approximation error by re-solving with breve.

    If every demand's optimal z stays at or below its tangency point the
    envelope was not active and the formulation is exact: the bracket is
    declared zero without a second solve.
    """
    hat = solve_exact(network, demands, kinds, "hat", epsilon, pwl_points,
                      config)
    certificate = True
    for i, kind in enumerate(kinds):
        model = measures.envelope(kind)
        if model.trivial:
            continue
        if hat.solution.z[i] > model.z_hat + 1e-9:
            certificate = False
            break
    if certificate:
        return BracketReport(hat.solution.log_utility,
                             hat.solution.log_utility, 0.0, True,
                             hat.solution, None)
    breve = solve_exact(network, demands, kinds, "breve", epsilon,
                        pwl_points, config)
    gap = hat.solution.log_utility - breve.solution.log_utility
    if gap < -1e-8:
        raise MicpError(f"bracket inverted: hat-breve gap {gap}")
    return BracketReport(hat.solution.log_utility,
                         breve.solution.log_utility, max(0.0, gap), False,
                         hat.solution, breve.solution)
