"""Convex-program representation, continuous solves, and branch-and-bound.

A ConvexProgram holds variables (optionally binary, optionally auxiliary),
linear constraints, and three non-linear atom families, all of which are
convex-representable:

  * log epigraph        v <= ln(c + a'x)
  * perspective-log     t >= -y * ln(x/y)   (0 at x = y = 0, +inf for
                        y > 0 = x; this is rel_entr(y, x))
  * concave-PWL         u <= min_m (slope_m * z + intercept_m)

Continuous solves go through CVXPY with the Clarabel interior-point solver
(SCS as fallback); the binary branch-and-bound on top is implemented here.
Programs are compiled once with the binary bounds as solver parameters, so
node re-solves skip canonicalization.
"""

from __future__ import annotations

import heapq
import math
import time
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_NUMERICAL = "numerical_failure"

# Primary targets are 1e-9; the reduced thresholds let Clarabel certify an
# AlmostSolved answer when the central path stalls (steep PWL rows plus
# degenerate relaxations make that happen occasionally), which we accept
# rather than failing over for no benefit.  Feasibility stays at 1e-7 so
# accepted points survive the independent incumbent re-check.
_CLARABEL_FAST = dict(tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9,
                      reduced_tol_gap_abs=1e-6, reduced_tol_gap_rel=1e-6,
                      reduced_tol_feas=1e-7, reduced_tol_ktratio=1e-4,
                      max_iter=400)
# Short steps plus heavier regularization rescue the handful of
# near-degenerate geometries (saturated links, sub-threshold utilities)
# where the fast profile loses the central path.
_CLARABEL_CAREFUL = dict(tol_gap_abs=1e-8, tol_gap_rel=1e-8, tol_feas=1e-8,
                         reduced_tol_gap_abs=1e-5, reduced_tol_gap_rel=1e-5,
                         reduced_tol_feas=1e-7, reduced_tol_ktratio=1e-3,
                         max_iter=800, max_step_fraction=0.5,
                         static_regularization_constant=1e-7)
_SCS_OPTS = dict(eps=1e-8, max_iters=50000)

_CLARABEL_MIDSTEP = dict(_CLARABEL_FAST, max_step_fraction=0.8)

# The fast profile appears twice: once on the warm per-problem solver
# cache (the common path) and once on a cleared cache, because a stalled
# warm solver and a fresh one fail on different knife-edge instances.
# The step-length variants catch the remaining central-path stalls.
_LADDER = (
    (cp.CLARABEL, _CLARABEL_FAST, 1e-9, 1e-6),
    (cp.CLARABEL, _CLARABEL_FAST, 1e-9, 1e-6),
    (cp.CLARABEL, _CLARABEL_MIDSTEP, 1e-9, 1e-6),
    (cp.CLARABEL, _CLARABEL_CAREFUL, 1e-8, 1e-5),
    (cp.SCS, _SCS_OPTS, 1e-8, 1e-6),
)


def run_conic_solve(problem):
    """Solve a CVXPY problem with the house retry ladder: (status, tol).

    Clarabel with fast settings, then Clarabel with conservative settings,
    then SCS.  Inaccurate-optimal outcomes are accepted at their reduced
    tolerance; infeasible/unbounded verdicts are only trusted from exact
    statuses.  Statuses are normalized to the STATUS_* constants.

    Retry rungs start from a cleared per-problem solver cache: CVXPY's
    parametric path keeps one solver object per problem, and a stalled
    solver's internal state otherwise leaks into the retry.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for rung, (solver, opts, tol, tol_reduced) in enumerate(_LADDER):
            if rung > 0 and hasattr(problem, "_solver_cache"):
                problem._solver_cache.clear()
            try:
                problem.solve(solver=solver, **opts)
                status = problem.status
            except cp.error.SolverError:
                continue
            if status == cp.OPTIMAL:
                return STATUS_OPTIMAL, tol
            if status == cp.OPTIMAL_INACCURATE:
                return STATUS_OPTIMAL, tol_reduced
            if status == cp.INFEASIBLE:
                return STATUS_INFEASIBLE, math.inf
            if status == cp.UNBOUNDED:
                return STATUS_UNBOUNDED, math.inf
    return STATUS_NUMERICAL, math.inf


class ProgramError(ValueError):
    """Structurally invalid program (bad variable references, bounds...)."""


class SolveError(RuntimeError):
    """Continuous solve failed in a way branch-and-bound cannot absorb."""


@dataclass
class Variable:
    name: str
    lb: float = -math.inf
    ub: float = math.inf
    binary: bool = False
    aux: bool = False


@dataclass
class LogEpigraph:
    v: int
    affine: dict
    const: float


@dataclass
class PerspectiveLog:
    t: int
    x: int
    y: int


@dataclass
class PwlHypograph:
    u: int
    z: int
    slopes: np.ndarray
    intercepts: np.ndarray


class ConvexProgram:
    """Mutable builder; freeze by handing it to a solver entry point."""

    def __init__(self, name="program"):
        self.name = name
        self.variables = []
        self.lin_eq = []      # (coeffs dict, rhs): sum == rhs
        self.lin_le = []      # (coeffs dict, rhs): sum <= rhs
        self.log_cons = []
        self.persp_cons = []
        self.pwl_cons = []
        self.objective = {}
        self.obj_const = 0.0

    # -- construction -------------------------------------------------------

    def add_variable(self, name, lb=-math.inf, ub=math.inf, binary=False,
                     aux=False):
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise ProgramError(f"variable {name}: lb > ub")
        self.variables.append(Variable(name, lb, ub, binary, aux))
        return len(self.variables) - 1

    def _check(self, idx):
        if not 0 <= idx < len(self.variables):
            raise ProgramError(f"unknown variable index {idx}")
        return idx

    def add_lin_eq(self, coeffs, rhs):
        self.lin_eq.append(({self._check(i): float(c)
                             for i, c in coeffs.items()}, float(rhs)))

    def add_lin_le(self, coeffs, rhs):
        self.lin_le.append(({self._check(i): float(c)
                             for i, c in coeffs.items()}, float(rhs)))

    def add_log_epigraph(self, v, affine, const=0.0):
        self.log_cons.append(LogEpigraph(
            self._check(v),
            {self._check(i): float(c) for i, c in affine.items()},
            float(const)))

    def add_perspective(self, t, x, y):
        self.persp_cons.append(PerspectiveLog(
            self._check(t), self._check(x), self._check(y)))

    def add_pwl_hypograph(self, u, z, slopes, intercepts):
        slopes = np.asarray(slopes, dtype=float)
        intercepts = np.asarray(intercepts, dtype=float)
        if slopes.shape != intercepts.shape or slopes.ndim != 1:
            raise ProgramError("PWL slopes/intercepts must be equal-length 1-D")
        self.pwl_cons.append(PwlHypograph(
            self._check(u), self._check(z), slopes, intercepts))

    def set_objective(self, coeffs, const=0.0):
        self.objective = {self._check(i): float(c) for i, c in coeffs.items()}
        self.obj_const = float(const)

    # -- introspection ------------------------------------------------------

    @property
    def n_variables(self):
        return len(self.variables)

    @property
    def binary_indices(self):
        return [i for i, v in enumerate(self.variables) if v.binary]

    @property
    def n_binary(self):
        return len(self.binary_indices)

    @property
    def n_structural(self):
        """Variable count excluding auxiliary epigraph/perspective helpers."""
        return sum(1 for v in self.variables if not v.aux)

    def dump(self):
        """Human-readable one-constraint-per-line text form (for diffing)."""
        def lin(coeffs):
            return " + ".join(f"{c:g}*{self.variables[i].name}"
                              for i, c in sorted(coeffs.items()))
        lines = [f"program {self.name}"]
        for i, v in enumerate(self.variables):
            tags = ("binary" if v.binary else "cont") + (" aux" if v.aux else "")
            lines.append(f"var {i} {v.name} in [{v.lb:g}, {v.ub:g}] {tags}")
        for coeffs, rhs in self.lin_eq:
            lines.append(f"eq: {lin(coeffs)} = {rhs:g}")
        for coeffs, rhs in self.lin_le:
            lines.append(f"le: {lin(coeffs)} <= {rhs:g}")
        for lc in self.log_cons:
            lines.append(f"log: {self.variables[lc.v].name} <= "
                         f"ln({lc.const:g} + {lin(lc.affine)})")
        for pc in self.persp_cons:
            lines.append(f"persp: {self.variables[pc.t].name} >= "
                         f"-{self.variables[pc.y].name}*"
                         f"ln({self.variables[pc.x].name}/"
                         f"{self.variables[pc.y].name})")
        for pw in self.pwl_cons:
            lines.append(f"pwl: {self.variables[pw.u].name} <= "
                         f"pwl({self.variables[pw.z].name}; "
                         f"{len(pw.slopes)} segments)")
        lines.append("min: " + lin(self.objective)
                     + (f" + {self.obj_const:g}" if self.obj_const else ""))
        return "\n".join(lines)


@dataclass
class SolveResult:
    status: str
    objective: float | None
    x: np.ndarray | None
    attained_tol: float

    @property
    def ok(self):
        return self.status == STATUS_OPTIMAL


@dataclass
class BnBConfig:
    rel_gap: float = 1e-6
    node_limit: int = 10 ** 6
    int_tol: float = 1e-6
    feas_tol: float = 1e-8
    branching: str = "most_fractional"
    node_selection: str = "best_bound"


@dataclass
class BnBResult:
    status: str
    x: np.ndarray | None
    objective: float | None
    bound: float
    rel_gap: float
    node_count: int
    wall_time: float


class _Compiled:
    """CVXPY compilation of a program with parameterized binary bounds."""

    def __init__(self, program):
        self.program = program
        n = program.n_variables
        self.bin_idx = np.array(program.binary_indices, dtype=int)
        xv = cp.Variable(n)
        self.xv = xv
        cons = []

        lbs = np.array([v.lb for v in program.variables])
        ubs = np.array([v.ub for v in program.variables])
        is_bin = np.zeros(n, dtype=bool)
        is_bin[self.bin_idx] = True
        lo_fin = np.where(~is_bin & np.isfinite(lbs))[0]
        hi_fin = np.where(~is_bin & np.isfinite(ubs))[0]
        if len(lo_fin):
            cons.append(xv[lo_fin] >= lbs[lo_fin])
        if len(hi_fin):
            cons.append(xv[hi_fin] <= ubs[hi_fin])
        if len(self.bin_idx):
            self.lo_param = cp.Parameter(len(self.bin_idx))
            self.hi_param = cp.Parameter(len(self.bin_idx))
            cons.append(xv[self.bin_idx] >= self.lo_param)
            cons.append(xv[self.bin_idx] <= self.hi_param)
        else:
            self.lo_param = self.hi_param = None

        def expr(coeffs, const=0.0):
            e = const
            for i, c in coeffs.items():
                e = e + c * xv[i]
            return e

        a_eq, b_eq, a_le, b_le = [], [], [], []
        for coeffs, rhs in program.lin_eq:
            row = np.zeros(n)
            for i, c in coeffs.items():
                row[i] += c
            a_eq.append(row)
            b_eq.append(rhs)
        for coeffs, rhs in program.lin_le:
            row = np.zeros(n)
            for i, c in coeffs.items():
                row[i] += c
            a_le.append(row)
            b_le.append(rhs)
        if a_eq:
            cons.append(np.array(a_eq) @ xv == np.array(b_eq))
        if a_le:
            cons.append(np.array(a_le) @ xv <= np.array(b_le))

        for lc in program.log_cons:
            cons.append(xv[lc.v] <= cp.log(expr(lc.affine, lc.const)))
        for pc in program.persp_cons:
            cons.append(xv[pc.t] >= cp.rel_entr(xv[pc.y], xv[pc.x]))
        for pw in program.pwl_cons:
            cons.append(xv[pw.u] <= pw.slopes * xv[pw.z] + pw.intercepts)

        obj = expr(program.objective, program.obj_const)
        self.problem = cp.Problem(cp.Minimize(obj), cons)

    def solve(self, lo=None, hi=None):
        if self.lo_param is not None:
            self.lo_param.value = np.asarray(lo, dtype=float)
            self.hi_param.value = np.asarray(hi, dtype=float)
        status, tol = run_conic_solve(self.problem)
        if status == STATUS_OPTIMAL:
            return SolveResult(status, float(self.problem.value),
                               np.array(self.xv.value, dtype=float), tol)
        return SolveResult(status, None, None, math.inf)


def solve_relaxation(program, tol=1e-8):
    """Solve the continuous relaxation (binary flags treated as [0,1])."""
    compiled = _Compiled(program)
    lo = [program.variables[i].lb for i in compiled.bin_idx]
    hi = [program.variables[i].ub for i in compiled.bin_idx]
    result = compiled.solve(lo, hi)
    if result.ok:
        viol = verify_solution(program, result.x, binaries_integral=False)
        result.attained_tol = max(viol, result.attained_tol)
    return result


def verify_solution(program, x, binaries_integral=True, int_tol=1e-6):
    """Independent feasibility check: max constraint violation at x.

    Re-evaluates every constraint family with plain numpy, unrelated to the
    conic solver's own residuals.
    """
    x = np.asarray(x, dtype=float)
    viol = 0.0
    for i, v in enumerate(program.variables):
        viol = max(viol, v.lb - x[i], x[i] - v.ub)
        if binaries_integral and v.binary:
            viol = max(viol, abs(x[i] - round(x[i])) - int_tol)
    for coeffs, rhs in program.lin_eq:
        viol = max(viol, abs(sum(c * x[i] for i, c in coeffs.items()) - rhs))
    for coeffs, rhs in program.lin_le:
        viol = max(viol, sum(c * x[i] for i, c in coeffs.items()) - rhs)
    for lc in program.log_cons:
        arg = lc.const + sum(c * x[i] for i, c in lc.affine.items())
        if arg <= 0.0:
            viol = max(viol, x[lc.v] + 700.0)  # ln(0+) barrier violated
        else:
            viol = max(viol, x[lc.v] - math.log(arg))
    for pc in program.persp_cons:
        yy, xx = x[pc.y], x[pc.x]
        if yy <= 1e-12:
            r = 0.0
        elif xx <= 0.0:
            r = math.inf
        else:
            r = yy * math.log(yy / xx)
        viol = max(viol, r - x[pc.t])
    for pw in program.pwl_cons:
        cap = float(np.min(pw.slopes * x[pw.z] + pw.intercepts))
        viol = max(viol, x[pw.u] - cap)
    return viol


def _most_fractional(xbin, int_tol):
    """Index (into the binary list) of the most fractional entry, or None."""
    frac = np.minimum(np.abs(xbin), np.abs(1.0 - xbin))
    best, best_f = None, int_tol
    for i, f in enumerate(frac):
        if f > best_f + 1e-15:
            best, best_f = i, f
    return best


def branch_and_bound(program, config=None, incumbent_hint=None):
    """Best-bound binary branch-and-bound over the compiled program.

    Branching picks the most fractional binary (ties: lowest variable id);
    nodes are explored best-bound-first (ties: creation order).  Whenever a
    node comes back integral, the binaries are pinned to their rounded
    values and re-solved once, which cleans the incumbent to full solver
    accuracy.  Deterministic given the inputs and config.

    incumbent_hint is an optional primal point (full variable vector) used
    to seed the incumbent; it is verified independently and ignored if
    infeasible.  Correctness never depends on it, pruning speed does.
    """
    config = config or BnBConfig()
    t_start = time.perf_counter()
    compiled = _Compiled(program)
    nb = len(compiled.bin_idx)
    lb0 = np.array([program.variables[i].lb for i in compiled.bin_idx])
    ub0 = np.array([program.variables[i].ub for i in compiled.bin_idx])

    root = compiled.solve(lb0, ub0)
    if root.status == STATUS_INFEASIBLE:
        return BnBResult(STATUS_INFEASIBLE, None, None, math.inf, math.inf,
                         1, time.perf_counter() - t_start)
    if not root.ok:
        raise SolveError(f"root relaxation failed: {root.status}")

    inc_x, inc_obj = None, math.inf
    if incumbent_hint is not None:
        hint = np.asarray(incumbent_hint, dtype=float)
        if verify_solution(program, hint, int_tol=config.int_tol) <= 1e-7:
            inc_x = hint
            inc_obj = float(sum(c * hint[i]
                                for i, c in program.objective.items())
                            + program.obj_const)
    node_count = 1
    seq = 0
    heap = [(root.objective, seq, lb0, ub0, root.x)]
    best_bound = root.objective
    last_popped = -math.inf
    exhausted = False

    def rel_gap(inc, bound):
        if inc is None or not math.isfinite(inc):
            return math.inf
        return (inc - bound) / max(1.0, abs(inc))

    while heap:
        bound, _, lo, hi, xrel = heapq.heappop(heap)
        # Best-bound pops are monotone non-decreasing for minimization.
        assert bound >= last_popped - 1e-9
        last_popped = bound
        best_bound = bound
        if rel_gap(inc_obj, bound) <= config.rel_gap:
            break
        xbin = xrel[compiled.bin_idx] if nb else np.empty(0)
        branch = _most_fractional(xbin, config.int_tol) if nb else None
        if branch is None:
            # Integral node: pin and re-solve for a clean incumbent.
            pinned = np.round(np.clip(xbin, lo, hi)) if nb else xbin
            refined = compiled.solve(pinned, pinned) if nb else \
                SolveResult(STATUS_OPTIMAL, bound, xrel, 0.0)
            if refined.ok and refined.objective < inc_obj - 1e-12:
                viol = verify_solution(program, refined.x,
                                       int_tol=config.int_tol)
                if viol > 1e-7:
                    raise SolveError(
                        f"incumbent failed feasibility re-check ({viol:.2e})")
                inc_x, inc_obj = refined.x, refined.objective
            continue
        if node_count + 2 > config.node_limit:
            return BnBResult("node_limit", inc_x,
                             None if inc_x is None else inc_obj,
                             best_bound, rel_gap(inc_obj, best_bound),
                             node_count, time.perf_counter() - t_start)
        for val in (0.0, 1.0):
            lo_c, hi_c = lo.copy(), hi.copy()
            lo_c[branch] = hi_c[branch] = val
            child = compiled.solve(lo_c, hi_c)
            node_count += 1
            if child.status == STATUS_INFEASIBLE:
                continue
            if not child.ok:
                raise SolveError(f"node solve failed: {child.status}")
            if child.objective < inc_obj - 1e-12:
                seq += 1
                heapq.heappush(heap, (max(child.objective, bound), seq,
                                      lo_c, hi_c, child.x))
    else:
        exhausted = True

    if exhausted:
        # Every node processed: the incumbent is provably optimal.
        best_bound = inc_obj if inc_x is not None else math.inf
    if inc_x is None:
        return BnBResult(STATUS_INFEASIBLE, None, None, best_bound, math.inf,
                         node_count, time.perf_counter() - t_start)
    return BnBResult(STATUS_OPTIMAL, inc_x, inc_obj, best_bound,
                     max(0.0, rel_gap(inc_obj, best_bound)),
                     node_count, time.perf_counter() - t_start)
