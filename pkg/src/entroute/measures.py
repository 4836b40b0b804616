"""Entanglement measures on Werner parameters and their log-domain machinery.

Three measures are supported: secret key fraction (SKF), a lower bound to
distillable entanglement (DE_LB), and negativity.  Each measure f maps the
end-to-end Werner parameter w in [0,1] to [0,1].  Solvers work with the
log-domain transform F(z) = ln f(e^z), which is concave for negativity but
not for the other two; those get a concave envelope (curve up to a tangency
point, then the tangent line through the origin) and a concave
underestimator (curve up to the inflection point, then the tangent there).
Piecewise-linear tables of these functions are what the convex solvers
actually consume.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

LN2 = math.log(2.0)


class MeasureError(ValueError):
    """Raised when envelope construction or PWL building cannot proceed."""


class MeasureKind(enum.Enum):
    SKF = "skf"
    DE_LB = "de"
    NEGATIVITY = "neg"


class _InfeasibleF:
    """Sentinel for F(z) at/below the separability threshold (f = 0).

    Deliberately not a float: the log-utility is undefined there and
    downstream code must treat it as a domain violation, not arithmetic.
    """

    __slots__ = ()

    def __repr__(self):
        return "INFEASIBLE_F"


INFEASIBLE_F = _InfeasibleF()


# ---------------------------------------------------------------------------
# Measures f(w) and derivatives (analytic; w is the Werner parameter)
# ---------------------------------------------------------------------------

def _xlog2(t, denom):
    """t * log2(t/denom) elementwise with the 0*log(0) = 0 convention."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0.0
    out[pos] = t[pos] * np.log2(t[pos] / denom)
    return out


def _raw_measure(kind, w):
    """Measure value before clipping at zero (can be negative)."""
    w = np.asarray(w, dtype=float)
    if kind is MeasureKind.SKF:
        return 1.0 + _xlog2(1.0 + w, 2.0) + _xlog2(1.0 - w, 2.0)
    if kind is MeasureKind.DE_LB:
        # Coefficient of the second log is 3(1-w)/4 while its argument is
        # (1-w)/4; both vanish together at w = 1.
        a = (1.0 + 3.0 * w) / 4.0
        t2 = np.zeros_like(w)
        pos = w < 1.0
        t2[pos] = (3.0 * (1.0 - w[pos]) / 4.0) * np.log2((1.0 - w[pos]) / 4.0)
        return 1.0 + a * np.log2(a) + t2
    if kind is MeasureKind.NEGATIVITY:
        return (3.0 * w - 1.0) / 4.0
    raise TypeError(f"unknown measure kind: {kind!r}")


def eval_measure(kind, w):
    """Evaluate the measure f(w) for w in [0,1] (scalar or array)."""
    arr = np.atleast_1d(np.asarray(w, dtype=float))
    if np.any(arr < -1e-12) or np.any(arr > 1.0 + 1e-12):
        raise ValueError("Werner parameter must lie in [0, 1]")
    arr = np.clip(arr, 0.0, 1.0)
    val = np.maximum(0.0, _raw_measure(kind, arr))
    return float(val[0]) if np.isscalar(w) or np.ndim(w) == 0 else val


def _df(kind, w):
    """df/dw; valid where the raw measure is positive."""
    w = np.asarray(w, dtype=float)
    if kind is MeasureKind.SKF:
        return np.log2((1.0 + w) / (1.0 - w))
    if kind is MeasureKind.DE_LB:
        return 0.75 * np.log2((1.0 + 3.0 * w) / (1.0 - w))
    return np.full_like(w, 0.75)


def _d2f(kind, w):
    w = np.asarray(w, dtype=float)
    if kind is MeasureKind.SKF:
        return (2.0 / LN2) / (1.0 - w * w)
    if kind is MeasureKind.DE_LB:
        return (0.75 / LN2) * (3.0 / (1.0 + 3.0 * w) + 1.0 / (1.0 - w))
    return np.zeros_like(w)


@lru_cache(maxsize=None)
def z_min(kind):
    """Left end of F's domain: ln of the w where the measure hits zero."""
    if kind is MeasureKind.NEGATIVITY:
        return math.log(1.0 / 3.0)
    w0 = brentq(lambda w: float(_raw_measure(kind, w)), 0.5, 0.999999,
                xtol=1e-15, rtol=8.9e-16)
    return math.log(w0)


# ---------------------------------------------------------------------------
# Log-domain transform F(z) = ln f(e^z) and derivatives
# ---------------------------------------------------------------------------

def _F_array(kind, z):
    """F on arrays; -inf at/below z_min (internal use only)."""
    z = np.asarray(z, dtype=float)
    f = np.maximum(0.0, _raw_measure(kind, np.exp(z)))
    with np.errstate(divide="ignore"):
        return np.log(f)


def _F1_array(kind, z):
    """dF/dz = e^z f'(e^z) / f(e^z)."""
    z = np.asarray(z, dtype=float)
    u = np.exp(z)
    return u * _df(kind, u) / _raw_measure(kind, u)


def _F2_array(kind, z):
    """d2F/dz2 in terms of f, f', f''."""
    z = np.asarray(z, dtype=float)
    u = np.exp(z)
    f = _raw_measure(kind, u)
    g = u * _df(kind, u) / f
    return g + u * u * _d2f(kind, u) / f - g * g


def eval_F(kind, z):
    """F(z) = ln f(e^z) for z <= 0; INFEASIBLE_F sentinel where f vanishes."""
    if z > 0.0:
        raise ValueError("F is defined for z <= 0")
    if z <= z_min(kind):
        return INFEASIBLE_F
    if z == 0.0:
        # f(1) is exact for all three measures: 1, 1, and 1/2.
        if kind is MeasureKind.NEGATIVITY:
            return math.log(0.5)
        return 0.0
    return float(_F_array(kind, z))


# ---------------------------------------------------------------------------
# Concave envelope and underestimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvelopeModel:
    """Envelope/underestimator data for one measure.

    For negativity F is already concave: the knots and line coefficients are
    None and envelope == underestimator == F.  Otherwise the envelope equals
    F up to the tangency point z_hat and the tangent-through-origin line
    after it; the underestimator equals F up to the inflection point z_breve
    and the tangent there after it.  Geometry puts z_hat <= z_breve: the
    origin tangency lands inside the concave stretch, the inflection marks
    where concavity ends.
    """

    kind: MeasureKind
    z_min: float
    z_hat: float | None
    slope: float | None
    intercept: float | None
    z_breve: float | None
    under_slope: float | None
    under_intercept: float | None

    @property
    def trivial(self):
        return self.z_hat is None


def _newton_tangency(kind, z0, tol, max_iter):
    """Newton on g(z) = F'(z) - F(z)/z; returns z or None on failure."""
    zmin = z_min(kind)
    z = z0
    for _ in range(max_iter):
        g = float(_F1_array(kind, z) - _F_array(kind, z) / z)
        gp = float(_F2_array(kind, z)
                   - (_F1_array(kind, z) * z - _F_array(kind, z)) / (z * z))
        if gp == 0.0:
            return None
        step = g / gp
        z_new = z - step
        if not (zmin < z_new < 0.0):
            return None
        if abs(z_new - z) < 1e-16 or abs(g) < tol:
            return z_new
        z = z_new
    return None


def _bracket_root(fun, lo, hi, n=4096):
    """First sign change of fun on a geometric-ish grid of [lo, hi]."""
    zs = np.linspace(lo, hi, n)
    vals = np.array([fun(z) for z in zs])
    sign = np.sign(vals)
    idx = np.where(np.diff(sign) != 0)[0]
    if len(idx) == 0:
        return None, 0
    return (zs[idx[0]], zs[idx[0] + 1]), len(idx)


def build_envelope(kind, newton_tol=1e-12, max_iter=60):
    """Construct the EnvelopeModel for a measure kind.

    The tangency point solves F'(z) = F(z)/z (minimal root, Newton with
    bisection fallback); the inflection point solves F''(z) = 0 and is
    verified to be unique on the domain before use.
    """
    zmin = z_min(kind)
    if kind is MeasureKind.NEGATIVITY:
        return EnvelopeModel(kind, zmin, None, None, None, None, None, None)

    # Inflection point: require exactly one sign change of F'' in-domain.
    f2 = lambda z: float(_F2_array(kind, z))
    bracket, n_changes = _bracket_root(f2, zmin + 1e-7, -1e-10)
    if n_changes != 1:
        raise MeasureError(
            f"{kind}: expected a unique inflection point, found {n_changes} "
            "sign changes of F''")
    z_breve = brentq(f2, bracket[0], bracket[1], xtol=1e-15)

    g = lambda z: float(_F1_array(kind, z) - _F_array(kind, z) / z)
    z_hat = _newton_tangency(kind, zmin + 1e-3, newton_tol, max_iter)
    gb, _ = _bracket_root(g, zmin + 1e-6, -1e-9)
    if gb is None:
        if z_hat is None:
            raise MeasureError(
                f"{kind}: Newton diverged and no bisection bracket for the "
                "tangency point")
    else:
        z_bis = brentq(g, gb[0], gb[1], xtol=1e-15)
        # Prefer the bisection root if Newton failed or found a later root.
        if z_hat is None or z_hat > z_bis + 1e-9:
            z_hat = z_bis
    if abs(g(z_hat)) > max(newton_tol, 1e-9):
        raise MeasureError(
            f"{kind}: tangency residual {g(z_hat):.3e} above tolerance, "
            f"last iterate z={z_hat!r}")

    slope = float(_F1_array(kind, z_hat))
    intercept = float(_F_array(kind, z_hat)) - slope * z_hat
    u_slope = float(_F1_array(kind, z_breve))
    u_intercept = float(_F_array(kind, z_breve)) - u_slope * z_breve
    if not (zmin < z_hat <= z_breve < 0.0):
        raise MeasureError(
            f"{kind}: knot ordering violated (z_hat={z_hat}, z_breve={z_breve})")
    return EnvelopeModel(kind, zmin, z_hat, slope, intercept,
                         z_breve, u_slope, u_intercept)


@lru_cache(maxsize=None)
def envelope(kind):
    """Cached default EnvelopeModel for a kind."""
    return build_envelope(kind)


def _check_domain(model, z):
    z = np.asarray(z, dtype=float)
    if np.any(z <= model.z_min) or np.any(z > 0.0):
        raise ValueError(f"z outside envelope domain ({model.z_min}, 0]")
    return z


def eval_envelope(model, z):
    """Concave envelope: F below the tangency point, the line above it."""
    zz = _check_domain(model, z)
    if model.trivial:
        out = _F_array(model.kind, zz)
    else:
        out = np.where(zz <= model.z_hat, _F_array(model.kind, zz),
                       model.slope * zz + model.intercept)
    return float(out) if np.ndim(z) == 0 else out


def eval_under(model, z):
    """Concave underestimator: F below the inflection, its tangent above."""
    zz = _check_domain(model, z)
    if model.trivial:
        out = _F_array(model.kind, zz)
    else:
        out = np.where(zz <= model.z_breve, _F_array(model.kind, zz),
                       model.under_slope * zz + model.under_intercept)
    return float(out) if np.ndim(z) == 0 else out


# ---------------------------------------------------------------------------
# Piecewise-linear tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PwlApprox:
    """Concave piecewise-linear hypograph table on [z[0], 0].

    evaluate() takes the min over segment lines, which coincides with linear
    interpolation inside the breakpoint range and extends the outer segments
    beyond it (the steep first segment acts as a barrier below z[0]).
    """

    kind: MeasureKind
    which: str
    z: np.ndarray
    values: np.ndarray
    max_gap: float

    @property
    def n_segments(self):
        return len(self.z) - 1

    @property
    def slopes(self):
        return np.diff(self.values) / np.diff(self.z)

    @property
    def intercepts(self):
        return self.values[:-1] - self.slopes * self.z[:-1]

    def evaluate(self, z):
        lines = np.multiply.outer(np.asarray(z, dtype=float), self.slopes) \
            + self.intercepts
        out = lines.min(axis=-1)
        return float(out) if np.ndim(z) == 0 else out


def _target_function(model, which):
    if which == "envelope":
        return lambda z: eval_envelope(model, z), model.z_hat
    if which == "under":
        return lambda z: eval_under(model, z), model.z_breve
    if which == "exact":
        return lambda z: _F_array(model.kind, z), None
    raise ValueError(f"which must be envelope/under/exact, got {which!r}")


def _adaptive_breakpoints(kind, z_lo, z_hi, n):
    """n breakpoints on [z_lo, z_hi] equidistributing curvature mass.

    Spacing follows sqrt(|F''|), with the reference grid log-spaced in the
    distance from z_min so the near-singular region is resolved.  Chord
    error of the result is roughly uniform across segments.
    """
    if n <= 2 or z_hi - z_lo < 1e-12:
        return np.linspace(z_lo, z_hi, max(n, 2))
    zmin = z_min(kind)
    offs = np.geomspace(z_lo - zmin, z_hi - zmin, 20001)
    ref = zmin + offs
    ref[0], ref[-1] = z_lo, z_hi
    w = np.sqrt(np.abs(_F2_array(kind, ref)))
    mass = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(ref))])
    if mass[-1] <= 0.0:
        return np.linspace(z_lo, z_hi, n)
    pts = np.interp(np.linspace(0.0, mass[-1], n), mass, ref)
    pts[0], pts[-1] = z_lo, z_hi
    return np.unique(pts)


def build_pwl(model, which, z_lo, n_points):
    """Build a concave PWL table of the envelope, underestimator, or F.

    Breakpoints are curvature-adaptive on the curved part; the knot (if any)
    is an exact breakpoint so the linear tail is represented by one exact
    segment.  For `exact` on a non-concave F the chords would break
    concavity and the request is rejected.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    if not (model.z_min < z_lo < 0.0):
        raise ValueError("z_lo must lie in (z_min, 0)")
    fun, knot = _target_function(model, which)
    if which == "exact" and not model.trivial:
        raise MeasureError(
            f"{model.kind}: exact F is not concave on (z_min, 0]; only "
            "envelope/under admit a globally concave PWL")

    if knot is None or z_lo >= knot:
        # Entire range is either the bare concave curve or the linear tail.
        z = _adaptive_breakpoints(model.kind, z_lo, 0.0, n_points)
    else:
        curve = _adaptive_breakpoints(model.kind, z_lo, knot, n_points - 1)
        z = np.unique(np.concatenate([curve, [0.0]]))
    vals = fun(z.copy())

    slopes = np.diff(vals) / np.diff(z)
    dif = np.diff(slopes)
    tol = 1e-9 * np.maximum(1.0, np.abs(slopes[:-1]))
    if np.any(dif > tol):
        raise MeasureError(f"{model.kind}/{which}: PWL chords not concave")

    max_gap = _measure_gap(fun, z)
    return PwlApprox(model.kind, which, z, vals, max_gap)


def _measure_gap(fun, z):
    """Dense-grid estimate of sup (fun - chord interpolation)."""
    gap = 0.0
    for a, b, fa, fb in zip(z[:-1], z[1:], fun(z[:-1]), fun(z[1:])):
        if b - a < 1e-13:
            continue
        grid = np.linspace(a, b, 257)
        chord = fa + (fb - fa) * (grid - a) / (b - a)
        gap = max(gap, float(np.max(fun(grid) - chord)))
    return gap


# Offset from z_min where the solver tables switch from a single long
# barrier chord to curvature-adaptive accuracy segments.  One long chord
# keeps segment slopes around 1e3-1e4 instead of 1e6, which the interior
# point solver needs for clean convergence; being a true chord it still
# under-estimates the target everywhere.
_BARRIER_EDGE = 2e-3


@lru_cache(maxsize=None)
def _solver_grid(kind, n_points, z_margin):
    """Shared breakpoint grid for a kind's solver tables.

    Both the envelope and underestimator tables of one kind use this grid,
    so their PWL realizations keep the hat >= breve ordering pointwise.
    """
    model = envelope(kind)
    z_lo = model.z_min + z_margin
    z_edge = model.z_min + max(_BARRIER_EDGE, z_margin * 2.0)
    knot = 0.0 if model.trivial else model.z_breve
    curve = _adaptive_breakpoints(kind, z_edge, knot, n_points - 2)
    extras = [z_lo, 0.0] if model.trivial \
        else [z_lo, model.z_hat, model.z_breve, 0.0]
    return np.unique(np.concatenate([curve, extras]))


@lru_cache(maxsize=None)
def solver_table(kind, variant, n_points=512, z_margin=1e-6):
    """Default PWL table consumed by every solver (variant: 'hat'/'breve').

    Tables for the two variants of one kind share breakpoints; together with
    chords of each target this preserves hat >= breve pointwise.  max_gap is
    measured over the accuracy region (right of the barrier chord); the
    barrier chord itself is intentionally loose.
    """
    if variant not in ("hat", "breve"):
        raise ValueError("variant must be 'hat' or 'breve'")
    model = envelope(kind)
    z = _solver_grid(kind, n_points, z_margin)
    fun = (lambda zz: eval_envelope(model, zz)) if variant == "hat" \
        else (lambda zz: eval_under(model, zz))
    vals = fun(z.copy())
    gap = _measure_gap(fun, z[1:]) if len(z) > 2 else _measure_gap(fun, z)
    return PwlApprox(kind, "envelope" if variant == "hat" else "under",
                     z, vals, gap)
