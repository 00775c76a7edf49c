"""Continuous, strictly increasing piecewise-linear functions on [0, inf).

A :class:`PwlFunction` stores one ``(x_start, slope, intercept)`` triple per
segment.  The last segment extends to +inf.  :func:`approximate_bpr` builds
such a function from a BPR curve ``c * x**a + b`` with the tangent-band
construction: each segment is the midline of two parallel lines ``2*eps``
apart, the lower one tangent to the curve.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CONTINUITY_RTOL = 1e-12
MERGE_RTOL = 1e-12
TANGENCY_TOL = 1e-10


class PwlError(ValueError):
    pass


@dataclass(frozen=True)
class BprFunction:
    c: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.c > 0 and math.isfinite(self.c)):
            raise PwlError(f"BPR coefficient c must be positive, got {self.c}")
        if not (self.a >= 1 and math.isfinite(self.a)):
            raise PwlError(f"BPR exponent a must be >= 1, got {self.a}")
        if not (self.b >= 0 and math.isfinite(self.b)):
            raise PwlError(f"BPR free-flow time b must be >= 0, got {self.b}")

    def __call__(self, x):
        return self.c * np.power(x, self.a) + self.b

    def deriv(self, x):
        return self.c * self.a * np.power(x, self.a - 1.0)

    def deriv2(self, x):
        if self.a == 1:
            return 0.0 * x
        return self.c * self.a * (self.a - 1.0) * np.power(x, self.a - 2.0)


@dataclass(frozen=True)
class ApproxConfig:
    epsilon: float = 1.0
    eta: int = 4

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise PwlError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.eta) != self.eta or self.eta < 1:
            raise PwlError(f"eta must be a positive integer, got {self.eta}")


class PwlFunction:
    """Continuous strictly increasing piecewise-linear function on [0, inf).

    Parameters
    ----------
    segments : iterable of (x_start, slope, intercept)
        ``x_start`` of the first segment must be 0 and the starts must be
        strictly increasing.  Slopes must be positive and consecutive
        segments must meet at their shared breakpoint.
    """

    __slots__ = ("_x", "_slope", "_icpt")

    def __init__(self, segments: Iterable[Sequence[float]]):
        segs = [tuple(float(v) for v in s) for s in segments]
        if not segs:
            raise PwlError("a PwlFunction needs at least one segment")
        x = [s[0] for s in segs]
        slope = [s[1] for s in segs]
        icpt = [s[2] for s in segs]
        if not all(math.isfinite(v) for s in segs for v in s):
            raise PwlError("segment values must be finite")
        if x[0] != 0.0:
            raise PwlError(f"first segment must start at 0, got {x[0]}")
        for k in range(1, len(x)):
            if not x[k] > x[k - 1]:
                raise PwlError(f"segment starts not strictly increasing at index {k}")
        for k, s in enumerate(slope):
            if not s > 0:
                raise PwlError(f"segment {k} has non-positive slope {s}")
        for k in range(1, len(x)):
            left = slope[k - 1] * x[k] + icpt[k - 1]
            right = slope[k] * x[k] + icpt[k]
            if abs(left - right) > CONTINUITY_RTOL * max(1.0, abs(left), abs(right)):
                raise PwlError(
                    f"discontinuity at x={x[k]}: {left} from the left, {right} from the right"
                )
        self._x = tuple(x)
        self._slope = tuple(slope)
        self._icpt = tuple(icpt)

    @classmethod
    def line(cls, slope: float, intercept: float) -> "PwlFunction":
        return cls([(0.0, slope, intercept)])

    @classmethod
    def from_points(cls, xs: Sequence[float], ys: Sequence[float], last_slope: float):
        """Build from breakpoint values; the final ray has slope ``last_slope``."""
        segs = []
        for k in range(len(xs) - 1):
            s = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
            segs.append((xs[k], s, ys[k] - s * xs[k]))
        segs.append((xs[-1], last_slope, ys[-1] - last_slope * xs[-1]))
        return cls(segs)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self._x

    @property
    def slopes(self) -> tuple[float, ...]:
        return self._slope

    @property
    def intercepts(self) -> tuple[float, ...]:
        return self._icpt

    @property
    def segments(self) -> list[tuple[float, float, float]]:
        return list(zip(self._x, self._slope, self._icpt))

    @property
    def last_breakpoint(self) -> float:
        return self._x[-1]

    def __len__(self):
        return len(self._x)

    def __eq__(self, other):
        if not isinstance(other, PwlFunction):
            return NotImplemented
        return self.segments == other.segments

    def __hash__(self):
        return hash((self._x, self._slope, self._icpt))

    def __repr__(self):
        return f"PwlFunction({self.segments!r})"

    def segment_index(self, x: float) -> int:
        return bisect.bisect_right(self._x, x) - 1

    def __call__(self, x):
        return eval_pwl(self, x)

    def value_at_breakpoints(self) -> list[float]:
        return [s * x + c for x, s, c in zip(self._x, self._slope, self._icpt)]

    def scale(self, factor: float) -> "PwlFunction":
        if not factor > 0:
            raise PwlError(f"scale factor must be positive, got {factor}")
        return PwlFunction((x, factor * s, factor * c) for x, s, c in self.segments)

    def shift(self, offset: float) -> "PwlFunction":
        return PwlFunction((x, s, c + offset) for x, s, c in self.segments)

    def to_csv(self) -> str:
        rows = ["x_start,slope,intercept"]
        rows += [f"{x!r},{s!r},{c!r}" for x, s, c in self.segments]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PwlFunction":
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if lines and lines[0].replace(" ", "") == "x_start,slope,intercept":
            lines = lines[1:]
        return cls(tuple(float(v) for v in ln.split(",")) for ln in lines)


def eval_pwl(f: PwlFunction, x):
    """Evaluate ``f`` at a flow ``x >= 0`` (scalar or array)."""
    xa = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xa)):
        raise PwlError("flow must be finite")
    if np.any(xa < 0):
        raise PwlError("flow must be non-negative")
    if xa.ndim == 0:
        k = f.segment_index(float(xa))
        return f._slope[k] * float(xa) + f._icpt[k]
    idx = np.searchsorted(np.asarray(f._x), xa, side="right") - 1
    return np.asarray(f._slope)[idx] * xa + np.asarray(f._icpt)[idx]


def invert_monotone(f: PwlFunction, y: float) -> float:
    """Return the flow ``x`` with ``f(x) == y``; values below ``f(0)`` map to 0."""
    y = float(y)
    if not math.isfinite(y):
        raise PwlError("value must be finite")
    vals = f.value_at_breakpoints()
    if y <= vals[0]:
        return 0.0
    k = bisect.bisect_right(vals, y) - 1
    x = (y - f._icpt[k]) / f._slope[k]
    # guard against rounding pushing x outside its segment
    lo = f._x[k]
    hi = f._x[k + 1] if k + 1 < len(f._x) else math.inf
    return min(max(x, lo), hi)


def _merge_points(points: Iterable[float]) -> list[float]:
    merged: list[float] = []
    for p in sorted(points):
        if merged and abs(p - merged[-1]) <= MERGE_RTOL * max(1.0, abs(p)):
            continue
        merged.append(p)
    return merged


def add(f: PwlFunction, g: PwlFunction) -> PwlFunction:
    """Pointwise sum; breakpoints are the merged breakpoints of both inputs."""
    xs = _merge_points(f.breakpoints + g.breakpoints)
    segs = []
    for x in xs:
        i, j = f.segment_index(x), g.segment_index(x)
        segs.append((x, f._slope[i] + g._slope[j], f._icpt[i] + g._icpt[j]))
    return PwlFunction(segs)


def sum_pwl(fs: Sequence[PwlFunction]) -> PwlFunction:
    out = fs[0]
    for f in fs[1:]:
        out = add(out, f)
    return out


def _solve_increasing(fun, lo: float, hi: float, dfun=None, tol: float = 1e-15,
                      max_iter: int = 200) -> float:
    """Root of an increasing function bracketed by ``fun(lo) < 0 < fun(hi)``.

    Newton steps when ``dfun`` is given, bisection whenever a step leaves the
    bracket.
    """
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = fun(x)
        if fx == 0:
            return x
        if fx < 0:
            lo = x
        else:
            hi = x
        step_ok = False
        if dfun is not None:
            d = dfun(x)
            if d > 0:
                xn = x - fx / d
                if lo < xn < hi:
                    step_ok = True
        if not step_ok:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= tol * max(1.0, abs(x)):
            return xn
        x = xn
    return x


def _tangent_from(bpr: BprFunction, x_j: float, y_anchor: float, limit: float):
    """Tangency point of the line through ``(x_j, y_anchor)`` touching ``bpr``.

    ``y_anchor`` lies below the curve, so the residual
    ``bpr'(t)*(t - x_j) - bpr(t) + y_anchor`` increases from a negative value
    at ``t = x_j`` and has exactly one root to the right.
    """
    def resid(t):
        return bpr.deriv(t) * (t - x_j) - bpr(t) + y_anchor

    def dresid(t):
        return bpr.deriv2(t) * (t - x_j)

    hi = max(x_j + 1.0, 2.0 * x_j)
    while resid(hi) < 0:
        hi = x_j + 2.0 * (hi - x_j)
        if hi > limit:
            raise PwlError(f"tangency search exceeded the search limit {limit}")
    t = _solve_increasing(resid, x_j, hi, dresid)
    r = resid(t)
    if abs(r) > TANGENCY_TOL * max(1.0, abs(bpr(t))):
        raise PwlError(f"tangency search did not converge (residual {r:.3e})")
    return t, float(bpr.deriv(t))


def _upper_crossing(bpr: BprFunction, x_from: float, x_a: float, y_a: float,
                    slope: float, limit: float) -> float:
    """Where the line through ``(x_a, y_a)`` with ``slope`` meets ``bpr`` again.

    The search starts at the tangency abscissa ``x_from``; beyond it the curve
    outgrows the line, so the gap is increasing there.
    """
    def gap(t):
        return bpr(t) - (y_a + slope * (t - x_a))

    def dgap(t):
        return bpr.deriv(t) - slope

    hi = max(x_from + 1.0, 2.0 * x_from)
    while gap(hi) < 0:
        hi = x_from + 2.0 * (hi - x_from)
        if hi > limit:
            raise PwlError(f"band crossing search exceeded the search limit {limit}")
    return _solve_increasing(gap, x_from, hi, dgap)


def approximate_bpr(bpr: BprFunction, cfg: ApproxConfig,
                    search_limit: float = 1e6) -> PwlFunction:
    """Tangent-band piecewise-linear approximation of a BPR curve.

    The first ``eta - 1`` segments stay within ``eps`` of the curve on their
    domain (well inside the ``2*eps`` band).  The last segment is a ray whose
    error grows without bound.
    """
    if bpr.a == 1:
        return PwlFunction.line(bpr.c, bpr.b)  # already linear, no band needed
    eps = cfg.epsilon
    x_j, y_j = 0.0, float(bpr.b)  # d^j, a point of the approximation
    y_top = y_j + eps             # a_1^j
    segs = []
    for _ in range(cfg.eta - 1):
        t, s = _tangent_from(bpr, x_j, y_j - eps, search_limit)
        segs.append((x_j, s, y_j - s * x_j))
        x_next = _upper_crossing(bpr, t, x_j, y_top, s, search_limit)
        if x_next > search_limit:
            raise PwlError(f"breakpoint {x_next:.6g} lies beyond the search limit {search_limit}")
        # a_1^{j+1} sits on the curve; take it from the upper line so the
        # midline stays exactly continuous
        y_top = y_top + s * (x_next - x_j)
        x_j, y_j = x_next, y_top - eps
    _, s = _tangent_from(bpr, x_j, y_j - eps, search_limit)
    segs.append((x_j, s, y_j - s * x_j))
    return PwlFunction(segs)
