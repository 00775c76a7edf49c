"""Wardrop user equilibrium on parallel piecewise-linear routes with tolls.

Routes are single links with a :class:`~tollmdp.pwl.PwlFunction` travel time
and an additive toll.  Because every cost curve is piecewise linear, the
aggregate supply ``S(w) = sum_r max(0, cost_r^{-1}(w - u_r))`` is piecewise
linear in the common travel time ``w`` and the equilibrium is found by
inverting it exactly; there is no iterative tolerance.

The total system travel time sums the travel times of all routes: used
routes contribute ``w``, unused routes their zero-flow cost plus toll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from tollmdp.pwl import PwlFunction, eval_pwl, invert_monotone

EQ_TOL = 1e-9


class EquilibriumError(ValueError):
    pass


@dataclass(frozen=True)
class EquilibriumSolution:
    demand: float
    tolls: tuple[float, ...]
    flows: tuple[float, ...]
    used: tuple[bool, ...]
    w: float
    tstt: float
    segments: tuple[int | None, ...]  # active segment of each used route

    @property
    def unused(self) -> tuple[int, ...]:
        return tuple(r for r, u in enumerate(self.used) if not u)

    @property
    def unused_count(self) -> int:
        return len(self.unused)


def _cost_curves(routes: Sequence[PwlFunction], u: Sequence[float]) -> list[PwlFunction]:
    if len(routes) == 0:
        raise EquilibriumError("at least one route is required")
    if len(u) != len(routes):
        raise EquilibriumError(f"{len(routes)} routes but {len(u)} tolls")
    for t in u:
        if not (math.isfinite(t) and t >= 0):
            raise EquilibriumError(f"tolls must be finite and non-negative, got {t}")
    return [f.shift(float(t)) for f, t in zip(routes, u)]


def _supply_breakpoints(curves: Sequence[PwlFunction]) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints ``w_k`` of the aggregate supply and the flows ``S(w_k)``."""
    ws = sorted({v for f in curves for v in f.value_at_breakpoints()})
    supply = np.array([sum(invert_monotone(f, w) for f in curves) for w in ws])
    return np.asarray(ws), supply


def _equilibrium_time(curves: Sequence[PwlFunction], x: float) -> float:
    ws, supply = _supply_breakpoints(curves)
    if x <= 0:
        return float(ws[0])
    k = int(np.searchsorted(supply, x, side="right")) - 1
    w0 = float(ws[k])
    # dS/dw just above w0: reciprocal slopes of the segments that start there
    rate = sum(1.0 / f.slopes[f.segment_index(invert_monotone(f, w0))]
               for f in curves if f(0.0) <= w0)
    return w0 + (x - float(supply[k])) / rate


def solve_equilibrium(routes: Sequence[PwlFunction], x: float,
                      u: Sequence[float]) -> EquilibriumSolution:
    """Unique Wardrop equilibrium for demand ``x`` and route tolls ``u``."""
    x = float(x)
    if not math.isfinite(x) or x < 0:
        raise EquilibriumError(f"demand must be finite and non-negative, got {x}")
    curves = _cost_curves(routes, u)
    w = _equilibrium_time(curves, x)
    flows = [invert_monotone(f, w) if x > 0 else 0.0 for f in curves]
    used = tuple(fl > 0 for fl in flows)
    segs = tuple(f.segment_index(fl) if ok else None
                 for f, fl, ok in zip(curves, flows, used))
    n_used = sum(used)
    tstt_val = n_used * w + sum(f(0.0) for f, ok in zip(curves, used) if not ok)
    return EquilibriumSolution(
        demand=x, tolls=tuple(float(t) for t in u), flows=tuple(flows),
        used=used, w=w, tstt=float(tstt_val), segments=segs,
    )


def tstt(routes: Sequence[PwlFunction], x: float, u: Sequence[float]) -> float:
    return solve_equilibrium(routes, x, u).tstt


def complementarity_residual(routes: Sequence[PwlFunction], sol: EquilibriumSolution) -> float:
    """Largest violation of the equilibrium conditions (0 for an exact solution)."""
    worst = abs(sum(sol.flows) - sol.demand)
    for f, fl, t in zip(routes, sol.flows, sol.tolls):
        gap = float(eval_pwl(f, fl)) + t - sol.w
        worst = max(worst, abs(fl * gap), max(0.0, -gap))
    return worst


@dataclass(frozen=True)
class TsttPwl:
    """Piecewise-linear function of flow that is linear in the toll vector.

    On piece ``k`` (``x_start[k] <= x < x_start[k+1]``) the value is
    ``k0[k] * x + kr[k] @ tolls + kc[k]``.  Piece locations depend on the
    tolls, so an instance is only valid for the ``tolls`` it was built with.
    ``slots`` names the toll slots the function actually depends on.
    """

    tolls: np.ndarray
    x_start: np.ndarray
    k0: np.ndarray
    kr: np.ndarray
    kc: np.ndarray
    slots: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        n = len(self.x_start)
        if n == 0 or self.x_start[0] != 0:
            raise EquilibriumError("pieces must start at x = 0")
        if np.any(np.diff(self.x_start) <= 0):
            raise EquilibriumError("piece starts must be strictly increasing")
        if self.kr.shape != (n, len(self.tolls)):
            raise EquilibriumError("kr must have one row per piece and one column per slot")
        icpt = self.intercepts
        for k in range(1, n):
            x = self.x_start[k]
            left = self.k0[k - 1] * x + icpt[k - 1]
            right = self.k0[k] * x + icpt[k]
            if abs(left - right) > EQ_TOL * max(1.0, abs(left)):
                raise EquilibriumError(f"TSTT discontinuous at x={x}: {left} vs {right}")

    @classmethod
    def from_link(cls, f: PwlFunction, slot: int | None, tolls: Sequence[float]) -> "TsttPwl":
        tolls = np.asarray(tolls, dtype=float)
        n = len(f)
        kr = np.zeros((n, len(tolls)))
        slots = frozenset()
        if slot is not None:
            kr[:, slot] = 1.0
            slots = frozenset([slot])
        return cls(tolls, np.asarray(f.breakpoints), np.asarray(f.slopes), kr,
                   np.asarray(f.intercepts), slots)

    @property
    def n_pieces(self) -> int:
        return len(self.x_start)

    @property
    def intercepts(self) -> np.ndarray:
        return self.kr @ self.tolls + self.kc

    def piece_index(self, x):
        return np.searchsorted(self.x_start, x, side="right") - 1

    def __call__(self, x):
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0) or not np.all(np.isfinite(xa)):
            raise EquilibriumError("flow must be finite and non-negative")
        k = self.piece_index(xa)
        out = self.k0[k] * xa + self.intercepts[k]
        return float(out) if out.ndim == 0 else out

    def as_pwl(self) -> PwlFunction:
        return PwlFunction(zip(self.x_start, self.k0, self.intercepts))

    def scale(self, factor: float) -> "TsttPwl":
        return TsttPwl(self.tolls, self.x_start, factor * self.k0, factor * self.kr,
                       factor * self.kc, self.slots)

    def stretch(self, frac: float) -> "TsttPwl":
        """The function ``x -> self(frac * x)`` for ``frac >= 0``."""
        if frac < 0:
            raise EquilibriumError("stretch factor must be non-negative")
        if frac == 0:
            v_kr, v_kc = self.kr[0], self.kc[0]
            return TsttPwl(self.tolls, np.zeros(1), np.zeros(1), v_kr[None, :].copy(),
                           np.array([v_kc]), self.slots)
        return TsttPwl(self.tolls, self.x_start / frac, self.k0 * frac, self.kr,
                       self.kc, self.slots)

    def add(self, other: "TsttPwl") -> "TsttPwl":
        """Pointwise sum under a common flow (links in series)."""
        if not np.array_equal(self.tolls, other.tolls):
            raise EquilibriumError("cannot add TSTT functions built for different tolls")
        xs = _merge_starts(np.concatenate([self.x_start, other.x_start]))
        i = self.piece_index(xs)
        j = other.piece_index(xs)
        return TsttPwl(self.tolls, xs, self.k0[i] + other.k0[j], self.kr[i] + other.kr[j],
                       self.kc[i] + other.kc[j], self.slots | other.slots)

    def to_csv(self) -> str:
        head = ["x_start", "k0"] + [f"kr_{s}" for s in range(len(self.tolls))] + ["kc"]
        rows = [",".join(head)]
        for k in range(self.n_pieces):
            vals = [self.x_start[k], self.k0[k], *self.kr[k], self.kc[k]]
            rows.append(",".join(repr(float(v)) for v in vals))
        return "\n".join(rows) + "\n"


def _merge_starts(xs: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    out: list[float] = []
    for x in np.sort(xs):
        if out and abs(x - out[-1]) <= rtol * max(1.0, abs(x)):
            continue
        out.append(float(x))
    return np.asarray(out)


def sum_tstt(parts: Iterable[TsttPwl]) -> TsttPwl:
    parts = list(parts)
    out = parts[0]
    for p in parts[1:]:
        out = out.add(p)
    return out


def parallel_tstt_pwl(branches: Sequence[TsttPwl]) -> TsttPwl:
    """TSTT of parallel branches as a function of the total flow through them.

    Each branch's cost is piecewise linear in its own flow and linear in the
    tolls.  On every interval of total flow the used set and the active
    segments are fixed, and the equilibrium conditions form a linear system
    whose solution gives the coefficients in closed form.
    """
    if not branches:
        raise EquilibriumError("at least one branch is required")
    tolls = branches[0].tolls
    for b in branches:
        if not np.array_equal(b.tolls, tolls):
            raise EquilibriumError("branches built for different toll vectors")
    curves = [b.as_pwl() for b in branches]
    ws, supply = _supply_breakpoints(curves)
    starts: list[float] = []
    probes: list[float] = []
    for k in range(len(ws)):
        if k + 1 < len(ws):
            if supply[k + 1] - supply[k] <= 1e-14 * max(1.0, supply[k + 1]):
                continue
            probe = 0.5 * (ws[k] + ws[k + 1])
        else:
            probe = ws[k] + 1.0
        starts.append(float(supply[k]))
        probes.append(float(probe))
    starts[0] = 0.0

    n_slots = len(tolls)
    k0 = np.empty(len(starts))
    kr = np.empty((len(starts), n_slots))
    kc = np.empty(len(starts))
    for p, w in enumerate(probes):
        inv_sum = 0.0
        grad = np.zeros(n_slots)
        const = 0.0
        unused_grad = np.zeros(n_slots)
        unused_const = 0.0
        n_used = 0
        for b, f in zip(branches, curves):
            if f(0.0) < w:
                seg = f.segment_index(invert_monotone(f, w))
                s = b.k0[seg]
                inv_sum += 1.0 / s
                grad += b.kr[seg] / s
                const += b.kc[seg] / s
                n_used += 1
            else:
                unused_grad += b.kr[0]
                unused_const += b.kc[0]
        k0[p] = n_used / inv_sum
        kr[p] = n_used * grad / inv_sum + unused_grad
        kc[p] = n_used * const / inv_sum + unused_const
    slots = frozenset().union(*(b.slots for b in branches))
    return TsttPwl(np.asarray(tolls, dtype=float), np.asarray(starts), k0, kr, kc, slots)


def check_positive(t: TsttPwl) -> None:
    """Raise unless every demand and toll coefficient is strictly positive."""
    if np.any(t.k0 <= 0):
        raise EquilibriumError(f"non-positive demand coefficient in TSTT: {t.k0}")
    for s in t.slots:
        if np.any(t.kr[:, s] <= 0):
            raise EquilibriumError(f"non-positive toll coefficient for slot {s}: {t.kr[:, s]}")


def extract_tstt_pwl(routes: Sequence[PwlFunction], u: Sequence[float]) -> TsttPwl:
    """TSTT of parallel single-link routes as pieces linear in demand and tolls."""
    _cost_curves(routes, u)
    links = [TsttPwl.from_link(f, r, u) for r, f in enumerate(routes)]
    out = parallel_tstt_pwl(links)
    check_positive(out)
    return out


@dataclass(frozen=True)
class CoefficientExtrema:
    k0_max: float
    k0_min: float
    kr_max: np.ndarray
    kr_min: np.ndarray

    def __post_init__(self):
        if not (0 < self.k0_min <= self.k0_max):
            raise EquilibriumError("demand coefficient extrema must satisfy 0 < min <= max")
        if np.any(self.kr_min <= 0) or np.any(self.kr_min > self.kr_max):
            raise EquilibriumError("toll coefficient extrema must satisfy 0 < min <= max")


def coefficient_extrema(all_pwls: Sequence[TsttPwl]) -> CoefficientExtrema:
    """Element-wise min/max of the coefficients over every piece of every action."""
    if not all_pwls:
        raise EquilibriumError("need at least one TSTT function")
    slots = sorted(frozenset().union(*(t.slots for t in all_pwls)))
    k0 = np.concatenate([t.k0 for t in all_pwls])
    kr = np.concatenate([t.kr[:, slots] for t in all_pwls], axis=0)
    return CoefficientExtrema(
        k0_max=float(k0.max()), k0_min=float(k0.min()),
        kr_max=kr.max(axis=0), kr_min=kr.min(axis=0),
    )
