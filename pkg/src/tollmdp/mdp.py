"""Finite control model for day-to-day tolling.

The state is the day's demand, the action a toll level per toll slot.  Next
day's demand is Poisson with mean ``theta / TSTT(x, u)``.  Two finite models
are built here: truncation of the demand to ``0..x_max`` (renormalised
Poisson rows) and aggregation of ``[0, x_max]`` into ``N`` equal intervals
with a normal approximation of the transition law.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp

from tollmdp.equilibrium import TsttPwl, extract_tstt_pwl
from tollmdp.pwl import ApproxConfig, BprFunction, PwlFunction, approximate_bpr

ROW_TOL = 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemConfig:
    """Parameters of one tolling instance.

    Exactly one of ``routes`` (parallel single-link routes, one toll slot per
    route) or ``network`` must be given.  ``multi_od`` optionally turns a
    chain network into a series-activity-trips instance.
    """

    theta: float
    x_max: int
    toll_levels: tuple[float, ...]
    routes: tuple[PwlFunction, ...] | None = None
    network: object | None = None
    multi_od: object | None = None
    n_aggregate: int | None = None

    def __post_init__(self):
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise ModelError(f"theta must be positive, got {self.theta}")
        if int(self.x_max) != self.x_max or self.x_max < 0:
            raise ModelError(f"x_max must be a non-negative integer, got {self.x_max}")
        levels = tuple(float(t) for t in self.toll_levels)
        if not levels:
            raise ModelError("at least one toll level is required")
        if any(not (t > 0 and math.isfinite(t)) for t in levels):
            raise ModelError("toll levels must be positive and finite")
        if list(levels) != sorted(set(levels)):
            raise ModelError("toll levels must be sorted and distinct")
        object.__setattr__(self, "toll_levels", levels)
        if (self.routes is None) == (self.network is None):
            raise ModelError("give exactly one of routes or network")
        if self.routes is not None:
            object.__setattr__(self, "routes", tuple(self.routes))
        if self.n_aggregate is not None and self.n_aggregate < 1:
            raise ModelError("aggregation count must be >= 1")

    @property
    def n_slots(self) -> int:
        if self.routes is not None:
            return len(self.routes)
        return self.network.n_slots

    @property
    def tau_min(self) -> float:
        return self.toll_levels[0]

    @property
    def tau_max(self) -> float:
        return self.toll_levels[-1]

    def actions(self) -> np.ndarray:
        """All toll vectors in lexicographic order (row index = action id)."""
        return np.array(list(itertools.product(self.toll_levels, repeat=self.n_slots)))

    def tstt_function(self, u: Sequence[float]) -> TsttPwl:
        if self.routes is not None:
            return extract_tstt_pwl(self.routes, u)
        from tollmdp import network
        if self.multi_od is not None:
            return network.reduce_multi_od(self.network, self.multi_od, u).tstt
        return network.network_tstt_pwl(self.network, u)

    def tstt_functions(self) -> list[TsttPwl]:
        return [self.tstt_function(u) for u in self.actions()]


def bpr_routes(c: Sequence[float], b: Sequence[float], a: float = 4.0,
               epsilon: float = 1.0, eta: int = 4,
               search_limit: float = 1e6) -> tuple[PwlFunction, ...]:
    cfg = ApproxConfig(epsilon, eta)
    return tuple(approximate_bpr(BprFunction(ci, a, bi), cfg, search_limit)
                 for ci, bi in zip(c, b))


def original_problem(**overrides) -> ProblemConfig:
    """Two parallel routes, c=[1,2], b=[0.5,1], a=4, tolls {2,3,4}, theta=100."""
    opts = dict(c=(1.0, 2.0), b=(0.5, 1.0), a=4.0, epsilon=1.0, eta=4,
                toll_levels=(2.0, 3.0, 4.0), theta=100.0, x_max=15, n_aggregate=None)
    opts.update(overrides)
    limit = 10.0 * max(opts["x_max"], 1)
    routes = bpr_routes(opts["c"], opts["b"], opts["a"], opts["epsilon"], opts["eta"], limit)
    return ProblemConfig(theta=opts["theta"], x_max=opts["x_max"],
                         toll_levels=opts["toll_levels"], routes=routes,
                         n_aggregate=opts["n_aggregate"])


@dataclass(frozen=True)
class AggregatedState:
    lo: float
    hi: float

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)


def aggregated_states(x_max: float, n: int) -> list[AggregatedState]:
    edges = np.linspace(0.0, x_max, n + 1)
    return [AggregatedState(float(edges[k]), float(edges[k + 1])) for k in range(n)]


@dataclass(frozen=True)
class MdpModel:
    """Finite average-cost model.

    ``P[a, i, j]`` is the probability of moving from state ``i`` to ``j``
    under action ``a``; ``g[i, a]`` the expected one-step cost.  The anchor
    state (``h = 0``) is the last state.
    """

    states: np.ndarray
    actions: np.ndarray
    P: np.ndarray
    g: np.ndarray
    tstt: np.ndarray | None = None
    theta: float | None = None
    kind: str = "custom"
    tstt_functions: tuple = field(default=(), repr=False)

    def __post_init__(self):
        n_a, n_s, n_s2 = self.P.shape
        if n_s != n_s2 or self.g.shape != (n_s, n_a):
            raise ModelError("P must be (A, S, S) and g must be (S, A)")
        if len(self.states) != n_s or len(self.actions) != n_a:
            raise ModelError("state/action labels do not match P")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ModelError("every transition row must be a probability vector")
        if not np.all(np.isfinite(self.g)):
            raise ModelError("costs must be finite")

    @classmethod
    def from_arrays(cls, P, g) -> "MdpModel":
        P = np.asarray(P, dtype=float)
        g = np.asarray(g, dtype=float)
        return cls(states=np.arange(P.shape[1], dtype=float),
                   actions=np.arange(P.shape[0])[:, None].astype(float), P=P, g=g)

    @property
    def n_states(self) -> int:
        return self.P.shape[1]

    @property
    def n_actions(self) -> int:
        return self.P.shape[0]

    @property
    def anchor(self) -> int:
        return self.n_states - 1

    def to_csv(self) -> dict[str, str]:
        """CSV text per file name: one transition matrix per action plus the cost table."""
        out = {}
        head = "state," + ",".join(f"to_{s:g}" for s in self.states)
        for a in range(self.n_actions):
            rows = [head] + [f"{self.states[i]:g}," + ",".join(repr(float(p)) for p in self.P[a, i])
                             for i in range(self.n_states)]
            out[f"transition_{a}.csv"] = "\n".join(rows) + "\n"
        head = "state," + ",".join("a" + "_".join(f"{t:g}" for t in u) for u in self.actions)
        rows = [head] + [f"{self.states[i]:g}," + ",".join(repr(float(v)) for v in self.g[i])
                         for i in range(self.n_states)]
        out["costs.csv"] = "\n".join(rows) + "\n"
        return out


def truncated_poisson(lam: float, x_max: int) -> np.ndarray:
    """Poisson(lam) pmf on ``0..x_max`` renormalised to sum to one."""
    if not (lam > 0 and math.isfinite(lam)):
        raise ModelError(f"Poisson mean must be positive and finite, got {lam}")
    j = np.arange(x_max + 1)
    logp = j * math.log(lam) - lam - gammaln(j + 1)
    p = np.exp(logp - logsumexp(logp))
    return p / p.sum()


def poisson_row(x: float, u: Sequence[float], cfg: ProblemConfig,
                tstt_fn: TsttPwl | None = None) -> np.ndarray:
    t = tstt_fn if tstt_fn is not None else cfg.tstt_function(u)
    return truncated_poisson(cfg.theta / t(x), cfg.x_max)


def expected_cost(x: float, u: Sequence[float], cfg: ProblemConfig,
                  tstt_fn: TsttPwl | None = None) -> float:
    """Expected next-day TSTT, with the next day evaluated under the same tolls."""
    t = tstt_fn if tstt_fn is not None else cfg.tstt_function(u)
    q = truncated_poisson(cfg.theta / t(x), cfg.x_max)
    return float(q @ t(np.arange(cfg.x_max + 1, dtype=float)))


def build_truncated_model(cfg: ProblemConfig) -> MdpModel:
    actions = cfg.actions()
    fns = tuple(cfg.tstt_functions())
    states = np.arange(cfg.x_max + 1, dtype=float)
    n_s, n_a = len(states), len(actions)
    P = np.empty((n_a, n_s, n_s))
    g = np.empty((n_s, n_a))
    tstt_tab = np.empty((n_s, n_a))
    for a, t in enumerate(fns):
        vals = t(states)
        if np.any(vals <= 0):
            raise ModelError(f"non-positive TSTT under action {actions[a]}")
        tstt_tab[:, a] = vals
        for i in range(n_s):
            P[a, i] = truncated_poisson(cfg.theta / vals[i], cfg.x_max)
        g[:, a] = P[a] @ vals
    return MdpModel(states, actions, P, g, tstt_tab, cfg.theta, "truncated", fns)


def _interval_log_mass(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """log(Phi(hi) - Phi(lo)) without cancellation in either tail."""
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    lb = log_ndtr(b)
    la = log_ndtr(a)
    with np.errstate(divide="ignore"):
        return lb + np.log1p(-np.exp(la - lb))


def normal_interval_row(mean: float, x_max: float, n: int) -> np.ndarray:
    """Normal(mean, var=mean) mass of each aggregation interval, renormalised."""
    sd = math.sqrt(mean)
    edges = np.linspace(0.0, x_max, n + 1)
    logm = _interval_log_mass((edges[:-1] - mean) / sd, (edges[1:] - mean) / sd)
    p = np.exp(logm - logsumexp(logm))
    return p / p.sum()


def build_aggregated_model(cfg: ProblemConfig, n: int | None = None) -> MdpModel:
    """States are interval centres; costs use the truncated Poisson sum at each centre."""
    n = n if n is not None else cfg.n_aggregate
    if n is None or n < 1:
        raise ModelError("aggregation needs N >= 1")
    actions = cfg.actions()
    fns = tuple(cfg.tstt_functions())
    centers = np.array([s.center for s in aggregated_states(cfg.x_max, n)])
    support = np.arange(cfg.x_max + 1, dtype=float)
    n_a = len(actions)
    P = np.empty((n_a, n, n))
    g = np.empty((n, n_a))
    tstt_tab = np.empty((n, n_a))
    for a, t in enumerate(fns):
        vals = t(centers)
        tstt_tab[:, a] = vals
        next_tstt = t(support)
        for i in range(n):
            lam = cfg.theta / vals[i]
            P[a, i] = normal_interval_row(lam, cfg.x_max, n)
            g[i, a] = truncated_poisson(lam, cfg.x_max) @ next_tstt
    return MdpModel(centers, actions, P, g, tstt_tab, cfg.theta, "aggregated", fns)
