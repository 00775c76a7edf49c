"""Average-cost dynamic programming on a finite :class:`~tollmdp.mdp.MdpModel`.

Policy iteration is the production solver.  Relative value iteration and
exhaustive policy enumeration are independent cross-checks, and
:func:`simulate_policy` estimates the average cost by sampling the chain.
"""

from __future__ import annotations

import bisect
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveResult:
    policy: np.ndarray
    lam: float
    h: np.ndarray
    iterations: int
    trace: list = field(default_factory=list)  # (lambda, number of states that changed action)
    wall_ms: float = 0.0

    def policy_csv(self, model) -> str:
        n_slots = model.actions.shape[1]
        head = "state," + ",".join(f"toll_route_{r + 1}" for r in range(n_slots))
        rows = [head]
        for i, a in enumerate(self.policy):
            tolls = ",".join(f"{t:g}" for t in model.actions[a])
            rows.append(f"{model.states[i]:g},{tolls}")
        return "\n".join(rows) + "\n"


def _q_values(model, h: np.ndarray) -> np.ndarray:
    # Q[i, a] = g(i, a) + sum_j P[a, i, j] h(j)
    return model.g + np.einsum("aij,j->ia", model.P, h)


def _greedy(q: np.ndarray) -> np.ndarray:
    best = q.min(axis=1, keepdims=True)
    tol = TIE_RTOL * np.maximum(1.0, np.abs(best))
    # first index within tolerance of the minimum: lexicographically smallest toll vector
    return np.argmax(q <= best + tol, axis=1)


def policy_evaluation(model, policy) -> tuple[float, np.ndarray]:
    """Average and differential costs of a stationary policy, with ``h(anchor) = 0``."""
    policy = np.asarray(policy, dtype=int)
    n = model.n_states
    idx = np.arange(n)
    P_mu = model.P[policy, idx, :]
    g_mu = model.g[idx, policy]
    anchor = model.anchor
    A = np.eye(n) - P_mu
    # unknowns: h with h(anchor) replaced by lambda
    A[:, anchor] = 1.0
    try:
        z = np.linalg.solve(A, g_mu)
    except np.linalg.LinAlgError as exc:
        raise SolverError("evaluation system is singular: the anchor state is not "
                          "reachable from every state under this policy") from exc
    if not np.all(np.isfinite(z)):
        raise SolverError("evaluation produced non-finite values")
    lam = float(z[anchor])
    h = z.copy()
    h[anchor] = 0.0
    return lam, h


def policy_improvement(model, h) -> np.ndarray:
    return _greedy(_q_values(model, np.asarray(h, dtype=float)))


def bellman_residual(model, lam: float, h) -> float:
    q = _q_values(model, np.asarray(h, dtype=float))
    return float(np.max(np.abs(q.min(axis=1) - h - lam)))


def policy_iteration(model, initial=None, max_iter: int = 1000,
                     tol: float = 1e-10) -> SolveResult:
    """Howard's policy iteration for the average-cost criterion.

    Stops once the evaluation is unchanged to ``tol`` or a policy repeats.
    The default initial policy charges the lowest toll everywhere (action 0).
    """
    t0 = time.perf_counter()
    policy = (np.zeros(model.n_states, dtype=int) if initial is None
              else np.asarray(initial, dtype=int).copy())
    if policy.shape != (model.n_states,) or np.any(policy < 0) or np.any(policy >= model.n_actions):
        raise SolverError("initial policy must index a valid action for every state")
    lam, h = policy_evaluation(model, policy)
    trace = [(lam, 0)]
    seen = {policy.tobytes()}
    for it in range(1, max_iter + 1):
        new = policy_improvement(model, h)
        changed = int(np.sum(new != policy))
        new_lam, new_h = policy_evaluation(model, new)
        trace.append((new_lam, changed))
        converged = abs(new_lam - lam) <= tol and np.max(np.abs(new_h - h)) <= tol
        repeated = new.tobytes() in seen
        policy, lam, h = new, new_lam, new_h
        if converged or repeated:
            wall = 1e3 * (time.perf_counter() - t0)
            log.debug("policy iteration stopped after %d iterations, lambda=%.12g", it, lam)
            return SolveResult(policy, lam, h, it, trace, wall)
        seen.add(policy.tobytes())
    raise SolverError(f"policy iteration did not converge in {max_iter} iterations; "
                      f"lambda trace {[t[0] for t in trace[-5:]]}")


def relative_value_iteration(model, tol: float = 1e-10,
                             max_iter: int = 1_000_000) -> tuple[float, np.ndarray]:
    """Relative value iteration normalised at the anchor state."""
    h = np.zeros(model.n_states)
    anchor = model.anchor
    for _ in range(max_iter):
        th = _q_values(model, h).min(axis=1)
        diff = th - h
        h = th - th[anchor]
        if diff.max() - diff.min() <= tol:
            return float(th[anchor]), h
    raise SolverError(f"relative value iteration did not converge in {max_iter} iterations")


def exhaustive_search(model) -> tuple[float, np.ndarray]:
    """Best stationary policy by evaluating every one of them (small models only)."""
    best_lam, best = np.inf, None
    for pol in itertools.product(range(model.n_actions), repeat=model.n_states):
        lam, _ = policy_evaluation(model, pol)
        if lam < best_lam - TIE_RTOL * max(1.0, abs(lam)):
            best_lam, best = lam, np.array(pol)
    return float(best_lam), best


def stationary_distribution(model, policy) -> np.ndarray:
    """Left Perron eigenvector of the policy's transition matrix."""
    policy = np.asarray(policy, dtype=int)
    idx = np.arange(model.n_states)
    P_mu = model.P[policy, idx, :]
    vals, vecs = np.linalg.eig(P_mu.T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, k])
    return pi / pi.sum()


@dataclass(frozen=True)
class SimulationReport:
    mean: float
    std_error: float
    visits: np.ndarray
    return_time_mean: float
    return_cost_mean: float
    n_excursions: int
    seed: int
    horizon: int
    trace: list = field(default_factory=list)  # (step, running average)

    def trace_csv(self) -> str:
        rows = ["step,running_average"] + [f"{k},{v!r}" for k, v in self.trace]
        return "\n".join(rows) + "\n"


def simulate_policy(model, policy, horizon: int, seed: int, x0: int = 0,
                    n_batches: int = 50, n_checkpoints: int = 1000) -> SimulationReport:
    """Sample the controlled chain and average the one-step expected costs.

    The standard error uses batch means.  Excursions from state ``x0`` back
    to it give empirical mean return times and costs.
    """
    if horizon < 1:
        raise SolverError("horizon must be >= 1")
    policy = np.asarray(policy, dtype=int)
    idx = np.arange(model.n_states)
    cum = np.cumsum(model.P[policy, idx, :], axis=1)
    cum[:, -1] = 1.0
    cum_rows = [row.tolist() for row in cum]
    cost = model.g[idx, policy].tolist()
    last = model.n_states - 1

    rng = np.random.default_rng(seed)
    draws = rng.random(horizon).tolist()
    visits = [0] * model.n_states
    costs = np.empty(horizon)
    every = max(1, horizon // n_checkpoints)
    trace = []
    ret_times, ret_costs = [], []
    exc_len, exc_cost = 0, 0.0
    total = 0.0
    x = x0
    for k in range(horizon):
        c = cost[x]
        visits[x] += 1
        costs[k] = c
        total += c
        exc_len += 1
        exc_cost += c
        x = min(bisect.bisect_right(cum_rows[x], draws[k]), last)
        if x == x0:
            ret_times.append(exc_len)
            ret_costs.append(exc_cost)
            exc_len, exc_cost = 0, 0.0
        if (k + 1) % every == 0 or k + 1 == horizon:
            trace.append((k + 1, total / (k + 1)))

    mean = float(costs.mean())
    if horizon >= 2 * n_batches:
        size = horizon // n_batches
        batch = costs[: size * n_batches].reshape(n_batches, size).mean(axis=1)
        se = float(batch.std(ddof=1) / np.sqrt(n_batches))
    elif horizon > 1:
        se = float(costs.std(ddof=1) / np.sqrt(horizon))
    else:
        se = 0.0
    return SimulationReport(
        mean=mean, std_error=se, visits=np.array(visits),
        return_time_mean=float(np.mean(ret_times)) if ret_times else float("nan"),
        return_cost_mean=float(np.mean(ret_costs)) if ret_costs else float("nan"),
        n_excursions=len(ret_times), seed=seed, horizon=horizon, trace=trace,
    )
