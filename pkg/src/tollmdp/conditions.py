"""Numerical checks of the stability and contraction conditions on an instance.

Every closed-form quantity here is built from the TSTT coefficient extrema
(``k0`` and per-slot ``kr`` minima and maxima over all pieces and actions)
and the weights ``v_i = k0_max * i + sum_r kr_max[r] * tau_max``.  Where a
truncated model is available, the closed forms are compared with empirical
sweeps over it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tollmdp.equilibrium import CoefficientExtrema

SLACK = 1e-9


@dataclass(frozen=True)
class ConditionReport:
    name: str
    holds: bool
    bound: float
    attained: float | None = None
    witness: tuple | None = None  # (state index, action index) of the worst case
    details: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"[{self.name}]", f"holds = {self.holds}", f"bound = {_plain(self.bound)!r}"]
        if self.attained is not None:
            lines.append(f"attained = {_plain(self.attained)!r}")
        if self.witness is not None:
            lines.append(f"witness = {_plain(self.witness)}")
        for k, v in self.details.items():
            lines.append(f"{k} = {_plain(v)!r}")
        return "\n".join(lines) + "\n"


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, tuple):
        return tuple(_plain(x) for x in v)
    return v


def _sums(extrema: CoefficientExtrema, tau_min: float, tau_max: float):
    return (float(np.sum(extrema.kr_min)) * tau_min,   # sum_r kr_min * tau_min
            float(np.sum(extrema.kr_max)) * tau_max,   # sum_r kr_max * tau_max
            float(np.sum(extrema.kr_min)) * tau_max,
            float(np.sum(extrema.kr_max)) * tau_min)


@dataclass(frozen=True)
class LyapunovSpec:
    k0_max: float
    k0_min: float
    offset: float  # sum_r kr_max * tau_max
    theta: float

    @classmethod
    def from_extrema(cls, extrema: CoefficientExtrema, theta: float, tau_max: float):
        return cls(extrema.k0_max, extrema.k0_min,
                   float(np.sum(extrema.kr_max)) * tau_max, float(theta))

    def weight(self, i):
        return self.k0_max * np.asarray(i, dtype=float) + self.offset

    @property
    def threshold(self) -> float:
        return math.sqrt(self.theta / self.k0_min) + 1.0

    @property
    def finite_set(self) -> range:
        return range(0, math.ceil(self.threshold))

    @property
    def epsilon(self) -> float:
        t = self.threshold
        return self.k0_max * (t - self.theta / (self.k0_min * t))


def foster_drift_report(model, policy, spec: LyapunovSpec, extend_to: int | None = None,
                        tau_min_action: int = 0) -> ConditionReport:
    """Foster-Lyapunov drift of the untruncated chain.

    Uses ``sum_j p_ij v_j = k0_max * theta / TSTT(i, u) + offset``.  States
    past the model's last state are evaluated with the model's TSTT
    functions and the last state's action.  ``policy=None`` checks every
    action at every state, which covers every stationary policy.
    """
    fns = model.tstt_functions
    n_model = model.n_states
    top = max(n_model - 1, extend_to if extend_to is not None else 4 * math.ceil(spec.threshold))
    states = np.arange(top + 1, dtype=float)
    if policy is None:
        acts = list(range(model.n_actions))
    else:
        policy = np.asarray(policy, dtype=int)
        acts = None
    # TSTT(i, u) for every checked state and action
    tstt = np.column_stack([fn(states) for fn in fns])

    def expected_weight(i, a):
        return spec.k0_max * spec.theta / tstt[i, a] + spec.offset

    in_f = set(spec.finite_set)
    bound_f = spec.k0_max * spec.theta / tstt[0, tau_min_action] + spec.offset
    worst_f, worst_f_at = -np.inf, None
    worst_margin, worst_at = np.inf, None
    trunc_gap = 0.0
    for i in range(top + 1):
        act_list = acts if acts is not None else [int(policy[min(i, n_model - 1)])]
        for a in act_list:
            ev = expected_weight(i, a)
            if i < n_model and model.kind == "truncated":
                trunc = float(model.P[a, i] @ spec.weight(model.states))
                trunc_gap = max(trunc_gap, ev - trunc)
            if i in in_f:
                if ev > worst_f:
                    worst_f, worst_f_at = ev, (i, a)
            else:
                margin = float(spec.weight(i)) - ev - spec.epsilon
                if margin < worst_margin:
                    worst_margin, worst_at = margin, (i, a)
    holds_f = worst_f <= bound_f + SLACK * max(1.0, bound_f)
    holds_drift = worst_at is None or worst_margin >= -SLACK
    return ConditionReport(
        name="foster_drift", holds=bool(holds_f and holds_drift), bound=spec.epsilon,
        attained=None if worst_at is None else worst_margin + spec.epsilon,
        witness=worst_at,
        details={
            "finite_set_size": len(spec.finite_set),
            "threshold": spec.threshold,
            "epsilon": spec.epsilon,
            "max_expected_weight_in_F": worst_f,
            "bound_in_F": bound_f,
            "witness_in_F": worst_f_at,
            "states_checked": top + 1,
            "max_truncation_gap": trunc_gap,
        },
    )


def g_bound(extrema: CoefficientExtrema, theta: float, tau_min: float, tau_max: float) -> float:
    """Closed-form upper bound on ``max_i G_i / v_i`` (attained at ``i = 0``)."""
    if not tau_min > 0:
        raise ValueError("tau_min must be positive; the bound is infinite at tau_min = 0")
    lo_min, hi_max, lo_max, hi_min = _sums(extrema, tau_min, tau_max)
    k0 = extrema.k0_max
    at_max = k0 * theta / lo_max + hi_max
    at_min = k0 * theta / lo_min + hi_min
    return max(at_max, at_min) / hi_max


def v_bound(extrema: CoefficientExtrema, theta: float, tau_min: float, tau_max: float) -> float:
    """Closed-form upper bound on ``max_i V_i / v_i`` (attained at ``i = 0``)."""
    if not tau_min > 0:
        raise ValueError("tau_min must be positive; the bound is infinite at tau_min = 0")
    lo_min, hi_max, _, _ = _sums(extrema, tau_min, tau_max)
    return (extrema.k0_max * theta / lo_min + hi_max) / hi_max


def v_ratio_upper(extrema: CoefficientExtrema, theta: float, tau_min: float,
                  tau_max: float, i) -> np.ndarray:
    """The state-wise upper bound ``E'_i`` on ``V_i / v_i``; decreasing in ``i``."""
    lo_min, hi_max, _, _ = _sums(extrema, tau_min, tau_max)
    i = np.asarray(i, dtype=float)
    num = extrema.k0_max * theta / (extrema.k0_min * i + lo_min) + hi_max
    return num / (extrema.k0_max * i + hi_max)


def bound_assumption_G(extrema: CoefficientExtrema, cfg, model=None) -> ConditionReport:
    bound = g_bound(extrema, cfg.theta, cfg.tau_min, cfg.tau_max)
    attained, witness = None, None
    if model is not None:
        spec = LyapunovSpec.from_extrema(extrema, cfg.theta, cfg.tau_max)
        ratio = model.g / spec.weight(model.states)[:, None]
        i, a = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
        attained, witness = float(ratio[i, a]), (int(i), int(a))
    holds = math.isfinite(bound) and (attained is None or attained <= bound + SLACK)
    return ConditionReport("assumption_G", bool(holds), bound, attained, witness,
                           {"single_action": model is not None and model.n_actions == 1})


def bound_assumption_V(extrema: CoefficientExtrema, cfg, model=None) -> ConditionReport:
    bound = v_bound(extrema, cfg.theta, cfg.tau_min, cfg.tau_max)
    attained, witness = None, None
    if model is not None:
        spec = LyapunovSpec.from_extrema(extrema, cfg.theta, cfg.tau_max)
        w = spec.weight(model.states)
        ratio = np.einsum("aij,j->ia", model.P, w) / w[:, None]
        i, a = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
        attained, witness = float(ratio[i, a]), (int(i), int(a))
    holds = math.isfinite(bound) and (attained is None or attained <= bound + SLACK)
    return ConditionReport("assumption_V", bool(holds), bound, attained, witness)


def rho_condition(k0_max: float, theta: float, kr_min_sum: float, kr_max_sum: float,
                  tau_min: float, tau_max: float) -> ConditionReport:
    """Sufficient condition for the one-step contraction of the weighted norm."""
    s_lo = kr_min_sum * tau_min
    lhs = k0_max * theta / s_lo
    rhs = math.exp(-theta / s_lo) * kr_max_sum * tau_max
    return ConditionReport("assumption_rho", bool(lhs <= rhs), rhs, lhs, None,
                           {"lhs": lhs, "rhs": rhs, "margin": rhs - lhs})


def check_rho_condition(extrema: CoefficientExtrema, cfg) -> ConditionReport:
    return rho_condition(extrema.k0_max, cfg.theta, float(np.sum(extrema.kr_min)),
                         float(np.sum(extrema.kr_max)), cfg.tau_min, cfg.tau_max)


def toll_threshold_diagnostic(extrema: CoefficientExtrema, cfg, x: float) -> np.ndarray:
    """Per-slot value of ``sqrt(k0_max kr_min theta / kr_max) - k0_min x``.

    Positive values point to high tolls minimising the upper bound on the
    expected cost; non-positive values point to the lowest toll.
    """
    root = np.sqrt(extrema.k0_max * extrema.kr_min * cfg.theta / extrema.kr_max)
    return root - extrema.k0_min * x


def verify_instance(cfg, model, policy=None) -> list[ConditionReport]:
    """Run every checker on a truncated model; ``policy=None`` sweeps all actions."""
    from tollmdp.equilibrium import coefficient_extrema

    extrema = coefficient_extrema(model.tstt_functions)
    spec = LyapunovSpec.from_extrema(extrema, cfg.theta, cfg.tau_max)
    reports = [
        foster_drift_report(model, policy, spec),
        bound_assumption_G(extrema, cfg, model),
        bound_assumption_V(extrema, cfg, model),
        check_rho_condition(extrema, cfg),
    ]
    thresholds = [toll_threshold_diagnostic(extrema, cfg, x) for x in model.states]
    reports.append(ConditionReport(
        "toll_threshold", True, float(np.max(thresholds)), None, None,
        {"per_state": np.array(thresholds)}))
    return reports
