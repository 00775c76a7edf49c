"""Independent reference computations used by the tests."""

from scipy.optimize import brentq


def pointwise_time(net, tree, flow: float, u) -> float:
    """Travel time of a composition tree at one flow, by nested root finding.

    Independent of the closed-form coefficients; used as a cross-check.
    """


    kind = tree[0]
    if kind == "link":
        ln = net.links[tree[1]]
        return float(ln.pwl(flow)) + float(u[ln.toll_slot])
    kids = tree[1]
    if kind == "series":
        return sum(pointwise_time(net, k, flow, u) for k in kids)
    free = [pointwise_time(net, k, 0.0, u) for k in kids]
    if flow <= 0:
        return float(sum(free))

    def flow_at(k, w):
        if free[k] >= w:
            return 0.0
        hi = 1.0
        while pointwise_time(net, kids[k], hi, u) < w:
            hi *= 2.0
        return brentq(lambda f: pointwise_time(net, kids[k], f, u) - w, 0.0, hi,
                      xtol=1e-14, rtol=1e-15)

    def excess(w):
        return sum(flow_at(k, w) for k in range(len(kids))) - flow

    lo = min(free)
    hi = lo + 1.0
    while excess(hi) < 0:
        hi = lo + 2.0 * (hi - lo)
    w = brentq(excess, lo, hi, xtol=1e-14, rtol=1e-15)
    return float(sum(w if free[k] < w else free[k] for k in range(len(kids))))




def pwl_integral(f, x: float) -> float:
    """Exact integral of a piecewise-linear function from 0 to ``x``."""
    total = 0.0
    bps = list(f.breakpoints) + [float("inf")]
    for k, (s, c) in enumerate(zip(f.slopes, f.intercepts)):
        lo, hi = bps[k], min(bps[k + 1], x)
        if hi <= lo:
            break
        total += 0.5 * s * (hi * hi - lo * lo) + c * (hi - lo)
    return total


def beckmann_two_route(routes, x: float, u, grid: int = 20001):
    """Route flows minimising the Beckmann potential, by grid search then Brent refinement."""
    import numpy as np
    from scipy.optimize import minimize_scalar

    f1, f2 = routes

    def potential(x1):
        return pwl_integral(f1, x1) + u[0] * x1 + pwl_integral(f2, x - x1) + u[1] * (x - x1)

    if x == 0:
        return np.zeros(2)
    pts = np.linspace(0.0, x, grid)
    vals = [potential(p) for p in pts]
    k = int(np.argmin(vals))
    lo, hi = pts[max(k - 1, 0)], pts[min(k + 1, grid - 1)]
    res = minimize_scalar(potential, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-13})
    best = min([(res.fun, res.x), (vals[k], pts[k])])[1]
    return np.array([best, x - best])


def beckmann_tstt(routes, x: float, u) -> float:
    """TSTT from the oracle flows: every route's generalised cost at its flow, summed."""
    flows = beckmann_two_route(routes, x, u)
    return float(sum(f(q) + t for f, q, t in zip(routes, flows, u)))


def two_state_model():
    """g = (1, 3), rows (0.5, 0.5) and (0.25, 0.75): lambda = 7/3, h(0) = -8/3."""
    import numpy as np
    from tollmdp.mdp import MdpModel

    P = np.array([[[0.5, 0.5], [0.25, 0.75]]])
    g = np.array([[1.0], [3.0]])
    return MdpModel.from_arrays(P, g)
