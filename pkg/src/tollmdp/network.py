"""Series-parallel networks and their reduction to parallel single-link routes.

A link's travel time is a piecewise-linear function of its flow plus the
toll on its slot.  Links in series add their times.  An inner parallel block
is replaced by one equivalent link whose time is the block's TSTT at
equilibrium, which stays piecewise linear in the flow and linear in the
tolls.  Parallel alternatives at the top level are kept as separate routes.

Series activity trips (a chain of destinations sharing the same origin, each
taking a fixed fraction of the remaining demand) reduce segment by segment:
the segment between consecutive destinations carries a fixed fraction of the
total demand, so its time is the segment's reduced function stretched by
that fraction.
"""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tollmdp.equilibrium import TsttPwl, check_positive, parallel_tstt_pwl, sum_tstt
from tollmdp.pwl import PwlFunction


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    tail: str
    head: str
    pwl: PwlFunction
    toll_slot: int


@dataclass(frozen=True)
class Network:
    nodes: tuple
    links: tuple
    od_pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "od_pairs", tuple(tuple(p) for p in self.od_pairs))
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise NetworkError("duplicate node id")
        for k, ln in enumerate(self.links):
            if ln.tail not in known or ln.head not in known:
                raise NetworkError(f"link {k} ({ln.tail}->{ln.head}) uses an unknown node")
            if ln.tail == ln.head:
                raise NetworkError(f"link {k} is a self-loop at node {ln.tail}")
        for o, d in self.od_pairs:
            if o not in known or d not in known:
                raise NetworkError(f"OD pair ({o},{d}) uses an unknown node")

    @property
    def n_slots(self) -> int:
        return 1 + max(ln.toll_slot for ln in self.links) if self.links else 0


@dataclass(frozen=True)
class MultiOdSpec:
    """Split fractions for a chain of destinations sharing one origin.

    ``fractions[k]`` is the share of the demand still travelling at
    destination ``k`` that stops there; the last destination takes the rest.
    """

    fractions: tuple

    def __post_init__(self):
        fr = tuple(float(r) for r in self.fractions)
        for r in fr:
            if not (0.0 <= r <= 1.0):
                raise NetworkError(f"split fraction must lie in [0, 1], got {r}")
        object.__setattr__(self, "fractions", fr)

    def segment_shares(self) -> list[float]:
        """Fraction of the total demand on each segment of the chain."""
        shares = [1.0]
        for r in self.fractions:
            shares.append(shares[-1] * (1.0 - r))
        return shares


# composition tree: ("link", k) | ("series", children) | ("parallel", children)

def _edges_between(net: Network, links: Sequence[int], origin, dest):
    """Links of ``links`` that lie on some directed origin-to-destination path."""
    out = defaultdict(list)
    inc = defaultdict(list)
    for k in links:
        out[net.links[k].tail].append(k)
        inc[net.links[k].head].append(k)

    def reach(start, adj, end_of):
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for k in adj[v]:
                w = end_of(k)
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen

    fwd = reach(origin, out, lambda k: net.links[k].head)
    bwd = reach(dest, inc, lambda k: net.links[k].tail)
    return [k for k in links if net.links[k].tail in fwd and net.links[k].head in bwd], fwd


def decompose(net: Network, origin, dest, links: Sequence[int] | None = None):
    """Series-parallel composition tree of the links between ``origin`` and ``dest``.

    Raises :class:`NetworkError` naming a node that blocks the reduction.
    """
    links = list(range(len(net.links))) if links is None else list(links)
    useful, fwd = _edges_between(net, links, origin, dest)
    if dest not in fwd:
        raise NetworkError(f"destination {dest} is not reachable from origin {origin}")
    dangling = sorted(set(links) - set(useful))
    if dangling:
        ln = net.links[dangling[0]]
        raise NetworkError(f"link {dangling[0]} ({ln.tail}->{ln.head}) is on no path "
                           f"from {origin} to {dest}")
    edges = {k: (net.links[k].tail, net.links[k].head, ("link", k)) for k in useful}
    next_id = len(net.links)
    changed = True
    while changed and len(edges) > 1:
        changed = False
        groups = defaultdict(list)
        for eid in sorted(edges):
            t, h, _ = edges[eid]
            groups[(t, h)].append(eid)
        for (t, h), ids in groups.items():
            if len(ids) > 1:
                kids = []
                for eid in ids:
                    tree = edges.pop(eid)[2]
                    kids.extend(tree[1] if tree[0] == "parallel" else [tree])
                edges[next_id] = (t, h, ("parallel", tuple(kids)))
                next_id += 1
                changed = True
        out = defaultdict(list)
        inc = defaultdict(list)
        for eid in sorted(edges):
            t, h, _ = edges[eid]
            out[t].append(eid)
            inc[h].append(eid)
        for v in sorted(set(out) & set(inc), key=str):
            if v in (origin, dest) or len(out[v]) != 1 or len(inc[v]) != 1:
                continue
            a, b = inc[v][0], out[v][0]
            if a not in edges or b not in edges:
                continue
            ta, _, tree_a = edges.pop(a)
            _, hb, tree_b = edges.pop(b)
            kids = []
            for tree in (tree_a, tree_b):
                kids.extend(tree[1] if tree[0] == "series" else [tree])
            edges[next_id] = (ta, hb, ("series", tuple(kids)))
            next_id += 1
            changed = True
            break
    if len(edges) != 1:
        degree = defaultdict(int)
        for t, h, _ in edges.values():
            degree[t] += 1
            degree[h] += 1
        blockers = sorted((v for v in degree if v not in (origin, dest)), key=str)
        node = blockers[0] if blockers else origin
        raise NetworkError(f"network between {origin} and {dest} is not series-parallel "
                           f"(reduction stops at node {node})")
    return next(iter(edges.values()))[2]


def _tree_links(tree) -> tuple[int, ...]:
    if tree[0] == "link":
        return (tree[1],)
    return tuple(k for kid in tree[1] for k in _tree_links(kid))


def _evaluate(net: Network, tree, tolls: np.ndarray) -> TsttPwl:
    kind = tree[0]
    if kind == "link":
        ln = net.links[tree[1]]
        return TsttPwl.from_link(ln.pwl, ln.toll_slot, tolls)
    parts = [_evaluate(net, kid, tolls) for kid in tree[1]]
    if kind == "series":
        return sum_tstt(parts)
    return parallel_tstt_pwl(parts)


@dataclass(frozen=True)
class ReducedRoute:
    """One top-level alternative: time as a function of its own flow at fixed tolls.

    ``fn.kr[p]`` holds the toll coefficients of piece ``p``, one per slot.
    """

    links: tuple
    fn: TsttPwl = field(repr=False)

    @property
    def pwl(self) -> PwlFunction:
        return self.fn.as_pwl()

    @property
    def toll_coefficients(self) -> np.ndarray:
        return self.fn.kr


def _check_single_od(net: Network):
    if len(net.od_pairs) != 1:
        raise NetworkError(f"expected one OD pair, found {len(net.od_pairs)}")
    return net.od_pairs[0]


def _reduce(net: Network, origin, dest, u, links=None) -> list[ReducedRoute]:
    tolls = np.asarray(u, dtype=float)
    if tolls.shape != (net.n_slots,):
        raise NetworkError(f"toll vector needs {net.n_slots} entries, got {tolls.shape}")
    tree = decompose(net, origin, dest, links)
    tops = tree[1] if tree[0] == "parallel" else (tree,)
    return [ReducedRoute(_tree_links(t), _evaluate(net, t, tolls)) for t in tops]


def reduce_series_parallel(net: Network, u) -> list[ReducedRoute]:
    origin, dest = _check_single_od(net)
    return _reduce(net, origin, dest, u)


def _combine(routes: list[ReducedRoute]) -> TsttPwl:
    if len(routes) == 1:
        return routes[0].fn
    return parallel_tstt_pwl([r.fn for r in routes])


def network_tstt_pwl(net: Network, u) -> TsttPwl:
    """TSTT of a single-OD series-parallel network as a function of demand."""
    out = _combine(reduce_series_parallel(net, u))
    check_positive(out)
    return out


def chain_blocks(net: Network) -> list[tuple]:
    """Split a series-activity-trips network into ``(from, to, links)`` segments.

    All OD pairs must share the origin and their destinations, in the order
    given, must be visited in sequence by every traveller.
    """
    origins = {o for o, _ in net.od_pairs}
    if len(origins) != 1:
        raise NetworkError("chain OD pairs must share a single origin")
    stops = [net.od_pairs[0][0]] + [d for _, d in net.od_pairs]
    if len(set(stops)) != len(stops):
        raise NetworkError("chain destinations must be distinct and differ from the origin")
    remaining = set(range(len(net.links)))
    blocks = []
    for a, b in zip(stops[:-1], stops[1:]):
        # links reachable from a without passing through b
        block, seen, stack = set(), {a}, [a]
        while stack:
            v = stack.pop()
            if v == b:
                continue
            for k in sorted(remaining):
                ln = net.links[k]
                if ln.tail == v and k not in block:
                    block.add(k)
                    if ln.head not in seen:
                        seen.add(ln.head)
                        stack.append(ln.head)
        if b not in seen:
            raise NetworkError(f"destination {b} is not reached from {a}; "
                               "OD pairs do not form a chain")
        remaining -= block
        blocks.append((a, b, tuple(sorted(block))))
    if remaining:
        k = min(remaining)
        raise NetworkError(f"link {k} is outside the destination chain")
    for i, (a, b, blk) in enumerate(blocks):
        for k in blk:
            ln = net.links[k]
            if any(ln.tail == s or ln.head == s for s in stops if s not in (a, b)):
                raise NetworkError(f"link {k} connects segment {i} to another stop; "
                                   "OD pairs do not form a chain")
    return blocks


@dataclass(frozen=True)
class MultiOdReduction:
    segments: tuple  # (share, tuple of ReducedRoute) per chain segment
    tstt: TsttPwl = field(repr=False)


def reduce_multi_od(net: Network, spec: MultiOdSpec, u) -> MultiOdReduction:
    """Single-link equivalent of a series-activity-trips network at fixed tolls."""
    blocks = chain_blocks(net)
    shares = spec.segment_shares()
    if len(shares) != len(blocks):
        raise NetworkError(f"{len(blocks)} chain segments need {len(blocks) - 1} "
                           f"split fractions, got {len(spec.fractions)}")
    segments = []
    parts = []
    for (a, b, blk), share in zip(blocks, shares):
        routes = _reduce(net, a, b, u, blk)
        segments.append((share, tuple(routes)))
        parts.append(_combine(routes).stretch(share))
    total = sum_tstt(parts)
    check_positive(total)
    return MultiOdReduction(tuple(segments), total)


@dataclass
class Diagnostics:
    connected: dict = field(default_factory=dict)          # OD pair -> bool
    series_parallel: dict = field(default_factory=dict)    # OD pair or segment -> bool
    duplicate_slots: list = field(default_factory=list)
    missing_slots: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return (all(self.connected.values()) and all(self.series_parallel.values())
                and not self.duplicate_slots and not self.missing_slots)


def validate(net: Network) -> Diagnostics:
    diag = Diagnostics()
    owners = defaultdict(list)
    for k, ln in enumerate(net.links):
        owners[ln.toll_slot].append(k)
    for slot in sorted(owners):
        if len(owners[slot]) > 1:
            diag.duplicate_slots.append(slot)
            diag.messages.append(f"toll slot {slot} is shared by links {owners[slot]}")
    diag.missing_slots = [s for s in range(net.n_slots) if s not in owners]
    for s in diag.missing_slots:
        diag.messages.append(f"toll slot {s} has no link")
    if any(s < 0 for s in owners):
        diag.messages.append("toll slots must be non-negative")
        diag.missing_slots.append(min(owners))
    all_links = list(range(len(net.links)))
    for o, d in net.od_pairs:
        _, fwd = _edges_between(net, all_links, o, d)
        diag.connected[(o, d)] = d in fwd
        if d not in fwd:
            diag.messages.append(f"{d} is not reachable from {o}")
    if not all(diag.connected.values()):
        return diag
    if len(net.od_pairs) == 1:
        o, d = net.od_pairs[0]
        try:
            decompose(net, o, d)
            diag.series_parallel[(o, d)] = True
        except NetworkError as exc:
            diag.series_parallel[(o, d)] = False
            diag.messages.append(str(exc))
    else:
        try:
            for a, b, blk in chain_blocks(net):
                try:
                    decompose(net, a, b, blk)
                    diag.series_parallel[(a, b)] = True
                except NetworkError as exc:
                    diag.series_parallel[(a, b)] = False
                    diag.messages.append(str(exc))
        except NetworkError as exc:
            diag.series_parallel[tuple(net.od_pairs)] = False
            diag.messages.append(str(exc))
    return diag


def _parse_curve(text: str, base_dir: str, where: str) -> PwlFunction:
    text = text.strip()
    if text.startswith("@"):
        path = os.path.join(base_dir, text[1:].strip())
        try:
            with open(path) as fh:
                return PwlFunction.from_csv(fh.read())
        except OSError as exc:
            raise NetworkError(f"{where}: cannot read curve file {path}: {exc}") from exc
    segs = []
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 3:
            raise NetworkError(f"{where}: segment {part.strip()!r} is not x_start:slope:intercept")
        segs.append(tuple(float(v) for v in fields))
    return PwlFunction(segs)


def parse_network(text: str, base_dir: str = ".") -> tuple[Network, MultiOdSpec | None]:
    """Read the sectioned network format.

    Sections ``[nodes]`` (comma or whitespace separated ids), ``[curves]``
    (``name = x:slope:intercept, ...`` or ``name = @file.csv``), ``[links]``
    (``tail,head,curve,toll_slot``), ``[od]`` (``origin,destination``) and
    an optional ``[splits]`` (one fraction per line).  ``#`` starts a comment.
    """
    section = None
    nodes, curves, links, ods, splits = [], {}, [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("nodes", "curves", "links", "od", "splits"):
                raise NetworkError(f"{where}: unknown section [{section}]")
            continue
        try:
            if section == "nodes":
                nodes.extend(t for t in line.replace(",", " ").split())
            elif section == "curves":
                name, _, body = line.partition("=")
                if not body:
                    raise NetworkError(f"{where}: expected name = segments")
                curves[name.strip()] = _parse_curve(body, base_dir, where)
            elif section == "links":
                f = [t.strip() for t in line.split(",")]
                if len(f) != 4:
                    raise NetworkError(f"{where}: link rows are tail,head,curve,toll_slot")
                if f[2] not in curves:
                    raise NetworkError(f"{where}: unknown curve {f[2]!r}")
                links.append(Link(f[0], f[1], curves[f[2]], int(f[3])))
            elif section == "od":
                f = [t.strip() for t in line.split(",")]
                if len(f) != 2:
                    raise NetworkError(f"{where}: OD rows are origin,destination")
                ods.append(tuple(f))
            elif section == "splits":
                splits.append(float(line))
            else:
                raise NetworkError(f"{where}: content outside a section")
        except ValueError as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"{where}: {exc}") from exc
    net = Network(tuple(nodes), tuple(links), tuple(ods))
    spec = MultiOdSpec(tuple(splits)) if (splits or len(ods) > 1) else None
    return net, spec


def load_network(path: str) -> tuple[Network, MultiOdSpec | None]:
    with open(path) as fh:
        return parse_network(fh.read(), os.path.dirname(os.path.abspath(path)))


def two_route_network(routes: Sequence[PwlFunction]) -> Network:
    """Parallel single-link routes between ``O`` and ``D``, slot ``r`` on route ``r``."""
    return Network(("O", "D"), tuple(Link("O", "D", f, r) for r, f in enumerate(routes)),
                   (("O", "D"),))


def overlapping_network(f1, f2, f3, f4) -> Network:
    """Links 1 and 2 in series from A to C via B, link 3 from A to C, link 4 from C to D."""
    return Network(("A", "B", "C", "D"),
                   (Link("A", "B", f1, 0), Link("B", "C", f2, 1),
                    Link("A", "C", f3, 2), Link("C", "D", f4, 3)),
                   (("A", "D"),))
