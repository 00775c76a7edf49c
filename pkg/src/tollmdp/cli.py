"""Config-driven experiment runner.

    tollmdp solve|verify|simulate|sweep CONFIG [--out DIR] [--seed N] [--threads K]

The config is YAML.  Every key is optional; the instance block defaults to
two parallel BPR routes (c=[1,2], b=[0.5,1], a=4), tolls {2,3,4},
theta=100, x_max=15, epsilon=1, eta=4.  Example::

    kind: sweep-theta
    grid: [25, 100, 400]
    seed: 7
    instance:
      x_max: 15

Outputs are CSV files with header rows.  Wall-clock times go to
``timing.csv`` only, so every other file is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from tollmdp import conditions, mdp, solver
from tollmdp.network import load_network

log = logging.getLogger("tollmdp")

KINDS = ("solve", "verify", "simulate", "sweep-theta", "sweep-eta", "sweep-xmax",
         "sweep-aggregation", "sweep-routes")
COMMANDS = ("solve", "verify", "simulate", "sweep")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InstanceConfig:
    c: tuple = (1.0, 2.0)
    b: tuple = (0.5, 1.0)
    a: float = 4.0
    epsilon: float = 1.0
    eta: int = 4
    tolls: tuple = (2.0, 3.0, 4.0)
    theta: float = 100.0
    x_max: int = 15
    n_aggregate: int | None = None
    network: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    instance: InstanceConfig = field(default_factory=InstanceConfig)
    grid: tuple = ()
    seed: int = 0
    horizon: int = 100_000
    out: str = "results"


# ---------------------------------------------------------------- parsing

def _compose(text: str, source: str):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark else ""
        raise ConfigError(f"{source}:{line} not valid YAML: {exc}") from exc
    return node


def _lines(node, path="", out=None):
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if node is None:
        return out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _lines(v, f"{path}.{k.value}" if path else str(k.value), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _lines(v, f"{path}[{i}]", out)
    return out


class _Reader:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: str, msg: str):
        line = self.lines.get(path)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {path}: {msg}")

    def number(self, path, value, integer=False, positive=False, nonneg=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        if integer and int(value) != value:
            self.fail(path, f"expected an integer, got {value!r}")
        if not np.isfinite(value):
            self.fail(path, "must be finite")
        if positive and not value > 0:
            self.fail(path, f"must be positive, got {value!r}")
        if nonneg and value < 0:
            self.fail(path, f"must be non-negative, got {value!r}")
        return int(value) if integer else float(value)

    def numbers(self, path, value, **kw):
        if not isinstance(value, list) or not value:
            self.fail(path, f"expected a non-empty list, got {value!r}")
        return tuple(self.number(f"{path}[{i}]", v, **kw) for i, v in enumerate(value))


def parse_config_text(text: str, source: str = "<config>",
                      command: str | None = None) -> ExperimentConfig:
    node = _compose(text, source)
    data = yaml.safe_load(text) if node is not None else {}
    data = {} if data is None else data
    rd = _Reader(source, _lines(node))
    if not isinstance(data, dict):
        rd.fail("", "top level must be a mapping")
    known = {"kind", "instance", "grid", "seed", "horizon", "out"}
    for k in data:
        if k not in known:
            rd.fail(str(k), "unknown key")

    kind = data.get("kind", command if command in KINDS else None)
    if kind is None:
        rd.fail("kind", f"missing; one of {', '.join(KINDS)}")
    if kind not in KINDS:
        rd.fail("kind", f"unknown kind {kind!r}; one of {', '.join(KINDS)}")
    if command is not None:
        expected = "sweep" if kind.startswith("sweep-") else kind
        if command != expected:
            rd.fail("kind", f"kind {kind!r} cannot run under the {command!r} command")

    inst_raw = data.get("instance") or {}
    if not isinstance(inst_raw, dict):
        rd.fail("instance", "expected a mapping")
    fields_ok = set(InstanceConfig.__dataclass_fields__)
    for k in inst_raw:
        if k not in fields_ok:
            rd.fail(f"instance.{k}", "unknown key")
    inst = {}
    p = "instance."
    for key in ("c", "b"):
        if key in inst_raw:
            inst[key] = rd.numbers(p + key, inst_raw[key], positive=(key == "c"),
                                   nonneg=(key == "b"))
    for key in ("a", "epsilon", "theta"):
        if key in inst_raw:
            inst[key] = rd.number(p + key, inst_raw[key], positive=True)
    if "eta" in inst_raw:
        inst["eta"] = rd.number(p + "eta", inst_raw["eta"], integer=True, positive=True)
    if "x_max" in inst_raw:
        inst["x_max"] = rd.number(p + "x_max", inst_raw["x_max"], integer=True, nonneg=True)
    if inst_raw.get("n_aggregate") is not None:
        inst["n_aggregate"] = rd.number(p + "n_aggregate", inst_raw["n_aggregate"],
                                        integer=True, positive=True)
    if "tolls" in inst_raw:
        levels = rd.numbers(p + "tolls", inst_raw["tolls"], positive=True)
        if list(levels) != sorted(set(levels)):
            rd.fail(p + "tolls", "toll levels must be increasing and distinct")
        inst["tolls"] = levels
    if inst_raw.get("network") is not None:
        net = inst_raw["network"]
        if not isinstance(net, str):
            rd.fail(p + "network", "expected a file path")
        base = os.path.dirname(os.path.abspath(source)) if os.path.exists(source) else "."
        inst["network"] = os.path.normpath(os.path.join(base, net))
    instance = InstanceConfig(**inst)
    if len(instance.c) != len(instance.b):
        rd.fail(p + "b", f"needs {len(instance.c)} entries to match c")

    grid = ()
    if kind.startswith("sweep-"):
        if "grid" not in data:
            rd.fail("grid", f"{kind} needs a non-empty grid")
        if kind == "sweep-xmax":
            grid = rd.numbers("grid", data["grid"], integer=True, nonneg=True)
        else:
            grid = rd.numbers("grid", data["grid"], integer=kind != "sweep-theta",
                              positive=True)
        if instance.network is not None and kind in ("sweep-eta", "sweep-routes"):
            rd.fail("instance.network", f"{kind} needs an inline BPR instance")
    elif "grid" in data:
        rd.fail("grid", f"kind {kind!r} takes no grid")
    seed = rd.number("seed", data.get("seed", 0), integer=True, nonneg=True)
    horizon = rd.number("horizon", data.get("horizon", 100_000), integer=True, positive=True)
    out = data.get("out", "results")
    if not isinstance(out, str):
        rd.fail("out", "expected a directory path")
    return ExperimentConfig(kind, instance, grid, seed, horizon, out)


def parse_config(path: str, command: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path, command)


# ---------------------------------------------------------------- running

def build_problem(inst: InstanceConfig) -> mdp.ProblemConfig:
    if inst.network is not None:
        net, spec = load_network(inst.network)
        return mdp.ProblemConfig(inst.theta, inst.x_max, inst.tolls, network=net,
                                 multi_od=spec, n_aggregate=inst.n_aggregate)
    limit = 10.0 * max(inst.x_max, 1)
    routes = mdp.bpr_routes(inst.c, inst.b, inst.a, inst.epsilon, inst.eta, limit)
    return mdp.ProblemConfig(inst.theta, inst.x_max, inst.tolls, routes=routes,
                             n_aggregate=inst.n_aggregate)


def build_model(inst: InstanceConfig) -> mdp.MdpModel:
    prob = build_problem(inst)
    if inst.n_aggregate is not None:
        return mdp.build_aggregated_model(prob)
    return mdp.build_truncated_model(prob)


def _routes_instance(inst: InstanceConfig, n_routes: int) -> InstanceConfig:
    pairs = list(zip(inst.c, inst.b))
    chosen = [pairs[r % len(pairs)] for r in range(n_routes)]
    return replace(inst, c=tuple(p[0] for p in chosen), b=tuple(p[1] for p in chosen))


def sweep_instance(kind: str, inst: InstanceConfig, value) -> InstanceConfig:
    if kind == "sweep-theta":
        return replace(inst, theta=float(value))
    if kind == "sweep-eta":
        return replace(inst, eta=int(value))
    if kind == "sweep-xmax":
        return replace(inst, x_max=int(value))
    if kind == "sweep-aggregation":
        return replace(inst, n_aggregate=int(value))
    if kind == "sweep-routes":
        return _routes_instance(inst, int(value))
    raise ConfigError(f"not a sweep kind: {kind}")


def _solve_point(inst: InstanceConfig):
    t0 = time.perf_counter()
    model = build_model(inst)
    res = solver.policy_iteration(model)
    wall = 1e3 * (time.perf_counter() - t0)
    return model, res, wall


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(header, rows) -> str:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _policy_tolls(model, res) -> dict:
    return {float(s): tuple(model.actions[a]) for s, a in zip(model.states, res.policy)}


class _Writer:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.written: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def __call__(self, name: str, text: str):
        path = os.path.join(self.out_dir, name)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
        self.written.append(path)


def _run_single(cfg: ExperimentConfig, write: _Writer, timing: list):
    model, res, wall = _solve_point(cfg.instance)
    timing.append(("solve", wall))
    write("policy.csv", res.policy_csv(model))
    summary = [("lambda", res.lam), ("iterations", res.iterations),
               ("n_states", model.n_states), ("n_actions", model.n_actions)]
    if cfg.kind == "verify":
        prob = build_problem(cfg.instance)
        reports = conditions.verify_instance(prob, model, policy=None)
        text = "".join(r.to_text() + "\n" for r in reports)
        write("verify.txt", text)
        summary += [(f"holds_{r.name}", r.holds) for r in reports]
    if cfg.kind == "simulate":
        t0 = time.perf_counter()
        sim = solver.simulate_policy(model, res.policy, cfg.horizon, cfg.seed)
        timing.append(("simulate", 1e3 * (time.perf_counter() - t0)))
        write("simulate.csv", sim.trace_csv())
        z = (sim.mean - res.lam) / sim.std_error if sim.std_error > 0 else 0.0
        summary += [("simulated_mean", sim.mean), ("std_error", sim.std_error),
                    ("z_score", z), ("horizon", cfg.horizon), ("seed", cfg.seed)]
    write("summary.csv", _csv(("quantity", "value"), summary))


def _run_sweep(cfg: ExperimentConfig, write: _Writer, timing: list, threads: int):
    points = [sweep_instance(cfg.kind, cfg.instance, v) for v in cfg.grid]
    if threads > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_solve_point, points))
    else:
        results = [_solve_point(p) for p in points]

    reference = None
    if cfg.kind == "sweep-aggregation":
        ref_model, ref_res, ref_wall = _solve_point(replace(cfg.instance, n_aggregate=None))
        reference = ref_res.lam
        timing.append(("truncated", ref_wall))

    header = ["value", "lambda", "iterations", "n_actions", "policy_changed"]
    if reference is not None:
        header += ["lambda_truncated", "abs_gap"]
    rows = []
    prev = None
    for value, (model, res, wall) in zip(cfg.grid, results):
        tolls = _policy_tolls(model, res)
        if prev is None:
            changed = False
        else:
            shared = set(tolls) & set(prev)
            changed = any(tolls[s] != prev[s] for s in shared)
        prev = tolls
        row = [value, res.lam, res.iterations, model.n_actions, changed]
        if reference is not None:
            row += [reference, abs(res.lam - reference)]
        rows.append(row)
        timing.append((f"{_fmt(value)}", wall))
        write(f"policy_{_fmt(value)}.csv", res.policy_csv(model))
    write("sweep.csv", _csv(header, rows))


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> list[str]:
    """Run one experiment and return the paths written (manifest last)."""
    write = _Writer(cfg.out)
    timing: list = []
    if cfg.kind.startswith("sweep-"):
        _run_sweep(cfg, write, timing, threads)
    else:
        _run_single(cfg, write, timing)
    write("timing.csv", _csv(("point", "wall_ms"), timing))
    manifest = {"kind": cfg.kind, "seed": cfg.seed, "horizon": cfg.horizon,
                "grid": list(cfg.grid), "instance": asdict(cfg.instance),
                "files": sorted(os.path.basename(p) for p in write.written)}
    manifest["instance"] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in manifest["instance"].items()}
    write("manifest.txt", yaml.safe_dump(manifest, sort_keys=True))
    return write.written


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="tollmdp", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--seed", type=int, help="random seed (overrides the config)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        ap.error("--threads must be >= 1")
    try:
        cfg = parse_config(args.config, args.command)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if args.seed is not None:
            if args.seed < 0:
                ap.error("--seed must be non-negative")
            cfg = replace(cfg, seed=args.seed)
        written = run_experiment(cfg, args.threads)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"tollmdp: error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
