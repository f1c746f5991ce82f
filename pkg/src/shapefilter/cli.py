"""Command-line harness: fixtures, consistency, kernel profiles, conditioning, timing, optimization.

Every command writes its results to ``--out`` together with a
``manifest.json`` recording the configuration, input hashes, output files
and wall-clock timings. Options may come from a JSON ``--config`` file::

    {"schema_version": 1, "command": "optimize", "params": {...}}

with ``params`` keys named like the long options (dashes or underscores).
Unknown keys are rejected. Explicit command-line options override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

SCHEMA_VERSION = 1
log = logging.getLogger("shapefilter")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _strs(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


class Run:
    """Collects outputs and timings and writes the manifest."""

    def __init__(self, args, params: dict):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = args.command
        self.params = params
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(name)
        return p

    def input(self, path) -> None:
        from .mesh import file_sha256

        self.inputs[str(path)] = file_sha256(path)

    def timed(self, label: str):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[label] = time.perf_counter() - self.t

        return _T()

    def finish(self, summary: dict | None = None) -> dict:
        self.timings["total"] = time.perf_counter() - self._t0
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config": self.params,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "timings_seconds": self.timings,
            "summary": summary or {},
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                           default=_json_default) + "\n")
        return manifest


def _json_default(o):
    try:
        return o.item()
    except AttributeError:
        return str(o)


def _load_mesh_arg(run: Run, params: dict, kind: str):
    from . import fixtures
    from .mesh import load_mesh

    if params.get("mesh"):
        run.input(params["mesh"])
        return load_mesh(params["mesh"], kind)
    name = params.get("fixture") or ("plate" if kind == "surface" else "notched_block")
    kw = {}
    if name == "plate" and params.get("jitter"):
        kw = {"jitter": float(params["jitter"]), "seed": int(params.get("seed") or 0)}
    mesh = fixtures.generate(name, params.get("resolution"), **kw)
    if kind == "surface" and not hasattr(mesh, "triangles"):
        mesh = fixtures.design_surface(mesh)[0]
    return mesh


# ---------------------------------------------------------------------------
# commands


def cmd_generate_fixture(run: Run, p: dict) -> dict:
    from . import fixtures
    from .mesh import write_design_sidecar, write_vtk

    name = p["name"]
    res = p.get("resolution")
    if res is not None and int(res) < 2:
        raise ValueError("resolution must be >= 2")
    kw = {}
    if name == "plate":
        kw = {"jitter": float(p["jitter"]), "seed": int(p["seed"])}
    with run.timed("generate"):
        mesh = fixtures.generate(name, None if res is None else int(res), **kw)
    write_vtk(mesh, {"design": mesh.design_flags.astype(float)}, run.path(f"{name}.vtk"))
    write_design_sidecar(mesh.design_flags, run.path(f"{name}.design.json"))
    cells = len(mesh.triangles) if hasattr(mesh, "triangles") else len(mesh.tets)
    return {"nodes": mesh.n_nodes, "cells": cells}


def _surface_filter(p: dict, sm):
    from .explicit import ExplicitFilter, ExplicitFilterConfig, KernelSpec
    from .implicit import SurfaceFilterOperator

    if p["filter"] == "explicit":
        spec = (KernelSpec.from_span(p["kernel"], float(p["span"])) if p.get("span")
                else KernelSpec(p["kernel"], float(p["radius"])))
        damping = bool(p.get("damping")) and not sm.is_closed
        return ExplicitFilter(sm, ExplicitFilterConfig(spec, damping=damping))
    return SurfaceFilterOperator(sm, float(p["radius"]))


def cmd_consistency(run: Run, p: dict) -> dict:
    import numpy as np

    from .mesh import write_vtk
    from .studies import bulk_consistency, surface_consistency

    direction = _floats(p["direction"])
    if p["filter"] == "bulk_surface":
        from .fem import DEFAULT_ELASTICITY
        from .implicit import BulkSurfaceFilterOperator

        vm = _load_mesh_arg(run, p, "volume")
        with run.timed("filter"):
            opr = BulkSurfaceFilterOperator(vm, DEFAULT_ELASTICITY, r_gamma=float(p["radius"]),
                                            beta=float(p["beta"]))
            res = bulk_consistency(vm, opr, direction)
        mesh = vm
    else:
        mesh = _load_mesh_arg(run, p, "surface")
        with run.timed("filter"):
            res = surface_consistency(mesh, _surface_filter(p, mesh), direction)
    dj = res["scaled"].reshape(-1, 3)
    _write_csv(run.path("consistency.csv"), ["node", "djds_x", "djds_y", "djds_z", "rel_deviation"],
               [[i, *map(repr, dj[i]), repr(res["deviation"][i])] for i in range(len(dj))])
    write_vtk(mesh, {"djds": res["scaled"], "deviation": res["deviation"]}, run.path("consistency.vtk"))
    return {"max_deviation": res["max_deviation"], "worst_node": res["worst_node"],
            "uniform_1e-8": bool(res["max_deviation"] < 1e-8)}


def cmd_kernel_profile(run: Run, p: dict) -> dict:
    import numpy as np

    from .fixtures import plate
    from .studies import kernel_profiles, normalized_rms

    sm = plate(int(p.get("resolution") or 40))
    radius = float(p["radius"])
    with run.timed("profiles"):
        prof = kernel_profiles(sm, radius, _strs(p["kernels"]))
    order = np.argsort(prof.distance, kind="stable")
    names = list(prof.values)
    _write_csv(run.path("kernel_profile.csv"), ["node", "distance", *names],
               [[int(i), repr(prof.distance[i]), *(repr(prof.values[k][i]) for k in names)]
                for i in order])
    summary = {"centre_node": prof.centre, "radius": radius}
    if "green_regularized" in prof.values:
        summary["rms_green_vs_helmholtz"] = normalized_rms(prof.values["green_regularized"],
                                                           prof.values["helmholtz"])
    return summary


def cmd_cond_study(run: Run, p: dict) -> dict:
    from .studies import condition_claims, condition_study

    sm = _load_mesh_arg(run, {**p, "fixture": p.get("fixture") or "plate"}, "surface")
    with run.timed("study"):
        rows = condition_study(sm, _floats(p["ratios"]), _strs(p["kernels"]))
    _write_csv(run.path("condition_numbers.csv"), ["kernel", "ratio", "cond"],
               [[r["kernel"], r["ratio"], repr(r["cond"])] for r in rows])
    return condition_claims(rows)


def cmd_bench(run: Run, p: dict) -> dict:
    from .fixtures import notched_block, plate
    from .studies import fit_slopes, timing_study

    sm = plate(int(p.get("resolution") or 100))
    vm = notched_block(8) if p.get("bulk") else None
    with run.timed("bench"):
        rows = timing_study(sm, _floats(p["ratios"]), int(p["repetitions"]), p["kernel"], vm,
                            seed=int(p["seed"]))
    _write_csv(run.path("timings.csv"), ["method", "ratio", "median_seconds"],
               [[r["method"], r["ratio"], repr(r["median_seconds"])] for r in rows])
    slopes = fit_slopes(rows)
    top = max(r["ratio"] for r in rows)
    at_top = {r["method"]: r["median_seconds"] for r in rows if r["ratio"] == top}
    return {"slopes": slopes, "largest_ratio": top,
            "implicit_faster_at_largest": at_top["implicit_surface"] < at_top["explicit_matrix_free"]}


OPTIMIZE_KEYS = {"fixture", "resolution", "mesh", "objective", "filter", "beta", "span", "kernel",
                 "damping", "stiffening", "max_iterations", "alpha", "snapshot_every",
                 "min_jacobian_stop", "constraint", "load_case", "young", "poisson"}


def _load_case(spec: dict, vm):
    import numpy as np

    from .responses import LoadCase

    unknown = set(spec) - {"dirichlet", "loads"}
    if unknown:
        raise ConfigError(f"unknown load_case keys: {sorted(unknown)}")
    d = spec.get("dirichlet", "non_design")
    nodes = np.flatnonzero(~vm.design_flags) if d == "non_design" else np.asarray(d, dtype=int)
    loads = {int(row[0]): tuple(float(v) for v in row[1:4]) for row in spec.get("loads", [])}
    return LoadCase(tuple(int(i) for i in nodes), loads)


def build_optimization(p: dict, vm):
    """Optimization config from flat parameters (see ``OPTIMIZE_KEYS``)."""
    from .explicit import KernelSpec
    from .fem import ElasticityParams
    from .optimizer import ConstraintConfig, FilterSelection, OptimizationConfig, helmholtz_radius_for_mesh

    span = float(p["span"])
    r_gamma = helmholtz_radius_for_mesh(vm, span)
    mode = p["filter"]
    sel = FilterSelection(
        mode=mode, r_gamma=r_gamma, beta=float(p["beta"]), stiffening=bool(p["stiffening"]),
        kernel=KernelSpec.from_span(p["kernel"], span) if mode == "explicit_sequential" else None,
        damping=bool(p["damping"]))
    con = None
    if p.get("constraint"):
        c = dict(p["constraint"])
        unknown = set(c) - {"response", "target", "tolerance", "rho"}
        if unknown:
            raise ConfigError(f"unknown constraint keys: {sorted(unknown)}")
        con = ConstraintConfig(**c)
    return OptimizationConfig(
        objective=p["objective"], constraint=con,
        alpha=None if p.get("alpha") is None else float(p["alpha"]),
        max_iterations=int(p["max_iterations"]), filter=sel,
        min_jacobian_stop=float(p["min_jacobian_stop"]),
        elasticity=ElasticityParams.from_young(float(p["young"]), float(p["poisson"])),
        load_case=_load_case(p["load_case"], vm) if p.get("load_case") else None)


def cmd_optimize(run: Run, p: dict) -> dict:
    from .mesh import write_vtk
    from .optimizer import relative_reduction, run_optimization, write_history_csv

    vm = _load_mesh_arg(run, p, "volume")
    cfg = build_optimization(p, vm)
    every = int(p["snapshot_every"])

    def snapshot(state, mesh):
        if every > 0 and state.iteration % every == 0:
            write_vtk(mesh, {"displacement": state.x - vm.nodes.reshape(-1)},
                      run.path(f"geometry_{state.iteration:05d}.vtk"))

    with run.timed("optimize"):
        state = run_optimization(cfg, vm, callback=snapshot)
    write_history_csv(state, run.path("history.csv"))
    final = vm.with_nodes(state.last_valid_x.reshape(-1, 3))
    write_vtk(final, {"displacement": state.last_valid_x - vm.nodes.reshape(-1)},
              run.path("geometry_final.vtk"))
    return {"termination": state.termination, "iterations": state.iteration,
            "distortion_iteration": state.distortion_iteration, "alpha": state.alpha,
            "relative_reduction": relative_reduction(state)}


# ---------------------------------------------------------------------------
# argument parsing


COMMANDS = {
    "generate-fixture": cmd_generate_fixture,
    "consistency": cmd_consistency,
    "kernel-profile": cmd_kernel_profile,
    "cond-study": cmd_cond_study,
    "bench": cmd_bench,
    "optimize": cmd_optimize,
}

DEFAULTS = {
    "generate-fixture": {"name": "plate", "resolution": None, "jitter": 0.2},
    "consistency": {"mesh": None, "fixture": "perforated_plate", "resolution": None, "jitter": 0.0,
                    "filter": "implicit", "kernel": "gaussian", "radius": 1.0, "span": None,
                    "damping": False, "beta": 1.0, "direction": "0,0,1"},
    "kernel-profile": {"resolution": 40, "radius": 5.0,
                       "kernels": "gaussian,linear_hat,green_regularized"},
    "cond-study": {"mesh": None, "fixture": "plate", "resolution": 40, "jitter": 0.0,
                   "ratios": "5,10,20", "kernels": "gaussian,linear_hat,green_regularized"},
    "bench": {"resolution": 100, "ratios": "5,10,20,40", "repetitions": 3, "kernel": "gaussian",
              "bulk": False},
    "optimize": {"fixture": "notched_block", "resolution": 8, "mesh": None, "objective": "volume",
                 "filter": "bulk_surface", "beta": 1.0, "span": 0.625, "kernel": "gaussian",
                 "damping": True, "stiffening": True, "max_iterations": 100, "alpha": None,
                 "snapshot_every": 10, "min_jacobian_stop": 0.0, "constraint": None,
                 "load_case": None, "young": 1.0, "poisson": 0.3},
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shapefilter", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads")
    ap.add_argument("--seed", type=int, default=0, help="seed for perturbations and random vectors")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    g = sub.add_parser("generate-fixture", help="write a built-in mesh")
    g.add_argument("name", nargs="?", default=S,
                   choices=["plate", "perforated_plate", "notched_block", "ball", "sphere"])
    g.add_argument("--resolution", type=int, default=S)
    g.add_argument("--jitter", type=float, default=S, help="plate node perturbation (element sizes)")

    c = sub.add_parser("consistency", help="uniform-sensitivity consistency test")
    for a in ("--mesh", "--fixture", "--kernel"):
        c.add_argument(a, default=S)
    c.add_argument("--resolution", type=int, default=S)
    c.add_argument("--filter", choices=["explicit", "implicit", "bulk_surface"], default=S)
    for a in ("--radius", "--span", "--beta", "--jitter"):
        c.add_argument(a, type=float, default=S)
    c.add_argument("--damping", action="store_true", default=S)
    c.add_argument("--direction", default=S)

    k = sub.add_parser("kernel-profile", help="kernel profiles on the flat plate")
    k.add_argument("--resolution", type=int, default=S)
    k.add_argument("--radius", type=float, default=S)
    k.add_argument("--kernels", default=S)

    cs = sub.add_parser("cond-study", help="condition numbers versus p/a")
    cs.add_argument("--mesh", default=S)
    cs.add_argument("--fixture", default=S)
    cs.add_argument("--resolution", type=int, default=S)
    cs.add_argument("--jitter", type=float, default=S)
    cs.add_argument("--ratios", default=S)
    cs.add_argument("--kernels", default=S)

    b = sub.add_parser("bench", help="filter application timings versus p/a")
    b.add_argument("--resolution", type=int, default=S)
    b.add_argument("--ratios", default=S)
    b.add_argument("--repetitions", type=int, default=S)
    b.add_argument("--kernel", default=S)
    b.add_argument("--bulk", action="store_true", default=S)

    o = sub.add_parser("optimize", help="shape optimization run (settings via --config)")
    o.add_argument("--fixture", default=S)
    o.add_argument("--resolution", type=int, default=S)
    o.add_argument("--mesh", default=S)
    o.add_argument("--filter", choices=["bulk_surface", "explicit_sequential",
                                        "implicit_surface_sequential"], default=S)
    o.add_argument("--beta", type=float, default=S)
    o.add_argument("--span", type=float, default=S)
    o.add_argument("--max-iterations", type=int, default=S)
    o.add_argument("--alpha", type=float, default=S)
    return ap


def load_config(path, command: str) -> dict:
    data = json.loads(Path(path).read_text())
    unknown = set(data) - {"schema_version", "command", "params"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data.get('schema_version')!r}")
    if data.get("command", command) != command:
        raise ConfigError(f"config is for {data['command']!r}, not {command!r}")
    params = {k.replace("-", "_"): v for k, v in (data.get("params") or {}).items()}
    allowed = set(DEFAULTS[command])
    bad = set(params) - allowed
    if bad:
        raise ConfigError(f"unknown {command} parameters: {sorted(bad)}")
    return params


def resolve_params(args) -> dict:
    params = dict(DEFAULTS[args.command])
    if args.config:
        params.update(load_config(args.config, args.command))
    cli = {k: v for k, v in vars(args).items()
           if k not in ("config", "out", "threads", "seed", "verbose", "command")}
    params.update(cli)
    params["seed"] = args.seed
    return params


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        # only effective before the BLAS libraries initialise, i.e. when the
        # CLI is the process entry point
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        params = resolve_params(args)
        run = Run(args, params)
        summary = COMMANDS[args.command](run, params)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest = run.finish(summary)
    print(json.dumps(manifest["summary"], indent=2, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
