"""Command-line interface for the EIT toolkit.

One executable with subcommands covering the pipeline: mesh generation,
forward simulation, Jacobian computation and comparison, reconstruction,
dataset generation, batch experiments, and the scaling benchmark.

Configuration is resolved in three layers: built-in defaults, then an
optional JSON config file (unknown keys are rejected), then command-line
flags.  Every run writes its artifacts plus a manifest with the resolved
configuration, its hash, and library versions into the output directory,
so results can be regenerated bit-identically.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
failure, 4 I/O failure.  Failures print a JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .anomaly import AnomalyParams, SmoothingConfig
from .experiments import (
    DatasetSpec,
    batch_lm_config,
    benchmark_to_csv,
    dataset_from_jsonl,
    dataset_to_jsonl,
    generate_dataset,
    histogram_svg,
    initial_guess,
    run_experiment,
    sample_anomaly,
    scaling_benchmark,
)
from .forward import ForwardModel, ModelError, SolverError, simulate
from .inverse import LmStepError, ReconstructionError, reconstruct
from .jacobian import compare_jacobians, jacobian_ad, jacobian_analytic, jacobian_fd
from .mesh import ElectrodeLayout, MeshError, build_disk_mesh, save_mesh

__all__ = ["main", "ConfigError", "DEFAULT_CONFIG"]

DEFAULT_CONFIG = {
    "L": 16,
    "amplitude": 3.0,
    "arc_length": math.pi / 64,
    "contact_impedance": 5e-6,
    "epsilon": 0.03,
    "cg_tol": 1e-10,
    "rel_loss_threshold": 1e-3,
    "max_iterations": 20,
    "mesh_h": 0.05,
    "data_mesh_h": 0.05,
    "inversion_mesh_h": 0.06,
    "fd_step": 1e-5,
    "seed": 0,
    "jobs": 1,
    "out": "out",
}


class ConfigError(ValueError):
    """Invalid configuration file, flags, or user-supplied JSON."""


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(args):
    config = dict(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        config.update(load_config(args.config))
    for key in DEFAULT_CONFIG:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    try:
        config["L"] = int(config["L"])
        config["max_iterations"] = int(config["max_iterations"])
        config["seed"] = int(config["seed"])
        config["jobs"] = int(config["jobs"])
        for key in (
            "amplitude",
            "arc_length",
            "contact_impedance",
            "epsilon",
            "cg_tol",
            "rel_loss_threshold",
            "mesh_h",
            "data_mesh_h",
            "inversion_mesh_h",
            "fd_step",
        ):
            config[key] = float(config[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return config


def build_layout(config):
    try:
        return ElectrodeLayout(
            count=config["L"],
            arc_length=config["arc_length"],
            contact_impedance=(config["contact_impedance"],) * config["L"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_params(text):
    try:
        data = json.loads(text)
        return AnomalyParams.from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid anomaly parameters: {exc}") from exc


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(out_dir, command, config, extra=None):
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "seed": config["seed"],
        "versions": {
            "eitkit": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
    }
    if extra:
        manifest["arguments"] = extra
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_mesh(args, config, out_dir):
    mesh = build_disk_mesh(config["mesh_h"], build_layout(config))
    save_mesh(mesh, out_dir / "mesh.json")
    return {"mesh_h": config["mesh_h"], "elements": mesh.n_elements, "nodes": mesh.n_nodes}


def cmd_simulate(args, config, out_dir):
    params = parse_params(args.params)
    layout = build_layout(config)
    mesh = build_disk_mesh(config["mesh_h"], layout)
    measurements = simulate(
        params,
        mesh,
        layout,
        SmoothingConfig(config["epsilon"]),
        cg_tol=config["cg_tol"],
    )
    payload = {
        "measurements": measurements.tolist(),
        "L": layout.count,
        "patterns": "trig",
        "mesh_h": config["mesh_h"],
        "seed": config["seed"],
    }
    write_json(out_dir / "measurements.json", payload)
    return {"params": params.to_dict(), "mesh_h": config["mesh_h"]}


ENGINE_FUNCTIONS = {"analytic": jacobian_analytic, "ad": jacobian_ad, "fd": jacobian_fd}


def cmd_jacobian(args, config, out_dir):
    layout = build_layout(config)
    smoothing = SmoothingConfig(config["epsilon"])
    mesh = build_disk_mesh(config["mesh_h"], layout)
    if args.engine == "compare":
        spec = DatasetSpec(n_cases=args.cases, mode="general", seed=config["seed"])
        lines = ["case_id,frobenius_diff,relative_frobenius"]
        stats = []
        for case_id in range(args.cases):
            rng = np.random.default_rng([config["seed"], case_id])
            params = sample_anomaly(rng, spec)
            j_ad = jacobian_ad(params, mesh, layout, smoothing, cg_tol=config["cg_tol"])
            j_an = jacobian_analytic(params, mesh, layout, smoothing, cg_tol=config["cg_tol"])
            comparison = compare_jacobians(j_an, j_ad)
            stats.append(comparison.relative_frobenius)
            lines.append(
                f"{case_id},{comparison.frobenius_diff!r},{comparison.relative_frobenius!r}"
            )
        (out_dir / "compare.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_json(
            out_dir / "compare_stats.json",
            {
                "cases": args.cases,
                "mean": float(np.mean(stats)),
                "max": float(np.max(stats)),
                "min": float(np.min(stats)),
            },
        )
        return {"engine": "compare", "cases": args.cases}

    params = parse_params(args.params)
    engine = ENGINE_FUNCTIONS[args.engine]
    kwargs = dict(cg_tol=config["cg_tol"])
    if args.engine == "fd":
        kwargs["step"] = config["fd_step"]
    jac = engine(params, mesh, layout, smoothing, **kwargs)
    write_json(
        out_dir / f"jacobian_{args.engine}.json",
        {"engine": args.engine, "shape": list(jac.shape), "matrix": jac.tolist()},
    )
    header = ",".join(("cx", "cy", "r", "sigma_in", "sigma_out"))
    rows = "\n".join(",".join(repr(v) for v in row) for row in jac)
    (out_dir / f"jacobian_{args.engine}.csv").write_text(
        header + "\n" + rows + "\n", encoding="utf-8"
    )
    return {"engine": args.engine, "params": params.to_dict()}


def cmd_reconstruct(args, config, out_dir):
    layout = build_layout(config)
    try:
        with open(args.measurements, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"measurements file is not valid JSON: {exc}") from exc
    measurements = np.asarray(payload["measurements"], dtype=float)
    mesh = build_disk_mesh(config["inversion_mesh_h"], layout)
    model = ForwardModel(
        mesh=mesh,
        layout=layout,
        smoothing=SmoothingConfig(config["epsilon"]),
        cg_tol=config["cg_tol"],
    )
    base = batch_lm_config(args.mode, args.engine)
    cfg = replace(
        base,
        max_iterations=config["max_iterations"],
        rel_loss_threshold=config["rel_loss_threshold"],
    )
    result, trace = reconstruct(measurements, initial_guess(args.mode), cfg, model)
    write_json(
        out_dir / "reconstruction.json",
        {"params": result.to_dict(), "trace": trace.to_rows()},
    )
    rows = trace.to_rows()
    if rows:
        header = ",".join(rows[0].keys())
        lines = [header] + [",".join(str(v) for v in row.values()) for row in rows]
    else:
        lines = ["iteration,loss,relative_loss,lambda,step_norm,line_search_steps,accepted"]
    (out_dir / "trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"engine": args.engine, "mode": args.mode, "iterations": len(trace.records)}


def cmd_dataset(args, config, out_dir):
    spec = DatasetSpec(
        n_cases=args.cases,
        mode=args.mode,
        seed=config["seed"],
        data_mesh_h=config["data_mesh_h"],
    )
    records = generate_dataset(
        spec,
        layout=build_layout(config),
        smoothing=SmoothingConfig(config["epsilon"]),
        cg_tol=config["cg_tol"],
    )
    dataset_to_jsonl(records, out_dir / "dataset.jsonl")
    return {"mode": args.mode, "cases": args.cases}


def cmd_experiment(args, config, out_dir):
    if args.dataset:
        records = dataset_from_jsonl(args.dataset)
    else:
        spec = DatasetSpec(
            n_cases=args.cases,
            mode=args.mode,
            seed=config["seed"],
            data_mesh_h=config["data_mesh_h"],
        )
        records = generate_dataset(
            spec,
            layout=build_layout(config),
            smoothing=SmoothingConfig(config["epsilon"]),
            cg_tol=config["cg_tol"],
        )
        dataset_to_jsonl(records, out_dir / "dataset.jsonl")
    engines = ("ad", "analytic") if args.engine == "both" else (args.engine,)
    result = run_experiment(
        records,
        inversion_mesh_h=config["inversion_mesh_h"],
        engines=engines,
        lm_overrides={"max_iterations": config["max_iterations"]},
        jobs=config["jobs"],
    )
    (out_dir / "results.csv").write_text(result.to_csv(), encoding="utf-8")
    write_json(
        out_dir / "stats.json",
        {name: summary.to_dict() for name, summary in result.summaries.items()},
    )
    if args.svg:
        for name, summary in result.summaries.items():
            (out_dir / f"hist_{name}.svg").write_text(
                histogram_svg(summary, title=f"{args.mode}: {name}"), encoding="utf-8"
            )
    return {"mode": args.mode, "cases": len(records), "engines": list(engines)}


def cmd_bench(args, config, out_dir):
    sizes = [float(h) for h in args.sizes.split(",")]
    rows = scaling_benchmark(
        sizes,
        n_repeats=args.repeats,
        layout=build_layout(config),
        smoothing=SmoothingConfig(config["epsilon"]),
        seed=config["seed"],
        cg_tol=config["cg_tol"],
    )
    (out_dir / "bench.csv").write_text(benchmark_to_csv(rows), encoding="utf-8")
    return {"sizes": sizes, "repeats": args.repeats}


HANDLERS = {
    "mesh": cmd_mesh,
    "simulate": cmd_simulate,
    "jacobian": cmd_jacobian,
    "reconstruct": cmd_reconstruct,
    "dataset": cmd_dataset,
    "experiment": cmd_experiment,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eitkit",
        description="2-D EIT toolkit: forward solver, Jacobian engines, reconstruction.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="output directory (default ./out)")
    parser.add_argument("--seed", type=int, help="random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    mesh_p = sub.add_parser("mesh", help="build a disk mesh and export it as JSON")
    mesh_p.add_argument("--h", dest="mesh_h", type=float, help="target edge length")

    sim_p = sub.add_parser("simulate", help="simulate voltages for one anomaly")
    sim_p.add_argument("--params", required=True, help='JSON like {"r":0.3,"cx":0,...}')
    sim_p.add_argument("--h", dest="mesh_h", type=float, help="mesh edge length")

    jac_p = sub.add_parser("jacobian", help="compute or compare measurement Jacobians")
    jac_p.add_argument(
        "--engine", choices=("analytic", "ad", "fd", "compare"), default="ad"
    )
    jac_p.add_argument("--params", help="anomaly JSON (not used with --engine compare)")
    jac_p.add_argument("--cases", type=int, default=20, help="cases for compare mode")
    jac_p.add_argument("--h", dest="mesh_h", type=float, help="mesh edge length")

    rec_p = sub.add_parser("reconstruct", help="reconstruct an anomaly from measurements")
    rec_p.add_argument("--measurements", required=True, help="measurements JSON file")
    rec_p.add_argument("--engine", choices=("ad", "analytic"), default="ad")
    rec_p.add_argument("--mode", choices=("fixed", "general"), default="general")
    rec_p.add_argument("--h", dest="inversion_mesh_h", type=float)

    data_p = sub.add_parser("dataset", help="generate a seeded measurement dataset")
    data_p.add_argument("--mode", choices=("fixed", "general"), default="fixed")
    data_p.add_argument("--cases", type=int, default=50)
    data_p.add_argument("--h", dest="data_mesh_h", type=float)

    exp_p = sub.add_parser("experiment", help="run a reconstruction batch with statistics")
    exp_p.add_argument("--mode", choices=("fixed", "general"), default="fixed")
    exp_p.add_argument("--cases", type=int, default=50)
    exp_p.add_argument("--dataset", help="existing dataset JSONL (skips generation)")
    exp_p.add_argument("--engine", choices=("ad", "analytic", "both"), default="both")
    exp_p.add_argument("--jobs", type=int, help="parallel reconstruction workers")
    exp_p.add_argument("--svg", action="store_true", help="emit histogram SVGs")

    bench_p = sub.add_parser("bench", help="Jacobian wall-clock/memory scaling table")
    bench_p.add_argument("--sizes", default="0.16,0.08,0.05,0.035,0.028")
    bench_p.add_argument("--repeats", type=int, default=3)

    return parser


def fail(code, exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        if args.command == "jacobian" and args.engine != "compare" and not args.params:
            raise ConfigError("--params is required unless --engine compare")
        out_dir = Path(config["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = HANDLERS[args.command](args, config, out_dir)
        write_manifest(out_dir, args.command, config, extra)
    except ConfigError as exc:
        return fail(2, exc)
    except (
        MeshError,
        ModelError,
        SolverError,
        LmStepError,
        ReconstructionError,
        np.linalg.LinAlgError,
        FloatingPointError,
    ) as exc:
        return fail(3, exc)
    except OSError as exc:
        return fail(4, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
