"""Command-line interface.

Subcommands: ``simulate`` (one fine-model solve, VTK out), ``optimize-coarse``
(coarse problem only), ``space-map`` (the full correction loop with
per-iteration VTK and a history CSV), ``check-gradient`` (finite-difference
order report) and ``gen-mesh`` (disk-in-square generator).

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import fileio, models, space_mapping, coarse_opt, validation
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, ShapemapError
from .mesh import generate_disk_in_square
from .models import Ellipse, PinnedField, TransmissionParams, FlowParams
from .shape_grad import ElasticityParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _load(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    apply_overrides(cfg, args.set or [])
    return cfg.validate()


def _mesh_from_config(cfg):
    if cfg["mesh.path"]:
        return fileio.read_msh(cfg["mesh.path"])
    if cfg["mesh.generator"] == "disk_in_square":
        return generate_disk_in_square(cfg["mesh.radius"], cfg["mesh.resolution"])
    raise ConfigError(f"unknown mesh generator {cfg['mesh.generator']!r}")


def _elasticity(cfg):
    return ElasticityParams(
        mu=cfg["elasticity.mu"],
        lam=cfg["elasticity.lambda"],
        delta=cfg["elasticity.delta"],
    )


def build_experiment(cfg):
    """Experiment and driver configuration from a validated RunConfig."""
    mesh = _mesh_from_config(cfg)
    ep = _elasticity(cfg)
    if cfg["experiment"] == "transmission":
        params = TransmissionParams(
            alpha_in=cfg["model.alpha_in"],
            alpha_out=cfg["model.alpha_out"],
            f_in=cfg["model.f_in"],
            f_out=cfg["model.f_out"],
            beta=cfg["model.beta"],
        )
        ellipse = Ellipse(
            center=(cfg["target.center_x"], cfg["target.center_y"]),
            semi_major=cfg["target.semi_major"],
            semi_minor=cfg["target.semi_minor"],
            angle=cfg.ellipse_angle,
        )
        target_res = (
            int(cfg["target.resolution"])
            if cfg["target.resolution"]
            else cfg["mesh.resolution"]
        )
        u_des = models.make_desired_state(mesh, params, ellipse, target_res)
        experiment = space_mapping.TransmissionExperiment(
            reference=mesh,
            params_fine=params,
            target=PinnedField.from_field(u_des),
            elasticity=ep,
            memory=cfg["asm.memory"],
        )
    else:
        params = FlowParams(
            reynolds=cfg["model.reynolds"],
            inlet_scale=cfg["model.inlet_scale"],
            inlet_marker=cfg["flow.inlet_marker"],
            wall_markers=cfg.marker_list("flow.wall_markers"),
            outlet_markers=cfg.marker_list("flow.outlet_markers"),
        )
        fixed = cfg.marker_list("mesh.fixed_markers") or (
            (cfg["flow.inlet_marker"],)
            + cfg.marker_list("flow.outlet_markers")
            + (6,)
        )
        experiment = space_mapping.FlowExperiment(
            reference=mesh,
            params_fine=params,
            fixed_markers=fixed,
            elasticity=ep,
            memory=cfg["asm.memory"],
        )

    backend = "internal"
    if cfg["backend.kind"] == "external":
        backend = space_mapping.ExternalBackend(
            directory=cfg["backend.dir"], timeout_s=cfg["backend.timeout_s"]
        )
    asm_cfg = space_mapping.AsmConfig(
        tau=cfg["asm.tau"],
        memory=cfg["asm.memory"],
        k_max=cfg["asm.k_max"],
        coarse_rtol=cfg["coarse.rtol"],
        extraction_rtol=(
            float(cfg["extraction.rtol"]) if cfg["extraction.rtol"] else None
        ),
        coarse_max_iter=cfg["coarse.max_iter"],
        backend=backend,
    )
    return experiment, asm_cfg


def _state_point_data(experiment, mesh, response=None):
    if isinstance(experiment, space_mapping.TransmissionExperiment):
        if response is None:
            response = experiment.solve_fine(mesh)
        return {"state": response.field.values}
    st = models.flow_state(mesh, experiment.params_fine)
    vel = st.velocity.values.reshape(-1, 2)[: mesh.n_nodes]
    return {"velocity": vel, "pressure": st.pressure.values}


def cmd_simulate(args):
    cfg = _load(args)
    experiment, _ = build_experiment(cfg)
    mesh = experiment.reference
    outdir = cfg["output.dir"]
    os.makedirs(outdir, exist_ok=True)
    response = space_mapping.evaluate_fine(
        mesh, space_mapping.InternalBackend(experiment)
    )
    data = _state_point_data(experiment, mesh, response)
    path = os.path.join(outdir, "simulate.vtk")
    fileio.write_vtk(path, mesh, data)
    print(f"fine cost {experiment.fine_cost(response):.6e}")
    if response.kind == "rates":
        print("rates:", " ".join(f"{r:.8f}" for r in response.rates))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_optimize_coarse(args):
    cfg = _load(args)
    experiment, asm_cfg = build_experiment(cfg)
    outdir = cfg["output.dir"]
    os.makedirs(outdir, exist_ok=True)
    result = coarse_opt.optimize(
        experiment.reference,
        experiment.coarse_problem(),
        rtol=asm_cfg.coarse_rtol,
        max_iter=asm_cfg.coarse_max_iter,
    )
    path = os.path.join(outdir, "coarse_optimum.vtk")
    fileio.write_vtk(
        path, result.mesh, _state_point_data(experiment, result.mesh)
    )
    print(
        f"{result.reason} after {result.iterations} iterations, "
        f"cost {result.cost_history[0]:.6e} -> {result.cost_history[-1]:.6e}"
    )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_space_map(args):
    cfg = _load(args)
    experiment, asm_cfg = build_experiment(cfg)
    outdir = cfg["output.dir"]
    os.makedirs(outdir, exist_ok=True)
    run = space_mapping.asm_run(asm_cfg, experiment)
    for k, mesh in enumerate(run.meshes):
        fileio.write_vtk(
            os.path.join(outdir, f"iterate_{k:03d}.vtk"),
            mesh,
            _state_point_data(experiment, mesh),
        )
    csv_path = os.path.join(outdir, "history.csv")
    fileio.write_history_csv(csv_path, run.records)
    for rec in run.records:
        print(
            f"iter {rec.iteration}: cost {rec.cost:.6e} sigma {rec.sigma:.6e} "
            f"coarse_iters {rec.coarse_iters}"
        )
    print(f"{run.reason}; wrote {csv_path}")
    return EXIT_OK


def cmd_check_gradient(args):
    cfg = _load(args)
    experiment, asm_cfg = build_experiment(cfg)
    mesh = experiment.reference
    problem = experiment.coarse_problem()
    if isinstance(experiment, space_mapping.TransmissionExperiment):
        fields = validation.transmission_test_fields(mesh, count=args.fields)
    else:
        fields = validation.flow_test_fields(
            mesh, experiment.fixed_markers, count=args.fields
        )
    report = validation.fd_report(mesh, problem, fields)
    ok = True
    for i, entry in enumerate(report):
        errs = " ".join(f"{e:.3e}" for e in entry["errors"])
        print(
            f"field {i}: dJ = {entry['derivative']:+.6e}  "
            f"errors [{errs}]  slope {entry['slope']:.3f}"
        )
        ok = ok and entry["slope"] >= 1.8
    print("observed order within tolerance" if ok else "order check FAILED")
    return EXIT_OK if ok else EXIT_SOLVER


def cmd_gen_mesh(args):
    cfg = _load(args)
    mesh = generate_disk_in_square(cfg["mesh.radius"], cfg["mesh.resolution"])
    outdir = cfg["output.dir"]
    os.makedirs(outdir, exist_ok=True)
    path = args.out or os.path.join(outdir, "mesh.msh")
    fileio.write_msh(path, mesh)
    print(f"wrote {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return EXIT_OK


def make_parser():
    parser = argparse.ArgumentParser(
        prog="shapemap",
        description="finite-element shape optimization with fine-model correction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("simulate", cmd_simulate),
        ("optimize-coarse", cmd_optimize_coarse),
        ("space-map", cmd_space_map),
        ("check-gradient", cmd_check_gradient),
        ("gen-mesh", cmd_gen_mesh),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a configuration entry",
        )
        if name == "check-gradient":
            p.add_argument("--fields", type=int, default=5)
        if name == "gen-mesh":
            p.add_argument("--out", help="output mesh path")
        p.set_defaults(fn=fn)
    return parser


def cli_dispatch(argv):
    """Parse and run; map failures to documented exit codes."""
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapemapError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
