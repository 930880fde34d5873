"""Batch driver: convergence studies, property suite, mesh export.

Subcommands:

* ``grstokes run config.json``: execute the study matrix described by a
  JSON config, write per-combination CSV error/EOC tables, plot-ready
  data files, and a Markdown summary into the output directory.
* ``grstokes verify [--seed N]``: run the randomized property suite;
  exit code 2 if any property fails.
* ``grstokes mesh --case square|mountain ...``: write a mesh file.

Exit codes: 0 ok, 1 config error, 2 property failure, 3 solver failure.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import manufactured as mf
from . import verify as vf
from .mesh import build_mountain, build_unit_square, write_mesh
from .solver import SolverConfig, solve_fixed_point
from .spaces import build_spaces

DOF_CAP = 200_000


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    case: str
    variants: list = field(default_factory=lambda: ["hdiv-hdg", "full-hdg"])
    k: list = field(default_factory=lambda: [1, 2, 3])
    nu: list = field(default_factory=lambda: [1.0])
    c_M: list = field(default_factory=lambda: [1.0])
    levels: list = field(default_factory=lambda: [0, 1, 2, 3])
    rhs_mode: str = None
    tau: float = None
    tol_momentum: float = 1e-10
    tol_density: float = 1e-10
    max_iters: int = 10000
    outdir: str = "results"
    emit_plots: bool = True
    mountain_h0: float = 0.3
    mountain_hloc: float = 0.01
    force: bool = False

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.case not in mf.CASE_IDS:
            raise ConfigError(f"unknown case {self.case!r}; choose from {mf.CASE_IDS}")
        for name in ("variants", "k", "nu", "c_M", "levels"):
            if not getattr(self, name):
                raise ConfigError(f"config list {name!r} must be nonempty")
        if any(v not in ("hdiv-hdg", "full-hdg") for v in self.variants):
            raise ConfigError("variants must be hdiv-hdg or full-hdg")
        if any(k not in (1, 2, 3) for k in self.k):
            raise ConfigError("orders k must be in {1, 2, 3}")
        if any(lv < 0 for lv in self.levels):
            raise ConfigError("levels must be nonnegative")
        if any(nu <= 0 for nu in self.nu) or any(c <= 0 for c in self.c_M):
            raise ConfigError("nu and c_M must be positive")


def _estimate_velocity_dofs(config, level, k, variant):
    if config.case in ("mountain", "mountain-allf"):
        h = config.mountain_h0 / 2**level
        ncells = 2.0 * 0.92 / h**2 + 2.0 / config.mountain_hloc
    else:
        ncells = 96 * 4**level
    nfacets = 1.5 * ncells
    if variant == "hdiv-hdg":
        return nfacets * (k + 1) * 2 + ncells * (k + 1) * (k - 1)
    return ncells * (k + 1) * (k + 2) + 2 * nfacets * (k + 1)


def _run_cell(args):
    """One (variant, k, nu, c_M) study column over all levels."""
    config, variant, k, nu, c_M = args
    case = mf.get_case(config.case, nu, c_M, config.rhs_mode)
    solver_cfg = SolverConfig(
        tau=config.tau, tol_momentum=config.tol_momentum,
        tol_density=config.tol_density, max_iters=config.max_iters,
    )
    reports = []
    failures = 0
    for level in sorted(config.levels):
        mesh = case.mesh_for_level(level, config.mountain_h0, config.mountain_hloc)
        disc = build_spaces(mesh, k, variant)
        state, rep = solve_fixed_point(
            case.problem, mesh, solver_cfg, k=k, variant=variant, disc=disc
        )
        err = mf.compute_errors(state, case, disc, level)
        err.converged = rep.converged
        if not rep.converged:
            failures += 1
        reports.append(err)
    return reports, failures


def _cell_tag(config, variant, k, nu, c_M):
    return f"{config.case}_{variant}_k{k}_nu{nu:g}_cM{c_M:g}"


def run_study(config):
    """Execute the study matrix; returns the process exit code."""
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cells = [
        (config, variant, k, nu, c_M)
        for variant in config.variants
        for k in config.k
        for nu in config.nu
        for c_M in config.c_M
    ]
    if not config.force:
        worst = max(
            _estimate_velocity_dofs(config, max(config.levels), k, variant)
            for _, variant, k, _, _ in cells
        )
        if worst > DOF_CAP:
            raise ConfigError(
                f"projected velocity dofs ~{worst:.0f} exceed the desk-scale cap "
                f"{DOF_CAP}; rerun with force=true in the config"
            )

    jobs = getattr(config, "_jobs", 1)
    if jobs > 1:
        with Pool(jobs) as pool:
            results = pool.map(_run_cell, cells)
    else:
        results = [_run_cell(c) for c in cells]

    total_failures = 0
    summary = ["# Convergence study: " + config.case, ""]
    for (cfg, variant, k, nu, c_M), (reports, failures) in zip(cells, results):
        total_failures += failures
        tag = _cell_tag(config, variant, k, nu, c_M)
        if len(reports) >= 2:
            header, rows = mf.eoc_table(reports)
        else:
            header = mf.ErrorReport.ROW_HEADER
            rows = [r.as_row() for r in reports]
        (outdir / f"{tag}.csv").write_text(mf.table_to_csv(header, rows))
        if config.emit_plots:
            _write_plotdata(outdir / f"plot_{tag}.csv", reports, k)
        summary.append(f"## {tag}")
        summary.append("")
        summary.append("| level | h | L2(u) | H1h(u) | L2(rho) | EOC(L2 u) | converged |")
        summary.append("|---|---|---|---|---|---|---|")
        for i, r in enumerate(reports):
            e = "" if i == 0 else f"{rows[i][-3]:.2f}"
            summary.append(
                f"| {r.level} | {r.h_max:.4f} | {r.err_u_l2:.3e} | "
                f"{r.err_u_h1:.3e} | {r.err_rho_l2:.3e} | {e} | "
                f"{'yes' if r.converged else 'NO'} |"
            )
        summary.append("")
    (outdir / "summary.md").write_text("\n".join(summary))
    return 3 if total_failures else 0


def _write_plotdata(path, reports, k):
    """h vs errors plus h^k / h^{k+1} reference slopes (coarsest-anchored)."""
    lines = ["h,err_u_l2,err_u_h1,err_rho_l2,ref_hk,ref_hk1"]
    h0 = reports[0].h_max
    e0 = reports[0].err_u_l2 or 1.0
    for r in reports:
        ref_k = e0 * (r.h_max / h0) ** k
        ref_k1 = e0 * (r.h_max / h0) ** (k + 1)
        lines.append(
            f"{r.h_max:.12e},{r.err_u_l2:.12e},{r.err_u_h1:.12e},"
            f"{r.err_rho_l2:.12e},{ref_k:.12e},{ref_k1:.12e}"
        )
    path.write_text("\n".join(lines) + "\n")


def emit_plotdata(reports, path, k):
    _write_plotdata(Path(path), reports, k)


def run_verify(seed, instances, outpath):
    results = vf.run_suite(seed=seed, instances=instances)
    csv_text = vf.results_to_csv(results)
    if outpath:
        Path(outpath).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name} [{r.instance}] violation={r.violation:.3e}",
              file=sys.stderr)
    return 2 if failed else 0


def run_mesh(args):
    if args.case == "square":
        mesh = build_unit_square(args.refine)
    else:
        mesh = build_mountain(args.hmax, args.hloc)
    write_mesh(mesh, args.out)
    print(f"wrote {mesh.num_cells} cells, {mesh.num_vertices} vertices to {args.out}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="grstokes", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a study config")
    p_run.add_argument("config", help="JSON study configuration")
    p_run.add_argument("--jobs", type=int, default=1, help="worker processes")

    p_ver = sub.add_parser("verify", help="run the property suite")
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--instances", type=int, default=50)
    p_ver.add_argument("--out", default=None, help="CSV output path")

    p_mesh = sub.add_parser("mesh", help="generate and write a mesh")
    p_mesh.add_argument("--case", choices=["square", "mountain"], required=True)
    p_mesh.add_argument("--refine", type=int, default=0)
    p_mesh.add_argument("--hmax", type=float, default=0.3)
    p_mesh.add_argument("--hloc", type=float, default=0.01)
    p_mesh.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = RunConfig.from_json(args.config)
            config._jobs = args.jobs
            return run_study(config)
        if args.command == "verify":
            return run_verify(args.seed, args.instances, args.out)
        if args.command == "mesh":
            return run_mesh(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
