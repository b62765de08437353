"""Command-line entry point: ``msgfem {nloc-sweep,rho-sweep,s-sweep,field-dump,selftest}``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings

import numpy as np

from . import experiments as ex

log = logging.getLogger("msgfem")

EXIT_OK, EXIT_CONFIG, EXIT_RECORD = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file; flags override it")
    common.add_argument("--mesh-n", type=int)
    common.add_argument("--example", choices=[e.value for e in ex.Example])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="output_dir")
    common.add_argument("--m", type=int)
    common.add_argument("--overlap", dest="overlap_layers", type=int)
    common.add_argument("--ell", dest="ell_list", help="comma list, ranges as a..b")
    common.add_argument("--nloc", dest="nloc_list", help="comma list, ranges as a..b")
    common.add_argument("--s", dest="s_list", help="comma list of ints or 'auto'")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="msgfem", description="MS-GFEM convergence experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("nloc-sweep", parents=[common], help="error vs local space dimension")
    sub.add_parser("rho-sweep", parents=[common], help="error vs H/H*")
    sub.add_parser("s-sweep", parents=[common], help="error vs number of Steklov functions")
    sub.add_parser("field-dump", parents=[common], help="write u_h, u_G and |u_h - u_G| nodal CSVs")
    sub.add_parser("selftest", parents=[common], help="quick consistency checks on a small mesh")
    return parser


def _config(args) -> ex.ExperimentConfig:
    base = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    keys = ["mesh_n", "example", "seed", "output_dir", "m", "overlap_layers", "ell_list", "nloc_list",
            "s_list", "workers"]
    cfg = ex.config_from_mapping({k: getattr(args, k) for k in keys}, base)
    if args.command == "field-dump" and not args.config:
        # defaults for the solution/error field plot
        for key, val in (("ell_list", [10]), ("nloc_list", [20]), ("s_list", [80])):
            if getattr(args, key) is None:
                setattr(cfg, key, val)
    return cfg.validate()


def selftest(cfg: ex.ExperimentConfig) -> bool:
    """Small end-to-end checks; prints one line per check."""
    from .coefficients import benchmark_problem_data, constant_field
    from .decomposition import build_decomposition, reconstruct
    from .gfem import FineProblem, h_of_s, reference_solve, relative_energy_error, solve_msgfem
    from .grid_fem import build_mesh
    from .local_spaces import LocalSpaceWarning

    results = []
    rng = np.random.default_rng(cfg.seed)
    mesh = build_mesh(16, 16)
    d = build_decomposition(mesh, 2, 2, 0)
    v = rng.standard_normal(mesh.n_nodes)
    results.append(("pu_reconstruction", float(np.max(np.abs(reconstruct(d, v) - v))) <= 1e-14))
    prob = FineProblem.assemble(mesh, constant_field(mesh), benchmark_problem_data(cfg.example))
    u_h = reference_solve(prob)
    d = build_decomposition(mesh, 2, 2, 2)
    with warnings.catch_warnings():
        # s and n_loc deliberately exceed the local dimensions here
        warnings.simplefilter("ignore", LocalSpaceWarning)
        sol = solve_msgfem(prob, d, n_loc=200, s=200)
    results.append(("full_space_exactness", relative_energy_error(prob.K, u_h, sol.u_G) <= 1e-8))
    results.append(("h_of_s", abs(h_of_s(0.5) - (1 - np.log(2))) <= 1e-12))
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return all(ok for _, ok in results)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ex.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "selftest":
        return EXIT_OK if selftest(cfg) else EXIT_RECORD
    runner = {
        "nloc-sweep": ex.run_nloc_sweep,
        "rho-sweep": ex.run_rho_sweep,
        "s-sweep": ex.run_s_sweep,
        "field-dump": ex.run_field_dump,
    }[args.command]
    try:
        result = runner(cfg)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if result.csv_path:
        print(result.csv_path)
    for fail in result.failures:
        print(f"record failed: ell={fail[0]} s={fail[1]} n_loc={fail[2]}: {fail[3]}", file=sys.stderr)
    return EXIT_RECORD if result.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
