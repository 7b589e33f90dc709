"""Command line front end.

Subcommands
-----------
run           one reconstruction, one CSV row
ladder        refinement ladder with observed convergence orders
noise-study   noise sweep with seed averaging and the log-log slope
export-matrix dump the assembled system in coordinate text format

Mesh parameters are given as denominators to mirror the tabulated runs:
``--h 20`` means h = 1/20 and ``--tau 40`` means tau = 1/40.  A JSON config
file can replace the flags; flags override config values.  The environment
variable PARASRC_THREADS caps ladder/study parallelism.

Config file schema (all keys optional, numeric unless noted)::

    {
      "example": 1,            // 1, 2 or 3
      "h": 20, "tau": 20,      // denominators, as on the command line
      "mode": "lip",           // "lip" or "hol"
      "delta": 0.0, "seed": 0,
      "gamma_f": 0.0, "gamma_u": 0.0,
      "omega0": [0.2, 0.8],    // error subdomain for the boundary-free mode
      "fine_factor": 8         // forward-synthesis refinement (example 2)
    }

Callback-defined custom problems are a Python API feature; see the README.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .inverse import (
    CSV_HEADER,
    EXAMPLE_DELTA_GRIDS,
    ProblemConfig,
    convergence_study,
    delta_study,
    run_reconstruction,
    write_reports_csv,
)
from .linsolve import IllConditionedError, SingularSystemError

_LADDERS = {
    1: [(10, 10), (20, 20), (40, 40), (80, 80)],
    2: [(20, 12), (20, 18), (20, 24), (20, 36)],
    3: [(4, 10), (8, 20), (12, 30), (16, 40)],
}

_GNUPLOT = """# gnuplot script for the noise study
set logscale xy
set xlabel "noise level"
set ylabel "seed-averaged error"
plot "{csv}" using 1:2 with linespoints title "error vs delta"
"""


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parasrc",
                                description="parabolic source reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--example", type=int, choices=(1, 2, 3))
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--h", type=int, help="mesh denominator (h = 1/H)")
        sp.add_argument("--tau", type=int, help="time step denominator")
        sp.add_argument("--delta", type=float, help="noise level")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=("lip", "hol"))
        sp.add_argument("--gamma-f", type=float, dest="gamma_f")
        sp.add_argument("--gamma-u", type=float, dest="gamma_u")
        sp.add_argument("--omega0", type=float, nargs=2,
                        help="error subdomain (boundary-free mode)")
        sp.add_argument("--fine-factor", type=int, dest="fine_factor")
        sp.add_argument("--out", type=Path, default=Path("."),
                        help="output directory")

    sp_run = sub.add_parser("run", help="single reconstruction")
    common(sp_run)
    sp_lad = sub.add_parser("ladder", help="convergence ladder")
    common(sp_lad)
    sp_lad.add_argument("--rungs", type=int, default=4)
    sp_noise = sub.add_parser("noise-study", help="error vs noise level")
    common(sp_noise)
    sp_noise.add_argument("--deltas", type=float, nargs="+",
                          default=[0.005, 0.01, 0.02, 0.04])
    sp_noise.add_argument("--seeds", type=int, default=10,
                          help="number of seeds averaged per level")
    sp_exp = sub.add_parser("export-matrix", help="dump the system matrix")
    common(sp_exp)
    return p


def _load_config_file(path: Path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    known = {"example", "h", "tau", "mode", "delta", "seed", "gamma_f",
             "gamma_u", "omega0", "fine_factor"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _make_config(args) -> ProblemConfig:
    values = {}
    if args.config is not None:
        values.update(_load_config_file(args.config))
    for key in ("example", "h", "tau", "delta", "seed", "gamma_f", "gamma_u",
                "omega0", "fine_factor", "mode"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    mode = {"lip": "lipschitz", "hol": "holder"}.get(values.get("mode", "lip"),
                                                     values.get("mode", "lipschitz"))
    example = int(values.get("example", 1))
    h_den = values.get("h")
    tau_den = values.get("tau")
    if h_den is None or tau_den is None:
        raise ValueError("both --h and --tau (denominators) are required")
    omega0 = values.get("omega0")
    return ProblemConfig(
        example=example,
        h=1.0 / float(h_den),
        tau=1.0 / float(tau_den),
        mode=mode,
        delta=float(values.get("delta", 0.0)),
        seed=int(values.get("seed", 0)),
        gamma_f=float(values.get("gamma_f", 0.0)),
        gamma_u=float(values.get("gamma_u", 0.0)),
        omega0=tuple(omega0) if omega0 is not None else None,
        fine_factor=int(values.get("fine_factor", 8)),
    )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PARASRC_THREADS", "1")))
    except ValueError:
        return 1


def _cmd_run(args) -> int:
    config = _make_config(args)
    report = run_reconstruction(config)
    out = args.out / "run.csv"
    write_reports_csv([report], out)
    print(f"error={report.error:.6e} cond={report.cond:.3e} -> {out}")
    return 0


def _cmd_ladder(args) -> int:
    base = _make_config(args)
    example = int(base.example)
    rungs = _LADDERS.get(example, _LADDERS[1])[: args.rungs]
    if len(rungs) < args.rungs:
        # extend the tabulated ladder by halving
        while len(rungs) < args.rungs:
            h, t = rungs[-1]
            rungs.append((2 * h, 2 * t))
    configs = [
        ProblemConfig(example=example, h=1.0 / h, tau=1.0 / t, mode=base.mode,
                      delta=base.delta, seed=base.seed, gamma_f=base.gamma_f,
                      gamma_u=base.gamma_u, omega0=base.omega0,
                      fine_factor=base.fine_factor)
        for h, t in rungs
    ]
    reports = convergence_study(configs)
    out = args.out / f"ladder_example{example}.csv"
    write_reports_csv(reports, out)
    for r in reports:
        order = "" if r.order is None else f" order={r.order:.3f}"
        print(f"h=1/{round(1/r.h)} tau=1/{round(1/r.tau)} "
              f"error={r.error:.6e}{order}")
    print(f"-> {out}")
    return 0


def _cmd_noise_study(args) -> int:
    config = _make_config(args)
    if args.h is None and args.config is None and config.example in EXAMPLE_DELTA_GRIDS:
        h, tau = EXAMPLE_DELTA_GRIDS[config.example]
        config = ProblemConfig(**{**config.__dict__, "h": h, "tau": tau})
    study = delta_study(config, args.deltas, list(range(args.seeds)))
    out = args.out / f"noise_example{config.example}.csv"
    with open(out, "w") as fh:
        fh.write("delta,mean_error,slope\n")
        for d, e in zip(study.deltas, study.mean_errors):
            fh.write(f"{d:.12e},{e:.12e},{study.slope:.6f}\n")
    gp = args.out / f"noise_example{config.example}.gp"
    gp.write_text(_GNUPLOT.format(csv=out.name))
    print(f"slope={study.slope:.3f} -> {out} (+ {gp.name})")
    return 0


def _cmd_export_matrix(args) -> int:
    from .assembly import export_matrix
    from .inverse import _RunContext, _assemble, _make_data, _resolve

    config = _make_config(args)
    prob = _resolve(config)
    ctx = _RunContext(config, prob)
    data = _make_data(config, prob, ctx)
    blocks = _assemble(config, ctx, data)
    out = args.out / "system_matrix.txt"
    export_matrix(blocks, out)
    print(f"{blocks.n_total} dofs -> {out}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "ladder": _cmd_ladder,
    "noise-study": _cmd_noise_study,
    "export-matrix": _cmd_export_matrix,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    np.seterr(over="raise", invalid="raise")
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return _COMMANDS[args.command](args)
    except (SingularSystemError, IllConditionedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
