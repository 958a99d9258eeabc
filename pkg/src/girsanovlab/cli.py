"""Command-line front end.

Subcommands:

``run <config>``
    Execute the experiment named in the config, write its CSV report, and
    print one summary line per built-in threshold check.  Exit 0 iff all
    checks pass.

``verify``
    Run the twelve-point acceptance suite, print one PASS/FAIL line per
    criterion, write each criterion's CSV artifacts, and exit 0 iff all
    criteria pass.

``dump-path <config>``
    Print (or write) every trajectory array of one simulated path as
    deterministic text at 17 significant digits.

``dump-blocks <config>``
    Print (or write) the derivative blocks and log-weight decomposition of
    one simulated path in the same format.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .acceptance import DEFAULT_SEED, AcceptanceSuite
from .config import ConfigError, ExperimentConfig, load_config_file
from .experiments import (
    _build_schedule,
    _draw_initial,
    _simulate_and_drift,
    run,
)
from .girsanov import (
    malliavin_blocks_dmulmc,
    malliavin_blocks_mlmc,
    malliavin_blocks_ulmc,
    rn_log_weight,
)
from .paths import noise_matrix


def _fmt17(value: float) -> str:
    return "%.17g" % float(value)


def _emit_array(lines: list[str], name: str, arr: np.ndarray) -> None:
    flat = np.asarray(arr)
    for idx in np.ndindex(*flat.shape):
        key = ":".join(str(i) for i in idx) if idx else "0"
        if np.issubdtype(flat.dtype, np.integer):
            lines.append(f"{name},{key},{int(flat[idx])}")
        else:
            lines.append(f"{name},{key},{_fmt17(flat[idx])}")


def _path_setup(cfg: ExperimentConfig, path_index: int):
    """Simulate min(path_index + 1) paths and return per-path pieces."""
    potential = cfg.potential
    kinetic = cfg.scheme in ("ulmc", "dmulmc")
    grid = cfg.grids()[0]
    schedule = _build_schedule(cfg.scheme, grid, cfg.schedule_mode, cfg.seed, 0)
    n = path_index + 1
    z0 = _draw_initial(potential, kinetic, cfg.seed, n)
    xi = noise_matrix(cfg.seed, n, grid.n_cells, potential.d)
    traj, drift = _simulate_and_drift(
        cfg.scheme, potential, schedule, grid, cfg.gamma, z0, xi)
    return grid, schedule, z0, xi, traj, drift


def _dump_header(cfg: ExperimentConfig, kind: str, path_index: int,
                 grid) -> list[str]:
    return [
        f"# girsanovlab {kind} dump",
        f"# experiment={cfg.experiment} config_hash={cfg.config_hash} "
        f"seed={cfg.seed} scheme={cfg.scheme} path={path_index}",
        f"# grid T={grid.T:g} N={grid.N} m={grid.m}",
        "array,index,value",
    ]


def _blocks_for(cfg: ExperimentConfig, traj):
    if cfg.scheme in ("em-ld", "mlmc"):
        return malliavin_blocks_mlmc(cfg.potential, traj, q=1.0)
    if cfg.scheme == "ulmc":
        return malliavin_blocks_ulmc(cfg.potential, traj, q=1.0)
    return malliavin_blocks_dmulmc(cfg.potential, traj, q=1.0)


def _write_text(text: str, output: str | None) -> None:
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _cmd_run(args) -> int:
    cfg = load_config_file(args.config)
    result = run(cfg, threads=args.threads, output=args.output)
    for line in result.summary_lines():
        print(line)
    print(f"wrote {result.csv_path} ({len(result.rows)} rows)")
    return 0 if result.passed else 1


def _cmd_verify(args) -> int:
    only = None
    if args.only:
        only = tuple(int(tok) for tok in args.only.replace(",", " ").split())
        bad = [i for i in only if not 1 <= i <= 12]
        if bad:
            raise ConfigError(f"--only criteria must be in 1..12, got {bad}")
    suite = AcceptanceSuite(seed=args.seed, threads=args.threads)
    results = suite.run(only=only)
    os.makedirs(args.output_dir, exist_ok=True)
    for res in results:
        print(res.line, flush=True)
        for name, text in res.artifacts:
            path = os.path.join(args.output_dir, name)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
    n_pass = sum(r.passed for r in results)
    print(f"acceptance: {n_pass}/{len(results)} criteria passed "
          f"(seed {args.seed}, reports in {args.output_dir})")
    return 0 if n_pass == len(results) else 1


def _cmd_dump_path(args) -> int:
    cfg = load_config_file(args.config)
    b = args.path
    grid, schedule, z0, xi, traj, _ = _path_setup(cfg, b)
    lines = _dump_header(cfg, "path", b, grid)
    _emit_array(lines, "z0", z0[b])
    _emit_array(lines, "xi", xi[b])
    if schedule is not None:
        for f in dataclasses.fields(schedule):
            value = getattr(schedule, f.name)
            if isinstance(value, np.ndarray):
                _emit_array(lines, f"schedule.{f.name}", value)
    for f in dataclasses.fields(traj):
        value = getattr(traj, f.name)
        if isinstance(value, np.ndarray) and value.ndim >= 1 \
                and value.shape[0] == xi.shape[0]:
            _emit_array(lines, f.name, value[b])
    _write_text("\n".join(lines) + "\n", args.output)
    return 0


def _cmd_dump_blocks(args) -> int:
    cfg = load_config_file(args.config)
    b = args.path
    grid, schedule, z0, xi, traj, drift = _path_setup(cfg, b)
    blocks = _blocks_for(cfg, traj)
    lw = rn_log_weight(drift, blocks, xi.reshape(xi.shape[0], grid.n_cells, -1))
    lines = _dump_header(cfg, "blocks", b, grid)
    _emit_array(lines, "psi", drift.psi[b])
    _emit_array(lines, "diag", blocks.diag[b])
    for name, value in (
        ("log_cf_det", lw.log_cf_det[b]),
        ("skorohod", lw.skorohod[b]),
        ("energy", lw.energy[b]),
        ("log_weight", lw.log_weight[b]),
        ("spectral_radius", lw.spectral_radius[b]),
    ):
        lines.append(f"{name},0,{_fmt17(value)}")
    _write_text("\n".join(lines) + "\n", args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="girsanovlab",
        description="Midpoint Langevin discretizations with pathwise "
                    "change-of-measure weights: experiments, acceptance "
                    "checks, and deterministic dumps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured experiment")
    p_run.add_argument("config", help="path to a config file")
    p_run.add_argument("--threads", type=int, default=1,
                       help="worker threads (results are thread-invariant)")
    p_run.add_argument("--output", default=None,
                       help="CSV output path (default: config output key, "
                            "else <experiment>.csv)")
    p_run.set_defaults(func=_cmd_run)

    p_ver = sub.add_parser("verify", help="run the acceptance suite")
    p_ver.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help=f"suite seed (default {DEFAULT_SEED})")
    p_ver.add_argument("--threads", type=int, default=1,
                       help="worker threads (results are thread-invariant)")
    p_ver.add_argument("--only", default=None,
                       help="comma-separated criterion numbers, e.g. 1,6,7")
    p_ver.add_argument("--output-dir", default="girsanovlab-verify",
                       help="directory for criterion CSV artifacts")
    p_ver.set_defaults(func=_cmd_verify)

    for name, fn, blurb in (
        ("dump-path", _cmd_dump_path,
         "dump one simulated path's arrays as text"),
        ("dump-blocks", _cmd_dump_blocks,
         "dump one path's derivative blocks and log-weight parts"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("config", help="path to a config file")
        p.add_argument("--path", type=int, default=0,
                       help="path index within the seed's stream (default 0)")
        p.add_argument("--output", default=None,
                       help="output file (default: stdout)")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
