"""Command-line entry point: ``kincrowd simulate | make-synthetic | estimate | compare``.

Exit codes: 0 success, 2 configuration or grid error, 3 numerical or
stability error, 4 I/O error. Every command computes first and writes
afterwards, manifest last, so a failing run leaves no manifest behind.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config, manifest_text
from .directions import DirectionSet
from .errors import ConfigurationError, DomainError, GridMismatchError, StabilityError
from .forward import run_forward
from .geometry import build_geometry
from .inverse import DescentConfig, estimate
from .kernels import BACKEND
from .scenarios import PRESETS, initial_state, synthetic_run, time_grid

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.cfg"
SYNTHETIC_SUBDIR = "synthetic"

# flag -> RunConfig key(s)
FLAG_KEYS = {
    "preset": ("preset",), "eps": ("eps",), "eps0": ("eps0",), "eps_ref": ("eps_ref",),
    "xi": ("xi",), "delta": ("delta",), "tol": ("tol",), "max_iters": ("max_iters",),
    "dt": ("dt_s",), "dx": ("dx_mm", "dy_mm"), "dy": ("dy_mm",), "horizon": ("horizon_s",),
    "snapshot_times": ("snapshot_times",), "threads": ("threads",),
    "deterministic": ("deterministic",), "cfl_override": ("cfl_override",),
    "update_sign": ("update_sign",), "observations": ("observations",), "stride": ("stride",),
    "quantize": ("quantize",), "n_d": ("n_d",), "seed": ("seed",), "clamp_mode": ("clamp_mode",),
    "out": ("out",),
}


def _times(text: str):
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad time list {text!r}") from exc


def _run_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("run configuration")
    g.add_argument("--preset", choices=PRESETS)
    g.add_argument("--config", help="flat key = value file (a manifest also works)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--eps", type=float, help="uniform stress level of forward/synthetic runs")
    g.add_argument("--eps0", type=float, help="initial stress guess of the estimation")
    g.add_argument("--eps-ref", type=float)
    g.add_argument("--xi", type=float, help="regularisation weight")
    g.add_argument("--delta", type=float, help="descent step length")
    g.add_argument("--tol", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--dt", type=float, help="time step in seconds")
    g.add_argument("--dx", type=float, help="cell size in mm (sets dy too unless --dy)")
    g.add_argument("--dy", type=float)
    g.add_argument("--horizon", type=float, help="final time in seconds")
    g.add_argument("--snapshot-times", type=_times, help="seconds, e.g. '5 10 20'")
    g.add_argument("--stride", type=int, help="solver steps per observation frame")
    g.add_argument("--quantize", type=float, help="round synthetic frames to this step")
    g.add_argument("--n-d", type=int, help="number of walking directions")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction)
    g.add_argument("--cfl-override", action=argparse.BooleanOptionalAction)
    g.add_argument("--clamp-mode", action=argparse.BooleanOptionalAction)
    g.add_argument("--update-sign", choices=("fixed-point", "descent"))
    g.add_argument("--observations", help="observation directory (estimate only)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kincrowd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _run_flags()
    sub.add_parser("simulate", parents=[flags], help="forward run at uniform stress")
    sub.add_parser("make-synthetic", parents=[flags], help="write synthetic observation frames")
    sub.add_parser("estimate", parents=[flags], help="recover the stress field")
    cmp_ = sub.add_parser("compare", help="density and occupancy differences of two runs")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("--out", default="compare")
    return parser


def resolve_config(args) -> RunConfig:
    """Defaults, then ``--config``, then explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    given = vars(args)
    changes = {}
    for flag, keys in FLAG_KEYS.items():
        if flag in given:
            for k in keys:
                if flag == "dx" and "dy" in given and k == "dy_mm":
                    continue
                changes[k] = given[flag]
    for k, v in changes.items():
        setattr(cfg, k, v)
    return cfg.validate().effective()


# ---------------------------------------------------------------------------
# output helpers


def check_writable(out) -> Path:
    """Fail early (OSError) if ``out`` cannot be created or written."""
    out = Path(out)
    probe = out
    while not probe.exists():
        if probe.parent == probe:
            break
        probe = probe.parent
    if not probe.is_dir():
        raise NotADirectoryError(f"{probe} is not a directory")
    if not os.access(probe, os.W_OK | os.X_OK):
        raise PermissionError(f"{probe} is not writable")
    return out


def _snapshot_name(field: str, t_s: float) -> str:
    return f"{field}_{t_s:010.4f}s.csv"


def _steps_for_times(times_s, dt_s: float, horizon_s: float) -> list[int]:
    steps = []
    for t in sorted(set(times_s)):
        if t > horizon_s + 1e-9:
            continue
        k = int(round(t / dt_s))
        if abs(k * dt_s - t) > 1e-9 * max(1.0, t):
            raise ConfigurationError(f"snapshot time {t} s is not a multiple of dt = {dt_s} s")
        steps.append(k)
    return steps


def _setup(cfg: RunConfig):
    spec = cfg.scenario()
    grid = build_geometry(spec, DirectionSet(cfg.n_d))
    return spec, grid, initial_state(spec, grid), time_grid(spec, cfg.stride)


def _write_manifest(out: Path, cfg: RunConfig, command: str, **extra):
    extra = {"backend": BACKEND, **extra}
    io.write_text_atomic(out / MANIFEST, manifest_text(cfg, command, extra))


def _occupancy_rows(step_times, occupancy, exited, T):
    return [(float(t * T), float(o), float(e)) for t, o, e in zip(step_times, occupancy, exited)]


# ---------------------------------------------------------------------------
# commands


class Command:
    """One CLI command; ``stage`` names the part running when an error occurs."""

    def __init__(self, name: str, cfg: RunConfig | None):
        self.name = name
        self.cfg = cfg
        self.stage = "setup"

    def run(self, args) -> int:
        return getattr(self, "do_" + self.name.replace("-", "_"))(args)

    def do_simulate(self, args) -> int:
        cfg = self.cfg
        self.stage = "output directory"
        out = check_writable(cfg.out)
        self.stage = "setup"
        spec, grid, f0, tg = _setup(cfg)
        snap_steps = [0] + [k for k in _steps_for_times(cfg.snapshot_times, spec.dt_s,
                                                         spec.horizon_s) if k > 0]
        self.stage = "forward solve"
        traj = run_forward(f0, cfg.eps, grid, time_grid(spec), cfl_override=spec.cfl_override,
                           clamp=cfg.clamp_mode, threads=cfg.kernel_threads)
        self.stage = "writing outputs"
        T = grid.spec.reference_time_s
        out.mkdir(parents=True, exist_ok=True)
        for k in snap_steps:
            t_s = k * spec.dt_s
            io.write_snapshot(out / _snapshot_name("density", t_s), traj.densities[k],
                              time_s=t_s, field="density", scenario=spec.name,
                              dx=grid.spec.dx, dy=grid.spec.dy, mask=grid.active)
        io.write_csv_atomic(out / "occupancy.csv", ["time_s", "occupancy", "exited"],
                            _occupancy_rows(traj.step_times, traj.occupancy, traj.exited, T))
        exit50 = traj.exit_time(50.0)
        _write_manifest(out, cfg, self.name, exit_time_50_s=exit50,
                        final_occupancy=float(traj.occupancy[-1]))
        print(f"simulate: {len(snap_steps)} snapshots, final occupancy "
              f"{traj.occupancy[-1]:.2f}, 50th exit at {exit50:.2f} s -> {out}")
        return EXIT_OK

    def do_make_synthetic(self, args) -> int:
        cfg = self.cfg
        self.stage = "output directory"
        out = check_writable(cfg.out)
        self.stage = "setup"
        spec, grid, f0, tg = _setup(cfg)
        self.stage = "forward solve"
        series, traj = self._synthetic(spec, grid, f0, tg)
        self.stage = "writing outputs"
        self._write_synthetic(out, spec, grid, series, traj)
        _write_manifest(out, cfg, self.name, frames=len(series))
        print(f"make-synthetic: {len(series)} frames at eps = {cfg.eps} -> {out}")
        return EXIT_OK

    def _synthetic(self, spec, grid, f0, tg):
        return synthetic_run(spec, self.cfg.eps, tg, grid=grid, f0=f0, quantize=self.cfg.quantize,
                             threads=self.cfg.kernel_threads)

    def _write_synthetic(self, out: Path, spec, grid, series, traj):
        out.mkdir(parents=True, exist_ok=True)
        T = grid.spec.reference_time_s
        io.write_observations(out, series, scenario=spec.name, spec=grid.spec,
                              reference_time_s=T, mask=grid.active)
        io.write_csv_atomic(out / "occupancy.csv", ["time_s", "occupancy", "exited"],
                            _occupancy_rows(traj.step_times, traj.occupancy, traj.exited, T))

    def do_estimate(self, args) -> int:
        cfg = self.cfg
        self.stage = "output directory"
        out = check_writable(cfg.out)
        self.stage = "setup"
        spec, grid, f0, tg = _setup(cfg)
        T = grid.spec.reference_time_s
        synthetic = None
        if cfg.observations:
            self.stage = "reading observations"
            obs = io.read_observations(cfg.observations, grid.spec, T, tg.dt, cfg.stride)
        else:
            self.stage = "synthetic data"
            obs, traj = self._synthetic(spec, grid, f0, tg)
            synthetic = (obs, traj)
        dcfg = DescentConfig(delta=cfg.delta, xi=cfg.xi, eps_ref=cfg.eps_ref, tol=cfg.tol,
                             max_iters=cfg.max_iters, eps0=cfg.eps0,
                             update_sign=cfg.update_sign)
        self.stage = "estimation"
        res = estimate(f0, obs, grid, tg, dcfg, cfl_override=spec.cfl_override,
                       clamp=cfg.clamp_mode, threads=cfg.kernel_threads)
        self.stage = "writing outputs"
        out.mkdir(parents=True, exist_ok=True)
        if synthetic is not None:
            self._write_synthetic(out / SYNTHETIC_SUBDIR, spec, grid, *synthetic)
        meta = dict(scenario=spec.name, dx=grid.spec.dx, dy=grid.spec.dy, mask=grid.active)
        for t, eps_field, rho in zip(res.times, res.eps_history, res.rho_history):
            t_s = float(t * T)
            io.write_snapshot(out / _snapshot_name("stress", t_s), eps_field, time_s=t_s,
                              field="stress", **meta)
            io.write_snapshot(out / _snapshot_name("density", t_s), rho, time_s=t_s,
                              field="density", **meta)
        times_s = res.times * T
        io.write_csv_atomic(
            out / "functional.csv", ["time_s", "mismatch", "regularization", "functional"],
            [(float(t), float(j), float(r), float(j + r)) for t, j, r in
             zip(times_s, res.mismatch_series, res.regularization_series)])
        occ_t = np.concatenate([[0.0], times_s])
        io.write_csv_atomic(out / "occupancy.csv", ["time_s", "occupancy"],
                            [(float(t), float(o)) for t, o in zip(occ_t, res.occupancy)])
        io.write_csv_atomic(
            out / "iterations.csv", ["time_s", "iterations", "residual", "converged"],
            [(float(t), int(i), float(r), int(c)) for t, i, r, c in
             zip(times_s, res.iterations_per_step, res.residual_per_step, res.converged)])
        observed = res.mismatch_series[res.observed]
        _write_manifest(out, cfg, self.name,
                        max_mismatch=float(observed.max()) if observed.size else math.nan,
                        unconverged_steps=int((~res.converged).sum()))
        print(f"estimate: {res.times.size} steps, max mismatch "
              f"{observed.max() if observed.size else math.nan:.3e}, final occupancy "
              f"{res.occupancy[-1]:.2f} -> {out}")
        return EXIT_OK

    def do_compare(self, args) -> int:
        a, b = Path(args.run_a), Path(args.run_b)
        self.stage = "output directory"
        out = check_writable(args.out)
        self.stage = "reading runs"
        for d in (a, b):
            if not d.is_dir():
                raise ConfigurationError(f"{d} is not a run directory")
        snaps_a, snaps_b = io.list_snapshots(a), io.list_snapshots(b)
        common = sorted(set(snaps_a) & set(snaps_b))
        if not common:
            raise ConfigurationError(f"{a} and {b} share no density snapshot times")
        rows = []
        for t in common:
            sa, sb = io.read_snapshot(snaps_a[t]), io.read_snapshot(snaps_b[t])
            if (sa.nx, sa.ny, sa.dx, sa.dy) != (sb.nx, sb.ny, sb.dx, sb.dy):
                raise GridMismatchError(f"t = {t} s: grids {sa.ny}x{sa.nx} and {sb.ny}x{sb.nx} "
                                        "differ")
            diff = np.nan_to_num(sa.values) - np.nan_to_num(sb.values)
            rows.append((float(t), float(np.sqrt(np.sum(diff**2) * sa.dx * sa.dy))))
        l2 = np.array([r[1] for r in rows])
        t_final = common[-1]
        occ_a, occ_b = _occupancy_at(a, t_final), _occupancy_at(b, t_final)
        self.stage = "writing outputs"
        out.mkdir(parents=True, exist_ok=True)
        io.write_csv_atomic(out / "difference.csv", ["time_s", "l2_difference"], rows)
        io.write_csv_atomic(out / "summary.csv", ["quantity", "value"], [
            ("max_l2_difference", float(l2.max())),
            ("mean_l2_difference", float(l2.mean())),
            ("final_time_s", float(t_final)),
            ("occupancy_a", occ_a),
            ("occupancy_b", occ_b),
            ("occupancy_gap", abs(occ_a - occ_b)),
        ])
        print(f"compare: {len(common)} common times, max L2 {l2.max():.3e}, occupancy gap "
              f"at {t_final:g} s = {abs(occ_a - occ_b):.2f} -> {out}")
        return EXIT_OK


def _occupancy_at(run: Path, t_s: float) -> float:
    path = run / "occupancy.csv"
    if not path.is_file():
        return math.nan
    header, rows = io.read_csv(path)
    try:
        col = header.index("occupancy")
        for r in rows:
            if abs(float(r[0]) - t_s) <= 1e-6:
                return float(r[col])
    except (ValueError, IndexError) as exc:
        raise ConfigurationError(f"{path}: malformed occupancy table") from exc
    raise ConfigurationError(f"{path}: no occupancy at t = {t_s} s")


def _format_warning(message, category, filename, lineno, line=None):
    return f"kincrowd: warning: {message}\n"


def main(argv=None) -> int:
    warnings.formatwarning = _format_warning
    parser = build_parser()
    args = parser.parse_args(argv)
    cmd = Command(args.command, None)
    try:
        if args.command != "compare":
            cmd.stage = "configuration"
            cmd.cfg = resolve_config(args)
            if args.command != "estimate" and cmd.cfg.observations:
                raise ConfigurationError("--observations is only used by estimate")
            cmd.stage = "setup"
        return cmd.run(args)
    except (StabilityError, DomainError, FloatingPointError) as exc:
        code = EXIT_NUMERIC
        err = exc
    except (ConfigurationError, GridMismatchError) as exc:
        code = EXIT_CONFIG
        err = exc
    except OSError as exc:
        code = EXIT_IO
        err = exc
    print(f"kincrowd {args.command}: {cmd.stage} failed: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
