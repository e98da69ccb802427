"""Time the compiled and pure-numpy kernels on the circle scenario.

    python benchmarks/bench_kernels.py [--repeat N] [--preset NAME]

Reports per-call kernel timings and a full forward run per backend, and
checks that both backends produce the same trajectory.
"""

from __future__ import annotations

import argparse
import time
import warnings

import numpy as np

from kincrowd import kernels
from kincrowd.forward import ForwardModel, run_forward
from kincrowd.scenarios import build, preset, time_grid


def best_of(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--preset", default="circle")
    args = ap.parse_args(argv)
    warnings.simplefilter("ignore")

    spec = preset(args.preset)
    grid, f0 = build(spec)
    tg = time_grid(spec)
    model = ForwardModel(grid, tg.dt, cfl_override=True)
    # a mid-run state: every direction populated, so no zero products are skipped
    f_mid = run_forward(f0, 0.95, grid, time_grid(spec.with_overrides(horizon_s=5.0)),
                        model=model).final_state
    ctx = model.prepare(f_mid)
    eps = np.full(model.n_cells, 0.95)
    tr = model.transport
    fp, rp = tr._pad(f_mid, f_mid.sum(axis=0))

    finals = {}
    print(f"{'backend':8s} {'rates [ms]':>11s} {'transport [ms]':>15s} {'forward run [s]':>16s}")
    for name, mod in kernels.available_backends().items():
        t_rates = best_of(lambda: mod.interaction_rates(ctx.F, ctx.C, eps, grid.directions),
                          args.repeat)
        t_trans = best_of(lambda: mod.link_transport(fp, rp, tr.src, tr.dst, tr.dirn, tr.rate,
                                                     tr.is_sink, model.dt), args.repeat)
        with kernels.use_backend(name):
            t0 = time.perf_counter()
            traj = run_forward(f0, 0.95, grid, tg, cfl_override=True)
            t_run = time.perf_counter() - t0
        finals[name] = traj.final_state
        print(f"{name:8s} {1e3 * t_rates:11.3f} {1e3 * t_trans:15.3f} {t_run:16.3f}")
    if len(finals) == 2:
        gap = np.abs(finals["cython"] - finals["python"]).max()
        print(f"max |cython - python| after {tg.n_steps} steps: {gap:.3e}")


if __name__ == "__main__":
    main()
