#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

Usage:
    python scripts/bench_backends.py [--repeats N]

Covers the two hot paths: ego-centric rasterization and the fused
NLL-gradient of the trajectory model. ``DRIVERIG_NO_NUMBA=1`` selects the
numpy path at import time in production; here both are timed explicitly.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from driverig.backend import NUMBA_AVAILABLE
from driverig.dataset import SampleSet
from driverig.model import ModelConfig, init_params, nll_loss
from driverig.raster import RasterConfig, render_observation
from driverig.world import load_town, make_world


def timeit(fn, repeats):
    fn()   # warm-up (and jit compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_raster(repeats):
    town = load_town(3)
    world = make_world(town, 30, 6, seed=1, ego_spawn=20)
    rows = []
    for grid, mpc in ((32, 1.0), (200, 0.25)):
        cfg = RasterConfig(grid, mpc)
        t_np = timeit(lambda: render_observation(world, cfg, backend="numpy"), repeats)
        if NUMBA_AVAILABLE:
            t_nb = timeit(lambda: render_observation(world, cfg, backend="numba"), repeats)
        else:
            t_nb = float("nan")
        rows.append((f"raster {grid}x{grid}", t_np, t_nb))
    return rows


def bench_model_grad(repeats):
    cfg = ModelConfig(tau=4, horizon=10, grid_size=32)
    rng = np.random.default_rng(0)
    n = 128
    batch = SampleSet(
        rng.normal(0, 1, (n, cfg.tau + 1, 2)).astype(np.float32),
        rng.uniform(0, 1, (n, 32, 32, 2)).astype(np.float32),
        np.column_stack([rng.uniform(0, 8, n), rng.integers(0, 2, n),
                         rng.integers(0, 4, n)]).astype(np.float32),
        rng.normal(0, 1.5, (n, cfg.horizon, 2)).astype(np.float32),
    )
    params = init_params(cfg, 0)
    t_np = timeit(lambda: nll_loss(params, cfg, batch, backend="numpy"), repeats)
    if NUMBA_AVAILABLE:
        t_nb = timeit(lambda: nll_loss(params, cfg, batch, backend="numba"), repeats)
    else:
        t_nb = float("nan")
    return [("nll grad, batch 128", t_np, t_nb)]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if not NUMBA_AVAILABLE:
        print("numba unavailable: timing the numpy path only")
    rows = bench_raster(args.repeats) + bench_model_grad(args.repeats)
    print(f"{'kernel':<24}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, t_np, t_nb in rows:
        speed = t_np / t_nb if t_nb == t_nb else float("nan")
        print(f"{name:<24}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{speed:>9.1f}x")


if __name__ == "__main__":
    main()
