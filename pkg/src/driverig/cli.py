"""Command-line entry point: collect -> train -> benchmark -> replay.

All randomness flows from config seeds, so a config file fully
determines every output byte. ``RIG_LOG_LEVEL`` (error/info/debug)
controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import dataset as ds
from .agent import AgentConfig, WaypointAgent
from .benchmark import AgentDriver, default_suite, load_scenario, run_suite, write_results_csv
from .errors import ConfigError, DriverigError
from .runconfig import load_run_config
from .trainer import TrainerState, config_digest, fit, load_checkpoint, save_checkpoint
from .world import read_trace_csv

log = logging.getLogger("driverig")


def _setup_logging():
    level = os.environ.get("RIG_LOG_LEVEL", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"RIG_LOG_LEVEL must be one of error/info/debug, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(message)s")


def _resolve(path, out_dir):
    """--out DIR redirects any configured output path into DIR."""
    if out_dir:
        return os.path.join(out_dir, os.path.basename(path))
    return path


def _split_episodes(total, towns):
    base, rem = divmod(total, len(towns))
    return {t: base + (1 if i < rem else 0) for i, t in enumerate(towns)}


def cmd_collect(cfg, out_dir=None, seed=None) -> int:
    d = cfg.dataset
    seed = d.seed if seed is None else seed
    train_path = _resolve(d.train_path, out_dir)
    val_path = _resolve(d.val_path, out_dir)
    for p in (train_path, val_path):
        parent = os.path.dirname(p)
        if parent:
            os.makedirs(parent, exist_ok=True)

    def gather(episode_count, seed_base):
        parts = []
        for town, count in _split_episodes(episode_count, d.towns).items():
            if count == 0:
                continue
            traces = ds.collect_iter(
                town, count, seed_base + town, raster=cfg.raster,
                vehicles=d.vehicles, pedestrians=d.pedestrians,
                step_cap=d.step_cap,
            )
            parts.append(ds.process(traces, d.tau, d.horizon, d.stride))
            log.info("collected town %d: %d samples", town, len(parts[-1]))
        out = ds.SampleSet.concatenate(parts)
        out.collection_seed = seed_base
        return out

    train = gather(d.episodes, seed)
    val = gather(d.val_episodes, seed + 1_000_000)
    ds.write_dataset(train, train_path)
    ds.write_dataset(val, val_path)
    log.info("wrote %s (%d samples) and %s (%d samples)",
             train_path, len(train), val_path, len(val))
    return 0


def cmd_train(cfg, out_dir=None, seed=None) -> int:
    d = cfg.dataset
    run_dir = out_dir or cfg.trainer_out
    os.makedirs(run_dir, exist_ok=True)
    train = ds.read_dataset(_resolve(d.train_path, out_dir))
    val = ds.read_dataset(_resolve(d.val_path, out_dir))
    for name, data in (("train", train), ("validation", val)):
        if (data.tau, data.horizon, data.grid_size) != (d.tau, d.horizon, cfg.raster.grid_size):
            raise ConfigError(
                f"{name} dataset geometry (tau={data.tau}, horizon={data.horizon}, "
                f"grid={data.grid_size}) does not match the config "
                f"(tau={d.tau}, horizon={d.horizon}, grid={cfg.raster.grid_size})"
            )
    tc = cfg.trainer
    if seed is not None:
        from dataclasses import replace
        tc = replace(tc, seed=seed)
    result = fit(tc, cfg.model, train, val, checkpoint_dir=run_dir)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    result.metrics.write_csv(metrics_path)
    final = os.path.join(run_dir, "checkpoint.bin")
    state = TrainerState(result.params, tc.optimizer, {},
                         tc.epochs, 0, config_digest(tc, cfg.model), cfg.model)
    save_checkpoint(0, state, final)
    last = result.metrics.rows[-1]
    log.info("trained %d epochs: train %.4f val %.4f; wrote %s and %s",
             tc.epochs, last.train_nll, last.val_nll, metrics_path, final)
    return 0


def cmd_benchmark(cfg, checkpoint, out_dir=None, seed=None) -> int:
    if checkpoint is None:
        raise ConfigError("benchmark requires --checkpoint")
    state = load_checkpoint(checkpoint)
    if state.model_config.grid_size != cfg.raster.grid_size:
        raise ConfigError(
            f"checkpoint grid {state.model_config.grid_size} does not match "
            f"[simworld] grid {cfg.raster.grid_size}"
        )
    agent_cfg = cfg.agent
    if seed is not None:
        from dataclasses import replace
        agent_cfg = replace(agent_cfg, seed=seed)
    if cfg.suite == "default":
        suite = default_suite()
    else:
        names = sorted(f for f in os.listdir(cfg.suite) if f.endswith(".json"))
        suite = [(os.path.splitext(n)[0], load_scenario(os.path.join(cfg.suite, n)))
                 for n in names]
    results_path = _resolve(cfg.results_out, out_dir)
    parent = os.path.dirname(results_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    trace_dir = None
    if cfg.traces_out:
        trace_dir = _resolve(cfg.traces_out, out_dir)
        os.makedirs(trace_dir, exist_ok=True)

    def factory():
        return AgentDriver(WaypointAgent(state.params, state.model_config, agent_cfg))

    results = run_suite(factory, suite=suite, raster=cfg.raster, trace_dir=trace_dir)
    write_results_csv(results, results_path)
    clean = sum(1 for r in results
                if r.reached_goal and r.collisions == 0 and r.lane_invasions == 0)
    log.info("benchmark: %d/%d scenarios clean; wrote %s",
             clean, len(results), results_path)
    return 0


def cmd_replay(trace_path, out_path) -> int:
    rows = read_trace_csv(trace_path)
    if out_path is None:
        base, _ = os.path.splitext(trace_path)
        out_path = base + "_plot.csv"
    cum = 0.0
    last = None
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("step,time,x,y,heading,speed,plan_x,plan_y,cum_distance,"
                "collisions,lane_invasions\n")
        for i, r in enumerate(rows):
            t, x, y, heading, speed = r[0], r[1], r[2], r[3], r[4]
            col, inv, plan_x, plan_y = r[8], r[9], r[10], r[11]
            if last is not None:
                cum += float(np.hypot(x - last[0], y - last[1]))
            last = (x, y)
            px = f"{plan_x:.6f}" if plan_x is not None else ""
            py = f"{plan_y:.6f}" if plan_y is not None else ""
            f.write(f"{i},{t:.3f},{x:.6f},{y:.6f},{heading:.6f},{speed:.6f},"
                    f"{px},{py},{cum:.6f},{int(col)},{int(inv)}\n")
    log.info("wrote %s (%d rows)", out_path, len(rows))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="driverig",
        description="2D driving-imitation rig: collect demonstrations, train "
                    "the trajectory model, benchmark the agent, export replays.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("collect", "train", "benchmark"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config (INI)")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if name == "benchmark":
            p.add_argument("--checkpoint", default=None, help="trained model checkpoint")
    p = sub.add_parser("replay")
    p.add_argument("trace", help="episode trace CSV")
    p.add_argument("--out", default=None, help="plot-data CSV path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.command == "replay":
            return cmd_replay(args.trace, args.out)
        cfg = load_run_config(args.config)
        if args.command == "collect":
            return cmd_collect(cfg, args.out, args.seed)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.seed)
        return cmd_benchmark(cfg, args.checkpoint, args.out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DriverigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
