"""One structured run configuration (INI) shared by every subcommand.

Validation is collected, not fail-fast: a bad config reports every
violated field at once.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .agent import AgentConfig
from .errors import ConfigError
from .model import ModelConfig
from .raster import RasterConfig
from .trainer import TrainerConfig

_SCHEMA = {
    "simworld": {"town", "dt", "grid", "meters_per_cell"},
    "dataset": {"towns", "episodes", "val_episodes", "tau", "horizon", "stride",
                "vehicles", "pedestrians", "step_cap", "seed",
                "train_path", "val_path"},
    "model": {"enc_dim", "ctx_dim", "hidden_dim", "sigma_min"},
    "trainer": {"workers", "batch", "epochs", "epoch_mode", "lr", "optimizer",
                "seed", "checkpoint_every", "validate_every", "out_dir"},
    "agent": {"candidates", "goal_weight", "lookahead", "heading_gain",
              "speed_gain", "replan_every", "seed"},
    "benchmark": {"suite", "out", "traces"},
}


@dataclass
class DatasetSection:
    towns: tuple = (1, 2, 3)
    episodes: int = 108
    val_episodes: int = 18
    tau: int = 4
    horizon: int = 10
    stride: int = 5
    vehicles: int = 10
    pedestrians: int = 2
    step_cap: int = 400
    seed: int = 42
    train_path: str = "out/train.bin"
    val_path: str = "out/val.bin"


@dataclass
class RunConfig:
    town: int = 1
    dt: float = 0.1
    raster: RasterConfig = field(default_factory=lambda: RasterConfig(32, 1.0))
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    trainer_out: str = "out/run"
    suite: str = "default"
    results_out: str = "out/results.csv"
    traces_out: str = ""


def _get(parser, section, key, cast, default, errors):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes")
        return cast(raw)
    except ValueError:
        errors.append(f"[{section}] {key}: cannot parse {raw!r}")
        return default


def load_run_config(path) -> RunConfig:
    """Parse and cross-validate; raises ConfigError listing every issue."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or unreadable")

    errors = []
    for section in parser.sections():
        if section not in _SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for key in parser.options(section):
            if key not in _SCHEMA[section]:
                errors.append(f"[{section}] unknown key {key!r}")

    town = _get(parser, "simworld", "town", int, 1, errors)
    dt = _get(parser, "simworld", "dt", float, 0.1, errors)
    grid = _get(parser, "simworld", "grid", int, 32, errors)
    mpc = _get(parser, "simworld", "meters_per_cell", float, 1.0, errors)

    towns_raw = _get(parser, "dataset", "towns", str, "1,2,3", errors)
    try:
        towns = tuple(int(t) for t in str(towns_raw).split(",") if t.strip())
    except ValueError:
        errors.append(f"[dataset] towns: cannot parse {towns_raw!r}")
        towns = (1,)
    ds = DatasetSection(
        towns=towns,
        episodes=_get(parser, "dataset", "episodes", int, 108, errors),
        val_episodes=_get(parser, "dataset", "val_episodes", int, 18, errors),
        tau=_get(parser, "dataset", "tau", int, 4, errors),
        horizon=_get(parser, "dataset", "horizon", int, 10, errors),
        stride=_get(parser, "dataset", "stride", int, 5, errors),
        vehicles=_get(parser, "dataset", "vehicles", int, 10, errors),
        pedestrians=_get(parser, "dataset", "pedestrians", int, 2, errors),
        step_cap=_get(parser, "dataset", "step_cap", int, 400, errors),
        seed=_get(parser, "dataset", "seed", int, 42, errors),
        train_path=_get(parser, "dataset", "train_path", str, "out/train.bin", errors),
        val_path=_get(parser, "dataset", "val_path", str, "out/val.bin", errors),
    )

    for label, val, low in (
        ("[simworld] town", town, 1), ("[dataset] episodes", ds.episodes, 1),
        ("[dataset] horizon", ds.horizon, 1), ("[dataset] stride", ds.stride, 1),
        ("[dataset] step_cap", ds.step_cap, 1),
    ):
        if val < low:
            errors.append(f"{label} must be >= {low}, got {val}")
    if town not in (1, 2, 3):
        errors.append(f"[simworld] town must be 1, 2 or 3, got {town}")
    if any(t not in (1, 2, 3) for t in ds.towns):
        errors.append(f"[dataset] towns must be drawn from 1,2,3, got {ds.towns}")
    if ds.tau < 0:
        errors.append(f"[dataset] tau must be >= 0, got {ds.tau}")
    if dt <= 0:
        errors.append(f"[simworld] dt must be > 0, got {dt}")

    raster = None
    try:
        raster = RasterConfig(grid, mpc)
    except ValueError as exc:
        errors.append(f"[simworld] grid: {exc}")

    model = None
    try:
        model = ModelConfig(
            tau=ds.tau, horizon=ds.horizon, grid_size=grid,
            enc_dim=_get(parser, "model", "enc_dim", int, 32, errors),
            ctx_dim=_get(parser, "model", "ctx_dim", int, 64, errors),
            hidden_dim=_get(parser, "model", "hidden_dim", int, 64, errors),
            sigma_min=_get(parser, "model", "sigma_min", float, 1e-3, errors),
        )
    except ValueError as exc:
        errors.append(f"[model] {exc}")

    trainer = None
    try:
        trainer = TrainerConfig(
            num_workers=_get(parser, "trainer", "workers", int, 1, errors),
            batch_size=_get(parser, "trainer", "batch", int, 128, errors),
            epochs=_get(parser, "trainer", "epochs", int, 1, errors),
            epoch_mode=_get(parser, "trainer", "epoch_mode", str, "split", errors),
            learning_rate=_get(parser, "trainer", "lr", float, 1e-3, errors),
            optimizer=_get(parser, "trainer", "optimizer", str, "adam", errors),
            seed=_get(parser, "trainer", "seed", int, 0, errors),
            checkpoint_every=_get(parser, "trainer", "checkpoint_every", int, 0, errors),
            validate_every=_get(parser, "trainer", "validate_every", int, 1, errors),
        )
    except ValueError as exc:
        errors.append(f"[trainer] {exc}")

    agent = None
    try:
        agent = AgentConfig(
            num_candidates=_get(parser, "agent", "candidates", int, 12, errors),
            goal_weight=_get(parser, "agent", "goal_weight", float, 1.0, errors),
            lookahead=_get(parser, "agent", "lookahead", int, 4, errors),
            heading_gain=_get(parser, "agent", "heading_gain", float, 2.0, errors),
            speed_gain=_get(parser, "agent", "speed_gain", float, 0.9, errors),
            replan_every=_get(parser, "agent", "replan_every", int, 2, errors),
            dt=dt,
            seed=_get(parser, "agent", "seed", int, 0, errors),
        )
    except ValueError as exc:
        errors.append(f"[agent] {exc}")

    if agent is not None and agent.lookahead > ds.horizon:
        errors.append(
            f"[agent] lookahead {agent.lookahead} exceeds [dataset] horizon {ds.horizon}"
        )

    if errors:
        raise ConfigError("config validation failed:\n  " + "\n  ".join(errors))

    return RunConfig(
        town=town, dt=dt, raster=raster, dataset=ds, model=model,
        trainer=trainer, agent=agent,
        trainer_out=_get(parser, "trainer", "out_dir", str, "out/run", []),
        suite=_get(parser, "benchmark", "suite", str, "default", []),
        results_out=_get(parser, "benchmark", "out", str, "out/results.csv", []),
        traces_out=_get(parser, "benchmark", "traces", str, "", []),
    )
