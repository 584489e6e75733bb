from types import SimpleNamespace

import numpy as np
import pytest

from driverig.dataset import SampleSet
from driverig.model import ModelConfig

# the desk-scale reference run shared by the closed-loop and acceptance
# tests; every seed is pinned so the artifacts are identical across runs
DESK_MODEL = ModelConfig(tau=4, horizon=10, grid_size=32, sigma_min=0.02)
DESK_RASTER = dict(grid_size=32, meters_per_cell=1.0)
DESK_COLLECT = dict(vehicles=10, pedestrians=2, step_cap=400)
DESK_EPISODES = 96          # per town, three towns
DESK_VAL_EPISODES = 12
DESK_TRAIN = dict(num_workers=1, batch_size=128, epochs=20,
                  learning_rate=3e-4, seed=2)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Collect the desk dataset and train the reference model, once per
    test session (a few minutes; deterministic)."""
    from driverig import dataset as D
    from driverig import trainer as T
    from driverig.raster import RasterConfig

    raster = RasterConfig(**DESK_RASTER)
    train_parts, val_parts = [], []
    demo_collisions = 0
    for town in (1, 2, 3):
        traces = list(D.collect_iter(town, DESK_EPISODES, seed=42 + town,
                                     raster=raster, **DESK_COLLECT))
        demo_collisions += sum(sum(s.events.collision for s in t.steps)
                               for t in traces)
        train_parts.append(D.process(traces, DESK_MODEL.tau,
                                     DESK_MODEL.horizon, stride=5))
        val_traces = D.collect_iter(town, DESK_VAL_EPISODES, seed=1042 + town,
                                    raster=raster, **DESK_COLLECT)
        val_parts.append(D.process(val_traces, DESK_MODEL.tau,
                                   DESK_MODEL.horizon, stride=5))
    train = D.SampleSet.concatenate(train_parts)
    val = D.SampleSet.concatenate(val_parts)
    cfg = T.TrainerConfig(**DESK_TRAIN)
    result = T.fit(cfg, DESK_MODEL, train, val)
    return SimpleNamespace(
        train=train, val=val, raster=raster, model_config=DESK_MODEL,
        trainer_config=cfg, params=result.params, metrics=result.metrics,
        demo_collisions=demo_collisions,
    )


@pytest.fixture
def tiny_config():
    return ModelConfig(tau=2, horizon=3, grid_size=16, enc_dim=5,
                       ctx_dim=6, hidden_dim=7)


def random_batch(config, n, rng):
    """Random but well-formed samples for gradient/loss tests."""
    pasts = rng.normal(0.0, 1.0, (n, config.tau + 1, 2)).astype(np.float32)
    pasts[:, -1] = 0.0
    grids = rng.uniform(0.0, 1.0,
                        (n, config.grid_size, config.grid_size, 2)).astype(np.float32)
    lams = np.column_stack([
        rng.uniform(0.0, 8.0, n),
        rng.integers(0, 2, n),
        rng.integers(0, 4, n),
    ]).astype(np.float32)
    futures = rng.normal(0.0, 1.5, (n, config.horizon, 2)).astype(np.float32)
    return SampleSet(pasts, grids, lams, futures)


@pytest.fixture
def batch_factory():
    return random_batch
