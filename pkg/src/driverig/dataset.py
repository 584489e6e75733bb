"""Demonstration collection, windowing into training samples, on-disk
storage, and sampler semantics including the per-epoch shard plan.

File layout (version 1): a short ``key=value`` text header terminated by
a ``---`` line, then little-endian float32 records. One record is
``past (tau+1,2) | grid (C,C,2) | lam (3,) | future (T,2)`` flattened in
that order; ``lam`` is (velocity m/s, is_at_traffic_light 0/1, light
state code 0=none 1=green 2=yellow 3=red).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ChecksumError, DatasetError, TruncatedFileError, VersionMismatchError
from .raster import LIGHT_STATES, Observation, RasterConfig, render_observation
from .world import (
    Action, DEFAULT_PARAMS, EventSet, GOAL_RADIUS, WorldParams, WorldState,
    _route_point_ahead, _route_progress, detect_events, expert_action,
    load_town, make_world, rotate_into_frame, step,
)

_MAGIC = "driverig-dataset"
_VERSION = 1


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One labeled window in the ego frame of its anchor step."""

    past: np.ndarray     # (tau+1, 2), past[-1] == (0, 0)
    grid: np.ndarray     # (C, C, 2)
    lam: np.ndarray      # (3,)
    future: np.ndarray   # (T, 2)


class SampleSet:
    """Column store of samples; cheap to slice into training batches."""

    def __init__(self, pasts, grids, lams, futures, collection_seed=0):
        self.pasts = np.asarray(pasts, dtype=np.float32)
        self.grids = np.asarray(grids, dtype=np.float32)
        self.lams = np.asarray(lams, dtype=np.float32)
        self.futures = np.asarray(futures, dtype=np.float32)
        self.collection_seed = int(collection_seed)
        n = len(self.pasts)
        if not (len(self.grids) == len(self.lams) == len(self.futures) == n):
            raise ValueError("sample columns disagree on length")

    def __len__(self):
        return len(self.pasts)

    @property
    def tau(self) -> int:
        return self.pasts.shape[1] - 1

    @property
    def horizon(self) -> int:
        return self.futures.shape[1]

    @property
    def grid_size(self) -> int:
        return self.grids.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.pasts[i], self.grids[i], self.lams[i], self.futures[i])

    def take(self, indices) -> "SampleSet":
        idx = np.asarray(indices, dtype=np.int64)
        return SampleSet(self.pasts[idx], self.grids[idx], self.lams[idx],
                         self.futures[idx], self.collection_seed)

    @classmethod
    def empty(cls, tau, horizon, grid_size, collection_seed=0):
        return cls(
            np.zeros((0, tau + 1, 2), np.float32),
            np.zeros((0, grid_size, grid_size, 2), np.float32),
            np.zeros((0, 3), np.float32),
            np.zeros((0, horizon, 2), np.float32),
            collection_seed,
        )

    @classmethod
    def concatenate(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.pasts for p in parts]),
            np.concatenate([p.grids for p in parts]),
            np.concatenate([p.lams for p in parts]),
            np.concatenate([p.futures for p in parts]),
            parts[0].collection_seed,
        )


def lam_vector(obs: Observation) -> np.ndarray:
    return np.array([
        obs.velocity,
        1.0 if obs.is_at_traffic_light else 0.0,
        float(LIGHT_STATES.index(obs.traffic_light_state)),
    ], dtype=np.float32)


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


@dataclass
class TraceStep:
    world: WorldState
    obs: Observation
    action: Action
    events: EventSet


@dataclass
class EpisodeTrace:
    town_id: int
    seed: int
    origin: int
    destination: int
    steps: list


def _pick_route(town, rng):
    """Half the episodes drive shortest paths between random spawn pairs,
    half follow random walks; the walks guarantee every lane (corners
    included) shows up in the demonstrations. Unroutable or degenerate
    pairs are resampled, never returned."""
    while True:
        o = int(rng.integers(0, town.spawn_count))
        # never start inside the roundabout complex: one-way lanes give
        # following traffic no safe way to react to a fresh standing ego
        if town.spawn_edges[o] in town.one_way_edges:
            continue
        if rng.random() < 0.5:
            d, route = town.walk_route(o, rng)
            if o == d:
                continue
        else:
            d = int(rng.integers(0, town.spawn_count))
            if o == d:
                continue
            route = town.route(o, d)
        if route is None:
            continue
        length = float(np.sum(np.linalg.norm(np.diff(route, axis=0), axis=1)))
        if length < 40.0:
            continue
        return o, d, route


def collect_iter(town_id, episodes, seed, raster: RasterConfig | None = None,
                 vehicles=10, pedestrians=0, step_cap=600,
                 params: WorldParams = DEFAULT_PARAMS, backend=None,
                 steer_noise=0.22):
    """Yield expert-driven episode traces one at a time (memory-friendly).

    steer_noise injects a seeded, time-correlated wobble into the applied
    steering on most episodes while the expert keeps correcting; the
    recorded futures then demonstrate recovery from off-center states,
    which closed-loop driving needs. The wobble is mild enough that the
    expert never collides.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    raster = raster or RasterConfig(32, 1.0)
    town = load_town(town_id)
    for ep in range(episodes):
        rng = np.random.default_rng(
            np.random.SeedSequence([town_id, seed & 0x7FFFFFFF, ep])
        )
        origin, dest, route = _pick_route(town, rng)
        world = make_world(town, vehicles, pedestrians,
                           seed=int(rng.integers(0, 2**31 - 1)),
                           ego_spawn=origin, params=params)
        noise_amp = steer_noise if (ep % 3) else 0.0   # every third run clean
        wobble = 0.0
        steps = []
        goal = route[-1]
        for _ in range(step_cap):
            obs = render_observation(world, raster, backend=backend)
            action = expert_action(world, route)
            if noise_amp:
                wobble = 0.88 * wobble + noise_amp * float(rng.normal(0.0, 0.33))
                # recovery data must stay clean: hold the wobble whenever
                # traffic is near or the ego already sits off-center (an
                # excursion into the oncoming lane would end in contact)
                clear = True
                if len(world.actor_rail):
                    apos, _ = world.actor_poses()
                    clear = bool(np.min(np.linalg.norm(
                        apos - world.ego.position[None, :], axis=1)) > 18.0)
                if clear:
                    seg, along = _route_progress(route, world.ego.position,
                                                 world.ego.heading)
                    anchor = _route_point_ahead(route, seg, along, 0.0)
                    clear = float(np.linalg.norm(world.ego.position - anchor)) < 1.0
                if clear:
                    action = Action(action.throttle, action.steer + wobble,
                                    action.brake)
            nxt = step(world, action, 0.1)
            steps.append(TraceStep(world, obs, action, detect_events(world, nxt)))
            world = nxt
            if np.linalg.norm(world.ego.position - goal) < GOAL_RADIUS:
                break
        yield EpisodeTrace(town_id, seed, origin, dest, steps)


def collect(town_id, episodes, seed, **kwargs) -> list:
    """Materialized collect_iter; deterministic given (town_id, episodes, seed)."""
    return list(collect_iter(town_id, episodes, seed, **kwargs))


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def process(traces, tau: int, horizon: int, stride: int = 5) -> SampleSet:
    """Slide windows of length tau+1+horizon over each trace and express
    every window in the ego frame of its anchor step (translate to the
    anchor, rotate by -heading)."""
    if tau < 0 or horizon < 1 or stride < 1:
        raise ValueError("require tau >= 0, horizon >= 1, stride >= 1")
    pasts, grids, lams, futures = [], [], [], []
    grid_size = None
    for trace in traces:
        n = len(trace.steps)
        positions = np.array([s.world.ego.position for s in trace.steps])
        headings = [s.world.ego.heading for s in trace.steps]
        for i in range(tau, n - horizon, stride):
            window = rotate_into_frame(
                positions[i - tau:i + horizon + 1], positions[i], headings[i]
            )
            obs = trace.steps[i].obs
            if grid_size is None:
                grid_size = obs.visual_features.shape[0]
            pasts.append(window[:tau + 1].astype(np.float32))
            grids.append(obs.visual_features)
            lams.append(lam_vector(obs))
            futures.append(window[tau + 1:].astype(np.float32))
    if not pasts:
        g = grid_size or 32
        return SampleSet.empty(tau, horizon, g)
    return SampleSet(np.array(pasts), np.array(grids), np.array(lams),
                     np.array(futures))


# ---------------------------------------------------------------------------
# Batch arithmetic and shard plans
# ---------------------------------------------------------------------------


def num_batches(n: int, b: int) -> int:
    """Ceiling division: batches needed to cover n samples at batch size b."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if n < 0:
        raise ValueError("sample count must be >= 0")
    return -(-n // b)


@dataclass(frozen=True)
class ShardPlan:
    epoch: int
    seed: int
    num_workers: int
    rank: int
    indices: np.ndarray


def epoch_permutation(n: int, epoch: int, seed: int) -> np.ndarray:
    """Fresh deterministic order per (seed, epoch); no state to checkpoint."""
    ss = np.random.SeedSequence([seed & 0x7FFFFFFF, epoch])
    return np.random.default_rng(ss).permutation(n)


def pad_permutation(permutation: np.ndarray, num_workers: int) -> np.ndarray:
    """Repeat the head so every rank gets ceil(n/W) indices."""
    n = len(permutation)
    extra = num_workers * num_batches(n, num_workers) - n
    if extra == 0:
        return permutation.copy()
    # np.resize cycles, covering the n < W case
    return np.concatenate([permutation, np.resize(permutation, extra)])


def assign_rank(padded: np.ndarray, num_workers: int, rank: int) -> np.ndarray:
    """Rank w takes padded positions {i : i mod W == w}."""
    return padded[rank::num_workers].copy()


def shard_indices(n: int, num_workers: int, rank: int, epoch: int, seed: int) -> ShardPlan:
    if n < 1:
        raise ValueError("need at least one sample to shard")
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    if not 0 <= rank < num_workers:
        raise ValueError(f"rank {rank} out of range for {num_workers} workers")
    perm = epoch_permutation(n, epoch, seed)
    padded = pad_permutation(perm, num_workers)
    return ShardPlan(epoch, seed, num_workers, rank,
                     assign_rank(padded, num_workers, rank))


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def _record_floats(tau, horizon, grid_size):
    return (tau + 1) * 2 + grid_size * grid_size * 2 + 3 + horizon * 2


def write_dataset(samples: SampleSet, path) -> None:
    n = len(samples)
    tau, horizon, grid_size = samples.tau, samples.horizon, samples.grid_size
    if n:
        flat = np.concatenate([
            samples.pasts.reshape(n, -1),
            samples.grids.reshape(n, -1),
            samples.lams.reshape(n, -1),
            samples.futures.reshape(n, -1),
        ], axis=1).astype("<f4")
        payload = flat.tobytes()
    else:
        payload = b""
    header = (
        f"{_MAGIC} {_VERSION}\n"
        f"count={n}\n"
        f"tau={tau}\n"
        f"horizon={horizon}\n"
        f"grid={grid_size}\n"
        f"channels=2\n"
        f"seed={samples.collection_seed}\n"
        f"crc32={zlib.crc32(payload):08x}\n"
        "---\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(payload)


def read_dataset(path) -> SampleSet:
    with open(path, "rb") as f:
        blob = f.read()
    sep = b"\n---\n"
    cut = blob.find(sep)
    if cut < 0:
        raise TruncatedFileError(f"{path}: header never terminated")
    head_lines = blob[:cut].decode("utf-8", errors="replace").splitlines()
    if not head_lines or not head_lines[0].startswith(_MAGIC):
        raise VersionMismatchError(f"{path}: not a {_MAGIC} file")
    version = head_lines[0].split()[-1]
    if version != str(_VERSION):
        raise VersionMismatchError(
            f"{path}: format version {version} unsupported (reader handles {_VERSION})"
        )
    fields = {}
    for line in head_lines[1:]:
        if "=" in line:
            k, v = line.split("=", 1)
            fields[k] = v
    try:
        n = int(fields["count"])
        tau = int(fields["tau"])
        horizon = int(fields["horizon"])
        grid_size = int(fields["grid"])
        crc_expect = int(fields["crc32"], 16)
        seed = int(fields.get("seed", "0"))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed header ({exc})") from exc

    payload = blob[cut + len(sep):]
    expected = n * _record_floats(tau, horizon, grid_size) * 4
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise DatasetError(f"{path}: {len(payload) - expected} trailing bytes")
    if zlib.crc32(payload) != crc_expect:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    if n == 0:
        return SampleSet.empty(tau, horizon, grid_size, seed)
    flat = np.frombuffer(payload, dtype="<f4").reshape(n, -1)
    p = (tau + 1) * 2
    g = grid_size * grid_size * 2
    pasts = flat[:, :p].reshape(n, tau + 1, 2)
    grids = flat[:, p:p + g].reshape(n, grid_size, grid_size, 2)
    lams = flat[:, p + g:p + g + 3]
    futures = flat[:, p + g + 3:].reshape(n, horizon, 2)
    return SampleSet(pasts, grids, lams, futures, seed)
