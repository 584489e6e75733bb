"""Synchronous multi-worker data-parallel training.

Workers are in-process threads (a desk-scale stand-in for cluster
workers); what is under test is the coordination contract: per-epoch
shard plans, a barrier-synchronized step, a deterministic rank-ordered
gradient reduction, identical optimizer updates on every replica, and
rank-0-only checkpoints and logs.

``epoch_mode`` records how the epoch budget is counted: ``split`` means
``epochs`` passes over the globally sharded data; ``per_worker`` means
each replica runs ``epochs`` passes over its own shard. Both execute the
same loop - the flag captures which accounting an experiment used, so a
"200 total" budget is configured as split/200 or per_worker/200/W.
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import SampleSet, num_batches, shard_indices
from .errors import TruncatedFileError, VersionMismatchError, WorkerError
from .model import ModelConfig, init_params, nll_forward, nll_loss, param_count

_CKPT_MAGIC = "driverig-checkpoint"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainerConfig:
    num_workers: int = 1
    batch_size: int = 128          # per worker
    epochs: int = 1
    epoch_mode: str = "split"      # or "per_worker"
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0      # epochs; 0 disables
    validate_every: int = 1
    debug_checks: bool = False

    def __post_init__(self):
        if self.num_workers < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("num_workers, batch_size and epochs must all be >= 1")
        if self.epoch_mode not in ("split", "per_worker"):
            raise ValueError(f"unknown epoch_mode {self.epoch_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def config_digest(config: TrainerConfig, model_config: ModelConfig) -> str:
    """Digest of every field that shapes the training trajectory (the
    epoch budget is excluded so a run can be resumed past it)."""
    text = "|".join([
        f"W={config.num_workers}", f"b={config.batch_size}",
        f"lr={config.learning_rate!r}", f"opt={config.optimizer}",
        f"seed={config.seed}", f"mode={config.epoch_mode}",
        f"model={model_config!r}",
    ])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Sgd:
    name = "sgd"

    def __init__(self, lr: float, n: int):
        self.lr = lr
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        params -= self.lr * grad

    def state_arrays(self):
        return {"t": np.array([float(self.t)])}

    def load_state(self, arrays):
        self.t = int(arrays["t"][0])


class Adam:
    name = "adam"
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, lr: float, n: int):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        return {"m": self.m, "v": self.v, "t": np.array([float(self.t)])}

    def load_state(self, arrays):
        self.m = arrays["m"].copy()
        self.v = arrays["v"].copy()
        self.t = int(arrays["t"][0])


def make_optimizer(name: str, lr: float, n: int):
    return {"sgd": Sgd, "adam": Adam}[name](lr, n)


# ---------------------------------------------------------------------------
# Collectives
# ---------------------------------------------------------------------------


def all_reduce_mean(gradients) -> np.ndarray:
    """Elementwise mean, summed in fixed rank order 0..W-1."""
    if not gradients:
        raise ValueError("nothing to reduce")
    length = len(gradients[0])
    acc = np.zeros(length)
    for rank, g in enumerate(gradients):
        if len(g) != length:
            raise ValueError(
                f"rank {rank} payload has length {len(g)}, rank 0 has {length}"
            )
        acc += g
    acc /= len(gradients)
    return acc


class Collective:
    """Barrier-synchronized slot exchange between worker threads."""

    def __init__(self, num_workers: int):
        self.barrier = threading.Barrier(num_workers)
        self.slots = [None] * num_workers

    def reduce_mean(self, rank: int, payload: np.ndarray) -> np.ndarray:
        self.slots[rank] = payload
        self.barrier.wait()
        # every rank sums the same slots in the same order: bit-identical
        out = all_reduce_mean(self.slots)
        self.barrier.wait()
        return out

    def gather(self, rank: int, value):
        self.slots[rank] = value
        self.barrier.wait()
        out = list(self.slots)
        self.barrier.wait()
        return out

    def wait(self):
        self.barrier.wait()

    def abort(self):
        self.barrier.abort()


# ---------------------------------------------------------------------------
# Functional single-step surface (also used by the equivalence tests)
# ---------------------------------------------------------------------------


@dataclass
class WorkerState:
    rank: int
    params: np.ndarray
    optimizer: object


def make_workers(config: TrainerConfig, model_config: ModelConfig,
                 params: np.ndarray) -> list:
    n = len(params)
    return [
        WorkerState(r, params.copy(),
                    make_optimizer(config.optimizer, config.learning_rate, n))
        for r in range(config.num_workers)
    ]


def train_step(model_config: ModelConfig, workers, batches, backend=None,
               check_replicas: bool = False):
    """One synchronized step executed rank by rank; returns
    (global mean loss, updated params shared by all workers)."""
    if len(batches) != len(workers):
        raise ValueError("need exactly one batch per worker")
    if check_replicas:
        for w in workers[1:]:
            if not np.array_equal(w.params, workers[0].params):
                raise AssertionError(f"rank {w.rank} params diverged before step")
    grads, losses = [], []
    for w, batch in zip(workers, batches):
        loss, grad = nll_loss(w.params, model_config, batch, backend=backend)
        grads.append(grad)
        losses.append(loss)
    gmean = all_reduce_mean(grads)
    for w in workers:
        w.optimizer.step(w.params, gmean)
    return float(np.mean(losses)), workers[0].params.copy()


def steps_per_epoch(n: int, num_workers: int, batch_size: int) -> int:
    """Synchronized steps in one epoch: ceil(ceil(n/W) / b)."""
    return num_batches(num_batches(n, num_workers), batch_size)


def validate(params, model_config: ModelConfig, val_set: SampleSet,
             batch_size: int) -> float:
    """Gradient-free mean NLL over the full validation set, evaluated in
    fixed order with the stated (5x training) batch size."""
    n = len(val_set)
    if n == 0:
        raise ValueError("validation set is empty")
    total = 0.0
    for k in range(num_batches(n, batch_size)):
        chunk = val_set.take(np.arange(k * batch_size, min((k + 1) * batch_size, n)))
        _, log_q = nll_forward(params, model_config, chunk)
        total += float(np.sum(-log_q))
    return total / n


# ---------------------------------------------------------------------------
# Checkpoints (rank 0 writes; everyone else reports False)
# ---------------------------------------------------------------------------


@dataclass
class TrainerState:
    params: np.ndarray
    optimizer_name: str
    optimizer_arrays: dict
    epoch: int              # completed epochs
    global_step: int
    digest: str
    model_config: ModelConfig


def save_checkpoint(rank: int, state: TrainerState, path) -> bool:
    """Rank 0 writes atomically (temp file + rename) and returns True;
    every other rank returns False without touching the filesystem."""
    if rank != 0:
        return False
    mc = state.model_config
    arrays = [("params", state.params)]
    arrays += [(f"opt_{k}", v) for k, v in sorted(state.optimizer_arrays.items())]
    from .model import registry

    shape_lines = " ".join(
        f"{name}:{'x'.join(str(d) for d in shape)}"
        for name, shape in registry(mc)
    )
    lines = [
        f"{_CKPT_MAGIC} {_CKPT_VERSION}",
        (f"model tau={mc.tau} horizon={mc.horizon} grid={mc.grid_size} "
         f"enc={mc.enc_dim} ctx={mc.ctx_dim} hidden={mc.hidden_dim} "
         f"sigma_min={mc.sigma_min!r}"),
        f"registry {shape_lines}",
        f"optimizer={state.optimizer_name}",
        f"epoch={state.epoch}",
        f"global_step={state.global_step}",
        f"digest={state.digest}",
        "arrays " + " ".join(f"{k}={len(v)}" for k, v in arrays),
        "---",
    ]
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write("\n".join(lines).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return True


def load_checkpoint(path) -> TrainerState:
    with open(path, "rb") as f:
        blob = f.read()
    sep = b"\n---\n"
    cut = blob.find(sep)
    if cut < 0:
        raise TruncatedFileError(f"{path}: checkpoint header never terminated")
    lines = blob[:cut].decode("utf-8").splitlines()
    if not lines[0].startswith(_CKPT_MAGIC):
        raise VersionMismatchError(f"{path}: not a {_CKPT_MAGIC} file")
    if lines[0].split()[-1] != str(_CKPT_VERSION):
        raise VersionMismatchError(f"{path}: unsupported checkpoint version")
    fields = {}
    array_spec = []
    for line in lines[1:]:
        if line.startswith("model "):
            for tok in line.split()[1:]:
                k, v = tok.split("=")
                fields[f"model_{k}"] = v
        elif line.startswith("arrays "):
            for tok in line.split()[1:]:
                k, v = tok.split("=")
                array_spec.append((k, int(v)))
        elif "=" in line:
            k, v = line.split("=", 1)
            fields[k] = v
    mc = ModelConfig(
        tau=int(fields["model_tau"]), horizon=int(fields["model_horizon"]),
        grid_size=int(fields["model_grid"]), enc_dim=int(fields["model_enc"]),
        ctx_dim=int(fields["model_ctx"]), hidden_dim=int(fields["model_hidden"]),
        sigma_min=float(fields["model_sigma_min"]),
    )
    payload = blob[cut + len(sep):]
    need = sum(n for _, n in array_spec) * 8
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: {len(payload)} payload bytes, need {need}")
    arrays = {}
    off = 0
    for name, n in array_spec:
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).copy()
        off += n * 8
    params = arrays.pop("params")
    opt_arrays = {k[len("opt_"):]: v for k, v in arrays.items()}
    return TrainerState(
        params=params, optimizer_name=fields["optimizer"],
        optimizer_arrays=opt_arrays, epoch=int(fields["epoch"]),
        global_step=int(fields["global_step"]), digest=fields["digest"],
        model_config=mc,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRICS_HEADER = "epoch,train_nll,val_nll,wall_seconds,steps"


@dataclass
class EpochMetrics:
    epoch: int
    train_nll: float
    val_nll: float        # nan when validation was not scheduled
    wall_seconds: float
    steps: int            # synchronized steps per worker this epoch


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, row: EpochMetrics):
        self.rows.append(row)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(METRICS_HEADER + "\n")
            for r in self.rows:
                val = "" if math.isnan(r.val_nll) else f"{r.val_nll:.9f}"
                f.write(f"{r.epoch},{r.train_nll:.9f},{val},"
                        f"{r.wall_seconds:.4f},{r.steps}\n")

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != METRICS_HEADER:
                raise ValueError(f"unrecognized metrics header {header!r}")
            for line in f:
                e, tr, va, w, s = line.strip().split(",")
                log.append(EpochMetrics(int(e), float(tr),
                                        float(va) if va else math.nan,
                                        float(w), int(s)))
        return log


# ---------------------------------------------------------------------------
# The full fit loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    params: np.ndarray
    metrics: MetricsLog
    checkpoints: list


class _Run:
    def __init__(self, config, model_config, train_set, val_set, start_params,
                 start_opt, start_epoch, global_step, checkpoint_dir, backend):
        self.config = config
        self.model_config = model_config
        self.train_set = train_set
        self.val_set = val_set
        self.start_params = start_params
        self.start_opt = start_opt
        self.start_epoch = start_epoch
        self.global_step_base = global_step
        self.checkpoint_dir = checkpoint_dir
        self.backend = backend
        self.collective = Collective(config.num_workers)
        self.errors = {}
        self.metrics = MetricsLog()
        self.checkpoints = []
        self.final_params = None
        self.digest = config_digest(config, model_config)


def _worker_loop(run: _Run, rank: int):
    cfg = run.config
    mc = run.model_config
    n = len(run.train_set)
    b = cfg.batch_size
    try:
        params = run.start_params.copy()
        opt = make_optimizer(cfg.optimizer, cfg.learning_rate, len(params))
        if run.start_opt is not None:
            opt.load_state(run.start_opt)
        global_step = run.global_step_base

        for epoch in range(run.start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            plan = shard_indices(n, cfg.num_workers, rank, epoch, cfg.seed)
            steps = num_batches(len(plan.indices), b)
            loss_weighted = 0.0
            samples_seen = 0
            for k in range(steps):
                idx = plan.indices[k * b:(k + 1) * b]
                batch = run.train_set.take(idx)
                loss, grad = nll_loss(params, mc, batch, backend=run.backend)
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite training loss at epoch {epoch} step {k}"
                    )
                payload = np.concatenate([[loss], grad])
                reduced = run.collective.reduce_mean(rank, payload)
                step_loss = reduced[0]
                opt.step(params, reduced[1:])
                global_step += 1
                # shards are equal-length, so local batches match across
                # ranks and the reduced mean-of-means is the global mean
                loss_weighted += step_loss * len(idx) * cfg.num_workers
                samples_seen += len(idx) * cfg.num_workers
                if cfg.debug_checks:
                    digests = run.collective.gather(
                        rank, hashlib.sha256(params.tobytes()).hexdigest())
                    if rank == 0 and len(set(digests)) != 1:
                        raise AssertionError("replica parameter vectors diverged")
            train_nll = loss_weighted / samples_seen

            val_nll = math.nan
            scheduled = ((epoch + 1) % cfg.validate_every == 0
                         or epoch + 1 == cfg.epochs)
            if run.val_set is not None and len(run.val_set) and scheduled:
                # validation is deliberately not sharded: every worker
                # evaluates the full set and rank 0 reports it
                val_nll = validate(params, mc, run.val_set, 5 * b)

            run.collective.wait()
            if rank == 0:
                run.metrics.append(EpochMetrics(
                    epoch + 1, train_nll, val_nll,
                    time.perf_counter() - t0, steps))
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                state = TrainerState(params, cfg.optimizer, opt.state_arrays(),
                                     epoch + 1, global_step, run.digest, mc)
                path = os.path.join(run.checkpoint_dir,
                                    f"ckpt_epoch{epoch + 1:04d}.bin")
                if save_checkpoint(rank, state, path):
                    run.checkpoints.append(path)
            run.collective.wait()

        if rank == 0:
            run.final_params = params
    except threading.BrokenBarrierError:
        pass     # another rank failed; its error is already recorded
    except Exception as exc:   # noqa: BLE001 - reported via WorkerError
        run.errors[rank] = exc
        run.collective.abort()


def fit(config: TrainerConfig, model_config: ModelConfig,
        train_set: SampleSet, val_set: SampleSet | None = None,
        start_params: np.ndarray | None = None,
        resume_from=None, checkpoint_dir=None, backend=None) -> FitResult:
    """Spawn worker threads, run the epoch loop, return rank-0 params."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if config.checkpoint_every and checkpoint_dir is None:
        raise ValueError("checkpoint_every set but no checkpoint_dir given")

    start_epoch = 0
    global_step = 0
    start_opt = None
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        want = config_digest(config, model_config)
        if state.digest != want:
            raise ValueError(
                f"checkpoint digest {state.digest} does not match run config {want}"
            )
        params = state.params.copy()
        start_opt = state.optimizer_arrays
        start_epoch = state.epoch
        global_step = state.global_step
    elif start_params is not None:
        params = np.asarray(start_params, dtype=np.float64).copy()
    else:
        params = init_params(model_config, seed=config.seed)
    if len(params) != param_count(model_config):
        raise ValueError("parameter vector does not match the model config")

    run = _Run(config, model_config, train_set, val_set, params, start_opt,
               start_epoch, global_step, checkpoint_dir, backend)
    threads = [
        threading.Thread(target=_worker_loop, args=(run, r), name=f"worker-{r}")
        for r in range(config.num_workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if run.errors:
        rank = min(run.errors)
        raise WorkerError(rank, repr(run.errors[rank]))
    return FitResult(run.final_params, run.metrics, run.checkpoints)
