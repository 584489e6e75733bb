"""Trajectory-density model: encoder, merger, and an autoregressive GRU
flow over future waypoints, with exact log-likelihoods and gradients.

Parameters live in one flat float64 vector; a fixed registry maps named
blocks onto slices of it. Gradients are produced two ways: the autodiff
tape (numpy backend) or the fused kernel in :mod:`driverig.kernels`
(numba backend); finite differences arbitrate both in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backend import NUMBA_ENABLED
from .kernels import LN_2PI, fused_nll_grad

POOLED_SIDE = 8
POOLED_DIM = POOLED_SIDE * POOLED_SIDE * 2   # grid average-pooled to 8x8x2
LAM_DIM = 6                                  # velocity, at-light, one-hot state
WAYPOINT_DIM = 2                             # ground-plane points are fixed 2-D


@dataclass(frozen=True)
class ModelConfig:
    tau: int = 4
    horizon: int = 10
    grid_size: int = 32
    enc_dim: int = 32
    ctx_dim: int = 64
    hidden_dim: int = 64
    sigma_min: float = 1e-3

    def __post_init__(self):
        if min(self.tau, 0) < 0 or self.horizon < 1:
            raise ValueError("tau must be >= 0 and horizon >= 1")
        if min(self.enc_dim, self.ctx_dim, self.hidden_dim) < 1:
            raise ValueError("all model dims must be >= 1")
        if self.sigma_min <= 0.0:
            raise ValueError("sigma_min must be > 0")
        if self.grid_size < 8 or self.grid_size % POOLED_SIDE:
            raise ValueError("grid_size must be a positive multiple of 8")

    @property
    def past_dim(self) -> int:
        return (self.tau + 1) * WAYPOINT_DIM


def registry(config: ModelConfig):
    """Fixed-order (name, shape) blocks of the flat parameter vector."""
    E, M, H = config.enc_dim, config.ctx_dim, config.hidden_dim
    return [
        ("enc_w1", (POOLED_DIM, E)),
        ("enc_b1", (E,)),
        ("enc_w2", (E, E)),
        ("enc_b2", (E,)),
        ("mrg_w", (E + LAM_DIM + config.past_dim, M)),
        ("mrg_b", (M,)),
        ("gru_wx", (M + WAYPOINT_DIM, 3 * H)),
        ("gru_wh", (H, 3 * H)),
        ("gru_b", (3 * H,)),
        ("mu_w", (H, WAYPOINT_DIM)),
        ("mu_b", (WAYPOINT_DIM,)),
        ("rho_w", (H, WAYPOINT_DIM)),
        ("rho_b", (WAYPOINT_DIM,)),
    ]


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in registry(config))


def param_views(params: np.ndarray, config: ModelConfig) -> dict:
    """Name -> reshaped view into the flat vector (shares memory)."""
    params = np.asarray(params)
    if params.shape != (param_count(config),):
        raise ValueError(
            f"parameter vector has length {params.shape}, registry expects "
            f"({param_count(config)},)"
        )
    views = {}
    off = 0
    for name, shape in registry(config):
        size = int(np.prod(shape))
        views[name] = params[off:off + size].reshape(shape)
        off += size
    return views


def init_params(config: ModelConfig, seed: int = 0) -> np.ndarray:
    """Weights uniform(-0.08, 0.08), biases zero, in registry order."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 0xD1]))
    parts = []
    for name, shape in registry(config):
        if len(shape) == 1:
            parts.append(np.zeros(shape))
        else:
            parts.append(rng.uniform(-0.08, 0.08, size=shape).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Input featurization
# ---------------------------------------------------------------------------


def pool_grid(grids: np.ndarray) -> np.ndarray:
    """(B, C, C, 2) -> (B, 128) block-average pool to 8x8x2, float64."""
    g = np.asarray(grids, dtype=np.float64)
    single = g.ndim == 3
    if single:
        g = g[None]
    B, C = g.shape[0], g.shape[1]
    k = C // POOLED_SIDE
    pooled = g.reshape(B, POOLED_SIDE, k, POOLED_SIDE, k, 2).mean(axis=(2, 4))
    flat = pooled.reshape(B, POOLED_DIM)
    return flat[0] if single else flat


def lam_features(lam3: np.ndarray) -> np.ndarray:
    """(B, 3) stored lambda -> (B, 6): velocity, at-light, one-hot state."""
    lam3 = np.asarray(lam3, dtype=np.float64)
    single = lam3.ndim == 1
    if single:
        lam3 = lam3[None]
    out = np.zeros((len(lam3), LAM_DIM))
    out[:, 0] = lam3[:, 0]
    out[:, 1] = lam3[:, 1]
    codes = lam3[:, 2].astype(np.int64)
    out[np.arange(len(lam3)), 2 + codes] = 1.0
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Plain-numpy forward passes (shared by both backends; no gradients)
# ---------------------------------------------------------------------------


def encode(params: np.ndarray, config: ModelConfig, visual_features: np.ndarray) -> np.ndarray:
    """Average-pool the grid and push it through two affine+tanh layers."""
    vf = np.asarray(visual_features)
    single = vf.ndim == 3
    expect = (config.grid_size, config.grid_size, 2)
    if (vf.shape if single else vf.shape[1:]) != expect:
        raise ValueError(f"visual_features shaped {vf.shape}, config expects {expect}")
    v = param_views(params, config)
    x = pool_grid(vf if not single else vf[None])
    h1 = np.tanh(x @ v["enc_w1"] + v["enc_b1"])
    out = np.tanh(h1 @ v["enc_w2"] + v["enc_b2"])
    return out[0] if single else out


def merge(params: np.ndarray, config: ModelConfig, encoded: np.ndarray,
          lam: np.ndarray, past: np.ndarray) -> np.ndarray:
    """Affine+tanh over [encoded | lambda | flattened past]."""
    enc = np.asarray(encoded, dtype=np.float64)
    single = enc.ndim == 1
    if single:
        enc = enc[None]
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[None]
    past = np.asarray(past, dtype=np.float64)
    if past.ndim == 2:
        past = past[None]
    if enc.shape[1] != config.enc_dim:
        raise ValueError(f"encoded dim {enc.shape[1]} != enc_dim {config.enc_dim}")
    if lam.shape[1] != LAM_DIM:
        raise ValueError(f"lambda feature dim {lam.shape[1]} != {LAM_DIM}")
    if past.shape[1:] != (config.tau + 1, WAYPOINT_DIM):
        raise ValueError(
            f"past shaped {past.shape[1:]}, config expects {(config.tau + 1, WAYPOINT_DIM)}"
        )
    v = param_views(params, config)
    joint = np.concatenate([enc, lam, past.reshape(len(past), -1)], axis=1)
    out = np.tanh(joint @ v["mrg_w"] + v["mrg_b"])
    return out[0] if single else out


def context_for(params: np.ndarray, config: ModelConfig, grid, lam3, past) -> np.ndarray:
    """Observation + past -> decoder context (chains encode and merge)."""
    enc = encode(params, config, grid)
    return merge(params, config, enc, lam_features(lam3), past)


def _decoder_step(v, config, ctx, prev, h):
    """One GRU step; returns (h_next, mu, sigma)."""
    H = config.hidden_dim
    xt = np.concatenate([ctx, prev], axis=1)
    gx = xt @ v["gru_wx"] + v["gru_b"]
    gh = h @ v["gru_wh"]
    z = 1.0 / (1.0 + np.exp(-(gx[:, :H] + gh[:, :H])))
    r = 1.0 / (1.0 + np.exp(-(gx[:, H:2 * H] + gh[:, H:2 * H])))
    n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    h_next = (1.0 - z) * n + z * h
    mu = h_next @ v["mu_w"] + v["mu_b"]
    rho = h_next @ v["rho_w"] + v["rho_b"]
    sigma = config.sigma_min + (np.maximum(rho, 0.0) + np.log1p(np.exp(-np.abs(rho))))
    return h_next, mu, sigma


def _as_context_batch(context, config):
    ctx = np.asarray(context, dtype=np.float64)
    single = ctx.ndim == 1
    if single:
        ctx = ctx[None]
    if ctx.shape[1] != config.ctx_dim:
        raise ValueError(f"context dim {ctx.shape[1]} != ctx_dim {config.ctx_dim}")
    return ctx, single


def forward_log_prob(params, config, context, futures):
    """Batched teacher-forced pass: (log_q (B,), per_step (B, T))."""
    v = param_views(params, config)
    ctx, _ = _as_context_batch(context, config)
    fut = np.asarray(futures, dtype=np.float64)
    if fut.ndim == 2:
        fut = fut[None]
    B, T = fut.shape[0], fut.shape[1]
    h = np.zeros((B, config.hidden_dim))
    prev = np.zeros((B, WAYPOINT_DIM))
    per_step = np.zeros((B, T))
    for t in range(T):
        h, mu, sigma = _decoder_step(v, config, ctx, prev, h)
        d = fut[:, t, :] - mu
        per_step[:, t] = np.sum(
            -0.5 * LN_2PI - np.log(sigma) - d * d / (2.0 * sigma * sigma), axis=1
        )
        prev = fut[:, t, :]
    return per_step.sum(axis=1), per_step


@dataclass
class LogProbResult:
    log_q: float
    per_step: np.ndarray
    gradient: np.ndarray | None = None


def log_prob(params, config, context, future, with_grad: bool = False) -> LogProbResult:
    """Exact log q(future | context) for one trajectory.

    The optional gradient is d log_q / d params at fixed context, so
    encoder and merger blocks are zero by construction.
    """
    future = np.asarray(future, dtype=np.float64)
    if future.shape != (config.horizon, WAYPOINT_DIM):
        raise ValueError(
            f"future shaped {future.shape}, config expects {(config.horizon, WAYPOINT_DIM)}"
        )
    if not (np.isfinite(future).all() and np.isfinite(np.asarray(context)).all()):
        raise ValueError("log_prob inputs must be finite")
    log_q, per_step = forward_log_prob(params, config, context, future)
    grad = None
    if with_grad:
        grad = _decoder_grad_tape(params, config, context, future)
    return LogProbResult(float(log_q[0]), per_step[0], grad)


def sample(params, config, context, z) -> np.ndarray:
    """Flow forward pass: S_t = mu_t + sigma_t * z_t, autoregressively."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (config.horizon, WAYPOINT_DIM):
        raise ValueError(f"z shaped {z.shape}, expected {(config.horizon, WAYPOINT_DIM)}")
    v = param_views(params, config)
    ctx, _ = _as_context_batch(context, config)
    h = np.zeros((1, config.hidden_dim))
    prev = np.zeros((1, WAYPOINT_DIM))
    out = np.zeros((config.horizon, WAYPOINT_DIM))
    for t in range(config.horizon):
        h, mu, sigma = _decoder_step(v, config, ctx, prev, h)
        out[t] = mu[0] + sigma[0] * z[t]
        prev = out[t][None]
    return out


def sample_many(params, config, context, zs) -> np.ndarray:
    """(K, T, 2) draws for one shared context, batched over K."""
    zs = np.asarray(zs, dtype=np.float64)
    K = zs.shape[0]
    v = param_views(params, config)
    ctx, _ = _as_context_batch(context, config)
    ctx = np.repeat(ctx, K, axis=0)
    h = np.zeros((K, config.hidden_dim))
    prev = np.zeros((K, WAYPOINT_DIM))
    out = np.zeros((K, config.horizon, WAYPOINT_DIM))
    for t in range(config.horizon):
        h, mu, sigma = _decoder_step(v, config, ctx, prev, h)
        out[:, t, :] = mu + sigma * zs[:, t, :]
        prev = out[:, t, :]
    return out


def invert(params, config, context, trajectory) -> np.ndarray:
    """Per-step flow inverse z_t = (S_t - mu_t) / sigma_t."""
    traj = np.asarray(trajectory, dtype=np.float64)
    v = param_views(params, config)
    ctx, _ = _as_context_batch(context, config)
    h = np.zeros((1, config.hidden_dim))
    prev = np.zeros((1, WAYPOINT_DIM))
    z = np.zeros_like(traj)
    for t in range(config.horizon):
        h, mu, sigma = _decoder_step(v, config, ctx, prev, h)
        z[t] = (traj[t] - mu[0]) / sigma[0]
        prev = traj[t][None]
    return z


# ---------------------------------------------------------------------------
# Loss with gradient (both backends)
# ---------------------------------------------------------------------------


def prepare_inputs(config: ModelConfig, batch):
    """SampleSet (or slice of one) -> float64 (pooled, lam6, past_flat, futures)."""
    pooled = pool_grid(batch.grids)
    lam6 = lam_features(batch.lams)
    pastf = np.asarray(batch.pasts, dtype=np.float64).reshape(len(batch.pasts), -1)
    fut = np.asarray(batch.futures, dtype=np.float64)
    return pooled, lam6, pastf, fut


def nll_forward(params, config, batch):
    """Mean NLL without gradients (validation path); also per-sample log_q."""
    if len(batch.pasts) == 0:
        raise ValueError("batch must be nonempty")
    pooled, lam6, pastf, fut = prepare_inputs(config, batch)
    enc_in = np.concatenate([_encode_pooled(params, config, pooled), lam6, pastf], axis=1)
    v = param_views(params, config)
    ctx = np.tanh(enc_in @ v["mrg_w"] + v["mrg_b"])
    log_q, _ = forward_log_prob(params, config, ctx, fut)
    return float(-log_q.mean()), log_q


def _encode_pooled(params, config, pooled):
    v = param_views(params, config)
    h1 = np.tanh(pooled @ v["enc_w1"] + v["enc_b1"])
    return np.tanh(h1 @ v["enc_w2"] + v["enc_b2"])


def nll_loss(params, config, batch, backend: str | None = None):
    """Mean NLL over the batch and its gradient over the full parameter
    vector. Per-sample terms are reduced in index order, so the result is
    reproducible for a fixed batch layout."""
    if len(batch.pasts) == 0:
        raise ValueError("batch must be nonempty")
    pooled, lam6, pastf, fut = prepare_inputs(config, batch)
    if backend is None:
        backend = "numba" if NUMBA_ENABLED else "numpy"
    if backend == "numba":
        v = param_views(params, config)
        out = fused_nll_grad(
            pooled, lam6, pastf, fut,
            v["enc_w1"], v["enc_b1"], v["enc_w2"], v["enc_b2"],
            v["mrg_w"], v["mrg_b"], v["gru_wx"], v["gru_wh"], v["gru_b"],
            v["mu_w"], v["mu_b"], v["rho_w"], v["rho_b"],
            config.sigma_min,
        )
        loss = out[0]
        grad = np.concatenate([g.ravel() for g in out[2:]])
        return float(loss), grad
    if backend == "numpy":
        return _nll_tape(params, config, pooled, lam6, pastf, fut)
    raise ValueError(f"unknown backend {backend!r}")


def _nll_tape(params, config, pooled, lam6, pastf, fut):
    """Autodiff-tape evaluation of the same loss (pure numpy backend)."""
    H = config.hidden_dim
    B, T = fut.shape[0], fut.shape[1]
    blocks = {}
    off = 0
    params = np.asarray(params, dtype=np.float64)
    for name, shape in registry(config):
        size = int(np.prod(shape))
        blocks[name] = ad.Tensor(params[off:off + size].reshape(shape), requires_grad=True)
        off += size

    x = ad.constant(pooled)
    h1 = ad.tanh(ad.add(ad.matmul(x, blocks["enc_w1"]), blocks["enc_b1"]))
    enc = ad.tanh(ad.add(ad.matmul(h1, blocks["enc_w2"]), blocks["enc_b2"]))
    joint = ad.concat([enc, ad.constant(lam6), ad.constant(pastf)], axis=1)
    ctx = ad.tanh(ad.add(ad.matmul(joint, blocks["mrg_w"]), blocks["mrg_b"]))

    h = ad.constant(np.zeros((B, H)))
    logq = ad.constant(np.zeros(B))
    prev = np.zeros((B, WAYPOINT_DIM))
    for t in range(T):
        xt = ad.concat([ctx, ad.constant(prev)], axis=1)
        gx = ad.add(ad.matmul(xt, blocks["gru_wx"]), blocks["gru_b"])
        gh = ad.matmul(h, blocks["gru_wh"])
        z = ad.sigmoid(ad.add(ad.narrow(gx, 1, 0, H), ad.narrow(gh, 1, 0, H)))
        r = ad.sigmoid(ad.add(ad.narrow(gx, 1, H, H), ad.narrow(gh, 1, H, H)))
        n = ad.tanh(ad.add(ad.narrow(gx, 1, 2 * H, H),
                           ad.mul(r, ad.narrow(gh, 1, 2 * H, H))))
        h = ad.add(ad.mul(ad.shift(ad.scale(z, -1.0), 1.0), n), ad.mul(z, h))
        mu = ad.add(ad.matmul(h, blocks["mu_w"]), blocks["mu_b"])
        rho = ad.add(ad.matmul(h, blocks["rho_w"]), blocks["rho_b"])
        sigma = ad.shift(ad.softplus(rho), config.sigma_min)
        step_lp = ad.sum_axis(ad.gaussian_log_density(fut[:, t, :], mu, sigma), axis=1)
        logq = ad.add(logq, step_lp)
        prev = fut[:, t, :]

    loss = ad.scale(ad.mean_all(logq), -1.0)
    loss.backward()
    grad = np.concatenate([
        (blocks[name].grad if blocks[name].grad is not None
         else np.zeros(shape)).ravel()
        for name, shape in registry(config)
    ])
    return float(loss.data), grad


def _decoder_grad_tape(params, config, context, future):
    """d log_q / d params at fixed context (decoder blocks only)."""
    H = config.hidden_dim
    ctx_np, _ = _as_context_batch(context, config)
    fut = np.asarray(future, dtype=np.float64)[None]
    blocks = {}
    off = 0
    params = np.asarray(params, dtype=np.float64)
    for name, shape in registry(config):
        size = int(np.prod(shape))
        req = name.startswith(("gru_", "mu_", "rho_"))
        blocks[name] = ad.Tensor(params[off:off + size].reshape(shape), requires_grad=req)
        off += size
    ctx = ad.constant(ctx_np)
    h = ad.constant(np.zeros((1, H)))
    logq = ad.constant(np.zeros(1))
    prev = np.zeros((1, WAYPOINT_DIM))
    for t in range(config.horizon):
        xt = ad.concat([ctx, ad.constant(prev)], axis=1)
        gx = ad.add(ad.matmul(xt, blocks["gru_wx"]), blocks["gru_b"])
        gh = ad.matmul(h, blocks["gru_wh"])
        z = ad.sigmoid(ad.add(ad.narrow(gx, 1, 0, H), ad.narrow(gh, 1, 0, H)))
        r = ad.sigmoid(ad.add(ad.narrow(gx, 1, H, H), ad.narrow(gh, 1, H, H)))
        n = ad.tanh(ad.add(ad.narrow(gx, 1, 2 * H, H),
                           ad.mul(r, ad.narrow(gh, 1, 2 * H, H))))
        h = ad.add(ad.mul(ad.shift(ad.scale(z, -1.0), 1.0), n), ad.mul(z, h))
        mu = ad.add(ad.matmul(h, blocks["mu_w"]), blocks["mu_b"])
        rho = ad.add(ad.matmul(h, blocks["rho_w"]), blocks["rho_b"])
        sigma = ad.shift(ad.softplus(rho), config.sigma_min)
        step_lp = ad.sum_axis(ad.gaussian_log_density(fut[:, t, :], mu, sigma), axis=1)
        logq = ad.add(logq, step_lp)
        prev = fut[:, t, :]
    out = ad.total(logq)
    out.backward()
    return np.concatenate([
        (blocks[name].grad if blocks[name].grad is not None
         else np.zeros(shape)).ravel()
        for name, shape in registry(config)
    ])
