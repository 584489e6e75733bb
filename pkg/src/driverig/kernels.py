"""Fused forward+backward kernel for the trajectory-density loss.

This is the training hot path: one call evaluates the encoder, merger,
GRU decoder, and Gaussian step densities for a whole batch and
accumulates the gradient of the mean NLL over every parameter block by
reverse sweep. The module-level ``fused_nll_grad`` is the numba-compiled
variant when the numba backend is active; the plain-python source (still
vectorized numpy, loops only over time steps) is kept callable for
cross-checking. The production numpy fallback for gradients is the
autodiff tape in :mod:`driverig.autodiff`, which this kernel must agree
with to near machine precision.

Gate convention: the 3H gate buffer is ordered [update z | reset r |
candidate n] with the reset gate applied after the hidden matmul,
h' = (1-z)*n + z*h.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import NUMBA_ENABLED, jit_kernel

LN_2PI = math.log(2.0 * math.pi)


def _fused_nll_grad_source(pooled, lam6, pastf, fut,
                           w1, b1, w2, b2, wm, bm,
                           wx, wh, bg, wmu, bmu, wrho, brho,
                           sigma_min):
    B = pooled.shape[0]
    T = fut.shape[1]
    E = w1.shape[1]
    M = wm.shape[1]
    H = wh.shape[0]

    # ---- forward ----------------------------------------------------------
    a1 = np.dot(pooled, w1) + b1
    h1 = np.tanh(a1)
    a2 = np.dot(h1, w2) + b2
    enc = np.tanh(a2)

    min_in = np.empty((B, wm.shape[0]))
    min_in[:, :E] = enc
    min_in[:, E:E + 6] = lam6
    min_in[:, E + 6:] = pastf
    ctx = np.tanh(np.dot(min_in, wm) + bm)

    xt = np.empty((B, M + 2))
    xt[:, :M] = ctx

    hs = np.zeros((T + 1, B, H))
    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    ns = np.empty((T, B, H))
    ghn = np.empty((T, B, H))
    sig_rho = np.empty((T, B, 2))
    sigma = np.empty((T, B, 2))
    diff = np.empty((T, B, 2))

    logq = np.zeros(B)
    prev = np.zeros((B, 2))
    for t in range(T):
        xt[:, M:] = prev
        gx = np.dot(xt, wx) + bg
        gh = np.dot(hs[t], wh)
        z = 1.0 / (1.0 + np.exp(-(gx[:, :H] + gh[:, :H])))
        r = 1.0 / (1.0 + np.exp(-(gx[:, H:2 * H] + gh[:, H:2 * H])))
        n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        hs[t + 1] = (1.0 - z) * n + z * hs[t]
        zs[t] = z
        rs[t] = r
        ns[t] = n
        ghn[t] = gh[:, 2 * H:]

        mu = np.dot(hs[t + 1], wmu) + bmu
        rho = np.dot(hs[t + 1], wrho) + brho
        sp = np.maximum(rho, 0.0) + np.log1p(np.exp(-np.abs(rho)))
        sg = sigma_min + sp
        sig_rho[t] = 1.0 / (1.0 + np.exp(-rho))
        sigma[t] = sg
        d = fut[:, t, :] - mu
        diff[t] = d
        logq += np.sum(-0.5 * LN_2PI - np.log(sg) - d * d / (2.0 * sg * sg), axis=1)
        prev = fut[:, t, :]

    loss = -np.sum(logq) / B

    # ---- backward (d loss / d params) --------------------------------------
    dw1 = np.zeros(w1.shape)
    db1 = np.zeros(b1.shape)
    dw2 = np.zeros(w2.shape)
    db2 = np.zeros(b2.shape)
    dwm = np.zeros(wm.shape)
    dbm = np.zeros(bm.shape)
    dwx = np.zeros(wx.shape)
    dwh = np.zeros(wh.shape)
    dbg = np.zeros(bg.shape)
    dwmu = np.zeros(wmu.shape)
    dbmu = np.zeros(bmu.shape)
    dwrho = np.zeros(wrho.shape)
    dbrho = np.zeros(brho.shape)

    scale = -1.0 / B   # d loss / d logq per sample
    dctx = np.zeros((B, M))
    dh = np.zeros((B, H))
    dgh = np.empty((B, 3 * H))
    dgx = np.empty((B, 3 * H))
    for t in range(T - 1, -1, -1):
        sg = sigma[t]
        d = diff[t]
        dmu = scale * (d / (sg * sg))
        dsigma = scale * (-1.0 / sg + d * d / (sg * sg * sg))
        drho = dsigma * sig_rho[t]

        h_now = np.ascontiguousarray(hs[t + 1])
        dwmu += np.dot(h_now.T, dmu)
        dbmu += np.sum(dmu, axis=0)
        dwrho += np.dot(h_now.T, drho)
        dbrho += np.sum(drho, axis=0)

        dh = dh + np.dot(dmu, wmu.T) + np.dot(drho, wrho.T)

        z = zs[t]
        r = rs[t]
        n = ns[t]
        h_prev = np.ascontiguousarray(hs[t])
        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z

        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * ghn[t]
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)

        dgx[:, :H] = dz_pre
        dgx[:, H:2 * H] = dr_pre
        dgx[:, 2 * H:] = dn_pre
        dgh[:, :H] = dz_pre
        dgh[:, H:2 * H] = dr_pre
        dgh[:, 2 * H:] = dn_pre * r

        if t == 0:
            prev_in = np.zeros((B, 2))
        else:
            prev_in = np.ascontiguousarray(fut[:, t - 1, :])
        xt_b = np.empty((B, M + 2))
        xt_b[:, :M] = ctx
        xt_b[:, M:] = prev_in

        dwx += np.dot(xt_b.T, dgx)
        dbg += np.sum(dgx, axis=0)
        dwh += np.dot(h_prev.T, dgh)

        dxt = np.dot(dgx, wx.T)
        dctx += dxt[:, :M]
        dh = dh_prev + np.dot(dgh, wh.T)

    dctx_pre = dctx * (1.0 - ctx * ctx)
    dwm += np.dot(min_in.T, dctx_pre)
    dbm += np.sum(dctx_pre, axis=0)
    dmin = np.dot(dctx_pre, wm.T)

    denc = np.ascontiguousarray(dmin[:, :E])
    da2 = denc * (1.0 - enc * enc)
    dw2 += np.dot(h1.T, da2)
    db2 += np.sum(da2, axis=0)
    dh1 = np.dot(da2, w2.T)
    da1 = dh1 * (1.0 - h1 * h1)
    dw1 += np.dot(pooled.T, da1)
    db1 += np.sum(da1, axis=0)

    return (loss, logq, dw1, db1, dw2, db2, dwm, dbm,
            dwx, dwh, dbg, dwmu, dbmu, dwrho, dbrho)


fused_nll_grad_python = _fused_nll_grad_source
_fused_nll_grad_jit = jit_kernel(_fused_nll_grad_source)


def fused_nll_grad(*args, backend=None):
    """Dispatch to the jitted kernel or its python source."""
    if backend is None:
        backend = "numba" if NUMBA_ENABLED else "python"
    if backend == "numba":
        if _fused_nll_grad_jit is None:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _fused_nll_grad_jit(*args)
    return fused_nll_grad_python(*args)
