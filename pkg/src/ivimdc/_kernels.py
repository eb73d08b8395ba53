"""Compiled training epoch for the MLP estimator.

Mirrors ``network._forward``, ``network._objective``, ``network._backward``
and ``network.Adam.step`` on a flat parameter vector; the numpy versions stay
the reference implementation and tests check that both agree.
"""

import math

import numpy as np
from numba import njit

MODE_CODES = {"supervised": 0, "ivimnet": 1, "super-dc": 2}


@njit(cache=True)
def _batch_step(theta, grad, xb, lab, ref, bvals, mode, alphas, alpha_dc,
                lo, hi, use_elu, use_sigmoid, w_off, b_off, sizes, pre, post):
    nb = xb.shape[0]
    n_layers = sizes.shape[0] - 1
    n_out = sizes[n_layers]
    post[0, :nb, :sizes[0]] = xb
    raw = np.empty((nb, n_out))
    for l in range(n_layers):
        n_in, n_o = sizes[l], sizes[l + 1]
        W = theta[w_off[l]:w_off[l] + n_in * n_o].reshape((n_in, n_o))
        b = theta[b_off[l]:b_off[l] + n_o]
        z = np.ascontiguousarray(post[l, :nb, :n_in]) @ W
        if l < n_layers - 1:
            for i in range(nb):
                for j in range(n_o):
                    zz = z[i, j] + b[j]
                    pre[l, i, j] = zz
                    if use_elu and zz <= 0.0:
                        post[l + 1, i, j] = math.expm1(zz)
                    else:
                        post[l + 1, i, j] = zz
        else:
            for i in range(nb):
                for j in range(n_o):
                    raw[i, j] = z[i, j] + b[j]

    params = np.empty((nb, n_out))
    dpdraw = np.empty((nb, n_out))
    for i in range(nb):
        for j in range(n_out):
            if use_sigmoid:
                r = raw[i, j]
                if r >= 0:
                    s = 1.0 / (1.0 + math.exp(-r))
                else:
                    e = math.exp(r)
                    s = e / (1.0 + e)
                p = lo[j] + s * (hi[j] - lo[j])
                params[i, j] = min(max(p, np.nextafter(lo[j], hi[j])), np.nextafter(hi[j], lo[j]))
                dpdraw[i, j] = s * (1.0 - s) * (hi[j] - lo[j])
            else:
                params[i, j] = raw[i, j]
                dpdraw[i, j] = 1.0

    # objective: mean over the batch of the per-curve loss
    dparams = np.zeros((nb, n_out))
    total = 0.0
    n_b = bvals.shape[0]
    for i in range(nb):
        loss = 0.0
        if mode == 0 or mode == 2:
            for j in range(3):
                err = params[i, j] - lab[i, j]
                loss += alphas[j] * err * err
                dparams[i, j] += 2.0 * alphas[j] * err
        if mode == 1 or (mode == 2 and alpha_dc != 0.0):
            scale = 1.0 if mode == 1 else alpha_dc
            D = params[i, 0]
            f = params[i, 1]
            Ds = params[i, 2]
            s0 = params[i, 3] if n_out > 3 else 1.0
            gD = 0.0
            gf = 0.0
            gDs = 0.0
            gs0 = 0.0
            dc = 0.0
            for k in range(1, n_b):
                bk = bvals[k]
                slow = math.exp(-bk * D)
                fast = math.exp(-bk * (Ds + D))
                shape = f * fast + (1.0 - f) * slow
                model = s0 * shape
                target = xb[i, k] if mode == 1 else ref[i, k]
                res = model - target
                dc += res * res
                tr = 2.0 * res
                gD += tr * (-bk * model)
                gf += tr * s0 * (fast - slow)
                gDs += tr * (-bk * s0 * f * fast)
                gs0 += tr * shape
            loss += scale * dc
            dparams[i, 0] += scale * gD
            dparams[i, 1] += scale * gf
            dparams[i, 2] += scale * gDs
            if n_out > 3:
                dparams[i, 3] += scale * gs0
        total += loss

    delta = np.empty((nb, n_out))
    for i in range(nb):
        for j in range(n_out):
            delta[i, j] = dparams[i, j] / nb * dpdraw[i, j]

    for l in range(n_layers - 1, -1, -1):
        n_in, n_o = sizes[l], sizes[l + 1]
        a_in = np.ascontiguousarray(post[l, :nb, :n_in])
        gW = a_in.T @ delta
        grad[w_off[l]:w_off[l] + n_in * n_o] = gW.ravel()
        for j in range(n_o):
            acc = 0.0
            for i in range(nb):
                acc += delta[i, j]
            grad[b_off[l] + j] = acc
        if l > 0:
            W = theta[w_off[l]:w_off[l] + n_in * n_o].reshape((n_in, n_o))
            back = delta @ W.T
            if use_elu:
                for i in range(nb):
                    for j in range(n_in):
                        if pre[l - 1, i, j] <= 0.0:
                            back[i, j] *= post[l, i, j] + 1.0
            delta = back
    return total / nb


@njit(cache=True)
def run_epoch(theta, m, v, t, lr, beta1, beta2, eps, order, batch_size,
              X, labels, ref, bvals, mode, alphas, alpha_dc, lo, hi,
              use_elu, use_sigmoid, w_off, b_off, sizes):
    """One pass of mini-batch Adam over ``X[order]``.

    Returns ``(summed loss weighted by batch size, new step count)``; stops
    early and returns a non-finite sum if a batch loss is not finite.
    """
    n = order.shape[0]
    maxw = 0
    for s in sizes:
        if s > maxw:
            maxw = s
    n_layers = sizes.shape[0] - 1
    pre = np.empty((n_layers, batch_size, maxw))
    post = np.empty((n_layers + 1, batch_size, maxw))
    grad = np.empty_like(theta)
    total = 0.0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        idx = order[start:stop]
        xb = X[idx]
        lab = labels[idx]
        rf = ref[idx]
        loss = _batch_step(theta, grad, xb, lab, rf, bvals, mode, alphas, alpha_dc,
                           lo, hi, use_elu, use_sigmoid, w_off, b_off, sizes, pre, post)
        if not math.isfinite(loss):
            return loss, t
        t += 1
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for p in range(theta.shape[0]):
            g = grad[p]
            m[p] = beta1 * m[p] + (1.0 - beta1) * g
            v[p] = beta2 * v[p] + (1.0 - beta2) * (g * g)
            theta[p] -= lr * (m[p] / c1) / (math.sqrt(v[p] / c2) + eps)
        total += loss * (stop - start)
    return total, t
