"""Pure-numpy kernels.  Signatures mirror :mod:`l3d.kernels._jit` exactly."""
import math

import numpy as np
from scipy.special import erf

IDENTITY, RELU, GELU = 0, 1, 2
MSE, KL = 0, 1

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def act(code, z):
    if code == RELU:
        return np.maximum(z, 0.0)
    if code == GELU:
        return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))
    return z.copy()


def dact(code, z):
    if code == RELU:
        return (z > 0.0).astype(np.float64)
    if code == GELU:
        return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)
    return np.ones_like(z)


def _weights(theta, dims, w_off, w_tr, b_off, l):
    n_in, n_out = dims[l], dims[l + 1]
    block = theta[w_off[l] : w_off[l] + n_out * n_in]
    w = block.reshape(n_in, n_out).T if w_tr[l] else block.reshape(n_out, n_in)
    b = theta[b_off[l] : b_off[l] + n_out] if b_off[l] >= 0 else None
    return w, b


def _forward(theta, dims, acts, w_off, w_tr, b_off, X):
    zs, As = [None], [X]
    a = X
    for l in range(acts.shape[0]):
        w, b = _weights(theta, dims, w_off, w_tr, b_off, l)
        z = a @ w.T
        if b is not None:
            z = z + b
        a = act(acts[l], z)
        zs.append(z)
        As.append(a)
    return zs, As


def mlp_forward(theta, dims, acts, w_off, w_tr, b_off, X):
    return _forward(theta, dims, acts, w_off, w_tr, b_off, X)[1][-1]


def output_grad(y, yref, div):
    """dD/dy per row for MSE (normalized by n_o) or KL(softmax(y) || softmax(yref))."""
    if div == MSE:
        return 2.0 * (y - yref) / y.shape[1]
    lp = y - y.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    lq = yref - yref.max(axis=1, keepdims=True)
    lq = lq - np.log(np.exp(lq).sum(axis=1, keepdims=True))
    p = np.exp(lp)
    kl = (p * (lp - lq)).sum(axis=1, keepdims=True)
    return p * (lp - lq - kl)


def _backward(theta, dims, acts, w_off, w_tr, b_off, n_w, zs, As, dy, per_sample):
    """Parameter gradients; contributions add up, so tied layers sharing a
    weight block accumulate correctly."""
    B = dy.shape[0]
    L = acts.shape[0]
    out = np.zeros((B, n_w)) if per_sample else np.zeros(n_w)
    delta = dy * dact(acts[L - 1], zs[L])
    for l in range(L - 1, -1, -1):
        n_in, n_out = dims[l], dims[l + 1]
        w, _ = _weights(theta, dims, w_off, w_tr, b_off, l)
        lo, hi = w_off[l], w_off[l] + n_out * n_in
        if per_sample:
            gw = delta[:, :, None] * As[l][:, None, :]
            out[:, lo:hi] += (gw.transpose(0, 2, 1) if w_tr[l] else gw).reshape(B, -1)
            if b_off[l] >= 0:
                out[:, b_off[l] : b_off[l] + n_out] += delta
        else:
            gw = delta.T @ As[l]
            out[lo:hi] += (gw.T if w_tr[l] else gw).ravel()
            if b_off[l] >= 0:
                out[b_off[l] : b_off[l] + n_out] += delta.sum(axis=0)
        if l > 0:
            delta = (delta @ w) * dact(acts[l - 1], zs[l])
    return out


def per_sample_grads(theta, dims, acts, w_off, w_tr, b_off, n_w, X, Yref, div):
    zs, As = _forward(theta, dims, acts, w_off, w_tr, b_off, X)
    dy = output_grad(As[-1], Yref, div)
    return _backward(theta, dims, acts, w_off, w_tr, b_off, n_w, zs, As, dy, True)


def jvp(theta, direction, dims, acts, w_off, w_tr, b_off, X):
    a, da = X, np.zeros_like(X)
    for l in range(acts.shape[0]):
        w, b = _weights(theta, dims, w_off, w_tr, b_off, l)
        vw, vb = _weights(direction, dims, w_off, w_tr, b_off, l)
        z = a @ w.T
        dz = da @ w.T + a @ vw.T
        if b is not None:
            z = z + b
            dz = dz + vb
        da = dact(acts[l], z) * dz
        a = act(acts[l], z)
    return da


def train_epoch(theta, m, v, step, lr, beta1, beta2, eps, wd, dims, acts, w_off, w_tr, b_off, X, Y, perm, batch):
    """One shuffled pass of minibatch AdamW on the batch-mean MSE.

    Returns the sample-weighted mean training loss seen during the epoch and
    the updated step counter.  ``theta``, ``m`` and ``v`` are updated in place.
    """
    n = perm.shape[0]
    n_w = theta.shape[0]
    total = 0.0
    for start in range(0, n, batch):
        idx = perm[start : start + batch]
        xb, yb = X[idx], Y[idx]
        zs, As = _forward(theta, dims, acts, w_off, w_tr, b_off, xb)
        err = As[-1] - yb
        B, n_o = err.shape
        total += (err * err).sum() / n_o
        dy = 2.0 * err / (B * n_o)
        g = _backward(theta, dims, acts, w_off, w_tr, b_off, n_w, zs, As, dy, False)
        if not np.all(np.isfinite(g)):
            return math.nan, step
        step += 1
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if wd:
            theta *= 1.0 - lr * wd
        theta -= lr * (m / (1.0 - beta1**step)) / (np.sqrt(v / (1.0 - beta2**step)) + eps)
    return total / n, step


def topk_mask(C, K):
    """Boolean mask of the K largest |C| entries; ties at the threshold go to the lowest flat index."""
    a = np.abs(C).ravel()
    size = a.size
    mask = np.zeros(size, dtype=np.bool_)
    if K >= size:
        mask[:] = True
        return mask.reshape(C.shape)
    if K <= 0:
        return mask.reshape(C.shape)
    tau = np.partition(a, size - K)[size - K]
    mask = a > tau
    need = K - int(mask.sum())
    if need > 0:
        ties = np.flatnonzero(a == tau)[:need]
        mask[ties] = True
    return mask.reshape(C.shape)


def l3d_loss_grad(G, C, mask, Vout, eps):
    """Per-sample normalized reconstruction loss and its gradients.

    ``C = G @ Vin.T`` are the projection coefficients and ``mask`` is held
    constant.  Returns ``(loss, dVin, dVout)`` where both gradients are
    dense ``n_v x n_w`` matrices.
    """
    B = G.shape[0]
    Cm = C * mask
    R = G - Cm @ Vout
    rn = np.sqrt((R * R).sum(axis=1))
    gn = np.sqrt((G * G).sum(axis=1))
    loss = float(np.mean(rn / (gn + eps)))
    safe = np.where(rn > 0.0, rn, 1.0)
    coef = np.where(rn > 0.0, 1.0 / (B * safe * (gn + eps)), 0.0)
    A = -R * coef[:, None]
    dVout = Cm.T @ A
    dC = (A @ Vout.T) * mask
    dVin = dC.T @ G
    return loss, dVin, dVout
