"""numba kernels.  Same signatures and semantics as :mod:`l3d.kernels._numpy`.

Networks are described by five int64 arrays: ``dims`` (L+1 extents),
``acts`` (L activation codes), ``w_off``/``b_off`` (offsets of each layer's
row-major ``(n_out, n_in)`` weight and bias inside the flat parameter
vector; ``b_off[l] == -1`` means no bias) and ``w_tr`` (1 where the layer
reads a stored ``(n_in, n_out)`` block transposed, as a tied decoder does).
"""
import math

import numpy as np
from numba import njit

IDENTITY, RELU, GELU = 0, 1, 2
MSE, KL = 0, 1

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _act_both(code, z):
    """(activation, derivative) sharing one erf evaluation."""
    if code == RELU:
        return (z, 1.0) if z > 0.0 else (0.0, 0.0)
    if code == GELU:
        cdf = 0.5 * (1.0 + math.erf(z * _INV_SQRT2))
        return z * cdf, cdf + z * _INV_SQRT2PI * math.exp(-0.5 * z * z)
    return z, 1.0


@njit(cache=True)
def _max_width(dims):
    maxw = 0
    for l in range(dims.shape[0]):
        if dims[l] > maxw:
            maxw = dims[l]
    return maxw


@njit(cache=True)
def _strides(dims, w_tr, l):
    """Index of weight (o, i) of layer l is ``w_off[l] + o * so + i * si``."""
    if w_tr[l]:
        return 1, dims[l + 1]
    return dims[l], 1


@njit(cache=True)
def _forward_into(theta, dims, acts, w_off, w_tr, b_off, X, rows, B, D, A):
    """Forward ``X[rows[:B]]`` into preallocated ``(L+1, >=B, maxw)`` buffers.

    ``A[l]`` holds post-activations, ``D[l]`` the activation derivative at
    the pre-activation of layer ``l`` (index 0 unused).
    """
    L = acts.shape[0]
    for b in range(B):
        r = rows[b]
        for i in range(dims[0]):
            A[0, b, i] = X[r, i]
    for l in range(L):
        n_in = dims[l]
        n_out = dims[l + 1]
        wo = w_off[l]
        bo = b_off[l]
        so, si = _strides(dims, w_tr, l)
        code = acts[l]
        for b in range(B):
            for o in range(n_out):
                s = theta[bo + o] if bo >= 0 else 0.0
                base = wo + o * so
                for i in range(n_in):
                    s += theta[base + i * si] * A[l, b, i]
                a, d = _act_both(code, s)
                A[l + 1, b, o] = a
                D[l + 1, b, o] = d


@njit(cache=True)
def _forward(theta, dims, acts, w_off, w_tr, b_off, X):
    L = acts.shape[0]
    B = X.shape[0]
    maxw = _max_width(dims)
    D = np.zeros((L + 1, B, maxw))
    A = np.zeros((L + 1, B, maxw))
    _forward_into(theta, dims, acts, w_off, w_tr, b_off, X, np.arange(B), B, D, A)
    return D, A


@njit(cache=True)
def mlp_forward(theta, dims, acts, w_off, w_tr, b_off, X):
    D, A = _forward(theta, dims, acts, w_off, w_tr, b_off, X)
    L = acts.shape[0]
    return A[L, :, : dims[L]].copy()


@njit(cache=True)
def _output_grad_row(y, yref, div, out):
    n = y.shape[0]
    if div == MSE:
        for o in range(n):
            out[o] = 2.0 * (y[o] - yref[o]) / n
        return
    my = y[0]
    mq = yref[0]
    for o in range(1, n):
        if y[o] > my:
            my = y[o]
        if yref[o] > mq:
            mq = yref[o]
    sy = 0.0
    sq = 0.0
    for o in range(n):
        sy += math.exp(y[o] - my)
        sq += math.exp(yref[o] - mq)
    ly = math.log(sy)
    lq = math.log(sq)
    kl = 0.0
    for o in range(n):
        lp_o = y[o] - my - ly
        lq_o = yref[o] - mq - lq
        kl += math.exp(lp_o) * (lp_o - lq_o)
    for o in range(n):
        lp_o = y[o] - my - ly
        lq_o = yref[o] - mq - lq
        out[o] = math.exp(lp_o) * (lp_o - lq_o - kl)


@njit(cache=True)
def _backward_row(theta, dims, acts, w_off, w_tr, b_off, D, A, b, dy, out, delta, prev):
    """Backprop one sample's output gradient ``dy``, adding into ``out``.

    Always accumulating keeps tied layers that share a weight block correct.
    """
    L = acts.shape[0]
    n_o = dims[L]
    for o in range(n_o):
        delta[o] = dy[o] * D[L, b, o]
    for l in range(L - 1, -1, -1):
        n_in = dims[l]
        n_out = dims[l + 1]
        wo = w_off[l]
        bo = b_off[l]
        so, si = _strides(dims, w_tr, l)
        for o in range(n_out):
            d = delta[o]
            base = wo + o * so
            for i in range(n_in):
                out[base + i * si] += d * A[l, b, i]
            if bo >= 0:
                out[bo + o] += d
        if l > 0:
            for i in range(n_in):
                s = 0.0
                for o in range(n_out):
                    s += delta[o] * theta[wo + o * so + i * si]
                prev[i] = s * D[l, b, i]
            for i in range(n_in):
                delta[i] = prev[i]


@njit(cache=True)
def per_sample_grads(theta, dims, acts, w_off, w_tr, b_off, n_w, X, Yref, div):
    D, A = _forward(theta, dims, acts, w_off, w_tr, b_off, X)
    L = acts.shape[0]
    n_o = dims[L]
    B = X.shape[0]
    out = np.zeros((B, n_w))
    dy = np.zeros(n_o)
    maxw = D.shape[2]
    delta = np.zeros(maxw)
    prev = np.zeros(maxw)
    for b in range(B):
        _output_grad_row(A[L, b, :n_o], Yref[b], div, dy)
        _backward_row(theta, dims, acts, w_off, w_tr, b_off, D, A, b, dy, out[b], delta, prev)
    return out


@njit(cache=True)
def jvp(theta, direction, dims, acts, w_off, w_tr, b_off, X):
    L = acts.shape[0]
    B = X.shape[0]
    maxw = _max_width(dims)
    a = np.zeros((B, maxw))
    da = np.zeros((B, maxw))
    na = np.zeros((B, maxw))
    nda = np.zeros((B, maxw))
    for b in range(B):
        for i in range(dims[0]):
            a[b, i] = X[b, i]
    for l in range(L):
        n_in = dims[l]
        n_out = dims[l + 1]
        wo = w_off[l]
        bo = b_off[l]
        so, si = _strides(dims, w_tr, l)
        for b in range(B):
            for o in range(n_out):
                z = theta[bo + o] if bo >= 0 else 0.0
                dz = direction[bo + o] if bo >= 0 else 0.0
                base = wo + o * so
                for i in range(n_in):
                    j = base + i * si
                    z += theta[j] * a[b, i]
                    dz += theta[j] * da[b, i] + direction[j] * a[b, i]
                av, dv = _act_both(acts[l], z)
                na[b, o] = av
                nda[b, o] = dv * dz
        for b in range(B):
            for o in range(n_out):
                a[b, o] = na[b, o]
                da[b, o] = nda[b, o]
    return da[:, : dims[L]].copy()


@njit(cache=True)
def train_epoch(theta, m, v, step, lr, beta1, beta2, eps, wd, dims, acts, w_off, w_tr, b_off, X, Y, perm, batch):
    n = perm.shape[0]
    n_w = theta.shape[0]
    L = acts.shape[0]
    n_o = dims[L]
    maxw = _max_width(dims)
    D = np.zeros((L + 1, batch, maxw))
    A = np.zeros((L + 1, batch, maxw))
    delta = np.zeros(maxw)
    prev = np.zeros(maxw)
    g = np.zeros(n_w)
    dy = np.zeros(n_o)
    total = 0.0
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        B = stop - start
        rows = perm[start:stop]
        _forward_into(theta, dims, acts, w_off, w_tr, b_off, X, rows, B, D, A)
        g[:] = 0.0
        for b in range(B):
            row = rows[b]
            for o in range(n_o):
                e = A[L, b, o] - Y[row, o]
                total += e * e / n_o
                dy[o] = 2.0 * e / (B * n_o)
            _backward_row(theta, dims, acts, w_off, w_tr, b_off, D, A, b, dy, g, delta, prev)
        for j in range(n_w):
            if not math.isfinite(g[j]):
                return math.nan, step
        step += 1
        c1 = 1.0 - beta1**step
        c2 = 1.0 - beta2**step
        for j in range(n_w):
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j]
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j]
            if wd != 0.0:
                theta[j] *= 1.0 - lr * wd
            theta[j] -= lr * (m[j] / c1) / (math.sqrt(v[j] / c2) + eps)
    return total / n, step


@njit(cache=True)
def topk_mask(C, K):
    size = C.size
    a = np.abs(C).ravel()
    mask = np.zeros(size, dtype=np.bool_)
    if K >= size:
        mask[:] = True
        return mask.reshape(C.shape)
    if K <= 0:
        return mask.reshape(C.shape)
    tau = np.sort(a)[size - K]
    count = 0
    for j in range(size):
        if a[j] > tau:
            mask[j] = True
            count += 1
    for j in range(size):
        if count >= K:
            break
        if a[j] == tau:
            mask[j] = True
            count += 1
    return mask.reshape(C.shape)


@njit(cache=True)
def l3d_loss_grad(G, C, mask, Vout, eps):
    B, n_w = G.shape
    Cm = C * mask
    R = G - Cm @ Vout
    coef = np.zeros(B)
    loss = 0.0
    for b in range(B):
        rn = 0.0
        gn = 0.0
        for j in range(n_w):
            rn += R[b, j] * R[b, j]
            gn += G[b, j] * G[b, j]
        rn = math.sqrt(rn)
        gn = math.sqrt(gn)
        loss += rn / (gn + eps)
        if rn > 0.0:
            coef[b] = 1.0 / (B * rn * (gn + eps))
    loss /= B
    A = np.empty_like(R)
    for b in range(B):
        for j in range(n_w):
            A[b, j] = -R[b, j] * coef[b]
    dVout = Cm.T @ A
    dC = (A @ Vout.T) * mask
    dVin = dC.T @ G
    return loss, dVin, dVout
