"""Dense numerical core: named parameter sets, seeded RNG, AdamW, n-mode
products and central finite differences.

Tensors are plain ``float64`` numpy arrays.  Nothing here allocates behind
the caller's back except where an operation returns a new array.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

DTYPE = np.float64


def as_tensor(x, name="tensor"):
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


class ParamSet(dict):
    """Ordered mapping of parameter name -> float64 array.

    Insertion order is the flattening order, so ``flatten`` and
    ``unflatten`` are exact inverses for a fixed set of names and shapes.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for key, value in self.items():
            super().__setitem__(key, np.ascontiguousarray(value, dtype=DTYPE))

    def __setitem__(self, key, value):
        super().__setitem__(key, np.ascontiguousarray(value, dtype=DTYPE))

    @property
    def shapes(self):
        return {name: arr.shape for name, arr in self.items()}

    @property
    def size(self):
        return int(sum(arr.size for arr in self.values()))

    def flatten(self):
        if not self:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([arr.ravel() for arr in self.values()])

    @classmethod
    def unflatten(cls, flat, shapes):
        """Inverse of :meth:`flatten` given ``{name: shape}`` in order."""
        flat = np.asarray(flat, dtype=DTYPE)
        total = sum(int(np.prod(s, dtype=np.int64)) for s in shapes.values())
        if flat.ndim != 1 or flat.size != total:
            raise ShapeError(f"flat vector of size {flat.size} does not match {total} parameters")
        out, pos = cls(), 0
        for name, shape in shapes.items():
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = flat[pos : pos + n].reshape(shape).copy()
            pos += n
        return out

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.items()})

    def zeros_like(self):
        return ParamSet({k: np.zeros_like(v) for k, v in self.items()})

    def check_matches(self, other, what="parameters"):
        if list(self.keys()) != list(other.keys()):
            raise ShapeError(f"{what}: names {list(other)} do not match {list(self)}")
        for name in self:
            if self[name].shape != other[name].shape:
                raise ShapeError(
                    f"{what}: tensor {name!r} has shape {other[name].shape}, expected {self[name].shape}"
                )

    def axpy(self, alpha, other):
        """Return ``self + alpha * other`` as a new ParamSet."""
        self.check_matches(other)
        return ParamSet({k: self[k] + alpha * other[k] for k in self})


# ---------------------------------------------------------------------------
# RNG


class Rng:
    """Philox-4x64 counter-based generator keyed by a 64-bit seed.

    ``child(name)`` derives an independent stream whose key is a hash of the
    parent seed and ``name``; the parent is not advanced.  Identical seed and
    call sequence give bit-identical draws on every platform numpy supports.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, name):
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def random(self, shape):
        return self._gen.random(shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)


def uniform(rng, lo, hi, shape):
    """I.i.d. Uniform[lo, hi) draws; values that round up to ``hi`` are pulled back."""
    if not lo < hi:
        raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
    out = lo + (hi - lo) * rng.random(shape)
    np.minimum(out, np.nextafter(hi, lo), out=out)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def unfold(t, mode):
    """Mode-``mode`` matricization: rows index that mode, columns the rest (C order)."""
    t = np.asarray(t)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(mat, mode, shape):
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    moved = (shape[mode],) + shape[:mode] + shape[mode + 1 :]
    return np.moveaxis(np.asarray(mat).reshape(moved), 0, mode)


def n_mode_product(t, m, mode):
    """``t ×_mode m`` with ``m`` of shape (J, I_mode)."""
    t = np.asarray(t, dtype=DTYPE)
    m = np.asarray(m, dtype=DTYPE)
    if not 0 <= mode < t.ndim:
        raise ShapeError(f"mode {mode} out of range for a {t.ndim}-mode tensor")
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ShapeError(f"factor of shape {m.shape} cannot act on mode {mode} of extent {t.shape[mode]}")
    return np.moveaxis(np.tensordot(m, t, axes=(1, mode)), 0, mode)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """In-place decoupled-weight-decay Adam update of flat arrays.

    ``step`` is the 1-based index of this update (used for bias correction).
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    if weight_decay:
        p *= 1.0 - lr * weight_decay
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def adamw_step(params, grads, state):
    """Return updated parameters; advances ``state`` (moments and step) in place."""
    params.check_matches(grads, "adamw gradients")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for tensor {name!r}")
    state.step += 1
    out = ParamSet()
    for name, p in params.items():
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"optimizer moment for {name!r} has shape {m.shape}, expected {p.shape}")
        new = p.copy()
        adamw_update(new, grads[name], m, v, state.step, state.lr, state.beta1, state.beta2,
                     state.eps, state.weight_decay)
        out[name] = new
    return out


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f, x, h=None):
    """Central-difference gradient of scalar ``f`` at ``x``.

    Default step per coordinate is ``1e-5 * max(1, |x_j|)``.
    """
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        hj = h if h is not None else 1e-5 * max(1.0, abs(flat[j]))
        orig = flat[j]
        flat[j] = orig + hj
        fp = float(f(x))
        flat[j] = orig - hj
        fm = float(f(x))
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value while differencing coordinate {j}")
        gflat[j] = (fp - fm) / (2.0 * hj)
    return grad
