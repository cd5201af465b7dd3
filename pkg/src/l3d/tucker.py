"""Tucker-factored tensors.

A :class:`TuckerTensor` is one low-rank block ``G x_1 U1 x_2 U2 ... x_N UN``.
The ``stacked_*`` helpers operate on a leading subnetwork axis so a whole
basis materializes (and backpropagates) in one einsum per parameter tensor.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .numkit import n_mode_product

_MODE = string.ascii_lowercase[:12]
_RANK = string.ascii_uppercase[:12]


@dataclass
class TuckerTensor:
    core: np.ndarray
    factors: list

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=np.float64)
        self.factors = [np.asarray(u, dtype=np.float64) for u in self.factors]
        if self.core.ndim != len(self.factors):
            raise ShapeError(f"core has {self.core.ndim} modes but {len(self.factors)} factors were given")
        for n, u in enumerate(self.factors):
            if u.ndim != 2 or u.shape[1] != self.core.shape[n]:
                raise ShapeError(f"factor {n} has shape {u.shape}, core rank is {self.core.shape[n]}")
            if not 1 <= u.shape[1] <= u.shape[0]:
                raise ShapeError(f"rank {u.shape[1]} of mode {n} must lie in [1, {u.shape[0]}]")

    @property
    def shape(self):
        return tuple(u.shape[0] for u in self.factors)

    @property
    def ranks(self):
        return self.core.shape

    def materialize(self):
        out = self.core
        for n, u in enumerate(self.factors):
            out = n_mode_product(out, u, n)
        return out


def clip_ranks(shape, rank):
    """Per-mode ranks ``min(rank, extent)`` for an integer or per-mode ``rank``."""
    if np.isscalar(rank):
        return tuple(min(int(rank), int(d)) for d in shape)
    rank = tuple(int(r) for r in rank)
    if len(rank) != len(shape):
        raise ShapeError(f"{len(rank)} ranks given for a {len(shape)}-mode tensor")
    return tuple(min(r, d) for r, d in zip(rank, shape))


@lru_cache(maxsize=None)
def _subscripts(ndim):
    modes, ranks = _MODE[:ndim], _RANK[:ndim]
    factors = ["z" + m + r for m, r in zip(modes, ranks)]
    materialize = ",".join(["z" + ranks] + factors) + "->z" + modes
    core_grad = ",".join(["z" + modes] + factors) + "->z" + ranks
    factor_grads = []
    for n in range(ndim):
        others = [f for i, f in enumerate(factors) if i != n]
        factor_grads.append(",".join(["z" + modes, "z" + ranks] + others) + "->" + factors[n])
    return materialize, core_grad, factor_grads


_PATHS = {}


def _einsum(subs, *ops):
    key = (subs,) + tuple(op.shape for op in ops)
    path = _PATHS.get(key)
    if path is None:
        path = _PATHS[key] = np.einsum_path(subs, *ops, optimize="greedy")[0]
    return np.einsum(subs, *ops, optimize=path)


def _t(a):
    return np.swapaxes(a, -1, -2)


def stacked_materialize(core, factors):
    """``core``: (K, R1..RN); ``factors[n]``: (K, In, Rn) -> (K, I1..IN)."""
    ndim = core.ndim - 1
    if ndim == 1:
        return np.matmul(factors[0], core[:, :, None])[:, :, 0]
    if ndim == 2:
        return factors[0] @ core @ _t(factors[1])
    return _einsum(_subscripts(ndim)[0], core, *factors)


def stacked_grads(core, factors, dout):
    """Gradients of ``<stacked_materialize(core, factors), dout>``."""
    ndim = core.ndim - 1
    if ndim == 1:
        u = factors[0]
        return np.matmul(_t(u), dout[:, :, None])[:, :, 0], [dout[:, :, None] * core[:, None, :]]
    if ndim == 2:
        u1, u2 = factors
        du2 = dout @ u2
        dcore = _t(u1) @ du2
        return dcore, [du2 @ _t(core), _t(dout) @ (u1 @ core)]
    _, core_sub, factor_subs = _subscripts(ndim)
    dcore = _einsum(core_sub, dout, *factors)
    dfactors = []
    for n, sub in enumerate(factor_subs):
        others = [f for i, f in enumerate(factors) if i != n]
        dfactors.append(_einsum(sub, dout, core, *others))
    return dcore, dfactors


def stacked_contract(core, factors, t):
    """``<G_k x_1 U1_k ... x_N UN_k, t>`` for every k without materializing.

    Uses ``<G x_n U, t> = <G, t x_n U^T>``: ``t`` is pulled into each
    subnetwork's rank space one mode at a time, then dotted with the core.
    """
    ndim = core.ndim - 1
    if t.shape != tuple(u.shape[1] for u in factors):
        raise ShapeError(f"tensor of shape {t.shape} does not match the block shape")
    modes, ranks = _MODE[:ndim], _RANK[:ndim]
    proj, sub = t, modes
    for n, u in enumerate(factors):
        new = "z" + ranks[: n + 1] + modes[n + 1 :]
        proj = np.einsum(f"{sub},z{modes[n]}{ranks[n]}->{new}", proj, u)
        sub = new
    return np.einsum(f"z{ranks},z{ranks}->z", proj, core)
