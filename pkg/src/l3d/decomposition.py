"""Learn low-rank parameter directions whose top-k subset reconstructs
per-sample divergence gradients.

The basis holds two Tucker-factored transforms per subnetwork: an *in*
block that projects a gradient to a coefficient and an *out* block (unit
norm across all parameter tensors) that maps the coefficient back.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalError, ShapeError
from .models import DIVERGENCES, predict
from .numkit import ParamSet, adamw_update, uniform
from .tucker import TuckerTensor, clip_ranks, stacked_contract, stacked_grads, stacked_materialize

SIDES = ("in", "out")


class SubnetworkBasis:
    """``n_v`` subnetworks, each one Tucker block per parameter tensor and side.

    All cores and factors live in one flat vector ``theta`` so the optimizer
    updates them in a single pass.  Within ``theta`` the order is: side
    (in, out), parameter tensor (ParamSet order), then core followed by the
    mode factors; each array is stacked over subnetworks on its first axis.
    """

    def __init__(self, n_v, shapes, ranks, theta=None):
        self.n_v = int(n_v)
        if self.n_v < 1:
            raise ConfigError("n_v must be at least 1")
        self.shapes = {name: tuple(int(d) for d in s) for name, s in shapes.items()}
        self.ranks = {name: clip_ranks(self.shapes[name], ranks[name]) for name in self.shapes}
        self._layout = {}
        pos = 0
        for side in SIDES:
            for name, shape in self.shapes.items():
                r = self.ranks[name]
                entries = [(self.n_v,) + r] + [(self.n_v, d, rn) for d, rn in zip(shape, r)]
                spans = []
                for s in entries:
                    size = math.prod(s)
                    spans.append((pos, pos + size, s))
                    pos += size
                self._layout[side, name] = spans
        self.size = pos
        self.n_w = int(sum(math.prod(s) for s in self.shapes.values()))
        if theta is None:
            theta = np.zeros(self.size)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ShapeError(f"basis vector has shape {theta.shape}, expected ({self.size},)")
        self.theta = theta

    @classmethod
    def random(cls, n_v, shapes, ranks, rng):
        """Cores and factors ~ U(-1/sqrt(max extent), +) per parameter tensor, out side normalized."""
        basis = cls(n_v, shapes, ranks)
        for side in SIDES:
            for name, shape in basis.shapes.items():
                bound = 1.0 / math.sqrt(max(shape))
                for lo, hi, _ in basis._layout[side, name]:
                    basis.theta[lo:hi] = uniform(rng, -bound, bound, hi - lo)
        return basis.normalize_out()

    def copy(self):
        return SubnetworkBasis(self.n_v, self.shapes, self.ranks, self.theta.copy())

    def core(self, side, name):
        lo, hi, s = self._layout[side, name][0]
        return self.theta[lo:hi].reshape(s)

    def factors(self, side, name):
        return [self.theta[lo:hi].reshape(s) for lo, hi, s in self._layout[side, name][1:]]

    def block(self, k, name, side="out"):
        return TuckerTensor(self.core(side, name)[k].copy(), [u[k].copy() for u in self.factors(side, name)])

    def dense(self, side):
        """Materialized transform as an ``(n_v, n_w)`` matrix in ParamSet flattening order."""
        parts = [
            stacked_materialize(self.core(side, name), self.factors(side, name)).reshape(self.n_v, -1)
            for name in self.shapes
        ]
        return np.concatenate(parts, axis=1)

    def direction(self, k, side="out"):
        """Subnetwork ``k`` reshaped like the model parameters."""
        return ParamSet.unflatten(self.dense(side)[k], self.shapes)

    def backprop(self, d_in, d_out):
        """Map gradients w.r.t. the dense transforms to a gradient w.r.t. ``theta``."""
        grad = np.zeros(self.size)
        for side, dense_grad in (("in", d_in), ("out", d_out)):
            col = 0
            for name, shape in self.shapes.items():
                n = math.prod(shape)
                dblock = dense_grad[:, col : col + n].reshape((self.n_v,) + shape)
                col += n
                dcore, dfactors = stacked_grads(self.core(side, name), self.factors(side, name), dblock)
                spans = self._layout[side, name]
                grad[spans[0][0] : spans[0][1]] = dcore.ravel()
                for (lo, hi, _), df in zip(spans[1:], dfactors):
                    grad[lo:hi] = df.ravel()
        return grad

    def out_norms(self):
        d = self.dense("out")
        return np.sqrt(np.einsum("kw,kw->k", d, d))

    def normalize_out(self):
        """Rescale each subnetwork's out cores so its full out direction has unit norm (in place)."""
        norms = self.out_norms()
        dead = np.flatnonzero(~(norms > 0.0) | ~np.isfinite(norms))
        if dead.size:
            raise NumericalError(f"subnetwork {int(dead[0])} has a zero or non-finite out direction")
        for name in self.shapes:
            core = self.core("out", name)
            core /= norms.reshape((self.n_v,) + (1,) * (core.ndim - 1))
        return self

    # -- serialization -------------------------------------------------------

    def to_record(self):
        meta = {
            "n_v": self.n_v,
            "tensors": [
                {"name": n, "shape": list(s), "ranks": list(self.ranks[n])} for n, s in self.shapes.items()
            ],
        }
        return meta, {"theta": self.theta}

    @classmethod
    def from_record(cls, meta, arrays):
        shapes = {t["name"]: tuple(t["shape"]) for t in meta["tensors"]}
        ranks = {t["name"]: tuple(t["ranks"]) for t in meta["tensors"]}
        return cls(meta["n_v"], shapes, ranks, arrays["theta"])


# ---------------------------------------------------------------------------
# configuration and telemetry


@dataclass
class DecompositionConfig:
    n_v: int = 5
    rank: object = 1
    k: float = 0.1
    epochs: int = 1000
    batch_size: int = 32
    lr: float = 0.01
    lr_decay: float = 0.8
    decay_every: int = 100
    n_data: int = 1000
    divergence: str = "mse"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    loss_eps: float = 1e-12

    def validate(self):
        if self.n_v < 1:
            raise ConfigError("n_v must be >= 1")
        if not 0.0 < self.k <= 1.0:
            raise ConfigError(f"k must lie in (0, 1], got {self.k}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so every sample has a distinct reference")
        if topk_count(self.batch_size, self.n_v, self.k) < 1:
            raise ConfigError("k * batch_size * n_v must be >= 1")
        if self.epochs < 1 or self.n_data < 2 or self.decay_every < 1:
            raise ConfigError("epochs, n_data and decay_every must be positive (n_data >= 2)")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence {self.divergence!r}")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")
        return self

    def rank_for(self, name, shape):
        r = self.rank[name] if isinstance(self.rank, dict) else self.rank
        return clip_ranks(shape, r)

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainStats:
    losses: list = field(default_factory=list)
    pact: Optional[np.ndarray] = None
    epoch_seconds: list = field(default_factory=list)
    final_masks: Optional[list] = None

    @property
    def final_loss(self):
        return self.losses[-1]

    def dead(self):
        return np.flatnonzero(self.pact == 0.0)


# ---------------------------------------------------------------------------
# operations


class TopKMask(NamedTuple):
    mask: np.ndarray
    tau: float


def topk_count(n_s, n_v, k):
    # small slack so e.g. 0.1 * 30 * 10 does not floor to 29
    return int(math.floor(k * n_s * n_v + 1e-9))


def batch_topk(coeffs, k):
    """Keep the ``floor(k * n_s * n_v)`` largest |coefficients| across the whole batch."""
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2:
        raise ShapeError("batch_topk expects an (n_s, n_v) coefficient matrix")
    if not 0.0 < k <= 1.0:
        raise ConfigError(f"k must lie in (0, 1], got {k}")
    K = topk_count(*coeffs.shape, k)
    if K < 1:
        raise ConfigError(f"k={k} selects no coefficients from a {coeffs.shape} batch")
    mask = kernels.topk_mask(coeffs, K)
    return TopKMask(mask, float(np.min(np.abs(coeffs[mask]))))


def project(basis, grad):
    """Coefficients of one gradient (ParamSet) in subnetwork space, via factored contraction."""
    if list(grad.keys()) != list(basis.shapes):
        raise ShapeError(f"gradient tensors {list(grad)} do not match basis {list(basis.shapes)}")
    total = np.zeros(basis.n_v)
    for name, shape in basis.shapes.items():
        if grad[name].shape != shape:
            raise ShapeError(f"gradient {name!r} has shape {grad[name].shape}, expected {shape}")
        total += stacked_contract(basis.core("in", name), basis.factors("in", name), grad[name])
    return total


def project_batch(basis, G):
    """``(n_s, n_w)`` flat gradients -> ``(n_s, n_v)`` coefficients."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != basis.n_w:
        raise ShapeError(f"gradient matrix must be (n_s, {basis.n_w}), got {G.shape}")
    return G @ basis.dense("in").T


def reconstruct(basis, coeffs, mask):
    """Masked coefficients mapped back through the out blocks.

    A 1-D ``coeffs`` returns a ParamSet; a 2-D batch returns ``(n_s, n_w)``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if coeffs.shape != mask.shape or coeffs.shape[-1] != basis.n_v:
        raise ShapeError(f"coefficients {coeffs.shape} and mask {mask.shape} must agree with n_v={basis.n_v}")
    out = (coeffs * mask) @ basis.dense("out")
    if coeffs.ndim == 1:
        return ParamSet.unflatten(out, basis.shapes)
    return out


def _as_matrix(g):
    if isinstance(g, ParamSet):
        return g.flatten()[None, :]
    g = np.asarray(g, dtype=np.float64)
    return g[None, :] if g.ndim == 1 else g


def recon_loss(grad, grad_hat, eps=1e-12):
    """Mean over samples of ``||g - g_hat|| / (||g|| + eps)``."""
    G, H = _as_matrix(grad), _as_matrix(grad_hat)
    if G.shape != H.shape:
        raise ShapeError(f"gradient shapes {G.shape} and {H.shape} differ")
    return float(np.mean(np.linalg.norm(G - H, axis=1) / (np.linalg.norm(G, axis=1) + eps)))


class LossGrad(NamedTuple):
    loss: float
    grad: np.ndarray
    mask: np.ndarray
    coeffs: np.ndarray


def loss_gradients(basis, G, k, mask=None, eps=1e-12):
    """Batch reconstruction loss and its exact gradient w.r.t. ``basis.theta``.

    The top-k mask is computed from the current coefficients unless given,
    and is treated as a constant when differentiating.
    """
    G = np.ascontiguousarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != basis.n_w:
        raise ShapeError(f"gradient matrix must be (n_s, {basis.n_w}), got {G.shape}")
    v_in = basis.dense("in")
    v_out = basis.dense("out")
    C = G @ v_in.T
    if mask is None:
        mask = batch_topk(C, k).mask
    loss, d_in, d_out = kernels.l3d_loss_grad(G, C, np.ascontiguousarray(mask, dtype=np.float64),
                                              v_out, eps)
    grad = basis.backprop(d_in, d_out)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError(f"non-finite reconstruction loss or gradient (loss={loss})")
    return LossGrad(loss, grad, np.asarray(mask, dtype=bool), C)


def pair_references(rng, batch_size):
    """For each position i a uniformly drawn partner r != i in the same batch."""
    if batch_size < 2:
        raise ConfigError("reference pairing needs a batch of at least 2")
    r = rng.integers(0, batch_size - 1, size=batch_size)
    return r + (r >= np.arange(batch_size))


def compute_pact(counts, n_samples):
    """Fraction of samples whose mask row selected each subnetwork."""
    counts = np.asarray(counts, dtype=np.float64)
    if n_samples <= 0:
        return np.zeros_like(counts)
    return counts / n_samples


def _batches(n, batch_size, min_size):
    starts = list(range(0, n, batch_size))
    out = []
    for s in starts:
        e = min(s + batch_size, n)
        if e - s >= min_size:
            out.append((s, e))
    return out


def train_l3d(spec, params, X, config, rng, progress=None, record_masks=False):
    """Fit a :class:`SubnetworkBasis` to the model ``(spec, params)`` on inputs ``X``.

    Each minibatch pairs every sample with a random other sample's output as
    reference, computes divergence gradients at the fixed parameters,
    projects, keeps the batch top-k, reconstructs, and takes one AdamW step
    on the basis followed by out-direction renormalization.  The learning
    rate is multiplied by ``lr_decay`` every ``decay_every`` epochs.  A
    trailing batch too small to select at least one coefficient is skipped.
    """
    config.validate()
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_in:
        raise ShapeError(f"inputs must be (n, {spec.n_in}), got {X.shape}")
    shapes = spec.param_shapes()
    ranks = {name: config.rank_for(name, s) for name, s in shapes.items()}
    basis = SubnetworkBasis.random(config.n_v, shapes, ranks, rng.child("basis-init"))
    shuffle, pairing = rng.child("shuffle"), rng.child("pairing")

    lay = spec.layout()
    theta_model = params.flatten()
    y0 = predict(spec, params, X)
    div = DIVERGENCES[config.divergence]
    m = np.zeros(basis.size)
    v = np.zeros(basis.size)
    step = 0
    n = X.shape[0]
    min_b = 2
    while min_b <= config.batch_size and topk_count(min_b, config.n_v, config.k) < 1:
        min_b += 1
    stats = TrainStats()
    usage = np.zeros(config.n_v)
    seen = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        last = epoch == config.epochs - 1
        perm = shuffle.permutation(n)
        if last:
            usage[:] = 0.0
            seen = 0
            if record_masks:
                stats.final_masks = []
        total = 0.0
        count = 0
        for s, e in _batches(n, config.batch_size, min_b):
            idx = perm[s:e]
            B = e - s
            ref = idx[pair_references(pairing, B)]
            G = kernels.per_sample_grads(theta_model, lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off, lay.n_w,
                                         X[idx], y0[ref], div)
            lg = loss_gradients(basis, G, config.k, eps=config.loss_eps)
            step += 1
            _adamw(basis.theta, lg.grad, m, v, step, lr, config)
            basis.normalize_out()
            total += lg.loss * B
            count += B
            if last:
                usage += lg.mask.sum(axis=0)
                seen += B
                if record_masks:
                    stats.final_masks.append((idx.copy(), lg.mask.copy()))
        mean = total / count
        if not math.isfinite(mean):
            raise NumericalError(f"reconstruction loss became non-finite at epoch {epoch}")
        stats.losses.append(mean)
        stats.epoch_seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, mean)
    stats.pact = compute_pact(usage, seen)
    return basis, stats


def _adamw(p, g, m, v, step, lr, config):
    adamw_update(p, g, m, v, step, lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)


def evaluate_l3d(spec, params, basis, X, config, rng):
    """Reconstruction loss and P_act of a fixed basis, without updating it.

    Batches run over ``X`` in order; references are paired as in training.
    Returns ``(mean_loss, pact)``.
    """
    config.validate()
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_in:
        raise ShapeError(f"inputs must be (n, {spec.n_in}), got {X.shape}")
    if basis.shapes != {n: tuple(d) for n, d in spec.param_shapes().items()}:
        raise ShapeError("basis blocks do not match the model's parameter shapes")
    lay = spec.layout()
    theta_model = params.flatten()
    y0 = predict(spec, params, X)
    div = DIVERGENCES[config.divergence]
    total, count = 0.0, 0
    usage = np.zeros(basis.n_v)
    for s, e in _batches(X.shape[0], config.batch_size, 2):
        idx = np.arange(s, e)
        ref = idx[pair_references(rng, e - s)]
        G = kernels.per_sample_grads(theta_model, lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off, lay.n_w,
                                     X[idx], y0[ref], div)
        lg = loss_gradients(basis, G, config.k, eps=config.loss_eps)
        total += lg.loss * (e - s)
        count += e - s
        usage += lg.mask.sum(axis=0)
    return total / count, compute_pact(usage, count)
