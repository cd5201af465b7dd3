"""Toy MLPs: architecture, forward/backward, divergences, sparse data and training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalError, ShapeError
from .numkit import ParamSet, as_tensor, uniform

ACTIVATIONS = {"identity": kernels.IDENTITY, "relu": kernels.RELU, "gelu": kernels.GELU}
DIVERGENCES = {"mse": kernels.MSE, "kl": kernels.KL}
TASK_KINDS = ("tms", "tmcs", "highrank", "square")


class NetLayout(NamedTuple):
    """Flat-vector view of an :class:`MlpSpec` for the kernels."""

    dims: np.ndarray
    acts: np.ndarray
    w_off: np.ndarray
    w_tr: np.ndarray
    b_off: np.ndarray
    n_w: int


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network ``n_i -> h_1 -> ... -> n_o``.

    Layer ``l`` computes ``act_l(a @ W_l.T + b_l)`` with ``W_l`` stored as
    ``(n_out, n_in)``.  Parameters are named ``layer{l}.weight`` and
    ``layer{l}.bias`` and flattened in that order.  A ``tied`` network
    (``n -> h -> n`` only) has no ``layer1.weight``; its decoder is the
    transpose of ``layer0.weight``.
    """

    layer_dims: tuple
    activations: tuple
    biases: tuple
    tied: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "biases", tuple(bool(b) for b in self.biases))
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigError(f"need at least one layer with positive extents, got {dims}")
        n_layers = len(dims) - 1
        if len(self.activations) != n_layers or len(self.biases) != n_layers:
            raise ConfigError("activation and bias lists must have one entry per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        object.__setattr__(self, "tied", bool(self.tied))
        if self.tied and (n_layers != 2 or dims[0] != dims[2]):
            raise ConfigError("weight tying needs an n -> h -> n network")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def n_in(self):
        return self.layer_dims[0]

    @property
    def n_out(self):
        return self.layer_dims[-1]

    def param_shapes(self):
        shapes = {}
        for l in range(self.n_layers):
            if not (self.tied and l == 1):
                shapes[f"layer{l}.weight"] = (self.layer_dims[l + 1], self.layer_dims[l])
            if self.biases[l]:
                shapes[f"layer{l}.bias"] = (self.layer_dims[l + 1],)
        return shapes

    @property
    def n_params(self):
        return int(sum(math.prod(s) for s in self.param_shapes().values()))

    def layout(self):
        w_off, w_tr, b_off, pos = [], [], [], 0
        for l in range(self.n_layers):
            if self.tied and l == 1:
                w_off.append(w_off[0])
                w_tr.append(1)
            else:
                w_off.append(pos)
                w_tr.append(0)
                pos += self.layer_dims[l + 1] * self.layer_dims[l]
            if self.biases[l]:
                b_off.append(pos)
                pos += self.layer_dims[l + 1]
            else:
                b_off.append(-1)
        return NetLayout(
            np.asarray(self.layer_dims, dtype=np.int64),
            np.asarray([ACTIVATIONS[a] for a in self.activations], dtype=np.int64),
            np.asarray(w_off, dtype=np.int64),
            np.asarray(w_tr, dtype=np.int64),
            np.asarray(b_off, dtype=np.int64),
            pos,
        )

    def to_dict(self):
        return {
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "biases": list(self.biases),
            "tied": self.tied,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_dims"]), tuple(d["activations"]), tuple(d["biases"]), d.get("tied", False))


def tms_family(n_in, n_hidden, n_out, output_bias=True, tied=False):
    """Linear encoder, ReLU on the output only, no encoder bias."""
    return MlpSpec((n_in, n_hidden, n_out), ("identity", "relu"), (False, bool(output_bias)), tied)


def preset_spec(kind):
    if kind == "tms":
        return tms_family(5, 2, 5, tied=True)
    # The linear-combination tasks run without an output bias: with one, pairs
    # whose sample input is all-zero yield bias-only gradients that no
    # per-feature direction can reconstruct.
    if kind == "tmcs":
        return tms_family(10, 5, 10, output_bias=False)
    if kind == "highrank":
        return tms_family(30, 10, 30, output_bias=False)
    if kind == "square":
        return MlpSpec((5, 10, 10, 10, 10, 5), ("gelu",) * 4 + ("identity",), (True,) * 5)
    raise ConfigError(f"unknown task kind {kind!r}")


def mirror_init_applies(spec):
    """True for untied ``n -> h -> n`` networks, whose decoder can start as the encoder transpose."""
    return spec.n_layers == 2 and spec.n_in == spec.n_out and not spec.tied


def init_params(spec, rng, mirror=False):
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.

    With ``mirror`` an untied ``n -> h -> n`` decoder starts as the encoder
    transpose, so every input's path to its own output begins positive and
    no output ReLU starts out dead.  The two are trained independently.
    """
    if mirror and not mirror_init_applies(spec):
        raise ConfigError("mirrored initialization needs an untied n -> h -> n network")
    params = ParamSet()
    for name, shape in spec.param_shapes().items():
        if mirror and name == "layer1.weight":
            params[name] = params["layer0.weight"].T.copy()
        elif name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[1])
            params[name] = uniform(rng, -bound, bound, shape)
        else:
            params[name] = np.zeros(shape)
    return params


def _flat(spec, params):
    shapes = spec.param_shapes()
    if list(params.keys()) != list(shapes):
        raise ShapeError(f"parameter names {list(params)} do not match architecture {list(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
    return params.flatten()


def _batch(X, n_cols, what="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_cols:
        raise ShapeError(f"{what} must have {n_cols} columns, got shape {X.shape}")
    return np.ascontiguousarray(X)


# ---------------------------------------------------------------------------
# forward / backward


def forward(spec, params, X):
    """Outputs plus a cache of per-layer pre- and post-activations.

    ``cache["pre"][l]`` is the input to activation ``l``; ``cache["post"][0]``
    is ``X`` itself.
    """
    theta = _flat(spec, params)
    lay = spec.layout()
    X = _batch(X, spec.n_in)
    zs, acts = kernels._numpy._forward(theta, lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off, X)
    return acts[-1], {"pre": zs[1:], "post": acts}


def predict(spec, params, X):
    """Outputs only, through the active backend."""
    lay = spec.layout()
    return kernels.mlp_forward(_flat(spec, params), lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off,
                               _batch(X, spec.n_in))


def divergence_mse(y, y_ref):
    """Squared error divided by the output dimension."""
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y.shape != y_ref.shape:
        raise ShapeError(f"divergence_mse: shapes {y.shape} and {y_ref.shape} differ")
    d = y - y_ref
    return float(d @ d / y.size)


def _log_softmax(z):
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


def divergence_kl(logits_p, logits_q):
    """KL(softmax(logits_p) || softmax(logits_q))."""
    lp = as_tensor(logits_p, "logits_p")
    lq = as_tensor(logits_q, "logits_q")
    if lp.shape != lq.shape:
        raise ShapeError(f"divergence_kl: shapes {lp.shape} and {lq.shape} differ")
    lp, lq = _log_softmax(lp), _log_softmax(lq)
    return float(max(np.sum(np.exp(lp) * (lp - lq)), 0.0))


def divergence(name):
    if name == "mse":
        return divergence_mse
    if name == "kl":
        return divergence_kl
    raise ConfigError(f"unknown divergence {name!r}")


def batch_grad_divergence(spec, params, X, Y_ref, div="mse", theta=None):
    """Per-sample gradients of ``D(f(x_b), y_ref_b)`` as an ``(n_s, n_w)`` matrix.

    Columns follow ``params.flatten()`` order.  ``theta`` may be passed to
    skip re-flattening in tight loops.
    """
    if div not in DIVERGENCES:
        raise ConfigError(f"unknown divergence {div!r}")
    lay = spec.layout()
    if theta is None:
        theta = _flat(spec, params)
    X = _batch(X, spec.n_in)
    Y_ref = _batch(Y_ref, spec.n_out, "Y_ref")
    if Y_ref.shape[0] != X.shape[0]:
        raise ShapeError("X and Y_ref must have the same number of rows")
    return kernels.per_sample_grads(theta, lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off, lay.n_w,
                                    X, Y_ref, DIVERGENCES[div])


def grad_divergence(spec, params, x, y_ref, div="mse"):
    """Gradient of ``D(f(x), y_ref)`` with respect to every parameter tensor."""
    x = np.asarray(x, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if x.ndim != 1 or y_ref.ndim != 1:
        raise ShapeError("grad_divergence takes a single input row and a single reference row")
    g = batch_grad_divergence(spec, params, x[None], y_ref[None], div)[0]
    return ParamSet.unflatten(g, spec.param_shapes())


def jvp_in_direction(spec, params, X, direction):
    """d/dδ f(X, W + δ·direction) at δ = 0, one row per input."""
    theta = _flat(spec, params)
    if isinstance(direction, ParamSet):
        vflat = _flat(spec, direction)
    else:
        vflat = np.asarray(direction, dtype=np.float64)
        if vflat.shape != theta.shape:
            raise ShapeError(f"direction has shape {vflat.shape}, expected {theta.shape}")
    lay = spec.layout()
    single = np.asarray(X).ndim == 1
    out = kernels.jvp(theta, np.ascontiguousarray(vflat), lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off,
                      _batch(X, spec.n_in))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# data


@dataclass
class ToyTaskSpec:
    kind: str
    n_in: int
    n_out: int
    sparsity: float = 0.05
    lo: float = 0.0
    hi: float = 1.0
    A: Optional[np.ndarray] = None
    group_size: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        if self.kind in ("tmcs", "highrank"):
            if self.A is None:
                raise ConfigError(f"{self.kind} task requires a coefficient matrix A")
            self.A = np.asarray(self.A, dtype=np.float64)
            if self.A.shape != (self.n_out, self.n_in):
                raise ConfigError(f"A has shape {self.A.shape}, expected {(self.n_out, self.n_in)}")
        if self.group_size < 1 or self.n_in % self.group_size:
            raise ConfigError(f"group_size {self.group_size} must divide n_in {self.n_in}")

    @property
    def n_groups(self):
        return self.n_in // self.group_size

    def groups(self):
        """Input column indices of each jointly gated feature group."""
        g = self.group_size
        return [np.arange(j * g, (j + 1) * g) for j in range(self.n_groups)]

    def output_groups(self):
        """Output indices each group is expected to drive (identity-indexed tasks only)."""
        return self.groups()

    def sample_inputs(self, rng, n):
        if self.group_size > 1:
            return gen_grouped(rng, n, self.n_in, self.group_size, self.sparsity, self.lo, self.hi)
        return gen_sparse(rng, n, self.n_in, self.sparsity, self.lo, self.hi)

    def sample(self, rng, n):
        X = self.sample_inputs(rng, n)
        return Dataset(X, make_targets(self, X))


def make_task(kind, rng=None, **overrides):
    """Task preset; linear tasks draw A ~ U[0, 3) from ``rng``."""
    if kind == "tms":
        kw = dict(n_in=5, n_out=5)
    elif kind == "tmcs":
        kw = dict(n_in=10, n_out=10)
    elif kind == "highrank":
        kw = dict(n_in=30, n_out=30, group_size=5)
    elif kind == "square":
        kw = dict(n_in=5, n_out=5, lo=-1.0, hi=1.0)
    else:
        raise ConfigError(f"unknown task kind {kind!r}")
    kw.update(overrides)
    if kind in ("tmcs", "highrank") and kw.get("A") is None:
        if rng is None:
            raise ConfigError(f"{kind} needs an rng to draw its coefficient matrix")
        a_lo, a_hi = kw.pop("a_range", (0.0, 3.0))
        kw["A"] = uniform(rng, a_lo, a_hi, (kw["n_out"], kw["n_in"]))
    kw.pop("a_range", None)
    return ToyTaskSpec(kind=kind, **kw)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        if self.X.shape[0] != self.Y.shape[0]:
            raise ShapeError("X and Y row counts differ")

    def __len__(self):
        return self.X.shape[0]


def _check_sparsity(sparsity):
    if not 0.0 < sparsity <= 1.0:
        raise ConfigError(f"sparsity must lie in (0, 1], got {sparsity}")


def gen_sparse(rng, n_s, n_i, sparsity, lo=0.0, hi=1.0):
    """Each entry independently active with probability ``sparsity``, value ~ U[lo, hi)."""
    _check_sparsity(sparsity)
    gate = rng.random((n_s, n_i)) < sparsity
    values = uniform(rng, lo, hi, (n_s, n_i))
    return np.where(gate, values, 0.0)


def gen_grouped(rng, n_s, n_i, group_size, sparsity, lo=0.0, hi=1.0):
    """Contiguous groups of ``group_size`` features switched on and off together."""
    _check_sparsity(sparsity)
    if group_size < 1 or n_i % group_size:
        raise ConfigError(f"group_size {group_size} must divide n_i {n_i}")
    gate = rng.random((n_s, n_i // group_size)) < sparsity
    values = uniform(rng, lo, hi, (n_s, n_i))
    return np.where(np.repeat(gate, group_size, axis=1), values, 0.0)


def make_targets(task, X):
    X = _batch(X, task.n_in)
    if task.kind == "tms":
        return X.copy()
    if task.kind == "square":
        return X * X
    if task.A is None:
        raise ConfigError(f"{task.kind} targets need A")
    return X @ task.A.T


# ---------------------------------------------------------------------------
# training


@dataclass
class ToyTrainConfig:
    n_data: int = 10000
    epochs: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    mirror_init: bool = True  # only used where mirror_init_applies


@dataclass
class ToyTrainResult:
    params: ParamSet
    losses: list = field(default_factory=list)


def train_toy(spec, task, config, rng, data=None, progress=None):
    """Minibatch AdamW on the MSE between model outputs and task targets.

    Data are reshuffled every epoch.  ``data`` defaults to ``config.n_data``
    fresh samples drawn from ``task`` with ``rng.child("data")``.
    """
    if task.n_in != spec.n_in or task.n_out != spec.n_out:
        raise ConfigError(f"task dims ({task.n_in}, {task.n_out}) do not match the model")
    if data is None:
        data = task.sample(rng.child("data"), config.n_data)
    params = init_params(spec, rng.child("init"), config.mirror_init and mirror_init_applies(spec))
    shuffle = rng.child("shuffle")
    lay = spec.layout()
    theta = params.flatten()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    losses = []
    for epoch in range(config.epochs):
        perm = shuffle.permutation(len(data)).astype(np.int64)
        loss, step = kernels.train_epoch(theta, m, v, step, config.lr, config.beta1, config.beta2,
                                         config.eps, config.weight_decay, lay.dims, lay.acts,
                                         lay.w_off, lay.w_tr, lay.b_off, data.X, data.Y, perm,
                                         config.batch_size)
        if not math.isfinite(loss):
            raise NumericalError(f"toy training diverged at epoch {epoch}")
        losses.append(float(loss))
        if progress is not None:
            progress(epoch, loss)
    return ToyTrainResult(ParamSet.unflatten(theta, spec.param_shapes()), losses)
