"""Hot kernels, dispatched to numba or numpy according to ``L3D_BACKEND``.

Both implementations live side by side so they can be compared directly
(see ``tests/test_kernels.py`` and ``benchmarks/bench_kernels.py``).
"""
from .._accel import BACKEND
from . import _numpy

if BACKEND == "numba":
    from . import _jit as _impl
else:
    _impl = _numpy

IDENTITY, RELU, GELU = _numpy.IDENTITY, _numpy.RELU, _numpy.GELU
MSE, KL = _numpy.MSE, _numpy.KL

mlp_forward = _impl.mlp_forward
per_sample_grads = _impl.per_sample_grads
jvp = _impl.jvp
train_epoch = _impl.train_epoch
topk_mask = _impl.topk_mask
l3d_loss_grad = _impl.l3d_loss_grad


def implementation(name):
    """Return the kernel module for ``"numpy"`` or ``"numba"``."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _jit

        return _jit
    raise ValueError(f"unknown backend {name!r}")


__all__ = [
    "BACKEND",
    "GELU",
    "IDENTITY",
    "KL",
    "MSE",
    "RELU",
    "implementation",
    "jvp",
    "l3d_loss_grad",
    "mlp_forward",
    "per_sample_grads",
    "topk_mask",
    "train_epoch",
]
