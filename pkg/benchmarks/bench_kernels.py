"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeats N]

For each preset model it times per-sample gradients on a 32-sample batch,
one toy training epoch on 1000 samples and the reconstruction-loss kernel,
checks that both backends agree, and prints milliseconds per call.
"""
import argparse
import time

import numpy as np

from l3d import kernels
from l3d.models import DIVERGENCES, init_params, make_task, preset_spec
from l3d.numkit import Rng, uniform


def best_of(fn, repeats):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(kind, rng):
    spec = preset_spec(kind)
    task = make_task(kind, rng.child("task"))
    lay = spec.layout()
    theta = init_params(spec, rng.child("init")).flatten()
    data = task.sample(rng.child("data"), 1000)
    X = data.X[:32].copy()
    yref = data.Y[32:64].copy()
    perm = np.arange(1000, dtype=np.int64)
    n_v = 10
    G = uniform(rng.child("g"), -1.0, 1.0, (32, lay.n_w))
    v_in = uniform(rng.child("vi"), -1.0, 1.0, (n_v, lay.n_w))
    v_out = uniform(rng.child("vo"), -1.0, 1.0, (n_v, lay.n_w))
    C = G @ v_in.T
    mask = (np.abs(C) >= np.quantile(np.abs(C), 0.9)).astype(np.float64)

    def grads(k):
        return lambda: k.per_sample_grads(theta, lay.dims, lay.acts, lay.w_off, lay.w_tr, lay.b_off, lay.n_w, X, yref,
                                          DIVERGENCES["mse"])

    def epoch(k):
        def run():
            t = theta.copy()
            m, v = np.zeros_like(t), np.zeros_like(t)
            k.train_epoch(t, m, v, 0, 1e-3, 0.9, 0.999, 1e-8, 0.0, lay.dims, lay.acts, lay.w_off, lay.w_tr,
                          lay.b_off, data.X, data.Y, perm, 32)
            return t

        return run

    def loss(k):
        return lambda: k.l3d_loss_grad(G, C, mask, v_out, 1e-12)

    return {"per_sample_grads": grads, "train_epoch": epoch, "l3d_loss_grad": loss}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    np_k, jit_k = kernels.implementation("numpy"), kernels.implementation("numba")
    print(f"{'model':<10s}{'kernel':<18s}{'numpy ms':>10s}{'numba ms':>10s}{'speedup':>9s}{'max diff':>11s}")
    for kind in ("tms", "tmcs", "highrank", "square"):
        for name, make in cases(kind, Rng(0).child(kind)).items():
            a, b = make(np_k), make(jit_k)
            ra, rb = a(), b()
            ra, rb = (ra if isinstance(ra, tuple) else (ra,)), (rb if isinstance(rb, tuple) else (rb,))
            diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(ra, rb))
            t_np, t_jit = best_of(a, args.repeats), best_of(b, args.repeats)
            print(f"{kind:<10s}{name:<18s}{t_np * 1e3:10.3f}{t_jit * 1e3:10.3f}{t_np / t_jit:8.1f}x{diff:11.2e}")


if __name__ == "__main__":
    main()
