import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from l3d.models import init_params, preset_spec
from l3d.numkit import ParamSet, Rng, uniform

settings.register_profile("l3d", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("l3d")

PRESETS = ("tms", "tmcs", "highrank", "square")


def random_params(spec, seed, scale=1.0):
    """Non-degenerate parameters: random weights and random (not zero) biases."""
    rng = Rng(seed)
    p = init_params(spec, rng.child("w"))
    out = ParamSet()
    for name, arr in p.items():
        if name.endswith(".bias"):
            out[name] = uniform(rng.child(name), -0.3, 0.3, arr.shape)
        else:
            out[name] = scale * arr
    return out


@pytest.fixture(params=PRESETS)
def preset(request):
    return request.param, preset_spec(request.param)


# acceptance-criterion log, printed after the run -----------------------------


def pytest_configure(config):
    config._l3d_acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_l3d_acceptance", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Call with ``(criterion, passed, detail)``; prints one line now and again in the summary."""
    store = request.config._l3d_acceptance

    def log(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        store.append(line)
        print(line)
        return passed

    return log


def approx_rel(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def fd_relative_error(spec, params, x, y_ref, div):
    """Norm-wise relative error between the analytic divergence gradient and
    central differences of the scalar divergence computed from ``predict``."""
    from l3d.models import divergence, grad_divergence, predict
    from l3d.numkit import finite_diff_grad

    shapes = spec.param_shapes()
    dfun = divergence(div)

    def f(theta):
        return dfun(predict(spec, ParamSet.unflatten(theta, shapes), x[None])[0], y_ref)

    fd = finite_diff_grad(f, params.flatten(), h=1e-6)
    an = grad_divergence(spec, params, x, y_ref, div).flatten()
    return approx_rel(an, fd)


def random_pairs(spec, task, seed, n=20):
    """``n`` dense inputs in the task's range and references from other random inputs."""
    rng = Rng(seed)
    X = uniform(rng.child("x"), task.lo, task.hi, (n, spec.n_in))
    R = uniform(rng.child("r"), task.lo, task.hi, (n, spec.n_in))
    return X, R
