import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from l3d.errors import ConfigError, ShapeError
from l3d.models import (
    MlpSpec,
    ToyTrainConfig,
    divergence_kl,
    divergence_mse,
    forward,
    gen_grouped,
    gen_sparse,
    init_params,
    jvp_in_direction,
    make_targets,
    make_task,
    mirror_init_applies,
    predict,
    preset_spec,
    tms_family,
    train_toy,
)
from l3d.numkit import ParamSet, Rng, uniform
from scipy.special import erf

from conftest import fd_relative_error, random_pairs, random_params


def gelu(z):
    return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))


def reference_forward(spec, params, X):
    """Plain numpy forward pass written independently of the kernels."""
    h = X
    for l, act in enumerate(spec.activations):
        if spec.tied and l == 1:
            W = params["layer0.weight"].T
        else:
            W = params[f"layer{l}.weight"]
        z = h @ W.T
        if spec.biases[l]:
            z = z + params[f"layer{l}.bias"]
        h = {"identity": z, "relu": np.maximum(z, 0.0), "gelu": gelu(z)}[act]
    return h


def test_forward_matches_reference(preset):
    kind, spec = preset
    p = random_params(spec, 0)
    X = uniform(Rng(1), -1, 1, (7, spec.n_in))
    np.testing.assert_allclose(predict(spec, p, X), reference_forward(spec, p, X), rtol=1e-12, atol=1e-14)
    y, cache = forward(spec, p, X)
    np.testing.assert_allclose(y, predict(spec, p, X), rtol=1e-13, atol=1e-15)
    assert len(cache["pre"]) == spec.n_layers and cache["post"][0].shape == X.shape


def test_preset_architectures():
    tms = preset_spec("tms")
    assert tms.tied and tms.layer_dims == (5, 2, 5) and tms.activations == ("identity", "relu")
    assert list(tms.param_shapes()) == ["layer0.weight", "layer1.bias"]
    assert preset_spec("tmcs").layer_dims == (10, 5, 10)
    assert preset_spec("highrank").layer_dims == (30, 10, 30)
    sq = preset_spec("square")
    assert sq.layer_dims == (5, 10, 10, 10, 10, 5) and sq.activations[:4] == ("gelu",) * 4
    with pytest.raises(ConfigError):
        preset_spec("mnist")


def test_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((5, 2, 5), ("relu",), (False, False))
    with pytest.raises(ConfigError):
        MlpSpec((5, 2, 5), ("relu", "tanh"), (False, False))
    with pytest.raises(ConfigError):
        MlpSpec((5, 2, 4), ("identity", "relu"), (False, True), tied=True)
    spec = tms_family(4, 2, 4)
    assert MlpSpec.from_dict(spec.to_dict()) == spec


def test_tied_equals_untied_with_transposed_decoder():
    tied = tms_family(5, 2, 5, tied=True)
    untied = tms_family(5, 2, 5)
    p = random_params(tied, 3)
    q = ParamSet([("layer0.weight", p["layer0.weight"]), ("layer1.weight", p["layer0.weight"].T),
                  ("layer1.bias", p["layer1.bias"])])
    X = uniform(Rng(4), 0, 1, (9, 5))
    np.testing.assert_allclose(predict(tied, p, X), predict(untied, q, X), rtol=1e-14)


def test_init_params():
    spec = preset_spec("tmcs")
    p = init_params(spec, Rng(0))
    bound = 1 / np.sqrt(10)
    assert np.all(np.abs(p["layer0.weight"]) < bound)
    m = init_params(spec, Rng(0), mirror=True)
    assert np.array_equal(m["layer1.weight"], m["layer0.weight"].T)
    assert mirror_init_applies(spec) and not mirror_init_applies(preset_spec("tms"))
    with pytest.raises(ConfigError):
        init_params(preset_spec("square"), Rng(0), mirror=True)


def test_divergences():
    assert divergence_mse([1.0, 2.0], [0.0, 0.0]) == 2.5
    assert divergence_kl([0.3, -1.0, 2.0], [0.3, -1.0, 2.0]) == 0.0
    # KL of two-point distributions against the closed form
    p = np.array([0.25, 0.75])
    q = np.array([0.5, 0.5])
    want = float(np.sum(p * np.log(p / q)))
    assert abs(divergence_kl(np.log(p), np.log(q)) - want) < 1e-15
    with pytest.raises(ShapeError):
        divergence_mse([1.0], [1.0, 2.0])


@pytest.mark.parametrize("div", ["mse", "kl"])
def test_gradient_matches_finite_differences(preset, div):
    kind, spec = preset
    task = make_task(kind, Rng(0))
    p = random_params(spec, 10)
    X, R = random_pairs(spec, task, 11, n=5)
    Yr = predict(spec, p, R)
    for x, y in zip(X, Yr):
        assert fd_relative_error(spec, p, x, y, div) < 1e-5


def test_jvp_matches_finite_differences(preset):
    kind, spec = preset
    p = random_params(spec, 2)
    v = uniform(Rng(3), -1, 1, p.size)
    X = uniform(Rng(4), -1, 1, (4, spec.n_in))
    h = 1e-6
    fd = (predict(spec, ParamSet.unflatten(p.flatten() + h * v, p.shapes), X)
          - predict(spec, ParamSet.unflatten(p.flatten() - h * v, p.shapes), X)) / (2 * h)
    np.testing.assert_allclose(jvp_in_direction(spec, p, X, v), fd, rtol=1e-6, atol=1e-8)


@given(st.floats(0.01, 1.0), st.integers(0, 2**20))
def test_gen_sparse_range_and_rate(sparsity, seed):
    X = gen_sparse(Rng(seed), 4000, 5, sparsity, 0.0, 1.0)
    assert X.shape == (4000, 5)
    assert np.all((X >= 0) & (X < 1))
    rate = np.mean(X != 0)
    sd = np.sqrt(sparsity * (1 - sparsity) / X.size)
    assert abs(rate - sparsity) < 6 * sd + 1e-9


def test_gen_grouped_gates_whole_groups():
    X = gen_grouped(Rng(0), 5000, 30, 5, 0.05)
    on = (X != 0).reshape(5000, 6, 5)
    assert np.all(on.all(axis=2) | ~on.any(axis=2))
    assert abs(on[:, :, 0].mean() - 0.05) < 0.01
    with pytest.raises(ConfigError):
        gen_grouped(Rng(0), 5, 30, 7, 0.05)


def test_make_task_and_targets():
    sq = make_task("square")
    assert (sq.lo, sq.hi) == (-1.0, 1.0)
    X = sq.sample_inputs(Rng(0), 2000)
    assert X.min() < -0.5 and X.max() < 1.0
    np.testing.assert_array_equal(make_targets(sq, X), X * X)
    tm = make_task("tmcs", Rng(1))
    assert tm.A.shape == (10, 10) and np.all((tm.A >= 0) & (tm.A < 3))
    np.testing.assert_allclose(make_targets(tm, X[:, :1].repeat(10, 1)), X[:, :1].repeat(10, 1) @ tm.A.T)
    hr = make_task("highrank", Rng(1))
    assert hr.n_groups == 6 and [g.tolist() for g in hr.groups()][1] == [5, 6, 7, 8, 9]
    with pytest.raises(ConfigError):
        make_task("tmcs")
    with pytest.raises(ConfigError):
        make_task("tms", sparsity=0.0)


def test_tms_training_converges():
    spec = preset_spec("tms")
    res = train_toy(spec, make_task("tms"), ToyTrainConfig(epochs=300), Rng(0))
    # per-output MSE; the trivial all-zero predictor scores about 0.017
    assert res.losses[-1] < 0.006
    assert res.losses[-1] < 0.5 * res.losses[0]


def test_training_is_deterministic():
    spec = preset_spec("tmcs")
    task = make_task("tmcs", Rng(0))
    cfg = ToyTrainConfig(epochs=3, n_data=500)
    a = train_toy(spec, task, cfg, Rng(5))
    b = train_toy(spec, task, cfg, Rng(5))
    assert a.params.flatten().tobytes() == b.params.flatten().tobytes()
    assert a.losses == b.losses


def test_training_rejects_mismatched_task():
    with pytest.raises(ConfigError):
        train_toy(preset_spec("tms"), make_task("tmcs", Rng(0)), ToyTrainConfig(epochs=1), Rng(0))
