import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from l3d import analysis as an
from l3d.decomposition import SubnetworkBasis
from l3d.errors import ConfigError, ShapeError
from l3d.models import MlpSpec, batch_grad_divergence, jvp_in_direction, make_task, predict, tms_family
from l3d.numkit import Rng, uniform

from conftest import random_params

LINEAR = MlpSpec((4, 3), ("identity",), (True,))


def basis_for(spec, n_v=3, rank=1, seed=0):
    shapes = spec.param_shapes()
    return SubnetworkBasis.random(n_v, shapes, {n: rank for n in shapes}, Rng(seed))


def test_delta_zero_is_bit_exact_baseline(preset):
    kind, spec = preset
    p = random_params(spec, 0)
    b = basis_for(spec)
    X = uniform(Rng(1), -1, 1, (50, spec.n_in))
    base = predict(spec, p, X)
    assert np.array_equal(an.intervene(spec, p, b, 1, 0.0, X), base)
    res = an.intervention_sweep(spec, p, b, an.DEFAULT_DELTAS, X, pairs=[(0, 2)])
    i0 = int(np.flatnonzero(an.DEFAULT_DELTAS == 0.0)[0])
    for r in res[:3]:
        assert not np.any(r.changes[i0])
        assert not np.any(r.mean_abs_change()[i0])
    assert not np.any(res[3].changes[i0, i0])


def test_pair_grid_marginals_match_single_sweeps():
    spec = tms_family(5, 2, 5)
    p = random_params(spec, 2)
    b = basis_for(spec, n_v=4, seed=3)
    X = uniform(Rng(4), 0, 1, (30, 5))
    d = np.linspace(-0.5, 0.5, 5)
    s0, s1, pair = an.intervention_sweep(spec, p, b, d, X, subnetworks=[0, 3], pairs=[(0, 3)])
    assert pair.changes.shape == (5, 5, 30, 5)
    assert np.array_equal(pair.changes[:, 2], s0.changes)
    assert np.array_equal(pair.changes[2, :], s1.changes)


def test_linear_model_change_is_delta_times_jvp():
    p = random_params(LINEAR, 5)
    b = basis_for(LINEAR, n_v=2, rank=2)
    X = uniform(Rng(6), -1, 1, (10, 4))
    d = np.array([-1.0, -0.3, 0.7])
    (res,) = an.intervention_sweep(LINEAR, p, b, d, X, subnetworks=[1])
    j = jvp_in_direction(LINEAR, p, X, b.dense("out")[1])
    for i, delta in enumerate(d):
        np.testing.assert_allclose(res.changes[i], delta * j, rtol=1e-12, atol=1e-14)


def test_intervention_errors():
    p = random_params(LINEAR, 0)
    b = basis_for(LINEAR)
    X = np.zeros((2, 4))
    with pytest.raises(ConfigError):
        an.intervene(LINEAR, p, b, 3, 0.1, X)
    with pytest.raises(ConfigError):
        an.intervention_sweep(LINEAR, p, b, [], X)
    with pytest.raises(ShapeError):
        an.intervene(LINEAR, p, basis_for(tms_family(4, 2, 4)), 0, 0.1, X)


def test_selectivity_hand_example():
    deltas = np.array([-0.3, 0.0, 0.3])
    ch = np.zeros((3, 2, 3))
    ch[0, :, 0], ch[2, :, 0] = -2.0, 2.0
    ch[0, :, 1:], ch[2, :, 1:] = 0.5, -0.5
    res = an.InterventionResult(deltas, ch, (0,))
    assert an.selectivity(res, [0]) == pytest.approx(4.0)
    with pytest.raises(ConfigError):
        an.selectivity(res, [0], magnitude=0.5)


def test_most_affected_outputs_orders_by_jvp():
    spec = tms_family(5, 3, 5)
    p = random_params(spec, 1)
    b = basis_for(spec, n_v=2, rank=2)
    x = uniform(Rng(2), 0, 1, 5)
    order = an.most_affected_outputs(spec, p, b, x, 1)
    mag = np.abs(jvp_in_direction(spec, p, x, b.dense("out")[1]))
    assert np.all(np.diff(mag[order]) <= 0)
    assert list(an.most_affected_outputs(spec, p, b, x, 1, top_n=2)) == list(order[:2])


def test_impact_is_abs_projection_mean():
    spec = tms_family(4, 2, 4)
    p = random_params(spec, 0)
    b = basis_for(spec)
    x = uniform(Rng(1), 0, 1, 4)
    refs = predict(spec, p, uniform(Rng(2), 0, 1, (6, 4)))
    G = batch_grad_divergence(spec, p, np.repeat(x[None], 6, 0), refs)
    want = np.abs(G @ b.dense("in").T).mean(axis=0)
    np.testing.assert_allclose(an.mean_impact(spec, p, b, x, refs), want, rtol=1e-13)
    np.testing.assert_allclose(an.impact(spec, p, b, x, refs[0]), np.abs(G[0] @ b.dense("in").T), rtol=1e-13)


def test_top_samples_ranked_by_impact():
    spec = tms_family(4, 2, 4)
    p = random_params(spec, 0)
    b = basis_for(spec)
    X = uniform(Rng(1), 0, 1, (20, 4))
    top, table = an.top_samples(spec, p, b, X, 5, 4, Rng(3))
    assert top.shape == (3, 4) and np.all(table.values >= 0)
    for k in range(3):
        vals = table.values[top[k], k]
        assert np.all(np.diff(vals) <= 0) and vals[-1] >= np.sort(table.values[:, k])[-4]


def test_group_scores_shape():
    spec = tms_family(5, 2, 5)
    task = make_task("tms")
    s = an.group_scores(spec, random_params(spec, 0), basis_for(spec), task, Rng(0), n_per_group=5, n_refs=3)
    assert s.shape == (3, 5) and np.all(s >= 0)


@given(st.integers(0, 2**20), st.sampled_from([(6, 6), (8, 6), (4, 6)]))
def test_assignment_matches_brute_force(seed, shape):
    scores = uniform(Rng(seed), 0, 1, shape)
    asg = an.match_subnetworks(scores)
    assert asg.total == pytest.approx(an.brute_force_match(scores), abs=1e-12)
    cols = [j for _, j in asg.pairs()]
    assert len(cols) == len(set(cols)) == min(shape)


def test_assignment_skips_dead_and_floor_rows():
    scores = np.array([[5.0, 0.0], [4.0, 1.0], [0.0, 0.0]])
    asg = an.match_subnetworks(scores, dead=[0])
    assert asg.mapping[0] is None and asg.mapping[2] is None
    assert asg.pairs() == [(1, 0)] or asg.pairs() == [(1, 1)]
    assert 2 in asg.dead
    assert an.match_subnetworks(scores).feature_to_subnetwork() == {0: 0, 1: 1}


def test_mutual_best():
    s = np.array([[0.9, 0.1, 0.0], [0.8, 0.2, 0.0], [0.0, 0.3, 0.7]])
    assert an.mutual_best(s) == [(0, 0), (2, 2)]
    assert an.mutual_best(s, rows=[1, 2]) == [(1, 0), (2, 2)]


def _set_rank1(basis, k, name, u, w, side="out"):
    basis.core(side, name)[k] = 1.0
    f0, f1 = basis.factors(side, name)
    f0[k, :, 0], f1[k, :, 0] = u, w


def test_coefficient_extraction_recovers_planted_columns():
    spec = tms_family(4, 2, 4, output_bias=False)
    shapes = spec.param_shapes()
    b = SubnetworkBasis(2, shapes, {n: 1 for n in shapes})
    A = uniform(Rng(0), 0, 3, (4, 4))
    for k, j in enumerate([2, 0]):
        h = np.array([1.0, 0.5]) if k == 0 else np.array([-0.3, 1.0])
        _set_rank1(b, k, "layer0.weight", h, np.eye(4)[j])
        _set_rank1(b, k, "layer1.weight", A[:, j], h)
    b.normalize_out()
    a_hat, j_star = an.extract_coefficients(spec, b)
    assert j_star.tolist() == [2, 0]
    assert an.coefficient_r2(A, a_hat, j_star) == pytest.approx(1.0, abs=1e-12)
    # a wrong column gives a clearly lower score
    assert an.coefficient_r2(A, a_hat, np.array([1, 3])) < 0.99
    e = an.column_energy(spec, b)
    np.testing.assert_allclose(e.sum(axis=1), 1.0)
    assert np.argmax(e[0]) == 2


def test_cosine_alignment_of_model_encoder_is_one():
    spec = tms_family(4, 2, 4, tied=True)
    p = random_params(spec, 4)
    shapes = spec.param_shapes()
    b = SubnetworkBasis(1, shapes, {"layer0.weight": (2, 2), "layer1.bias": (1,)})
    b.core("out", "layer0.weight")[0] = np.eye(2)
    f0, f1 = b.factors("out", "layer0.weight")
    f0[0], f1[0] = np.eye(2), p["layer0.weight"].T
    b.core("out", "layer1.bias")[0] = 1.0
    b.factors("out", "layer1.bias")[0][0, :, 0] = 1.0
    b.normalize_out()
    np.testing.assert_allclose(an.cosine_alignment(spec, p, b), 1.0, rtol=1e-12)
    deep = MlpSpec((2, 3, 3, 2), ("relu", "relu", "identity"), (True, True, True))
    with pytest.raises(ShapeError):
        an.cosine_alignment(deep, random_params(deep, 0), basis_for(deep))
