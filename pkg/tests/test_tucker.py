import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from l3d.errors import ShapeError
from l3d.numkit import Rng, finite_diff_grad, n_mode_product
from l3d.tucker import TuckerTensor, clip_ranks, stacked_contract, stacked_grads, stacked_materialize


def random_stack(rng, K, shape, ranks):
    core = rng.random((K,) + tuple(ranks)) - 0.5
    factors = [rng.random((K, d, r)) - 0.5 for d, r in zip(shape, ranks)]
    return core, factors


block_shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)


@st.composite
def stacks(draw):
    shape = draw(block_shapes)
    ranks = tuple(draw(st.integers(1, d)) for d in shape)
    K = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**31))
    return (K, shape, ranks) + random_stack(Rng(seed), K, shape, ranks)


@given(stacks())
def test_stacked_materialize_matches_mode_products(s):
    K, shape, ranks, core, factors = s
    out = stacked_materialize(core, factors)
    assert out.shape == (K,) + shape
    for k in range(K):
        want = core[k]
        for n, u in enumerate(factors):
            want = n_mode_product(want, u[k], n)
        np.testing.assert_allclose(out[k], want, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(TuckerTensor(core[k], [u[k] for u in factors]).materialize(), want,
                                   rtol=1e-12, atol=1e-14)


@given(stacks(), st.integers(0, 2**31))
def test_factored_contraction_matches_materialize_then_dot(s, seed):
    K, shape, ranks, core, factors = s
    t = Rng(seed).random(shape) - 0.5
    fast = stacked_contract(core, factors, t)
    slow = np.array([np.sum(m * t) for m in stacked_materialize(core, factors)])
    assert np.linalg.norm(fast - slow) <= 1e-10 * max(np.linalg.norm(slow), 1e-300)


def test_stacked_grads_match_finite_differences():
    rng = Rng(11)
    for shape, ranks in [((4,), (2,)), ((3, 4), (2, 3)), ((2, 3, 4), (2, 2, 3))]:
        core, factors = random_stack(rng, 2, shape, ranks)
        dout = rng.random((2,) + shape) - 0.5
        dcore, dfactors = stacked_grads(core, factors, dout)

        def f_core(c):
            return np.sum(stacked_materialize(c, factors) * dout)

        np.testing.assert_allclose(dcore, finite_diff_grad(f_core, core), rtol=1e-7, atol=1e-9)
        for n in range(len(shape)):
            def f_fac(u, n=n):
                fs = list(factors)
                fs[n] = u
                return np.sum(stacked_materialize(core, fs) * dout)

            np.testing.assert_allclose(dfactors[n], finite_diff_grad(f_fac, factors[n]), rtol=1e-7, atol=1e-9)


def test_clip_ranks():
    assert clip_ranks((5, 2), 3) == (3, 2)
    assert clip_ranks((5, 2), (1, 1)) == (1, 1)
    with pytest.raises(ShapeError):
        clip_ranks((5, 2), (1, 1, 1))


def test_tucker_validation():
    with pytest.raises(ShapeError):
        TuckerTensor(np.ones((2, 2)), [np.ones((3, 2))])
    with pytest.raises(ShapeError):
        TuckerTensor(np.ones((2,)), [np.ones((3, 3))])
    with pytest.raises(ShapeError):
        TuckerTensor(np.ones((4,)), [np.ones((3, 4))])  # rank above extent
    t = TuckerTensor(np.ones((1, 1)), [np.ones((3, 1)), np.ones((2, 1))])
    assert t.shape == (3, 2) and t.ranks == (1, 1)


def test_contract_shape_error():
    core, factors = random_stack(Rng(0), 1, (3, 2), (1, 1))
    with pytest.raises(ShapeError):
        stacked_contract(core, factors, np.ones((2, 3)))
