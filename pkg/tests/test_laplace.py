import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedbps.data import Dataset
from fedbps.errors import ConfigError, EmptyDatasetError
from fedbps.laplace import estimate_curvature, posterior_from_curvature
from fedbps.nn import Batch, build_network, mlp, per_sample_grads
from fedbps.params import CLASSIFIER, ParamSet

from conftest import small_cnn


def naive_fisher(spec, params, x, y):
    """Loop of single-sample gradient calls, squared and averaged."""
    acc = np.zeros(params.size)
    for n in range(len(y)):
        (g,) = per_sample_grads(spec, params, Batch(x[n:n + 1], y[n:n + 1]))
        acc += g.flat() ** 2
    return acc / len(y)


def _data(rng, n, shape, c):
    return Dataset(rng.normal(size=(n,) + shape), rng.integers(0, c, n), c)


def test_single_sample_is_squared_gradient(small_mlp, rng):
    p = build_network(small_mlp, 0)
    ds = _data(rng, 1, (5,), 4)
    (g,) = per_sample_grads(small_mlp, p, Batch(ds.inputs, ds.labels))
    np.testing.assert_allclose(estimate_curvature(small_mlp, p, ds).flat(), g.flat() ** 2, rtol=1e-14, atol=0)


@pytest.mark.parametrize("which", ["mlp", "cnn"])
def test_matches_naive_loop(which, rng):
    spec = mlp([5, 7, 4]) if which == "mlp" else small_cnn()
    shape = (5,) if which == "mlp" else (2, 8, 8)
    p = build_network(spec, 3)
    ds = _data(rng, 23, shape, spec.num_classes)
    h = estimate_curvature(spec, p, ds, batch_size=5)
    np.testing.assert_allclose(h.flat(), naive_fisher(spec, p, ds.inputs, ds.labels), rtol=1e-10, atol=1e-14)


def test_duplicating_samples_leaves_curvature(small_mlp, rng):
    p = build_network(small_mlp, 0)
    ds = _data(rng, 9, (5,), 4)
    doubled = Dataset(np.concatenate([ds.inputs, ds.inputs]), np.concatenate([ds.labels, ds.labels]), 4)
    np.testing.assert_allclose(estimate_curvature(small_mlp, p, doubled).flat(),
                               estimate_curvature(small_mlp, p, ds).flat(), rtol=1e-12)


@given(seed=st.integers(0, 1000), bs=st.integers(1, 20))
def test_invariant_to_order_and_batch_size(seed, bs):
    r = np.random.default_rng(seed)
    spec = mlp([3, 4, 3])
    p = build_network(spec, seed)
    ds = _data(r, 17, (3,), 3)
    perm = r.permutation(17)
    a = estimate_curvature(spec, p, ds, batch_size=bs).flat()
    b = estimate_curvature(spec, p, ds.subset(perm), batch_size=17).flat()
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-16)
    assert np.all(a >= 0)


def test_empty_dataset_rejected(small_mlp):
    with pytest.raises(EmptyDatasetError):
        estimate_curvature(small_mlp, build_network(small_mlp, 0), Dataset(np.zeros((0, 5)), [], 4))


def _scalar(v):
    return ParamSet({"w": np.atleast_1d(np.asarray(v, float))}, {"w": CLASSIFIER})


def test_zero_curvature_is_pure_prior():
    post = posterior_from_curvature(_scalar(0.3), _scalar(0.0), damping=1e-6)
    assert post.sigma["w"][0] == pytest.approx(1e6, rel=1e-15)
    assert post.mu["w"][0] == 0.3


def test_analytic_quadratic_curvature():
    # L(w) = (w - 1)**2 / 2 has second derivative 1 at w = 1
    post = posterior_from_curvature(_scalar(1.0), _scalar(1.0), damping=1e-6)
    assert post.sigma["w"][0] == 1 / (1 + 1e-6)


@given(h=st.lists(st.floats(0, 1e6), min_size=1, max_size=20), damping=st.floats(1e-9, 1.0))
def test_sigma_monotone_and_order_reversing(h, damping):
    h = np.array(h)
    params = _scalar(np.zeros(len(h)))
    sig = posterior_from_curvature(params, _scalar(h), damping).sigma.flat()
    assert np.all(sig > 0)
    sig2 = posterior_from_curvature(params, _scalar(h), 2 * damping).sigma.flat()
    assert np.all(sig2 <= sig)
    # strict decrease: larger curvature never gets a larger variance
    i, j = np.meshgrid(range(len(h)), range(len(h)))
    assert np.all((sig[i] <= sig[j]) | (h[i] <= h[j]))


@pytest.mark.parametrize("damping", [0.0, -1e-3])
def test_nonpositive_damping_rejected(damping):
    with pytest.raises(ConfigError):
        posterior_from_curvature(_scalar(0.0), _scalar(1.0), damping)
