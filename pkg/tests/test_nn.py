import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedbps.errors import EmptyDatasetError, ShapeError, SpecError
from fedbps.harness import finite_difference_grad, relative_error
from fedbps.nn import (
    Batch, Conv2d, Dense, Flatten, MaxPool2d, NetworkSpec, ReLU, build_network, evaluate, forward,
    lenet5, loss_and_grad, mlp, per_sample_grads, sgd_step,
)
from fedbps.params import CLASSIFIER, FEATURE_EXTRACTOR, ParamSet

from conftest import small_cnn


# -- straight-line reference implementations (oracles) -----------------------

def _xent(z, y):
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return lse - z[y]


def mlp_loss_oracle(params, x, y):
    """Two-layer ReLU MLP written sample by sample with scalar loops."""
    w0, b0, w1, b1 = (params[k] for k in ("fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"))
    total = 0.0
    for xn, yn in zip(x, y):
        hidden = []
        for j in range(w0.shape[1]):
            s = b0[j] + sum(xn[i] * w0[i, j] for i in range(w0.shape[0]))
            hidden.append(max(s, 0.0))
        z = [b1[k] + sum(hidden[j] * w1[j, k] for j in range(w1.shape[0])) for k in range(w1.shape[1])]
        total += _xent(z, yn)
    return total / len(y)


def conv_oracle(x, w, b, stride):
    c_out, c_in, k, _ = w.shape
    h, wd = x.shape[1:]
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = x[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def cnn_logits_oracle(spec, params, sample):
    a = sample
    for name, layer in zip(spec._names, spec.layers):
        if isinstance(layer, Conv2d):
            a = conv_oracle(a, params[f"{name}.weight"], params[f"{name}.bias"], layer.stride)
        elif isinstance(layer, MaxPool2d):
            k = layer.window
            c, h, w = a.shape
            a = np.array([[[a[ch, i * k:(i + 1) * k, j * k:(j + 1) * k].max() for j in range(w // k)]
                           for i in range(h // k)] for ch in range(c)])
        elif isinstance(layer, ReLU):
            a = np.maximum(a, 0.0)
        elif isinstance(layer, Flatten):
            a = a.ravel()
        else:
            a = a @ params[f"{name}.weight"] + params[f"{name}.bias"]
    return a


# -- build_network ---------------------------------------------------------------

def test_build_is_deterministic():
    spec = mlp([4, 3])
    a, b = build_network(spec, 7), build_network(spec, 7)
    assert a.tobytes() == b.tobytes()
    assert a.identical(b)
    assert not build_network(spec, 8).identical(a)


def test_dense_and_conv_shapes():
    p = build_network(mlp([100, 50]), 0)
    assert p["fc0.weight"].shape == (100, 50)
    assert p["fc0.bias"].shape == (50,)
    spec = NetworkSpec((1, 12, 12), (Conv2d(1, 6, 5), ReLU(), Flatten(), Dense(6 * 8 * 8, 3)))
    p = build_network(spec, 0)
    assert p["conv0.weight"].shape == (6, 1, 5, 5)
    assert p["conv0.bias"].shape == (6,)


def test_init_scheme():
    p = build_network(mlp([400, 30]), 3)
    bound = 1 / math.sqrt(400)
    assert np.all(np.abs(p["fc0.weight"]) <= bound)
    assert np.abs(p["fc0.weight"]).max() > 0.9 * bound
    assert np.all(p["fc0.bias"] == 0)


def test_lenet_layout_and_tags():
    spec = lenet5()
    p = build_network(spec, 0)
    assert p.shapes["fc0.weight"] == (256, 120)
    assert p.size == 44426  # 156 + 2416 + 30840 + 10164 + 850
    tags = spec.layer_tags()
    assert tags == {"conv0": FEATURE_EXTRACTOR, "conv1": FEATURE_EXTRACTOR,
                    "fc0": CLASSIFIER, "fc1": CLASSIFIER, "fc2": CLASSIFIER}
    wide = build_network(lenet5(3, 32, 10, width=2), 0)
    assert wide["conv0.weight"].shape == (12, 3, 5, 5)


def test_mlp_default_tags_and_retagging():
    spec = mlp([8, 6, 4, 3])
    assert spec.layer_tags() == {"fc0": FEATURE_EXTRACTOR, "fc1": FEATURE_EXTRACTOR, "fc2": CLASSIFIER}
    assert set(spec.with_classifier_layers(0).layer_tags().values()) == {FEATURE_EXTRACTOR}
    assert spec.with_classifier_layers(2).layer_tags()["fc1"] == CLASSIFIER


@pytest.mark.parametrize("layers, shape", [
    ((Dense(4, 3), Dense(2, 2)), (4,)),
    ((Conv2d(2, 3, 3), Flatten(), Dense(27, 2)), (1, 5, 5)),
    ((Conv2d(1, 3, 3), MaxPool2d(2), Flatten(), Dense(27, 2)), (1, 5, 5)),
    ((Conv2d(1, 3, 3), ReLU()), (1, 5, 5)),
    ((Dense(4, 3),), (2, 2)),
])
def test_non_composing_specs_rejected(layers, shape):
    with pytest.raises(SpecError):
        NetworkSpec(shape, layers)


# -- forward -----------------------------------------------------------------------

def test_single_class_loss_is_zero(rng):
    spec = mlp([3, 1])
    loss, logits = forward(spec, build_network(spec, 0), Batch(rng.normal(size=(5, 3)), np.zeros(5)))
    assert loss == 0.0
    assert logits.shape == (5, 1)


def test_zero_weights_give_log_c(rng):
    spec = mlp([6, 7])
    p = build_network(spec, 0).zeros_like()
    loss, _ = forward(spec, p, Batch(rng.normal(size=(9, 6)), rng.integers(0, 7, 9)))
    assert loss == pytest.approx(math.log(7), abs=1e-15)


def test_mlp_forward_matches_oracle(small_mlp, rng):
    p = build_network(small_mlp, 11).map(lambda a: a + 0.1 * rng.normal(size=a.shape))
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 4, 6)
    loss, _ = forward(small_mlp, p, Batch(x, y))
    assert loss == pytest.approx(mlp_loss_oracle(p, x, y), rel=1e-12)


def test_cnn_forward_matches_oracle(cnn_spec, rng):
    p = build_network(cnn_spec, 5).map(lambda a: a + 0.1 * rng.normal(size=a.shape))
    x = rng.normal(size=(3, 2, 8, 8))
    _, logits = forward(cnn_spec, p, Batch(x, [0, 1, 2]))
    for n in range(3):
        np.testing.assert_allclose(logits[n], cnn_logits_oracle(cnn_spec, p, x[n]), rtol=1e-12, atol=1e-14)


def test_forward_does_not_mutate(small_mlp, rng):
    p = build_network(small_mlp, 0)
    before = p.tobytes()
    b = Batch(rng.normal(size=(4, 5)), [0, 1, 2, 3])
    forward(small_mlp, p, b)
    loss_and_grad(small_mlp, p, b)
    per_sample_grads(small_mlp, p, b)
    assert p.tobytes() == before


def test_shape_error_names_layer(small_mlp, rng):
    p = build_network(small_mlp, 0)
    with pytest.raises(ShapeError, match="input"):
        forward(small_mlp, p, Batch(rng.normal(size=(2, 6)), [0, 1]))
    bad = ParamSet({**dict(p.items()), "fc1.weight": np.zeros((7, 5))}, p.tags)
    with pytest.raises(ShapeError, match="fc1"):
        forward(small_mlp, bad, Batch(rng.normal(size=(2, 5)), [0, 1]))
    with pytest.raises(ShapeError, match="labels"):
        forward(small_mlp, p, Batch(rng.normal(size=(2, 5)), [0, 9]))


def test_image_inputs_flatten_into_mlp(rng):
    spec = mlp([16, 3])
    p = build_network(spec, 0)
    x = rng.normal(size=(2, 1, 4, 4))
    a, _ = forward(spec, p, Batch(x, [0, 1]))
    b, _ = forward(spec, p, Batch(x.reshape(2, 16), [0, 1]))
    assert a == b


# -- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("which", ["mlp", "cnn"])
def test_gradients_match_finite_differences(which, rng):
    spec = mlp([6, 10, 5]) if which == "mlp" else small_cnn()
    shape = (6,) if which == "mlp" else (2, 8, 8)
    p = build_network(spec, 2).map(lambda a: a + 0.05 * rng.normal(size=a.shape))
    b = Batch(rng.normal(size=(5,) + shape), rng.integers(0, spec.num_classes, 5))
    _, g = loss_and_grad(spec, p, b)
    assert p.size < 1000
    assert relative_error(g.flat(), finite_difference_grad(spec, p, b)).max() < 1e-4


@given(seed=st.integers(0, 10_000), hidden=st.integers(1, 12), batch=st.integers(1, 6))
def test_gradient_property_random_mlps(seed, hidden, batch):
    r = np.random.default_rng(seed)
    spec = mlp([3, hidden, 3])
    p = build_network(spec, seed).map(lambda a: a + 0.1 * r.normal(size=a.shape))
    b = Batch(r.normal(size=(batch, 3)), r.integers(0, 3, batch))
    _, g = loss_and_grad(spec, p, b)
    assert relative_error(g.flat(), finite_difference_grad(spec, p, b)).max() < 1e-4


def test_duplicated_sample_same_gradient(small_mlp, rng):
    p = build_network(small_mlp, 0)
    x = rng.normal(size=(1, 5))
    _, g1 = loss_and_grad(small_mlp, p, Batch(x, [2]))
    _, g2 = loss_and_grad(small_mlp, p, Batch(np.vstack([x, x]), [2, 2]))
    np.testing.assert_allclose(g2.flat(), g1.flat(), rtol=1e-14, atol=1e-16)


def test_final_bias_gradient_is_mean_softmax_minus_onehot(small_mlp, rng):
    p = build_network(small_mlp, 4)
    x, y = rng.normal(size=(7, 5)), rng.integers(0, 4, 7)
    _, logits = forward(small_mlp, p, Batch(x, y))
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    expected = (probs - np.eye(4)[y]).mean(0)
    _, g = loss_and_grad(small_mlp, p, Batch(x, y))
    np.testing.assert_allclose(g["fc1.bias"], expected, rtol=1e-12, atol=1e-15)


# -- per-sample gradients ------------------------------------------------------------

@pytest.mark.parametrize("which", ["mlp", "cnn"])
def test_per_sample_mean_equals_batch_gradient(which, rng):
    spec = mlp([5, 7, 4]) if which == "mlp" else small_cnn()
    shape = (5,) if which == "mlp" else (2, 8, 8)
    p = build_network(spec, 9)
    b = Batch(rng.normal(size=(6,) + shape), rng.integers(0, spec.num_classes, 6))
    _, g = loss_and_grad(spec, p, b)
    mean = np.mean([q.flat() for q in per_sample_grads(spec, p, b)], axis=0)
    np.testing.assert_allclose(mean, g.flat(), rtol=0, atol=1e-12)


def test_per_sample_single_and_distinct(small_mlp, rng):
    p = build_network(small_mlp, 1)
    x, y = rng.normal(size=(3, 5)), np.array([0, 3, 1])
    one = per_sample_grads(small_mlp, p, Batch(x[:1], y[:1]))
    assert len(one) == 1
    np.testing.assert_array_equal(one[0].flat(), loss_and_grad(small_mlp, p, Batch(x[:1], y[:1]))[1].flat())
    many = per_sample_grads(small_mlp, p, Batch(x, y))
    for n in range(3):
        ref = loss_and_grad(small_mlp, p, Batch(x[n:n + 1], y[n:n + 1]))[1].flat()
        np.testing.assert_allclose(many[n].flat(), ref, rtol=1e-12, atol=1e-15)
    assert not np.allclose(many[0].flat(), many[1].flat())


# -- SGD ------------------------------------------------------------------------------

def _scalar(v):
    return ParamSet({"w": np.array([v])}, {"w": CLASSIFIER})


def test_vanilla_sgd():
    p, g = _scalar(1.0), _scalar(0.5)
    sgd_step(p, g, p.zeros_like(), lr=0.1)
    assert p["w"][0] == 1.0 - 0.1 * 0.5


def test_zero_grad_leaves_params():
    p = _scalar(3.0)
    sgd_step(p, p.zeros_like(), p.zeros_like(), lr=0.1, momentum=0.9)
    assert p["w"][0] == 3.0


@pytest.mark.parametrize("decay, expected", [(0.0, 0.46), (0.01, 0.457501)])
def test_momentum_two_steps_on_quadratic(decay, expected):
    # f(w) = w**2 (gradient 2w), w0 = 1, lr 0.1, momentum 0.9; values unrolled by hand
    p = _scalar(1.0)
    buf = p.zeros_like()
    for _ in range(2):
        sgd_step(p, p.map(lambda a: 2 * a), buf, lr=0.1, momentum=0.9, weight_decay=decay)
    assert p["w"][0] == pytest.approx(expected, abs=1e-14)


# -- evaluate ---------------------------------------------------------------------------

class _DS:
    def __init__(self, x, y):
        self.inputs, self.labels = np.asarray(x, float), np.asarray(y)


def test_evaluate_cases(rng):
    spec = mlp([2, 2])
    eye = ParamSet({"fc0.weight": np.eye(2), "fc0.bias": np.zeros(2)}, {"fc0.weight": CLASSIFIER, "fc0.bias": CLASSIFIER})
    assert evaluate(spec, eye, _DS([[1, 0], [0, 1]], [0, 1])) == 1.0
    assert evaluate(spec, eye, _DS([[1, 0], [0, 1], [2, 1], [3, 5]], [0, 1, 0, 0])) == 0.75
    zero = mlp([3, 10])
    labels = np.repeat(np.arange(10), 4)
    acc = evaluate(zero, build_network(zero, 0).zeros_like(), _DS(rng.normal(size=(40, 3)), labels))
    assert acc == 0.1  # every prediction ties and resolves to class 0
    with pytest.raises(EmptyDatasetError):
        evaluate(spec, eye, _DS(np.zeros((0, 2)), []))
