"""A small float64 neural-network engine with hand-written backprop.

Supports exactly the layer vocabulary needed for MLPs and LeNet-style CNNs:
dense, 2-D convolution, non-overlapping max-pooling, ReLU and flatten,
followed by a softmax cross-entropy loss. Gradients can be produced as a
batch mean, per sample, or as a per-sample sum of squares (the diagonal
empirical Fisher numerator), all from one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyDatasetError, NumericalError, ShapeError, SpecError
from .params import CLASSIFIER, FEATURE_EXTRACTOR, LAYER_TAGS, ParamSet


# ---------------------------------------------------------------------------
# Network description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    tag: Optional[str] = None


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    tag: Optional[str] = None


@dataclass(frozen=True)
class MaxPool2d:
    window: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2d, MaxPool2d, ReLU, Flatten]


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape (without batch dim) plus an ordered layer list.

    The final layer must be ``Dense``; its width is the class count.
    Parametric layers without an explicit ``tag`` are tagged automatically:
    in a network with convolutions, conv layers are the feature extractor
    and every dense layer is the classifier; in a pure MLP only the last
    dense layer is the classifier.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    _names: tuple[str, ...] = field(init=False, repr=False, compare=False)
    _shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = _infer_shapes(self.input_shape, self.layers)
        object.__setattr__(self, "_shapes", shapes)
        names, n_conv, n_fc = [], 0, 0
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                names.append(f"conv{n_conv}")
                n_conv += 1
            elif isinstance(layer, Dense):
                names.append(f"fc{n_fc}")
                n_fc += 1
            else:
                names.append("")
        object.__setattr__(self, "_names", tuple(names))

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def output_shapes(self) -> tuple[tuple[int, ...], ...]:
        """Per-layer output shape (without batch dim)."""
        return self._shapes

    def parametric_layers(self) -> list[tuple[str, Layer]]:
        return [(n, l) for n, l in zip(self._names, self.layers) if n]

    def layer_tags(self) -> dict[str, str]:
        """Resolved tag for each parametric layer name."""
        plist = self.parametric_layers()
        has_conv = any(isinstance(l, Conv2d) for _, l in plist)
        last = plist[-1][0]
        out = {}
        for name, layer in plist:
            if layer.tag is not None:
                out[name] = layer.tag
            elif isinstance(layer, Conv2d):
                out[name] = FEATURE_EXTRACTOR
            elif has_conv or name == last:
                out[name] = CLASSIFIER
            else:
                out[name] = FEATURE_EXTRACTOR
        return out

    def with_classifier_layers(self, count: int) -> NetworkSpec:
        """Copy of this spec whose last ``count`` parametric layers are the classifier."""
        plist = self.parametric_layers()
        if not 0 <= count <= len(plist):
            raise SpecError(f"classifier_layers={count} outside [0, {len(plist)}]")
        cut = len(plist) - count
        tagged_names = {n: (CLASSIFIER if i >= cut else FEATURE_EXTRACTOR) for i, (n, _) in enumerate(plist)}
        layers = []
        for name, layer in zip(self._names, self.layers):
            if name:
                layer = type(layer)(**{**layer.__dict__, "tag": tagged_names[name]})
            layers.append(layer)
        return NetworkSpec(self.input_shape, tuple(layers))


def _infer_shapes(input_shape, layers) -> tuple[tuple[int, ...], ...]:
    if not layers:
        raise SpecError("network has no layers")
    if not isinstance(layers[-1], Dense):
        raise SpecError("last layer must be Dense (it produces the logits)")
    shape = tuple(input_shape)
    if not shape or any(d < 1 for d in shape):
        raise SpecError(f"invalid input shape {shape}")
    out = []
    for i, layer in enumerate(layers):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, Dense):
            if len(shape) != 1:
                raise SpecError(f"{where}: expects flat input, got shape {shape}; add Flatten")
            if shape[0] != layer.in_features:
                raise SpecError(f"{where}: in_features={layer.in_features} but input has {shape[0]}")
            if layer.out_features < 1:
                raise SpecError(f"{where}: out_features must be positive")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3:
                raise SpecError(f"{where}: expects (C, H, W) input, got {shape}")
            c, h, w = shape
            if c != layer.in_channels:
                raise SpecError(f"{where}: in_channels={layer.in_channels} but input has {c}")
            if layer.kernel < 1 or layer.stride < 1 or layer.out_channels < 1:
                raise SpecError(f"{where}: kernel, stride and out_channels must be positive")
            if layer.kernel > h or layer.kernel > w:
                raise SpecError(f"{where}: kernel {layer.kernel} larger than input {h}x{w}")
            shape = (layer.out_channels, (h - layer.kernel) // layer.stride + 1,
                     (w - layer.kernel) // layer.stride + 1)
        elif isinstance(layer, MaxPool2d):
            if len(shape) != 3:
                raise SpecError(f"{where}: expects (C, H, W) input, got {shape}")
            c, h, w = shape
            k = layer.window
            if k < 1 or h % k or w % k:
                raise SpecError(f"{where}: window {k} does not tile {h}x{w}")
            shape = (c, h // k, w // k)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, Flatten):
            shape = (prod(shape),)
        else:
            raise SpecError(f"{where}: unsupported layer type")
        for tag in (getattr(layer, "tag", None),):
            if tag is not None and tag not in LAYER_TAGS:
                raise SpecError(f"{where}: unknown tag {tag!r}")
        out.append(shape)
    return tuple(out)


def mlp(sizes: Sequence[int]) -> NetworkSpec:
    """Fully connected ReLU network, e.g. ``mlp([784, 128, 10])``."""
    if len(sizes) < 2:
        raise SpecError("an MLP needs at least input and output sizes")
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return NetworkSpec((sizes[0],), tuple(layers))


def lenet5(in_channels: int = 1, image_size: int = 28, num_classes: int = 10, width: int = 1) -> NetworkSpec:
    """Two conv/pool stages and three dense layers; ``width`` scales every layer."""
    c1, c2 = 6 * width, 16 * width
    f1, f2 = 120 * width, 84 * width
    s = image_size - 4
    if s < 2 or s % 2:
        raise SpecError(f"image_size {image_size} does not fit the LeNet layout")
    s = s // 2 - 4
    if s < 2 or s % 2:
        raise SpecError(f"image_size {image_size} does not fit the LeNet layout")
    s //= 2
    layers = (
        Conv2d(in_channels, c1, 5), ReLU(), MaxPool2d(2),
        Conv2d(c1, c2, 5), ReLU(), MaxPool2d(2),
        Flatten(),
        Dense(c2 * s * s, f1), ReLU(),
        Dense(f1, f2), ReLU(),
        Dense(f2, num_classes),
    )
    return NetworkSpec((in_channels, image_size, image_size), layers)


def build_network(spec: NetworkSpec, seed: int) -> ParamSet:
    """Seeded init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    entries, tags = {}, {}
    layer_tags = spec.layer_tags()
    for name, layer in spec.parametric_layers():
        if isinstance(layer, Dense):
            fan_in = layer.in_features
            wshape = (layer.in_features, layer.out_features)
            bshape = (layer.out_features,)
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            wshape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            bshape = (layer.out_channels,)
        bound = 1.0 / np.sqrt(fan_in)
        entries[f"{name}.weight"] = rng.uniform(-bound, bound, size=wshape)
        entries[f"{name}.bias"] = np.zeros(bshape)
        tags[f"{name}.weight"] = tags[f"{name}.bias"] = layer_tags[name]
    return ParamSet(entries, tags)


# ---------------------------------------------------------------------------
# Data carrier
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ShapeError(f"labels must be 1-D, got shape {self.labels.shape}")
        if len(self.inputs) != len(self.labels):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise EmptyDatasetError("batch is empty")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _prepare_inputs(spec: NetworkSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] == spec.input_shape:
        return x
    if x.ndim >= 2 and prod(x.shape[1:]) == prod(spec.input_shape):
        return x.reshape((x.shape[0],) + spec.input_shape)
    raise ShapeError(f"input layer: expected samples of shape {spec.input_shape}, got {x.shape[1:]}")


def _check_params(spec: NetworkSpec, params: ParamSet) -> None:
    for i, (name, layer) in enumerate(spec.parametric_layers()):
        if isinstance(layer, Dense):
            want = (layer.in_features, layer.out_features)
        else:
            want = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        try:
            w, b = params[f"{name}.weight"], params[f"{name}.bias"]
        except KeyError:
            raise ShapeError(f"layer {name}: parameters missing from ParamSet") from None
        if w.shape != want or b.shape != (want[0] if isinstance(layer, Conv2d) else want[1],):
            raise ShapeError(f"layer {name}: weight {w.shape} / bias {b.shape} do not match spec {want}")


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    b, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)


def _forward(spec: NetworkSpec, params: ParamSet, x: np.ndarray):
    caches = []
    for name, layer in zip(spec._names, spec.layers):
        if isinstance(layer, Dense):
            caches.append(x)
            x = x @ params[f"{name}.weight"] + params[f"{name}.bias"]
        elif isinstance(layer, Conv2d):
            w = params[f"{name}.weight"]
            cols = _im2col(x, layer.kernel, layer.stride)
            caches.append((x.shape, cols))
            b = x.shape[0]
            ho = (x.shape[2] - layer.kernel) // layer.stride + 1
            wo = (x.shape[3] - layer.kernel) // layer.stride + 1
            out = cols @ w.reshape(layer.out_channels, -1).T + params[f"{name}.bias"]
            x = out.transpose(0, 2, 1).reshape(b, layer.out_channels, ho, wo)
        elif isinstance(layer, MaxPool2d):
            k = layer.window
            b, c, h, w = x.shape
            xr = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
            xr = xr.reshape(b, c, h // k, w // k, k * k)
            idx = np.argmax(xr, axis=-1)
            caches.append((x.shape, idx))
            x = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, ReLU):
            mask = x > 0
            caches.append(mask)
            x = x * mask
        else:
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return x, caches


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Per-sample losses and d(loss_n)/d(logits_n)."""
    c = logits.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"loss layer: labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def _backward(spec: NetworkSpec, params: ParamSet, caches, delta: np.ndarray, mode: str) -> dict:
    """Backprop ``delta`` (d loss / d logits, one row per sample).

    mode="sum": gradient of sum_n loss_n weighted by delta's rows.
    mode="per_sample": arrays with a leading batch axis.
    mode="sq_sum": sum over samples of the squared per-sample gradient.
    """
    grads = {}
    last = len(spec.layers) - 1
    first_param = next(i for i, n in enumerate(spec._names) if n)
    for i in range(last, -1, -1):
        name, layer, cache = spec._names[i], spec.layers[i], caches[i]
        need_dx = i > first_param
        if isinstance(layer, Dense):
            x = cache
            if mode == "sum":
                grads[f"{name}.weight"] = x.T @ delta
                grads[f"{name}.bias"] = delta.sum(axis=0)
            elif mode == "per_sample":
                grads[f"{name}.weight"] = np.einsum("bi,bo->bio", x, delta)
                grads[f"{name}.bias"] = delta.copy()
            else:
                grads[f"{name}.weight"] = (x * x).T @ (delta * delta)
                grads[f"{name}.bias"] = (delta * delta).sum(axis=0)
            if need_dx:
                delta = delta @ params[f"{name}.weight"].T
        elif isinstance(layer, Conv2d):
            xshape, cols = cache
            b, o = delta.shape[:2]
            d = delta.reshape(b, o, -1).transpose(0, 2, 1)  # (B, L, O)
            wshape = params[f"{name}.weight"].shape
            if mode == "sum":
                gw = d.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])
                grads[f"{name}.weight"] = gw.reshape(wshape)
                grads[f"{name}.bias"] = d.sum(axis=(0, 1))
            else:
                gw = np.einsum("blo,blk->bok", d, cols).reshape((b,) + wshape)
                gb = d.sum(axis=1)
                if mode == "per_sample":
                    grads[f"{name}.weight"], grads[f"{name}.bias"] = gw, gb
                else:
                    grads[f"{name}.weight"] = (gw * gw).sum(axis=0)
                    grads[f"{name}.bias"] = (gb * gb).sum(axis=0)
            if need_dx:
                k, s = layer.kernel, layer.stride
                _, c, h, w = xshape
                ho, wo = delta.shape[2:]
                dcols = (d @ params[f"{name}.weight"].reshape(o, -1)).reshape(b, ho, wo, c, k, k)
                dx = np.zeros(xshape)
                for u in range(k):
                    for v in range(k):
                        dx[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s] += (
                            dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2))
                delta = dx
        elif isinstance(layer, MaxPool2d):
            if need_dx:
                xshape, idx = cache
                k = layer.window
                b, c, h, w = xshape
                dr = np.zeros(idx.shape + (k * k,))
                np.put_along_axis(dr, idx[..., None], delta[..., None], axis=-1)
                dr = dr.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
                delta = dr.reshape(xshape)
        elif isinstance(layer, ReLU):
            if need_dx:
                delta = delta * cache
        else:
            if need_dx:
                delta = delta.reshape(cache)
    return grads


def _grads_to_paramset(params: ParamSet, grads: dict) -> ParamSet:
    return ParamSet({n: grads[n] for n in params.names()}, params.tags)


def _check_finite(value, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{what} is not finite")


def forward(spec: NetworkSpec, params: ParamSet, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and the logits ``[B, C]``."""
    _check_params(spec, params)
    logits, _ = _forward(spec, params, _prepare_inputs(spec, batch.inputs))
    losses, _ = _softmax_xent(logits, batch.labels)
    loss = float(losses.mean())
    _check_finite(loss, "loss")
    return loss, logits


def loss_and_grad(spec: NetworkSpec, params: ParamSet, batch: Batch) -> tuple[float, ParamSet]:
    """Mean batch loss and its gradient, aligned with ``params``."""
    _check_params(spec, params)
    logits, caches = _forward(spec, params, _prepare_inputs(spec, batch.inputs))
    losses, dlogits = _softmax_xent(logits, batch.labels)
    loss = float(losses.mean())
    _check_finite(loss, "loss")
    grads = _backward(spec, params, caches, dlogits / len(batch), "sum")
    return loss, _grads_to_paramset(params, grads)


def per_sample_grads(spec: NetworkSpec, params: ParamSet, batch: Batch) -> list[ParamSet]:
    """Gradient of each sample's own loss, one ParamSet per sample."""
    _check_params(spec, params)
    logits, caches = _forward(spec, params, _prepare_inputs(spec, batch.inputs))
    _, dlogits = _softmax_xent(logits, batch.labels)
    grads = _backward(spec, params, caches, dlogits, "per_sample")
    names = params.names()
    return [ParamSet({n: grads[n][i] for n in names}, params.tags) for i in range(len(batch))]


def squared_grad_sum(spec: NetworkSpec, params: ParamSet, batch: Batch) -> ParamSet:
    """Elementwise sum over samples of the squared per-sample gradient."""
    _check_params(spec, params)
    logits, caches = _forward(spec, params, _prepare_inputs(spec, batch.inputs))
    _, dlogits = _softmax_xent(logits, batch.labels)
    grads = _backward(spec, params, caches, dlogits, "sq_sum")
    return _grads_to_paramset(params, grads)


def sgd_step(params: ParamSet, grads: ParamSet, buffers: ParamSet,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> tuple[ParamSet, ParamSet]:
    """Heavy-ball SGD with the decay term folded into the momentum buffer.

    ``buf <- momentum * buf + grad + weight_decay * param``;
    ``param <- param - lr * buf``. Updates ``params`` and ``buffers`` in place
    and returns them.
    """
    params.check_aligned(grads, "grads")
    params.check_aligned(buffers, "momentum buffers")
    for name in params:
        p, g, buf = params[name], grads[name], buffers[name]
        buf *= momentum
        buf += g
        buf += weight_decay * p
        p -= lr * buf
    return params, buffers


def predict(spec: NetworkSpec, params: ParamSet, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Arg-max class per sample; ties resolve to the lowest class index."""
    _check_params(spec, params)
    x = _prepare_inputs(spec, inputs)
    preds = [np.argmax(_forward(spec, params, x[i:i + batch_size])[0], axis=1)
             for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(spec: NetworkSpec, params: ParamSet, dataset, batch_size: int = 1024) -> float:
    """Fraction of samples whose arg-max logit equals the label."""
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    preds = predict(spec, params, dataset.inputs, batch_size)
    return float(np.mean(preds == labels))
