"""Small numpy neural-network core: layer specs, flat parameter vectors,
explicit forward/backward passes, SGD and evaluation.

Everything is float64. Parameters live in one flat array so that model
deltas, norms and wire sizes are well defined; each layer owns a
contiguous slice described by the vector's layout.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyDatasetError, LayoutError, ShapeError

DTYPE = np.float64


class LayerKind(str, enum.Enum):
    DENSE = "Dense"
    CONV2D = "Conv2D"
    MAXPOOL2D = "MaxPool2D"
    FLATTEN = "Flatten"
    RELU = "ReLU"
    SOFTMAX = "Softmax"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model.

    ``dims`` depends on ``kind``:

    * Dense: ``(in_features, out_features)``
    * Conv2D: ``(filters, kernel_h, kernel_w, in_channels)``
    * MaxPool2D: ``(window_h, window_w)``
    * Flatten / ReLU / Softmax: ``()``
    """

    kind: LayerKind
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = {
            LayerKind.DENSE: 2,
            LayerKind.CONV2D: 4,
            LayerKind.MAXPOOL2D: 2,
        }.get(self.kind, 0)
        if len(self.dims) != expected:
            raise ValueError(f"{self.kind.value} expects {expected} dims, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"all dims must be >= 1, got {self.dims}")

    @property
    def weight_shapes(self) -> tuple[tuple[int, ...], ...]:
        if self.kind is LayerKind.DENSE:
            n_in, n_out = self.dims
            return (n_in, n_out), (n_out,)
        if self.kind is LayerKind.CONV2D:
            f, kh, kw, c = self.dims
            return (f, c, kh, kw), (f,)
        return ()

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.weight_shapes)

    @classmethod
    def dense(cls, n_in, n_out):
        return cls(LayerKind.DENSE, (n_in, n_out))

    @classmethod
    def conv2d(cls, filters, kernel_h, kernel_w, in_channels):
        return cls(LayerKind.CONV2D, (filters, kernel_h, kernel_w, in_channels))

    @classmethod
    def maxpool2d(cls, h=2, w=2):
        return cls(LayerKind.MAXPOOL2D, (h, w))

    @classmethod
    def flatten(cls):
        return cls(LayerKind.FLATTEN)

    @classmethod
    def relu(cls):
        return cls(LayerKind.RELU)

    @classmethod
    def softmax(cls):
        return cls(LayerKind.SOFTMAX)


class LayoutEntry(NamedTuple):
    spec: LayerSpec
    offset: int
    length: int


def make_layout(layers: Sequence[LayerSpec]) -> tuple[LayoutEntry, ...]:
    out = []
    offset = 0
    for spec in layers:
        out.append(LayoutEntry(spec, offset, spec.n_params))
        offset += spec.n_params
    return tuple(out)


@dataclass
class ParameterVector:
    """Flat float64 parameter store plus the layer layout that slices it."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE).reshape(-1)
        self.layout = tuple(LayoutEntry(*e) for e in self.layout)
        total = sum(e.length for e in self.layout)
        if self.layout and total != self.values.size:
            raise LayoutError(f"layout covers {total} values, vector has {self.values.size}")

    def __len__(self):
        return self.values.size

    @property
    def layers(self) -> list[LayerSpec]:
        return [e.spec for e in self.layout]

    def unflatten(self) -> list[tuple[np.ndarray, ...]]:
        """Per-layer weight arrays (views into ``values``)."""
        arrays = []
        for spec, offset, _ in self.layout:
            parts = []
            pos = offset
            for shape in spec.weight_shapes:
                size = math.prod(shape)
                parts.append(self.values[pos:pos + size].reshape(shape))
                pos += size
            arrays.append(tuple(parts))
        return arrays

    @classmethod
    def flatten(cls, layers: Sequence[LayerSpec], arrays: Sequence[Sequence[np.ndarray]]):
        layout = make_layout(layers)
        chunks = [np.asarray(a, dtype=DTYPE).reshape(-1) for parts in arrays for a in parts]
        values = np.concatenate(chunks) if chunks else np.zeros(0, dtype=DTYPE)
        return cls(values, layout)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def check_layout(self, other: "ParameterVector") -> None:
        if self.layout != other.layout or self.values.shape != other.values.shape:
            raise LayoutError("parameter vectors have different layouts")

    def __sub__(self, other):
        self.check_layout(other)
        return self.with_values(self.values - other.values)

    def __add__(self, other):
        self.check_layout(other)
        return self.with_values(self.values + other.values)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"inputs have {self.inputs.shape[0]} rows but labels have {self.labels.shape[0]}")

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    local_epochs: int = 3
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# model construction


class Arch(str, enum.Enum):
    HAR_MLP = "har_mlp"
    MNIST_CNN = "mnist_cnn"


def har_mlp_layers(input_dim=561, num_classes=6):
    return [
        LayerSpec.dense(input_dim, 128), LayerSpec.relu(),
        LayerSpec.dense(128, 64), LayerSpec.relu(),
        LayerSpec.dense(64, num_classes), LayerSpec.softmax(),
    ]


def mnist_cnn_layers(image_shape=(1, 28, 28), num_classes=10):
    c, h, w = image_shape
    # stride 1, no padding; 2x2 non-overlapping pooling
    h, w = (h - 4) // 2, (w - 4) // 2
    h, w = (h - 4) // 2, (w - 4) // 2
    if h < 1 or w < 1:
        raise ShapeError(f"image {image_shape} too small for the CNN")
    return [
        LayerSpec.conv2d(16, 5, 5, c), LayerSpec.relu(), LayerSpec.maxpool2d(2, 2),
        LayerSpec.conv2d(32, 5, 5, 16), LayerSpec.relu(), LayerSpec.maxpool2d(2, 2),
        LayerSpec.flatten(),
        LayerSpec.dense(32 * h * w, num_classes), LayerSpec.softmax(),
    ]


def init_params(layers: Sequence[LayerSpec], rng_seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, drawn layer by layer from ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    arrays = []
    for spec in layers:
        if spec.kind is LayerKind.DENSE:
            fan_in, fan_out = spec.dims
        elif spec.kind is LayerKind.CONV2D:
            f, kh, kw, c = spec.dims
            fan_in, fan_out = c * kh * kw, f * kh * kw
        else:
            arrays.append(())
            continue
        w_shape, b_shape = spec.weight_shapes
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        arrays.append((rng.uniform(-limit, limit, size=w_shape), np.zeros(b_shape)))
    return ParameterVector.flatten(layers, arrays)


def build_model(arch, rng_seed: int, *, input_dim=561, image_shape=(1, 28, 28),
                num_classes=None) -> ParameterVector:
    arch = Arch(arch)
    if arch is Arch.HAR_MLP:
        layers = har_mlp_layers(input_dim, num_classes or 6)
    else:
        layers = mnist_cnn_layers(image_shape, num_classes or 10)
    return init_params(layers, rng_seed)


# ---------------------------------------------------------------------------
# layer kernels


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, oh, ow, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, w, cols, need_dx=True):
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(x_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x, ph, pw):
    n, c, h, w = x.shape
    oh, ow = h // ph, w // pw
    xr = (x[:, :, :oh * ph, :ow * pw]
          .reshape(n, c, oh, ph, ow, pw)
          .transpose(0, 1, 2, 4, 3, 5)
          .reshape(n, c, oh, ow, ph * pw))
    # first maximum wins on ties
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, x_shape, idx, ph, pw):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dxr = np.zeros((n, c, oh, ow, ph * pw), dtype=DTYPE)
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=DTYPE)
    dx[:, :, :oh * ph, :ow * pw] = (dxr.reshape(n, c, oh, ow, ph, pw)
                                    .transpose(0, 1, 2, 4, 3, 5)
                                    .reshape(n, c, oh * ph, ow * pw))
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_input(spec: LayerSpec, x: np.ndarray, position: int):
    if spec.kind is LayerKind.DENSE:
        if x.ndim != 2 or x.shape[1] != spec.dims[0]:
            raise ShapeError(
                f"layer {position} (Dense {spec.dims[0]}->{spec.dims[1]}) got input shape {x.shape}")
    elif spec.kind is LayerKind.CONV2D:
        f, kh, kw, c = spec.dims
        if x.ndim != 4 or x.shape[1] != c or x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(f"layer {position} (Conv2D, {c} channels, {kh}x{kw}) "
                             f"got input shape {x.shape}")
    elif spec.kind is LayerKind.MAXPOOL2D:
        if x.ndim != 4 or x.shape[2] < spec.dims[0] or x.shape[3] < spec.dims[1]:
            raise ShapeError(f"layer {position} (MaxPool2D) got input shape {x.shape}")
    elif spec.kind is LayerKind.SOFTMAX and x.ndim != 2:
        raise ShapeError(f"layer {position} (Softmax) got input shape {x.shape}")


def _run_layers(params: ParameterVector, x: np.ndarray, stop: int, keep_cache: bool):
    """Apply layers ``[0, stop)``. Returns the activation and a backward cache."""
    cache = []
    weights = params.unflatten()
    for pos in range(stop):
        spec = params.layout[pos].spec
        _check_input(spec, x, pos)
        kind = spec.kind
        if kind is LayerKind.DENSE:
            w, b = weights[pos]
            entry = x
            x = x @ w + b
        elif kind is LayerKind.CONV2D:
            w, b = weights[pos]
            shape = x.shape
            x, cols = _conv_forward(x, w, b)
            entry = (shape, cols)
        elif kind is LayerKind.MAXPOOL2D:
            shape = x.shape
            x, idx = _pool_forward(x, *spec.dims)
            entry = (shape, idx)
        elif kind is LayerKind.FLATTEN:
            entry = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind is LayerKind.RELU:
            entry = x > 0
            x = x * entry
        else:
            entry = None
            x = _softmax(x)
        if keep_cache:
            cache.append(entry)
    return x, cache


def _as_inputs(params, inputs):
    x = np.asarray(inputs, dtype=DTYPE)
    if not params.layout:
        raise LayoutError("parameter vector has no layout")
    first = params.layout[0].spec
    # single-channel images may arrive without the channel axis
    if first.kind is LayerKind.CONV2D and x.ndim == 3 and first.dims[3] == 1:
        x = x[:, None, :, :]
    return x


def forward(params: ParameterVector, batch: Batch | np.ndarray) -> np.ndarray:
    """Class probabilities, one row per sample."""
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    x = _as_inputs(params, inputs)
    out, _ = _run_layers(params, x, len(params.layout), keep_cache=False)
    return out


def _logits_and_cache(params, x):
    if params.layout[-1].spec.kind is not LayerKind.SOFTMAX:
        raise LayoutError("model must end with a Softmax layer")
    return _run_layers(params, x, len(params.layout) - 1, keep_cache=True)


def loss_and_grad(params: ParameterVector, batch: Batch) -> tuple[float, ParameterVector]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``params``."""
    x = _as_inputs(params, batch.inputs)
    logits, cache = _logits_and_cache(params, x)
    n, n_classes = logits.shape
    labels = batch.labels
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())

    grad = np.zeros_like(params.values)
    weights = params.unflatten()
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    d /= n
    # find the earliest layer that needs an input gradient
    first_param = next((i for i, e in enumerate(params.layout) if e.length), 0)
    for pos in range(len(cache) - 1, -1, -1):
        spec, offset, length = params.layout[pos]
        entry = cache[pos]
        kind = spec.kind
        if kind is LayerKind.DENSE:
            w, _ = weights[pos]
            gw = entry.T @ d
            gb = d.sum(axis=0)
            grad[offset:offset + w.size] = gw.reshape(-1)
            grad[offset + w.size:offset + length] = gb
            if pos > first_param:
                d = d @ w.T
        elif kind is LayerKind.CONV2D:
            w, _ = weights[pos]
            shape, cols = entry
            d, gw, gb = _conv_backward(d, shape, w, cols, need_dx=pos > first_param)
            grad[offset:offset + w.size] = gw.reshape(-1)
            grad[offset + w.size:offset + length] = gb
        elif kind is LayerKind.MAXPOOL2D:
            shape, idx = entry
            d = _pool_backward(d, shape, idx, *spec.dims)
        elif kind is LayerKind.FLATTEN:
            d = d.reshape(entry)
        elif kind is LayerKind.RELU:
            d = d * entry
        else:
            raise LayoutError("Softmax is only supported as the final layer")
        if pos <= first_param:
            break
    return loss, params.with_values(grad)


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float) -> ParameterVector:
    params.check_layout(grad)
    return params.with_values(params.values - lr * grad.values)


def l2_norm(delta: ParameterVector | np.ndarray) -> float:
    values = delta.values if isinstance(delta, ParameterVector) else np.asarray(delta, dtype=DTYPE)
    return float(np.linalg.norm(values))


def evaluate(params: ParameterVector, test, batch_size: int = 500) -> tuple[float, float]:
    """Accuracy and mean cross-entropy of ``params`` on ``test``.

    ``test`` is anything with ``inputs`` and ``labels`` attributes. Argmax
    ties resolve to the lowest class index.
    """
    labels = np.asarray(test.labels)
    n = labels.shape[0]
    if n == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    inputs = test.inputs
    correct = 0
    nll = 0.0
    for start in range(0, n, batch_size):
        x = _as_inputs(params, inputs[start:start + batch_size])
        y = labels[start:start + batch_size]
        logits, _ = _run_layers(params, x, len(params.layout) - 1, keep_cache=False)
        logp = _log_softmax(logits)
        correct += int((logp.argmax(axis=1) == y).sum())
        nll += float(-logp[np.arange(y.shape[0]), y].sum())
    return correct / n, nll / n
