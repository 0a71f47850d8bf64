"""Dense f64 layer primitives with per-micro-batch activation caches.

Tensors are plain ``numpy.ndarray`` objects of dtype float64, row-major. Every
layer keeps the inputs it needs for the backward pass in ``cache``, keyed by the
micro-batch identity ``(t, j)``; the entry is dropped when the backward runs.

Layers never mutate weight arrays in place. Callers may pass an explicit
``weights`` list to ``forward``/``backward`` to run under a weight version other
than the layer's committed one (stashed or predicted weights).
"""

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

DTYPE = np.float64

LAYER_KINDS = ("dense", "relu", "conv2d", "flatten", "softmax_xent")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CacheMissError(KeyError):
    pass


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


@dataclass
class LayerSpec:
    """Declarative description of a layer: a kind plus its hyperparameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def dense(cls, fan_in, fan_out):
        return cls("dense", {"fan_in": int(fan_in), "fan_out": int(fan_out)})

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel, stride=1, padding=0):
        return cls("conv2d", {"in_channels": int(in_channels),
                              "out_channels": int(out_channels),
                              "kernel": int(kernel), "stride": int(stride),
                              "padding": int(padding)})

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def softmax_xent(cls):
        return cls("softmax_xent")

    def output_shape(self, input_shape):
        return _LAYER_TYPES[self.kind].infer_shape(self.params, tuple(input_shape))

    def to_dict(self):
        return {"kind": self.kind, **self.params}


class Layer:
    kind = None
    n_weights = 0

    def __init__(self, **params):
        self.params = params
        self.weights = []
        self.cache = {}

    @staticmethod
    def infer_shape(params, input_shape):
        return input_shape

    def init_weights(self, rng):
        self.weights = []

    def _weights(self, weights):
        w = self.weights if weights is None else weights
        if len(w) != self.n_weights:
            raise ShapeError(f"{self.kind} expects {self.n_weights} weight tensors, got {len(w)}")
        return w

    def _pop(self, key):
        try:
            return self.cache.pop(key)
        except KeyError:
            raise CacheMissError(f"{self.kind}: no cached forward for micro-batch {key}") from None

    def forward(self, x, key, weights=None):
        raise NotImplementedError

    def backward(self, grad, key, weights=None):
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"
    n_weights = 2

    @staticmethod
    def infer_shape(params, input_shape):
        if input_shape != (params["fan_in"],):
            raise ShapeError(f"dense expects input ({params['fan_in']},), got {input_shape}")
        return (params["fan_out"],)

    def init_weights(self, rng):
        fan_in, fan_out = self.params["fan_in"], self.params["fan_out"]
        bound = sqrt(6.0 / fan_in)
        self.weights = [rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                        np.zeros(fan_out, dtype=DTYPE)]

    def forward(self, x, key, weights=None):
        W, b = self._weights(weights)
        if x.ndim != 2 or x.shape[1] != W.shape[1]:
            raise ShapeError(f"dense expects (batch, {W.shape[1]}), got {x.shape}")
        self.cache[key] = x
        return check_finite(x @ W.T + b, "dense.forward")

    def backward(self, grad, key, weights=None):
        W, _ = self._weights(weights)
        x = self._pop(key)
        dW = grad.T @ x
        db = grad.sum(axis=0)
        dx = grad @ W
        return check_finite(dx, "dense.backward"), [dW, db]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, key, weights=None):
        self.cache[key] = x
        return np.maximum(x, 0.0)

    def backward(self, grad, key, weights=None):
        x = self._pop(key)
        # subgradient at exactly 0 is 0
        return grad * (x > 0.0), []


class Flatten(Layer):
    kind = "flatten"

    @staticmethod
    def infer_shape(params, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, key, weights=None):
        self.cache[key] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, key, weights=None):
        shape = self._pop(key)
        return grad.reshape(shape), []


class Conv2D(Layer):
    """2-D convolution over NCHW input via an explicit im2col lowering."""

    kind = "conv2d"
    n_weights = 2

    @staticmethod
    def infer_shape(params, input_shape):
        if len(input_shape) != 3 or input_shape[0] != params["in_channels"]:
            raise ShapeError(f"conv2d expects ({params['in_channels']}, H, W), got {input_shape}")
        _, h, w = input_shape
        k, s, p = params["kernel"], params["stride"], params["padding"]
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {k} does not fit input {input_shape}")
        return (params["out_channels"], oh, ow)

    def init_weights(self, rng):
        c_in, c_out, k = (self.params[n] for n in ("in_channels", "out_channels", "kernel"))
        bound = sqrt(6.0 / (c_in * k * k))
        self.weights = [rng.uniform(-bound, bound, size=(c_out, c_in, k, k)),
                        np.zeros(c_out, dtype=DTYPE)]

    def _im2col(self, x):
        k, s, p = self.params["kernel"], self.params["stride"], self.params["padding"]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # (n, c, oh, ow, k, k)
        n, c, oh, ow = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        return np.ascontiguousarray(cols), (n, oh, ow)

    def forward(self, x, key, weights=None):
        W, b = self._weights(weights)
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
        self.infer_shape(self.params, x.shape[1:])
        cols, (n, oh, ow) = self._im2col(x)
        out = cols @ W.reshape(W.shape[0], -1).T + b
        self.cache[key] = (cols, x.shape)
        out = out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
        return check_finite(np.ascontiguousarray(out), "conv2d.forward")

    def backward(self, grad, key, weights=None):
        W, _ = self._weights(weights)
        cols, x_shape = self._pop(key)
        k, s, p = self.params["kernel"], self.params["stride"], self.params["padding"]
        n, c_out, oh, ow = grad.shape
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
        dW = (g2.T @ cols).reshape(W.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ W.reshape(c_out, -1)).reshape(n, oh, ow, x_shape[1], k, k)
        _, c, h, w = x_shape
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for a in range(k):
            for bb in range(k):
                dxp[:, :, a:a + s * oh:s, bb:bb + s * ow:s] += dcols[:, :, :, :, a, bb].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return check_finite(np.ascontiguousarray(dx), "conv2d.backward"), [dW, db]


class SoftmaxXent(Layer):
    """Terminal softmax + cross-entropy layer.

    ``forward`` returns class probabilities. In training, the stage that owns
    this layer calls :meth:`loss` with the labels, which caches d(loss)/d(logits)
    for the matching ``backward``.
    """

    kind = "softmax_xent"

    def forward(self, x, key=None, weights=None):
        return softmax(x)

    def loss(self, logits, labels, key):
        value, grad = softmax_xent_loss(logits, labels)
        self.cache[key] = grad
        return value

    def backward(self, grad, key, weights=None):
        return self._pop(key), []


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Flatten, Conv2D, SoftmaxXent)}


def build_layer(spec, rng=None):
    layer = _LAYER_TYPES[spec.kind](**spec.params)
    if rng is not None:
        layer.init_weights(rng)
    return layer


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_loss(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    check_finite(grad, "softmax_xent_loss")
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    return loss, grad
