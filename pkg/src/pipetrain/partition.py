"""Benchmark model presets and contiguous layer-count partitioning."""

from dataclasses import dataclass

import numpy as np

from .tensor import LayerSpec, ShapeError, build_layer

PRESETS = ("mlp_small", "cnn_small", "logreg")


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes()

    def shapes(self):
        """Per-layer output shapes; raises ShapeError if the stack does not compose."""
        if not self.layers or self.layers[-1].kind != "softmax_xent":
            raise ShapeError("the last layer must be softmax_xent")
        if any(spec.kind == "softmax_xent" for spec in self.layers[:-1]):
            raise ShapeError("softmax_xent may only appear as the final layer")
        out, shape = [], self.input_shape
        for spec in self.layers:
            shape = spec.output_shape(shape)
            out.append(shape)
        if out[-1] != (self.num_classes,):
            raise ShapeError(f"model emits {out[-1]}, expected ({self.num_classes},)")
        return out

    def __len__(self):
        return len(self.layers)

    def instantiate(self, seed=1):
        """Build initialized layer objects from a seeded generator."""
        rng = np.random.default_rng(seed)
        return [build_layer(spec, rng) for spec in self.layers]


@dataclass(frozen=True)
class StagePlan:
    size: int
    assignments: tuple  # one range per rank

    def sizes(self):
        return [len(r) for r in self.assignments]

    def __iter__(self):
        return iter(self.assignments)


def partition(model, K):
    """Split ``model`` (a ModelSpec or a layer count) into K contiguous stages.

    Stages hold floor(L/K) layers each; the L mod K leftover layers go one apiece
    to the last stages, so later ranks are never smaller than earlier ones.
    """
    L = model if isinstance(model, int) else len(model)
    K = int(K)
    if K < 1:
        raise ValueError("stage count must be >= 1")
    if K > L:
        raise ValueError(f"cannot split {L} layers into {K} non-empty stages")
    base, extra = divmod(L, K)
    ranges, start = [], 0
    for rank in range(K):
        n = base + (1 if rank >= K - extra else 0)
        ranges.append(range(start, start + n))
        start += n
    return StagePlan(K, tuple(ranges))


def _flat_prefix(input_shape):
    return [LayerSpec.flatten()] if len(input_shape) > 1 else []


def build_model(name, input_shape, num_classes, hidden=32):
    input_shape = tuple(int(d) for d in input_shape)
    flat_dim = int(np.prod(input_shape))
    if name == "logreg":
        layers = _flat_prefix(input_shape) + [LayerSpec.dense(flat_dim, num_classes)]
    elif name == "mlp_small":
        layers = _flat_prefix(input_shape) + [
            LayerSpec.dense(flat_dim, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, num_classes),
        ]
    elif name == "cnn_small":
        if len(input_shape) != 3:
            raise ShapeError(f"cnn_small needs (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        conv1 = LayerSpec.conv2d(c, 4, kernel=3, stride=1, padding=1)
        conv2 = LayerSpec.conv2d(4, 8, kernel=3, stride=2, padding=1)
        flat = int(np.prod(conv2.output_shape(conv1.output_shape(input_shape))))
        layers = [conv1, LayerSpec.relu(), conv2, LayerSpec.relu(), LayerSpec.flatten(),
                  LayerSpec.dense(flat, hidden), LayerSpec.relu(),
                  LayerSpec.dense(hidden, num_classes)]
    else:
        raise ValueError(f"unknown model preset {name!r}; choose from {PRESETS}")
    return ModelSpec(layers + [LayerSpec.softmax_xent()], input_shape, num_classes)
