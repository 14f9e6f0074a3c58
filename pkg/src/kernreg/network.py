"""Bias-free convolutional and fully-connected networks, and their losses."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from kernreg.autodiff import Tensor, no_grad, ops

ParamSet = "OrderedDict[str, np.ndarray]"


class SpecError(ValueError):
    """Inconsistent network description."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    in_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    kind: str = field(default="conv2d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))


@dataclass(frozen=True)
class Linear:
    out_features: int
    in_features: int
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class Softplus:
    beta: float = 10.0
    kind: str = field(default="softplus", init=False)


@dataclass(frozen=True)
class AvgPool2d:
    kernel: tuple[int, int] = (2, 2)
    kind: str = field(default="avgpool2d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))


@dataclass(frozen=True)
class MaxPool2d:
    kernel: tuple[int, int] = (2, 2)
    kind: str = field(default="maxpool2d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))


@dataclass(frozen=True)
class GlobalMaxPool:
    kind: str = field(default="global-maxpool", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


Layer = Conv2d | Linear | ReLU | Softplus | AvgPool2d | MaxPool2d | GlobalMaxPool | Flatten

_LAYER_TYPES = {
    "conv2d": Conv2d,
    "linear": Linear,
    "relu": ReLU,
    "softplus": Softplus,
    "avgpool2d": AvgPool2d,
    "maxpool2d": MaxPool2d,
    "global-maxpool": GlobalMaxPool,
    "flatten": Flatten,
}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = asdict(layer)
            d = {"kind": d.pop("kind"), **{k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}}
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        layers = []
        for i, ld in enumerate(d["layers"]):
            ld = dict(ld)
            kind = ld.pop("kind")
            if kind not in _LAYER_TYPES:
                raise SpecError(f"layer {i}: unknown kind {kind!r}")
            layers.append(_LAYER_TYPES[kind](**ld))
        return cls(tuple(int(s) for s in d["input_shape"]), tuple(layers))


def _output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv2d):
        if len(shape) != 3:
            raise SpecError(f"conv2d expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise SpecError(f"conv2d expects {layer.in_channels} input channels, got {c}")
        kh, kw = layer.kernel
        (sh, sw), (ph, pw) = layer.stride, layer.padding
        ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise SpecError(f"conv2d kernel {layer.kernel} does not fit input {shape}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, (AvgPool2d, MaxPool2d)):
        if len(shape) != 3:
            raise SpecError(f"{layer.kind} expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        kh, kw = layer.kernel
        if h // kh < 1 or w // kw < 1:
            raise SpecError(f"{layer.kind} window {layer.kernel} does not fit input {shape}")
        return (c, h // kh, w // kw)
    if isinstance(layer, GlobalMaxPool):
        if len(shape) != 3:
            raise SpecError(f"global-maxpool expects a (C, H, W) input, got {shape}")
        return (shape[0],)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Linear):
        if len(shape) != 1:
            raise SpecError(f"linear expects a flat input, got {shape}; insert a flatten layer")
        if shape[0] != layer.in_features:
            raise SpecError(f"linear expects {layer.in_features} features, got {shape[0]}")
        return (layer.out_features,)
    return shape


class Network:
    """Forward evaluation of a :class:`NetworkSpec` given named parameters."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        shapes = [tuple(spec.input_shape)]
        self.param_names: list[str] = []
        self.param_shapes: dict[str, tuple[int, ...]] = {}
        self._layer_param: list[str | None] = []
        for i, layer in enumerate(spec.layers):
            try:
                shapes.append(_output_shape(layer, shapes[-1]))
            except SpecError as exc:
                raise SpecError(f"layer {i} ({layer.kind}): {exc}") from None
            if isinstance(layer, (Conv2d, Linear)):
                name = f"W{len(self.param_names) + 1}"
                self.param_names.append(name)
                if isinstance(layer, Conv2d):
                    self.param_shapes[name] = (layer.out_channels, layer.in_channels, *layer.kernel)
                else:
                    self.param_shapes[name] = (layer.out_features, layer.in_features)
                self._layer_param.append(name)
            else:
                self._layer_param.append(None)
        self.shapes = shapes
        if len(shapes[-1]) != 1:
            raise SpecError(f"network output must be flat, got {shapes[-1]}; end with flatten/linear")
        self.n_outputs = shapes[-1][0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.spec.input_shape)

    @property
    def n_layers(self) -> int:
        return len(self.param_names)

    def forward(self, params: Mapping[str, Tensor | np.ndarray], x: Tensor | np.ndarray) -> Tensor:
        """Logits of shape (n, K) as a tensor (recorded if inputs require grad)."""
        h = self._check_input(x)
        for layer, pname in zip(self.spec.layers, self._layer_param):
            h = _apply_layer(layer, params[pname] if pname else None, h)
        return h

    __call__ = forward

    def layer_inputs(self, params: Mapping[str, np.ndarray], x: np.ndarray) -> list[tuple[Layer, np.ndarray]]:
        """The array entering every layer, for inspecting activation patterns."""
        out = []
        with no_grad():
            h = self._check_input(x)
            for layer, pname in zip(self.spec.layers, self._layer_param):
                out.append((layer, h.data))
                h = _apply_layer(layer, params[pname] if pname else None, h)
        return out

    def _check_input(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(h.shape[1:]) != self.input_shape:
            raise SpecError(f"expected batch of shape (n, {self.input_shape}), got {h.shape}")
        return h


def _apply_layer(layer: Layer, W, h: Tensor) -> Tensor:
    if isinstance(layer, Conv2d):
        return ops.conv2d(h, W, layer.stride, layer.padding)
    if isinstance(layer, Linear):
        return ops.matmul(h, ops.transpose(W))
    if isinstance(layer, ReLU):
        return ops.relu(h)
    if isinstance(layer, Softplus):
        return ops.softplus(h, layer.beta)
    if isinstance(layer, AvgPool2d):
        return ops.avg_pool2d(h, layer.kernel)
    if isinstance(layer, MaxPool2d):
        return ops.max_pool2d(h, layer.kernel)
    if isinstance(layer, GlobalMaxPool):
        return ops.global_max_pool2d(h)
    if isinstance(layer, Flatten):
        return ops.reshape(h, (h.shape[0], -1) if h.ndim > 2 else h.shape)
    raise SpecError(f"unsupported layer {layer!r}")


def init_params(net: Network, seed: int) -> "OrderedDict[str, np.ndarray]":
    """Uniform fan-in scaled initialization, U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for name in net.param_names:
        shape = net.param_shapes[name]
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def build_network(spec: NetworkSpec, seed: int = 0) -> tuple[Network, "OrderedDict[str, np.ndarray]"]:
    net = Network(spec)
    return net, init_params(net, seed)


def predict(net: Network, params: Mapping[str, np.ndarray], batch: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Logits (n, K) as a plain array."""
    batch = np.asarray(batch, dtype=np.float64)
    with no_grad():
        outs = [net.forward(params, batch[i : i + chunk]).data for i in range(0, len(batch), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, net.n_outputs))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Classification accuracy; a single logit column means binary {-1, +1} labels."""
    labels = np.asarray(labels)
    if logits.shape[1] == 1:
        return float(np.mean(labels * logits[:, 0] > 0))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# losses


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross-entropy"
    HINGE = "hinge"
    LOGISTIC = "logistic"

    @property
    def binary(self) -> bool:
        return self is not LossKind.CROSS_ENTROPY


def _check_labels(kind: LossKind, labels: np.ndarray, n_outputs: int) -> None:
    if kind.binary:
        if n_outputs != 1:
            raise ValueError(f"{kind.value} loss expects a single logit, got {n_outputs}")
        if not np.all(np.isin(labels, (-1, 1))):
            raise ValueError(f"{kind.value} loss expects labels in {{-1, +1}}")
    else:
        if not np.all((labels >= 0) & (labels < n_outputs) & (labels == np.round(labels))):
            raise ValueError(f"cross-entropy expects integer class labels in [0, {n_outputs})")


def per_example_loss(kind: LossKind | str, logits: Tensor, labels: np.ndarray) -> Tensor:
    kind = LossKind(kind)
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels)
    _check_labels(kind, labels, logits.shape[1])
    if kind is LossKind.CROSS_ENTROPY:
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(labels)), labels.astype(int)] = 1.0
        return ops.logsumexp(logits, axis=1) - ops.sum(logits * onehot, axis=1)
    margin = ops.reshape(logits, (logits.shape[0],)) * labels.astype(np.float64)
    if kind is LossKind.HINGE:
        return ops.relu(1.0 - margin)
    return ops.softplus(-margin, beta=1.0)


def loss(kind: LossKind | str, logits: Tensor | np.ndarray, labels: np.ndarray) -> Tensor:
    """Mean loss over the batch."""
    per = per_example_loss(kind, logits, labels)
    return ops.sum(per) * (1.0 / per.shape[0])


# ---------------------------------------------------------------------------
# presets


def mnist_vgg(channels: Sequence[int] = (8, 16, 32, 32), n_classes: int = 10, activation: str = "relu") -> NetworkSpec:
    """VGG-like net: 3x3 convs each followed by 2x2 average pooling, then a linear head."""
    layers: list[Layer] = []
    c, hw = 1, 28
    for out in channels:
        layers += [Conv2d(out, c, 3, 1, 1), _act(activation), AvgPool2d(2)]
        c, hw = out, hw // 2
    layers += [Flatten(), Linear(n_classes, c * hw * hw)]
    return NetworkSpec((1, 28, 28), tuple(layers))


def mnist_conv3(n_classes: int = 10) -> NetworkSpec:
    """Three conv layers: 28 -> 13 -> 5 -> 1 spatially (no pooling), flattened to 10 logits."""
    return NetworkSpec(
        (1, 28, 28),
        (
            Conv2d(8, 1, 3, 2, 0),
            ReLU(),
            Conv2d(16, 8, 5, 2, 0),
            ReLU(),
            Conv2d(n_classes, 16, 5, 1, 0),
            Flatten(),
        ),
    )


def sequence_net(length: int, alphabet: int = 20, channels: int = 16, n_outputs: int = 1, activation: str = "relu") -> NetworkSpec:
    """Three width-5 convs over one-hot sequences, max-pool after the second, global max-pool, linear."""
    return NetworkSpec(
        (alphabet, 1, length),
        (
            Conv2d(channels, alphabet, (1, 5), 1, (0, 2)),
            _act(activation),
            Conv2d(channels, channels, (1, 5), 1, (0, 2)),
            _act(activation),
            MaxPool2d((1, 2)),
            Conv2d(channels, channels, (1, 5), 1, (0, 2)),
            _act(activation),
            GlobalMaxPool(),
            Linear(n_outputs, channels),
        ),
    )


def mlp(in_features: int, hidden: Sequence[int] = (32, 32), n_outputs: int = 2, activation: str = "relu") -> NetworkSpec:
    layers: list[Layer] = []
    d = in_features
    for h in hidden:
        layers += [Linear(h, d), _act(activation)]
        d = h
    layers.append(Linear(n_outputs, d))
    return NetworkSpec((in_features,), tuple(layers))


def linear_model(in_features: int, n_outputs: int = 1) -> NetworkSpec:
    return NetworkSpec((in_features,), (Linear(n_outputs, in_features),))


def _act(name: str, beta: float = 10.0) -> Layer:
    if name == "relu":
        return ReLU()
    if name == "softplus":
        return Softplus(beta)
    raise SpecError(f"unknown activation {name!r}")


PRESETS = {
    "mnist-vgg": mnist_vgg,
    "mnist-conv3": mnist_conv3,
    "sequence": sequence_net,
    "mlp": mlp,
    "linear": linear_model,
}
