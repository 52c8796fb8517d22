"""Layer-graph description and the dense ANN interpretation.

A NetworkSpec is an ordered list of layer descriptors plus input shape and
class count. The same spec (and parameter names) back both the ANN forward
pass here and the spiking interpretation in snn.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Array,
    Rng,
    Tensor,
    add,
    avgpool2d,
    batchnorm,
    conv2d,
    flatten,
    matmul,
    relu,
    reshape,
)


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = False
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class Linear:
    out_features: int
    bias: bool = True
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5
    momentum: float = 0.1
    kind: str = field(default="batchnorm", init=False)


@dataclass(frozen=True)
class Relu:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class AvgPool:
    kernel: int
    kind: str = field(default="avgpool", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


_LAYER_KINDS = {
    "conv": Conv,
    "linear": Linear,
    "batchnorm": BatchNorm,
    "relu": Relu,
    "avgpool": AvgPool,
    "flatten": Flatten,
}


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.shapes()  # validate composition eagerly

    def shapes(self) -> list[tuple]:
        """Output shape after each layer; raises if layers do not compose."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv needs (C,H,W) input, got {shape}")
                c, h, w = shape
                h2 = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1
                w2 = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1
                if h2 != int(h2) or w2 != int(w2) or h2 < 1 or w2 < 1:
                    raise ValueError(f"layer {i}: conv output {h2}x{w2} not integral")
                shape = (layer.out_channels, int(h2), int(w2))
            elif isinstance(layer, Linear):
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: linear needs flat input, got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, BatchNorm):
                pass
            elif isinstance(layer, Relu):
                pass
            elif isinstance(layer, AvgPool):
                c, h, w = shape
                if h % layer.kernel or w % layer.kernel:
                    raise ValueError(f"layer {i}: pool {layer.kernel} does not divide {h}x{w}")
                shape = (c, h // layer.kernel, w // layer.kernel)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            else:
                raise ValueError(f"unknown layer {layer!r}")
            out.append(shape)
        if out and out[-1] != (self.num_classes,):
            raise ValueError(f"final layer produces {out[-1]}, expected ({self.num_classes},)")
        return out

    def channels_at(self, index: int) -> int:
        shape = self.input_shape if index == 0 else self.shapes()[index - 1]
        return shape[0]

    def spike_stages(self) -> list[int]:
        """Indices of relu layers; these become spiking stages in the SNN."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, Relu)]

    def to_dict(self) -> dict:
        def enc(layer):
            d = {"kind": layer.kind}
            for f in layer.__dataclass_fields__:
                if f != "kind":
                    d[f] = getattr(layer, f)
            return d

        return {
            "layers": [enc(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            cls = _LAYER_KINDS[ld.pop("kind")]
            layers.append(cls(**ld))
        return NetworkSpec(layers, tuple(d["input_shape"]), d["num_classes"])


def init_params(spec: NetworkSpec, rng: Rng):
    """Fan-in-scaled uniform init for weights; BN starts at identity affine."""
    params: dict[str, Tensor] = {}
    buffers: dict[str, Array] = {}
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        name = f"layer{i}"
        if isinstance(layer, Conv):
            c_in = shape[0]
            fan_in = c_in * layer.kernel * layer.kernel
            bound = float(np.sqrt(6.0 / fan_in))
            w = rng.uniform(-bound, bound, (layer.out_channels, c_in, layer.kernel, layer.kernel))
            params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            if layer.bias:
                params[f"{name}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
        elif isinstance(layer, Linear):
            fan_in = shape[0]
            bound = float(np.sqrt(6.0 / fan_in))
            w = rng.uniform(-bound, bound, (fan_in, layer.out_features))
            params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            if layer.bias:
                params[f"{name}.bias"] = Tensor(np.zeros(layer.out_features), requires_grad=True)
        elif isinstance(layer, BatchNorm):
            c = shape[0]
            params[f"{name}.phi"] = Tensor(np.ones(c), requires_grad=True)
            params[f"{name}.omega"] = Tensor(np.zeros(c), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
            buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)
        shape = _advance_shape(shape, layer)
    return params, buffers


def _advance_shape(shape, layer):
    if isinstance(layer, Conv):
        c, h, w = shape
        h2 = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w2 = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return (layer.out_channels, h2, w2)
    if isinstance(layer, Linear):
        return (layer.out_features,)
    if isinstance(layer, AvgPool):
        c, h, w = shape
        return (c, h // layer.kernel, w // layer.kernel)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    return shape


def _bias_add(x: Tensor, bias: Tensor, spatial: bool) -> Tensor:
    if spatial:
        return add(x, reshape(bias, (1, -1, 1, 1)))
    return add(x, reshape(bias, (1, -1)))


class AnnModel:
    """NetworkSpec + named parameters/buffers, interpreted as a dense ANN."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor], buffers: dict[str, Array]):
        self.spec = spec
        self.params = params
        self.buffers = buffers

    @staticmethod
    def initialize(spec: NetworkSpec, rng: Rng) -> "AnnModel":
        params, buffers = init_params(spec, rng)
        return AnnModel(spec, params, buffers)

    def forward(self, x: Tensor, train: bool = False, update_stats: bool | None = None) -> Tensor:
        if update_stats is None:
            update_stats = train
        h = x
        for i, layer in enumerate(self.spec.layers):
            name = f"layer{i}"
            if isinstance(layer, Conv):
                h = conv2d(h, self.params[f"{name}.weight"], layer.stride, layer.padding)
                if layer.bias:
                    h = _bias_add(h, self.params[f"{name}.bias"], spatial=True)
            elif isinstance(layer, Linear):
                h = matmul(h, self.params[f"{name}.weight"])
                if layer.bias:
                    h = _bias_add(h, self.params[f"{name}.bias"], spatial=False)
            elif isinstance(layer, BatchNorm):
                h = batchnorm(
                    h,
                    self.params[f"{name}.phi"],
                    self.params[f"{name}.omega"],
                    self.buffers[f"{name}.running_mean"],
                    self.buffers[f"{name}.running_var"],
                    train=train,
                    momentum=layer.momentum,
                    eps=layer.eps,
                    update_stats=update_stats,
                )
            elif isinstance(layer, Relu):
                h = relu(h)
            elif isinstance(layer, AvgPool):
                h = avgpool2d(h, layer.kernel)
            elif isinstance(layer, Flatten):
                h = flatten(h)
        return h

    def param_items(self):
        return sorted(self.params.items())

    def prunable_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, (Conv, Linear)):
                names.append(f"layer{i}.weight")
        return names

    def clone(self) -> "AnnModel":
        params = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()
        }
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return AnnModel(self.spec, params, buffers)


def ann_forward(model: AnnModel, x: Tensor, train: bool = False) -> Tensor:
    """Logits of shape [batch, classes] for inputs in [0, 1]."""
    if x.data.shape[1:] != model.spec.input_shape:
        raise ValueError(
            f"input shape {x.data.shape[1:]} does not match spec {model.spec.input_shape}"
        )
    return model.forward(x, train=train)


def preset_convnet(input_shape=(1, 16, 16), num_classes: int = 4) -> NetworkSpec:
    """Desk-scale 2-conv + 2-linear net used by the default pipeline recipes."""
    c, h, w = input_shape
    layers = [
        Conv(16, kernel=5, stride=1, padding=2),
        BatchNorm(),
        Relu(),
        AvgPool(2),
        Conv(32, kernel=3, stride=1, padding=1),
        BatchNorm(),
        Relu(),
        AvgPool(2),
        Flatten(),
        Linear(128),
        Relu(),
        Linear(num_classes),
    ]
    return NetworkSpec(layers, input_shape, num_classes)


def preset_mlp(input_dim: int, hidden: int, num_classes: int) -> NetworkSpec:
    layers = [Linear(hidden), Relu(), Linear(num_classes)]
    return NetworkSpec(layers, (input_dim,), num_classes)


PRESETS = {
    "convnet16": lambda classes: preset_convnet((1, 16, 16), classes),
    "convnet28": lambda classes: preset_convnet((1, 28, 28), classes),
}
