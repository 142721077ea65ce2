"""Layer specs, parameter store, masked forward pass and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import CheckpointError, DimensionError, NumericError, StructureError
from .tensor import DTYPE, Tensor, conv2d

FORMAT_VERSION = 1
LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "softmax")
PARAMETRIC = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    prunable: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the per-sample input shape.

    ``input_shape`` is ``(d,)`` for vector inputs or ``(C, H, W)`` for images.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers or self.layers[-1].kind != "softmax":
            raise StructureError("network must end with a softmax layer")
        shape = self.input_shape
        param_ids = self.parametric_ids()
        if not param_ids:
            raise StructureError("network has no parametric layer")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise StructureError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.prunable and layer.kind not in PARAMETRIC:
                raise StructureError(f"layer {i}: only dense/conv2d layers can be prunable")
            shape = _next_shape(layer, shape, i)
        if self.layers[param_ids[-1]].prunable:
            raise StructureError("the final parametric layer cannot be prunable")
        if not self.prunable_ids():
            raise StructureError("at least one layer must be prunable")

    def parametric_ids(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind in PARAMETRIC]

    def prunable_ids(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer."""
        out, shape = [], self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _next_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.layers[self.parametric_ids()[-1]].out_channels

    def param_count(self) -> int:
        total = 0
        for layer in self.layers:
            if layer.kind == "dense":
                total += layer.in_channels * layer.out_channels + layer.out_channels
            elif layer.kind == "conv2d":
                total += layer.in_channels * layer.out_channels * layer.kernel_size ** 2 + layer.out_channels
        return total

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**layer) for layer in d["layers"]))


def _next_shape(layer: LayerSpec, shape: tuple[int, ...], i: int) -> tuple[int, ...]:
    if layer.kind == "dense":
        if len(shape) != 1 or shape[0] != layer.in_channels:
            raise StructureError(f"layer {i}: dense expects ({layer.in_channels},) input, got {shape}")
        return (layer.out_channels,)
    if layer.kind == "conv2d":
        k = layer.kernel_size
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise StructureError(f"layer {i}: conv2d expects {layer.in_channels} input channels, got {shape}")
        if k is None or k < 1 or shape[1] < k or shape[2] < k:
            raise StructureError(f"layer {i}: kernel {k} invalid for input {shape}")
        return (layer.out_channels, shape[1] - k + 1, shape[2] - k + 1)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def mlp_spec(sizes: list[int], prune_hidden: bool = True) -> NetworkSpec:
    """Dense/ReLU stack ``sizes[0] -> ... -> sizes[-1]`` ending in softmax."""
    layers = []
    for j in range(len(sizes) - 1):
        last = j == len(sizes) - 2
        layers.append(LayerSpec("dense", sizes[j], sizes[j + 1], prunable=prune_hidden and not last))
        if not last:
            layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("softmax"))
    return NetworkSpec((sizes[0],), tuple(layers))


def convnet_spec(image_size: int = 12, channels=(6, 8), kernel: int = 3, num_classes: int = 4) -> NetworkSpec:
    layers, c_in, side = [], 1, image_size
    for c in channels:
        layers += [LayerSpec("conv2d", c_in, c, kernel, prunable=True), LayerSpec("relu")]
        c_in, side = c, side - kernel + 1
    layers += [LayerSpec("flatten"), LayerSpec("dense", c_in * side * side, num_classes), LayerSpec("softmax")]
    return NetworkSpec((1, image_size, image_size), tuple(layers))


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[int, dict[str, Tensor]] = field(default_factory=dict)

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator | int) -> "Network":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        params = {}
        for i in spec.parametric_ids():
            layer = spec.layers[i]
            if layer.kind == "dense":
                shape = (layer.out_channels, layer.in_channels)
                fan_in, fan_out = layer.in_channels, layer.out_channels
            else:
                k2 = layer.kernel_size ** 2
                shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
                fan_in, fan_out = layer.in_channels * k2, layer.out_channels * k2
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[i] = {
                "weight": Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True),
                "bias": Tensor(np.zeros(layer.out_channels), requires_grad=True),
            }
        net = cls(spec, params)
        net.check_shapes()
        return net

    def check_shapes(self) -> None:
        for i in self.spec.parametric_ids():
            layer = self.spec.layers[i]
            if i not in self.params:
                raise StructureError(f"missing parameters for layer {i}")
            w, b = self.params[i]["weight"], self.params[i]["bias"]
            if layer.kind == "dense":
                expect = (layer.out_channels, layer.in_channels)
            else:
                expect = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            if w.shape != expect or b.shape != (layer.out_channels,):
                raise StructureError(f"layer {i}: parameter shapes {w.shape}/{b.shape}, expected {expect}")

    def parameters(self) -> list[Tensor]:
        return [p for i in sorted(self.params) for p in (self.params[i]["weight"], self.params[i]["bias"])]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def frozen_copy(self) -> "Network":
        net = self.copy()
        for p in net.parameters():
            p.requires_grad = False
            p.grad = None
        return net

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _channel_view(vec: Tensor, ndim: int) -> Tensor:
    # broadcast a per-channel vector against an (O, ...) weight
    return vec.reshape(-1, *([1] * (ndim - 1)))


def forward(net: Network, batch, masks=None, gates: Mapping[int, Tensor] | None = None,
            return_features: bool = False):
    """Run the network and return softmax probabilities of shape (B, K).

    ``masks`` holds ``soft`` and ``hard`` maps keyed by prunable layer index.
    The soft mask scales each output filter (weights and bias); the hard mask,
    and any Taylor ``gates``, multiply the post-activation feature map of the
    channel.  With ``return_features=True`` also returns the input to the
    final parametric layer.
    """
    spec = net.spec
    x = _as_tensor(batch)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"batch sample shape {x.shape[1:]} does not match input {spec.input_shape}")
    soft = getattr(masks, "soft", None) or {}
    hard = getattr(masks, "hard", None) or {}
    gates = gates or {}
    prunable = set(spec.prunable_ids())
    for key in (*soft, *hard, *gates):
        if key not in prunable:
            raise DimensionError(f"mask given for non-prunable layer {key}")
    final_param = spec.parametric_ids()[-1]
    features = None
    pending: int | None = None  # prunable layer whose channel scaling is still due

    def scale_channels(h: Tensor, layer_id: int) -> Tensor:
        for source in (hard, gates):
            if layer_id in source:
                m = _as_tensor(source[layer_id])
                if m.shape != (h.shape[1],):
                    raise DimensionError(f"mask for layer {layer_id} has shape {m.shape}, expected ({h.shape[1]},)")
                h = h * m.reshape(1, -1, *([1] * (h.data.ndim - 2)))
        return h

    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind in PARAMETRIC:
            if pending is not None:
                x = scale_channels(x, pending)
                pending = None
            if i == final_param:
                features = x
            w, b = net.params[i]["weight"], net.params[i]["bias"]
            if i in soft:
                s = _as_tensor(soft[i])
                if s.shape != (layer.out_channels,):
                    raise DimensionError(f"soft mask for layer {i} has shape {s.shape}, expected ({layer.out_channels},)")
                w = w * _channel_view(s, w.data.ndim)
                b = b * s
            if kind == "dense":
                x = x @ w.T + b
            else:
                x = conv2d(x, w, b)
            if i in prunable:
                pending = i
        elif kind == "relu":
            x = x.relu()
            if pending is not None:
                x = scale_channels(x, pending)
                pending = None
        elif kind == "flatten":
            if pending is not None:
                x = scale_channels(x, pending)
                pending = None
            x = x.reshape(x.shape[0], -1)
        else:  # softmax
            x = x.softmax()
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite values after layer {i} ({kind})")
    if return_features:
        return x, features
    return x


def sgd_step(tensors, lr: float) -> None:
    """In-place ``p <- p - lr * grad`` for every tensor that has a gradient."""
    if isinstance(tensors, Network):
        tensors = tensors.parameters()
    for p in tensors:
        if p.grad is not None:
            p.data = p.data - lr * p.grad


def save_checkpoint(net: Network, path, extra: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "params": {
            str(i): {"weight": net.params[i]["weight"].data.tolist(), "bias": net.params[i]["bias"].data.tolist()}
            for i in sorted(net.params)
        },
    }
    if extra:
        doc["extra"] = dict(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def load_checkpoint(path, with_extra: bool = False):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    try:
        spec = NetworkSpec.from_dict(doc["spec"])
        params = {
            int(k): {"weight": Tensor(np.array(v["weight"], dtype=DTYPE), requires_grad=True),
                     "bias": Tensor(np.array(v["bias"], dtype=DTYPE), requires_grad=True)}
            for k, v in doc["params"].items()
        }
        net = Network(spec, params)
        net.check_shapes()
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if with_extra:
        return net, doc.get("extra", {})
    return net
