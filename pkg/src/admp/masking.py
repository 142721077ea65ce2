"""Soft/hard channel masks, Taylor importance, and structural pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StructureError
from .micronet import LayerSpec, Network, NetworkSpec, Tensor
from .micronet.tensor import DTYPE


def prune_count(out_channels: int, ratio: float) -> int:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return int(math.floor(ratio * out_channels + 1e-9))


def keep_count(out_channels: int, ratio: float) -> int:
    return out_channels - prune_count(out_channels, ratio)


def check_ratio(ratio: float) -> None:
    if not (0.0 <= ratio < 1.0):
        raise ConfigError(f"pruning ratio must lie in [0, 1), got {ratio}")


@dataclass(frozen=True)
class MaskPair:
    """Per prunable layer: continuous ``soft`` mask and binary ``hard`` mask."""

    soft: Mapping[int, np.ndarray] = field(default_factory=dict)
    hard: Mapping[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def identity(cls, spec: NetworkSpec) -> "MaskPair":
        ones = {i: np.ones(spec.layers[i].out_channels) for i in spec.prunable_ids()}
        return cls(ones, {i: v.copy() for i, v in ones.items()})

    def with_hard(self, hard: Mapping[int, np.ndarray]) -> "MaskPair":
        return MaskPair(self.soft, dict(hard))

    def with_soft(self, soft: Mapping[int, np.ndarray]) -> "MaskPair":
        return MaskPair(dict(soft), self.hard)

    def soft_only(self) -> "MaskPair":
        return MaskPair(self.soft, {})


@dataclass(frozen=True)
class PrunePlan:
    keep: Mapping[int, tuple[int, ...]]

    def to_dict(self) -> dict:
        return {str(k): list(v) for k, v in sorted(self.keep.items())}

    @classmethod
    def from_dict(cls, d: Mapping[str, list[int]]) -> "PrunePlan":
        return cls({int(k): tuple(int(i) for i in v) for k, v in d.items()})

    @classmethod
    def keep_all(cls, spec: NetworkSpec) -> "PrunePlan":
        return cls({i: tuple(range(spec.layers[i].out_channels)) for i in spec.prunable_ids()})

    def as_soft(self, spec: NetworkSpec) -> dict[int, np.ndarray]:
        """Binary soft mask equivalent to this plan."""
        out = {}
        for i, idx in self.keep.items():
            m = np.zeros(spec.layers[i].out_channels)
            m[list(idx)] = 1.0
            out[i] = m
        return out


def apply_soft_mask(weights: Tensor, bias: Tensor, soft) -> tuple[Tensor, Tensor]:
    s = soft if isinstance(soft, Tensor) else Tensor(soft)
    if s.shape != (weights.shape[0],) or bias.shape != (weights.shape[0],):
        raise DimensionError(f"soft mask of shape {s.shape} does not match {weights.shape[0]} output channels")
    return weights * s.reshape(-1, *([1] * (weights.data.ndim - 1))), bias * s


def taylor_importance(net: Network, masks: MaskPair, objective: Callable[..., Tensor]) -> dict[int, np.ndarray]:
    """First-order estimate of each channel's contribution to lowering ``objective``.

    ``objective(gates)`` must build the loss with the given differentiable
    gates multiplying each prunable layer's post-activation map (hard mask
    all ones).  The score is ``-h * dL/dh`` at ``h = 1``, i.e. the predicted
    rise in the loss if the channel were removed; the smallest scores mark
    the channels whose removal helps minimise the objective most.
    """
    gates = {i: Tensor(np.ones(net.spec.layers[i].out_channels), requires_grad=True)
             for i in net.spec.prunable_ids()}
    loss = objective(gates)
    loss.backward()
    out = {}
    for i, g in gates.items():
        grad = np.zeros_like(g.data) if g.grad is None else g.grad
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite Taylor gradient at layer {i}")
        out[i] = -g.data * grad
    return out


def _smallest(values: np.ndarray, count: int) -> np.ndarray:
    order = np.lexsort((np.arange(values.size), values))
    return order[:count]


def _largest(values: np.ndarray, count: int) -> np.ndarray:
    order = np.lexsort((np.arange(values.size), -values))
    return order[:count]


def generate_hard_mask(importance: Mapping[int, np.ndarray], ratio: float) -> dict[int, np.ndarray]:
    """Zero the ``floor(ratio * n)`` least important channels of every layer."""
    check_ratio(ratio)
    out = {}
    for i, imp in importance.items():
        imp = np.asarray(imp, dtype=DTYPE)
        mask = np.ones(imp.size)
        mask[_smallest(imp, prune_count(imp.size, ratio))] = 0.0
        out[i] = mask
    return out


def binarize_soft_mask(masks: MaskPair, ratio: float) -> PrunePlan:
    """Keep the top-``t`` channels by soft-mask value in each layer."""
    check_ratio(ratio)
    if not masks.soft:
        raise StructureError("no soft masks to binarize")
    keep = {}
    for i, s in masks.soft.items():
        s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=DTYPE)
        t = keep_count(s.size, ratio)
        if t == 0:
            raise StructureError(f"layer {i} would keep no channels")
        keep[i] = tuple(sorted(int(j) for j in _largest(s, t)))
    return PrunePlan(keep)


def magnitude_plan(net: Network, ratio: float) -> PrunePlan:
    """Plan keeping the filters with the largest L1 weight norm."""
    check_ratio(ratio)
    keep = {}
    for i in net.spec.prunable_ids():
        w = net.params[i]["weight"].data
        norms = np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
        keep[i] = tuple(sorted(int(j) for j in _largest(norms, keep_count(w.shape[0], ratio))))
    return PrunePlan(keep)


def _consumer(spec: NetworkSpec, layer_id: int) -> tuple[int, int | None]:
    """Next parametric layer after ``layer_id`` and the flattened block size on the way."""
    block = None
    shapes = spec.shapes()
    for j in range(layer_id + 1, len(spec.layers)):
        kind = spec.layers[j].kind
        if kind == "flatten":
            c, h, w = shapes[j - 1]
            block = h * w
        elif kind in ("dense", "conv2d"):
            return j, block
    raise StructureError(f"layer {layer_id} has no consumer layer")


def validate_plan(spec: NetworkSpec, plan: PrunePlan) -> None:
    prunable = set(spec.prunable_ids())
    for i, idx in plan.keep.items():
        if i not in prunable:
            raise StructureError(f"plan names non-prunable layer {i}")
        n = spec.layers[i].out_channels
        if not idx or len(set(idx)) != len(idx) or list(idx) != sorted(idx) or idx[0] < 0 or idx[-1] >= n:
            raise StructureError(f"layer {i}: invalid keep indices {idx}")


def pruned_spec(spec: NetworkSpec, plan: PrunePlan) -> NetworkSpec:
    validate_plan(spec, plan)
    layers = list(spec.layers)
    for i, idx in plan.keep.items():
        layers[i] = LayerSpec(layers[i].kind, layers[i].in_channels, len(idx), layers[i].kernel_size, layers[i].prunable)
        j, block = _consumer(spec, i)
        c = layers[j]
        new_in = len(idx) * block if block else len(idx)
        layers[j] = LayerSpec(c.kind, new_in, c.out_channels, c.kernel_size, c.prunable)
    return NetworkSpec(spec.input_shape, tuple(layers))


def finalize_prune(net: Network, plan: PrunePlan) -> Network:
    """Physically remove dropped filters and the matching consumer inputs."""
    spec = net.spec
    new_spec = pruned_spec(spec, plan)
    weights = {i: net.params[i]["weight"].data.copy() for i in net.params}
    biases = {i: net.params[i]["bias"].data.copy() for i in net.params}
    for i, idx in plan.keep.items():
        idx = np.asarray(idx)
        weights[i] = weights[i][idx]
        biases[i] = biases[i][idx]
        j, block = _consumer(spec, i)
        if block:
            cols = (idx[:, None] * block + np.arange(block)[None, :]).ravel()
            weights[j] = weights[j][:, cols]
        else:
            weights[j] = weights[j][:, idx]
    params = {i: {"weight": Tensor(weights[i], requires_grad=True), "bias": Tensor(biases[i], requires_grad=True)}
              for i in net.params}
    out = Network(new_spec, params)
    out.check_shapes()
    return out


def param_reduction(spec: NetworkSpec, plan: PrunePlan) -> float:
    before = spec.param_count()
    after = pruned_spec(spec, plan).param_count()
    return float(1 - Fraction(after, before))


def pruned_fraction(spec: NetworkSpec, plan: PrunePlan) -> float:
    """Fraction of prunable channels the plan removes."""
    total = sum(spec.layers[i].out_channels for i in spec.prunable_ids())
    kept = sum(len(plan.keep.get(i, range(spec.layers[i].out_channels))) for i in spec.prunable_ids())
    return float(Fraction(total - kept, total))
