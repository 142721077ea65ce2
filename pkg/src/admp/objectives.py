"""Loss functions for pretraining, channel search and the adversarial update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LabelError
from .micronet import Network, Tensor, forward, pairwise_distance, squared_distance

PROB_FLOOR = 1e-12


@dataclass
class LossReport:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


@dataclass(frozen=True)
class Batch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    # row positions of target_x in the full target set; lets callers reuse cached teacher outputs
    target_index: np.ndarray | None = None

    def __post_init__(self):
        if len(self.source_x) == 0 or len(self.target_x) == 0:
            raise DimensionError("empty batch")
        if len(self.source_x) != len(self.source_y):
            raise DimensionError("source inputs and labels differ in length")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-probability of the true label, probabilities floored at 1e-12."""
    p = _t(probs)
    labels = np.asarray(labels)
    if labels.shape != (p.shape[0],):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {p.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1] or not np.issubdtype(labels.dtype, np.integer)):
        raise LabelError(f"labels must be integers in [0, {p.shape[1]})")
    return -(p.take_rows(labels).clip_min(PROB_FLOOR).log().mean())


def l1_discrepancy(student_probs, teacher_probs) -> Tensor:
    """Batch mean of ``(1/K) * sum_k |student_k - teacher_k|``."""
    s, t = _t(student_probs), _t(teacher_probs)
    if s.shape != t.shape:
        raise DimensionError(f"student {s.shape} and teacher {t.shape} outputs differ in shape")
    return (s - t).abs().mean()


def clustering_loss(student_probs, teacher_labels, margin: float = 1.0) -> Tensor:
    """Pairwise contrastive loss over all ordered pairs, normalised by B^2.

    Same-pseudo-class pairs pay their output distance, other pairs pay
    ``max(0, margin - distance)``.
    """
    if margin <= 0:
        raise ConfigError(f"clustering margin must be positive, got {margin}")
    s = _t(student_probs)
    labels = np.asarray(teacher_labels)
    if labels.shape != (s.shape[0],):
        raise DimensionError("one teacher label per student row is required")
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    d = pairwise_distance(s)
    terms = d * same + (-(d - margin)).relu() * (1.0 - same)
    return terms.sum() * (1.0 / s.shape[0] ** 2)


def median_bandwidths(feats_s, feats_t, scales: Sequence[float] = (0.5, 1.0, 2.0)) -> list[float]:
    """Median pairwise distance of the pooled sample times each scale."""
    x = np.concatenate([np.asarray(getattr(feats_s, "data", feats_s)), np.asarray(getattr(feats_t, "data", feats_t))])
    sq = (x * x).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), k=1)
    med = float(np.sqrt(np.median(d2[iu]))) if iu[0].size else 0.0
    if not med > 0:
        med = 1.0
    return [med * s for s in scales]


def mmd_rbf(feats_s, feats_t, bandwidths: Sequence[float]) -> Tensor:
    """Biased MMD^2 with a sum of Gaussian kernels ``exp(-||x-y||^2 / (2 sigma^2))``."""
    if not bandwidths:
        raise ConfigError("mmd_rbf needs at least one bandwidth")
    a, b = _t(feats_s), _t(feats_t)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature shapes {a.shape} and {b.shape} are incompatible")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("mmd_rbf needs non-empty sample sets")
    d_ss, d_tt, d_st = squared_distance(a, a), squared_distance(b, b), squared_distance(a, b)
    total = None
    for sigma in bandwidths:
        c = -1.0 / (2.0 * sigma * sigma)
        term = (d_ss * c).exp().mean() + (d_tt * c).exp().mean() - (d_st * c).exp().mean() * 2.0
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossWeights:
    disc: float = 1.0
    clu: float = 0.1
    margin: float = 1.0

    def __post_init__(self):
        if self.disc < 0 or self.clu < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.margin <= 0:
            raise ConfigError("clustering margin must be positive")


def teacher_outputs(teacher: Network, x) -> np.ndarray:
    return forward(teacher, x).data


def _student(net, masks, gates, x):
    return forward(net, x, masks=masks, gates=gates)


def channel_search_objective(net: Network, masks, batch: Batch, teacher_target: np.ndarray,
                             gates: Mapping[int, Tensor] | None = None) -> LossReport:
    """Source cross-entropy minus target discrepancy to the teacher."""
    ce = cross_entropy(_student(net, masks, gates, batch.source_x), batch.source_y)
    disc = l1_discrepancy(_student(net, masks, gates, batch.target_x), teacher_target)
    return LossReport(ce - disc, {"source_ce": ce.item(), "discrepancy": disc.item()})


def adversarial_update_objective(net: Network, masks, batch: Batch, teacher_target: np.ndarray,
                                 weights: LossWeights = LossWeights()) -> LossReport:
    """Source cross-entropy plus weighted discrepancy and clustering terms."""
    ce = cross_entropy(_student(net, masks, None, batch.source_x), batch.source_y)
    student_t = _student(net, masks, None, batch.target_x)
    disc = l1_discrepancy(student_t, teacher_target)
    total = ce + disc * weights.disc
    components = {"source_ce": ce.item(), "discrepancy": disc.item(), "clustering": 0.0}
    if weights.clu > 0:
        clu = clustering_loss(student_t, np.argmax(teacher_target, axis=1), weights.margin)
        total = total + clu * weights.clu
        components["clustering"] = clu.item()
    return LossReport(total, components)


def uda_objective(net: Network, batch: Batch, mmd_weight: float, masks=None) -> LossReport:
    """Source cross-entropy plus MMD between penultimate source and target features."""
    probs_s, feat_s = forward(net, batch.source_x, masks=masks, return_features=True)
    ce = cross_entropy(probs_s, batch.source_y)
    if mmd_weight == 0:
        return LossReport(ce, {"source_ce": ce.item(), "mmd": 0.0})
    _, feat_t = forward(net, batch.target_x, masks=masks, return_features=True)
    mmd = mmd_rbf(feat_s, feat_t, median_bandwidths(feat_s, feat_t))
    return LossReport(ce + mmd * mmd_weight, {"source_ce": ce.item(), "mmd": mmd.item()})
