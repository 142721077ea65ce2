"""Three-phase schedule: UDA pretraining, adversarial double-mask pruning, fine-tuning.

Training functions only ever receive a :class:`~admp.domdata.TrainingView`,
which carries no target labels.  Metrics that need target labels are
produced by an ``evaluator`` callback supplied by the caller.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from . import lpbox
from .domdata import BatchStream, DomainPair, TrainingView
from .errors import ConfigError, NumericError, TrainingError
from .masking import (
    MaskPair,
    PrunePlan,
    binarize_soft_mask,
    check_ratio,
    finalize_prune,
    generate_hard_mask,
    keep_count,
    param_reduction,
    pruned_fraction,
    taylor_importance,
)
from .micronet import Network, NetworkSpec, Tensor, forward, sgd_step
from .objectives import (
    Batch,
    LossWeights,
    adversarial_update_objective,
    channel_search_objective,
    clustering_loss,
    l1_discrepancy,
    uda_objective,
)

MODES = ("double", "one_mask", "kd_only")


@dataclass(frozen=True)
class TrainConfig:
    pretrain_steps: int = 2000
    admp_steps: int = 1500
    warmup_steps: int = 300
    finetune_steps: int = 1000
    lr: float = 0.05
    lr_decay_at: tuple[float, ...] = (0.6, 0.85)
    lr_decay: float = 0.1
    ratio: float = 0.5
    lambda_disc: float = 1.0
    lambda_clu: float = 0.1
    margin: float = 1.0
    mmd_weight: float = 1.0
    rho: float = 1.0
    rho_growth: float = 1.05
    rho_every: int = 100
    rho_max: float = 10.0
    batch_size: int = 64
    seed: int = 0
    patience: int = 5
    eval_every: int = 50
    record_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_at", tuple(float(x) for x in self.lr_decay_at))
        for name in ("pretrain_steps", "admp_steps", "warmup_steps", "finetune_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("batch_size", "eval_every", "patience", "rho_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.rho <= 0:
            raise ConfigError("lr and rho must be positive")
        check_ratio(self.ratio)
        LossWeights(self.lambda_disc, self.lambda_clu, self.margin)
        if self.mmd_weight < 0:
            raise ConfigError("mmd_weight must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_disc, self.lambda_clu, self.margin)

    def lr_at(self, step: int, total: int) -> float:
        n_decays = sum(step >= frac * total for frac in self.lr_decay_at)
        return self.lr * self.lr_decay ** n_decays

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_at"] = list(self.lr_decay_at)
        return d

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


METRIC_FIELDS = ("phase", "iteration", "source_acc", "target_acc", "discrepancy", "clustering",
                 "sparsity", "param_reduction", "wall_seconds")


@dataclass(frozen=True)
class MetricsRecord:
    phase: str
    iteration: int
    source_acc: float
    target_acc: float
    discrepancy: float
    clustering: float
    sparsity: float
    param_reduction: float
    wall_seconds: float


Evaluator = Callable[[Network, "MaskPair | None"], dict]


@dataclass
class PhaseState:
    net: Network
    teacher: Network
    teacher_target: np.ndarray  # cached teacher probabilities on the full target set
    soft: dict[int, Tensor]
    hard: dict[int, np.ndarray]
    admm: dict[int, lpbox.AdmmState]
    t: dict[int, int]
    iteration: int = 0
    updates: int = 0
    phase: str = "admp"

    @property
    def masks(self) -> MaskPair:
        return MaskPair({i: s.data.copy() for i, s in self.soft.items()}, {i: h.copy() for i, h in self.hard.items()})


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.start if self.enabled else 0.0


def _stream(view: TrainingView, config: TrainConfig, phase: int) -> Iterator[Batch]:
    stream = BatchStream(view, config.batch_size, seed=config.seed * 1000 + phase)
    if stream.warning:
        raise ConfigError(stream.warning)
    return iter(stream)


def _check_loss(value: float, iteration: int, phase: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{phase}: non-finite loss at iteration {iteration}", iteration)


@contextmanager
def _guard(phase: str, iteration: int):
    """Re-raise numeric failures inside a training step as TrainingError with the iteration."""
    try:
        yield
    except TrainingError:
        raise
    except NumericError as exc:
        raise TrainingError(f"{phase}: {exc} (iteration {iteration})", iteration) from exc


def _record(phase, iteration, ev: dict, sparsity, reduction, clock) -> MetricsRecord:
    return MetricsRecord(phase, int(iteration), float(ev["source_acc"]), float(ev["target_acc"]),
                         float(ev["discrepancy"]), float(ev["clustering"]), float(sparsity), float(reduction),
                         float(clock()))


def accuracy(net: Network, x, y, masks=None) -> float:
    return float(np.mean(np.argmax(forward(net, x, masks=masks).data, axis=1) == y))


def evaluate(net: Network, pair: DomainPair, teacher: Network, masks=None) -> tuple[float, float, float]:
    """Source accuracy, target accuracy (hidden labels) and target discrepancy to ``teacher``."""
    src = accuracy(net, pair.source_x, pair.source_y, masks)
    probs_t = forward(net, pair.target_x, masks=masks).data
    tgt = float(np.mean(np.argmax(probs_t, axis=1) == pair.target_y_hidden))
    disc = l1_discrepancy(probs_t, forward(teacher, pair.target_x).data).item()
    return src, tgt, disc


def make_evaluator(pair: DomainPair, margin: float = 1.0) -> Callable[[Network, Network, "MaskPair | None"], dict]:
    """Evaluator closing over the labelled pair; the only consumer of target labels."""

    def run(net: Network, teacher: Network, masks=None) -> dict:
        src, tgt, disc = evaluate(net, pair, teacher, masks)
        probs_t = forward(net, pair.target_x, masks=masks).data
        labels = np.argmax(forward(teacher, pair.target_x).data, axis=1)
        clu = clustering_loss(probs_t, labels, margin).item()
        return {"source_acc": src, "target_acc": tgt, "discrepancy": disc, "clustering": clu}

    return run


# -- phase 1 ---------------------------------------------------------------

def pretrain_uda(config: TrainConfig, view: TrainingView, spec: NetworkSpec, evaluator=None,
                 mmd_weight: float | None = None, iteration_offset: int = 0):
    """Train a fresh network on source cross-entropy plus MMD; return (frozen teacher, metrics)."""
    mmd_weight = config.mmd_weight if mmd_weight is None else mmd_weight
    clock = _Clock(config.record_wall_time)
    net = Network.init(spec, np.random.default_rng([config.seed, 1]))
    metrics = []
    total = config.pretrain_steps
    batches = _stream(view, config, 1) if total else iter(())
    for step in range(total):
        batch = next(batches)
        with _guard("pretrain", step):
            report = uda_objective(net, batch, mmd_weight)
            _check_loss(report.value, step, "pretrain")
            report.total.backward()
            sgd_step(net, config.lr_at(step, total))
            net.zero_grad()
        if evaluator is not None and ((step + 1) % config.eval_every == 0 or step + 1 == total):
            metrics.append(_record("pretrain", iteration_offset + step + 1, evaluator(net, net, None), 0.0, 0.0, clock))
    return net.frozen_copy(), metrics


# -- phase 2 ---------------------------------------------------------------

def init_phase_state(teacher: Network, view: TrainingView, config: TrainConfig) -> PhaseState:
    student = teacher.copy()
    for p in student.parameters():
        p.requires_grad = True
    spec = student.spec
    soft, hard, admm, t = {}, {}, {}, {}
    for i in spec.prunable_ids():
        n = spec.layers[i].out_channels
        t[i] = keep_count(n, config.ratio)
        soft[i] = Tensor(np.ones(n), requires_grad=True)
        hard[i] = np.ones(n)
        admm[i] = lpbox.AdmmState.init(soft[i].data, t[i], config.rho)
    return PhaseState(student, teacher, forward(teacher, view.target_x).data, soft, hard, admm, t)


def _teacher_batch(state: PhaseState, batch: Batch) -> np.ndarray:
    if batch.target_index is not None:
        return state.teacher_target[batch.target_index]
    return forward(state.teacher, batch.target_x).data


def channel_search_step(state: PhaseState, batch: Batch, ratio: float) -> dict[int, np.ndarray]:
    """Regenerate the hard mask greedily from Taylor importance; W and m_s are left as is."""
    soft = {i: s.data for i, s in state.soft.items()}
    teacher_t = _teacher_batch(state, batch)
    masks = MaskPair(soft, {})

    def objective(gates):
        return channel_search_objective(state.net, masks, batch, teacher_t, gates).total

    importance = taylor_importance(state.net, masks, objective)
    state.net.zero_grad()
    state.hard = generate_hard_mask(importance, ratio)
    return state.hard


def _apply_mask_grads(state: PhaseState, lr: float, config: TrainConfig) -> None:
    for i, s in state.soft.items():
        g = np.zeros_like(s.data) if s.grad is None else s.grad
        g = g + lpbox.admm_penalty_gradient(state.admm[i], s.data)
        s.data = s.data - lr * g
        s.grad = None
    state.updates += 1
    grow = state.updates % config.rho_every == 0
    for i, s in state.soft.items():
        st = lpbox.admm_refresh(state.admm[i], s.data)
        if grow:
            st = lpbox.grow_rho(st, config.rho_growth, config.rho_max)
        state.admm[i] = st


def adversarial_update_step(state: PhaseState, batch: Batch, lr: float, config: TrainConfig,
                            mode: str = "double") -> dict:
    """Gradient step on W and m_s against the current hard mask, then an ADMM refresh.

    ``mode="one_mask"`` drops the hard mask and moves m_s along the
    channel-search objective instead, while W still follows the
    adversarial-update objective.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    teacher_t = _teacher_batch(state, batch)
    weights = config.loss_weights
    hard = state.hard if mode == "double" else {}
    if mode == "one_mask":
        search = channel_search_objective(state.net, MaskPair(state.soft, {}), batch, teacher_t)
        _check_loss(search.value, state.iteration, "admp")
        search.total.backward()
        state.net.zero_grad()  # keep only the mask gradient of the search objective
        consts = MaskPair({i: s.data for i, s in state.soft.items()}, {})
        report = adversarial_update_objective(state.net, consts, batch, teacher_t, weights)
        _check_loss(report.value, state.iteration, "admp")
        report.total.backward()
    else:
        report = adversarial_update_objective(state.net, MaskPair(state.soft, hard), batch, teacher_t, weights)
        _check_loss(report.value, state.iteration, "admp")
        report.total.backward()
    sgd_step(state.net, lr)
    state.net.zero_grad()
    _apply_mask_grads(state, lr, config)
    return report.components


def _current_plan(state: PhaseState, ratio: float) -> PrunePlan:
    return binarize_soft_mask(state.masks, ratio)


def admp_prune(teacher: Network, config: TrainConfig, view: TrainingView, evaluator=None,
               mode: str = "double", iteration_offset: int = 0):
    """Alternate channel search and adversarial update; return (student, masks, metrics, state).

    Hard masks stay all ones during the first ``warmup_steps`` iterations and
    for the modes without a hard mask.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    clock = _Clock(config.record_wall_time)
    state = init_phase_state(teacher, view, config)
    metrics = []
    total = config.admp_steps
    batches = _stream(view, config, 2) if total else iter(())
    for step in range(total):
        state.iteration = step
        batch = next(batches)
        with _guard("admp", step):
            if mode == "double" and step >= config.warmup_steps:
                channel_search_step(state, batch, config.ratio)
            adversarial_update_step(state, batch, config.lr_at(step, total), config, mode)
        if evaluator is not None and ((step + 1) % config.eval_every == 0 or step + 1 == total):
            plan = _current_plan(state, config.ratio)
            masks = state.masks if mode == "double" else state.masks.soft_only()
            ev = evaluator(state.net, teacher, masks)
            metrics.append(_record("admp", iteration_offset + step + 1, ev, pruned_fraction(state.net.spec, plan),
                                   param_reduction(state.net.spec, plan), clock))
    return state.net, state.masks, metrics, state


def binariness(masks: MaskPair) -> float:
    """Mean distance of soft-mask entries from the nearest of 0 and 1."""
    vals = np.concatenate([np.asarray(s) for s in masks.soft.values()])
    return float(np.mean(np.abs(vals - np.round(vals))))


# -- phase 3 ---------------------------------------------------------------

def _snapshot(net: Network) -> dict:
    return {i: (p["weight"].data.copy(), p["bias"].data.copy()) for i, p in net.params.items()}


def _restore(net: Network, snap: dict) -> None:
    for i, (w, b) in snap.items():
        net.params[i]["weight"].data = w.copy()
        net.params[i]["bias"].data = b.copy()


def finetune(student: Network, masks: MaskPair, config: TrainConfig, view: TrainingView, teacher: Network,
             evaluator=None, plan: PrunePlan | None = None, iteration_offset: int = 0,
             objective: str = "kd"):
    """Prune by the soft mask, then train the smaller network without a hard mask.

    ``objective="kd"`` uses the adversarial-update losses against the
    teacher; ``objective="uda"`` uses source cross-entropy plus MMD.
    Early stopping tracks source-validation accuracy minus target
    discrepancy every ``eval_every`` steps and restores the best weights.
    Returns (pruned network, plan, metrics).
    """
    clock = _Clock(config.record_wall_time)
    if plan is None:
        plan = binarize_soft_mask(masks, config.ratio)
    net = finalize_prune(student, plan)
    orig_spec = student.spec
    reduction = param_reduction(orig_spec, plan)
    sparsity = pruned_fraction(orig_spec, plan)
    teacher_target = forward(teacher, view.target_x).data
    weights = config.loss_weights
    metrics = []
    total = config.finetune_steps

    def score() -> float:
        val = accuracy(net, view.source_val_x, view.source_val_y)
        if objective == "uda":
            return val
        return val - l1_discrepancy(forward(net, view.target_x).data, teacher_target).item()

    best, best_snap, stale = score(), _snapshot(net), 0
    batches = _stream(view, config, 3) if total else iter(())
    for step in range(total):
        batch = next(batches)
        with _guard("finetune", step):
            if objective == "uda":
                report = uda_objective(net, batch, config.mmd_weight)
            else:
                report = adversarial_update_objective(net, None, batch, teacher_target[batch.target_index], weights)
            _check_loss(report.value, step, "finetune")
            report.total.backward()
            sgd_step(net, config.lr_at(step, total))
            net.zero_grad()
        last = step + 1 == total
        if (step + 1) % config.eval_every == 0 or last:
            s = score()
            if s > best:
                best, best_snap, stale = s, _snapshot(net), 0
            else:
                stale += 1
            if evaluator is not None:
                metrics.append(_record("finetune", iteration_offset + step + 1, evaluator(net, teacher, None),
                                       sparsity, reduction, clock))
            if stale >= config.patience:
                break
    _restore(net, best_snap)
    if evaluator is not None:
        last_it = metrics[-1].iteration + 1 if metrics else iteration_offset + 1
        metrics.append(_record("final", last_it, evaluator(net, teacher, None), sparsity, reduction, clock))
    return net, plan, metrics
