"""Quick self-contained oracle checks behind the ``selftest`` subcommand."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import lpbox
from .masking import MaskPair
from .micronet import Network, Tensor, convnet_spec, forward, mlp_spec
from .micronet.gradcheck import check_gradients
from .objectives import (
    Batch,
    LossWeights,
    adversarial_update_objective,
    channel_search_objective,
    clustering_loss,
    cross_entropy,
    l1_discrepancy,
    median_bandwidths,
    mmd_rbf,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _enumerate_box_simplex(v: np.ndarray, t: int) -> np.ndarray:
    # each coordinate sits at 0, at 1 or is free with a shared shift
    pat = np.array(list(itertools.product((0, 1, 2), repeat=v.size)))
    free, upper = pat == 2, pat == 1
    n_free = free.sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(n_free > 0, ((v * free).sum(1) - (t - upper.sum(1))) / n_free, 0.0)
    z = np.where(free, v - lam[:, None], upper.astype(float))
    ok = (np.abs(z.sum(1) - t) < 1e-9) & (z.min(1) >= -1e-12) & (z.max(1) <= 1 + 1e-12)
    z = z[ok]
    return z[np.argmin(((z - v) ** 2).sum(1))]


def check_box_simplex(trials: int = 200, n_max: int = 6, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, n_max + 1))
        t = int(rng.integers(0, n + 1))
        v = rng.normal(0.5, 1.0, n)
        worst = max(worst, float(np.abs(lpbox.project_box_simplex(v, t) - _enumerate_box_simplex(v, t)).max()))
    return CheckResult("box-simplex projection vs enumeration", worst < 1e-6, f"max deviation {worst:.2e}")


def check_sphere(trials: int = 1000, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 17))
        z = lpbox.project_sphere(rng.normal(0.5, 3.0, n))
        worst = max(worst, abs(float(((z - 0.5) ** 2).sum()) - n / 4),
                    float(np.abs(lpbox.project_sphere(z) - z).max()))
    return CheckResult("sphere projection radius and idempotence", worst < 1e-9, f"max violation {worst:.2e}")


def check_binary_program(trials: int = 100, n_max: int = 8, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        n = int(rng.integers(2, n_max + 1))
        t = int(rng.integers(1, n + 1))
        v = rng.uniform(-0.5, 1.5, n)
        best = min(itertools.combinations(range(n), t), key=lambda ones: float(((np.isin(np.arange(n), ones) - v) ** 2).sum()))
        hits += np.array_equal(lpbox.solve_binary_program(v, t).x, np.isin(np.arange(n), best).astype(float))
    return CheckResult("ADMM binary program vs exhaustive optimum", hits >= 0.95 * trials, f"{hits}/{trials} exact")


def _jittered(spec, rng) -> Network:
    net = Network.init(spec, rng)
    # zero biases put dead rows exactly on the ReLU kink
    for t in net.parameters():
        t.data = t.data + 0.3 * rng.normal(size=t.shape)
    return net


def _soft(net, rng) -> dict[int, Tensor]:
    return {i: Tensor(rng.uniform(0.3, 1.2, net.spec.layers[i].out_channels), requires_grad=True)
            for i in net.spec.prunable_ids()}


def gradient_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list]]]:
    def dense():
        net = _jittered(mlp_spec([3, 5, 4, 3]), rng)
        soft = _soft(net, rng)
        hard = {0: (rng.random(5) < 0.7).astype(float)}
        x, y = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
        return (lambda: cross_entropy(forward(net, x, masks=MaskPair(soft, hard)), y),
                net.parameters() + list(soft.values()))

    def conv():
        net = _jittered(convnet_spec(image_size=6, channels=(2, 3), kernel=3, num_classes=3), rng)
        soft = _soft(net, rng)
        x, y = rng.normal(size=(2, 1, 6, 6)), rng.integers(0, 3, 2)
        return (lambda: cross_entropy(forward(net, x, masks=MaskPair(soft, {})), y),
                net.parameters() + list(soft.values()))

    def composite(which):
        def make():
            teacher = _jittered(mlp_spec([3, 6, 5, 3]), rng).frozen_copy()
            net = teacher.copy()
            for t in net.parameters():
                t.requires_grad = True
                t.data = t.data + 0.3 * rng.normal(size=t.shape)
            soft = _soft(net, rng)
            masks = MaskPair(soft, {0: np.array([1.0, 0, 1, 1, 0, 1])})
            batch = Batch(rng.normal(size=(8, 3)), rng.integers(0, 3, 8), rng.normal(size=(9, 3)))
            tt = forward(teacher, batch.target_x).data
            if which == "search":
                build = lambda: channel_search_objective(net, masks, batch, tt).total  # noqa: E731
            else:
                build = lambda: adversarial_update_objective(net, masks, batch, tt, LossWeights(1.0, 0.5)).total  # noqa: E731
            return build, net.parameters() + list(soft.values())
        return make

    def discrepancy():
        p = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        q = rng.dirichlet(np.ones(3), 5)
        return lambda: l1_discrepancy(p.softmax(), q), [p]

    def clustering():
        p = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        labels = rng.integers(0, 2, 6)
        return lambda: clustering_loss(p.softmax(), labels, 0.7), [p]

    def mmd():
        a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = Tensor(rng.normal(1.0, 1.0, size=(4, 3)), requires_grad=True)
        bw = median_bandwidths(a, b)
        return lambda: mmd_rbf(a, b, bw), [a, b]

    return {"dense+masks+CE": dense, "conv+flatten+CE": conv, "L1 discrepancy": discrepancy,
            "clustering": clustering, "MMD": mmd, "channel-search objective": composite("search"),
            "adversarial objective": composite("adversarial")}


def check_gradients_all(trials: int = 5, seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, make in gradient_cases(rng).items():
        worst = 0.0
        for _ in range(trials):
            build, tensors = make()
            worst = max(worst, check_gradients(build, tensors))
        out.append(CheckResult(f"gradient {name}", worst < 1e-4, f"max rel err {worst:.2e}"))
    return out


def run_all(full: bool = False) -> list[CheckResult]:
    """Quick checks by default; ``full`` uses the larger acceptance-sized samples."""
    if full:
        return [check_box_simplex(1000, 8), check_sphere(1000), check_binary_program(200, 10),
                *check_gradients_all(20)]
    return [check_box_simplex(), check_sphere(), check_binary_program(), *check_gradients_all()]
