import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from admp.errors import ConfigError, DimensionError, LabelError
from admp.masking import MaskPair
from admp.micronet import Network, Tensor, forward, mlp_spec
from admp.micronet.gradcheck import check_gradients
from admp.objectives import (
    Batch,
    LossWeights,
    adversarial_update_objective,
    channel_search_objective,
    clustering_loss,
    cross_entropy,
    l1_discrepancy,
    median_bandwidths,
    mmd_rbf,
    uda_objective,
)


def _probs(rng, n, k):
    z = rng.normal(size=(n, k))
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def prob_rows(n, k):
    return arrays(np.float64, (n, k), elements=st.floats(0.01, 1.0)).map(lambda a: a / a.sum(1, keepdims=True))


# -- cross entropy --------------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.eye(3), [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(np.full((2, 4), 0.25), [1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    # the floor keeps an impossible label finite
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_direct_summation():
    rng = np.random.default_rng(0)
    p, y = _probs(rng, 5, 3), rng.integers(0, 3, 5)
    ref = -sum(math.log(p[i][y[i]]) for i in range(5)) / 5
    assert cross_entropy(p, y).item() == pytest.approx(ref, abs=1e-12)


def test_cross_entropy_label_errors():
    with pytest.raises(LabelError):
        cross_entropy(np.full((2, 3), 1 / 3), [0, 3])
    with pytest.raises(LabelError):
        cross_entropy(np.full((2, 3), 1 / 3), [0, -1])
    with pytest.raises(DimensionError):
        cross_entropy(np.full((2, 3), 1 / 3), [0])


# -- discrepancy ------------------------------------------------------------------

def test_l1_examples():
    assert l1_discrepancy([[0.3, 0.7]], [[0.3, 0.7]]).item() == 0.0
    assert l1_discrepancy([[1.0, 0.0]], [[0.0, 1.0]]).item() == 1.0
    assert l1_discrepancy([[1.0, 0.0]], [[0.5, 0.5]]).item() == 0.5
    with pytest.raises(DimensionError):
        l1_discrepancy(np.ones((2, 2)), np.ones((2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.data())
def test_l1_properties(n, k, data):
    p = data.draw(prob_rows(n, k))
    q = data.draw(prob_rows(n, k))
    d = l1_discrepancy(p, q).item()
    assert d == l1_discrepancy(q, p).item()
    assert 0.0 <= d <= 2.0 / k + 1e-12
    assert (d == 0.0) == np.array_equal(p, q)


# -- clustering -------------------------------------------------------------------

def test_clustering_examples():
    assert clustering_loss(np.full((4, 2), 0.5), [1, 1, 1, 1]).item() == 0.0
    far = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert clustering_loss(far, [0, 1], margin=1.0).item() == 0.0
    assert clustering_loss(far, [0, 0]).item() == pytest.approx(2 * math.sqrt(2) / 4, abs=1e-5)
    with pytest.raises(ConfigError):
        clustering_loss(far, [0, 1], margin=0.0)


def _clustering_by_loops(p, labels, c):
    b = len(p)
    total = 0.0
    for i in range(b):
        for j in range(b):
            d = math.dist(p[i], p[j])
            total += d if labels[i] == labels[j] else max(0.0, c - d)
    return total / b**2


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(2, 4), st.floats(0.1, 2.0), st.data())
def test_clustering_matches_loops_and_relabeling(n, k, c, data):
    p = data.draw(prob_rows(n, k))
    labels = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n)))
    v = clustering_loss(p, labels, c).item()
    assert v >= 0
    assert v == pytest.approx(_clustering_by_loops(p, labels, c), abs=1e-12)
    perm = np.random.default_rng(n).permutation(k)
    assert clustering_loss(p, perm[labels], c).item() == pytest.approx(v, abs=1e-15)


# -- MMD ------------------------------------------------------------------------

def test_mmd_single_points_closed_form():
    x, y, sigma = np.array([[0.3, -1.0]]), np.array([[1.1, 0.4]]), 0.7
    ref = 2 - 2 * math.exp(-((0.8**2 + 1.4**2) / (2 * sigma**2)))
    assert mmd_rbf(x, y, [sigma]).item() == pytest.approx(ref, abs=1e-12)


def test_mmd_identical_sets_and_errors():
    x = np.random.default_rng(1).normal(size=(6, 3))
    assert mmd_rbf(x, x, [0.5, 1.0, 2.0]).item() == 0.0
    with pytest.raises(ConfigError):
        mmd_rbf(x, x, [])
    with pytest.raises(DimensionError):
        mmd_rbf(x, x[:, :2], [1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mmd_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(int(rng.integers(1, 8)), 3)), rng.normal(1.0, 2.0, size=(int(rng.integers(1, 8)), 3))
    bw = median_bandwidths(a, b)
    v = mmd_rbf(a, b, bw).item()
    assert v >= -1e-12
    assert mmd_rbf(a[rng.permutation(len(a))], b[rng.permutation(len(b))], bw).item() == pytest.approx(v, abs=1e-12)


def test_median_bandwidths():
    a = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert median_bandwidths(a[:1], a[1:]) == [2.5, 5.0, 10.0]
    assert median_bandwidths(a[:1], a[:1]) == [0.5, 1.0, 2.0]  # zero median falls back to unit scale


# -- composite objectives ---------------------------------------------------------

def _toy(seed=0):
    rng = np.random.default_rng(seed)
    teacher = Network.init(mlp_spec([3, 6, 5, 3]), rng).frozen_copy()
    student = teacher.copy()
    for p in student.parameters():
        p.requires_grad = True
    batch = Batch(rng.normal(size=(8, 3)), rng.integers(0, 3, 8), rng.normal(size=(9, 3)))
    return rng, student, teacher, batch


def test_channel_search_objective_identities():
    rng, student, teacher, batch = _toy()
    tt = forward(teacher, batch.target_x).data
    rep = channel_search_objective(student, MaskPair.identity(student.spec), batch, tt)
    assert rep.components["discrepancy"] == 0.0
    assert rep.value == rep.components["source_ce"]
    masks = MaskPair({i: rng.uniform(0.2, 1.5, student.spec.layers[i].out_channels) for i in student.spec.prunable_ids()})
    rep = channel_search_objective(student, masks, batch, tt)
    ce = cross_entropy(forward(student, batch.source_x, masks=masks), batch.source_y).item()
    disc = l1_discrepancy(forward(student, batch.target_x, masks=masks), tt).item()
    assert rep.components["discrepancy"] > 0
    assert rep.value < rep.components["source_ce"]
    assert rep.value == pytest.approx(ce - disc, abs=1e-12)


def test_adversarial_objective_reductions():
    rng, student, teacher, batch = _toy(1)
    tt = forward(teacher, batch.target_x).data
    masks = MaskPair({0: rng.uniform(0.2, 1.5, 6)})
    rep = adversarial_update_objective(student, masks, batch, tt, LossWeights(0.0, 0.0))
    assert rep.value == cross_entropy(forward(student, batch.source_x, masks=masks), batch.source_y).item()
    rep = adversarial_update_objective(student, masks, batch, tt, LossWeights(1.0, 0.1))
    c = rep.components
    assert rep.value == pytest.approx(c["source_ce"] + c["discrepancy"] + 0.1 * c["clustering"], abs=1e-12)
    with pytest.raises(ConfigError):
        LossWeights(-1.0, 0.0)


def test_perfectly_clustered_target_leaves_only_source_ce():
    # teacher maps every target row to the same one-hot output
    _, student, teacher, batch = _toy(2)
    for p in (teacher, student):
        p.params[4]["weight"].data[:] = 0.0
        p.params[4]["bias"].data[:] = np.array([60.0, 0.0, 0.0])
    tt = forward(teacher, batch.target_x).data
    rep = adversarial_update_objective(student, MaskPair.identity(student.spec), batch, tt)
    assert rep.value == pytest.approx(rep.components["source_ce"], abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_objective_gradients(seed):
    rng, student, teacher, batch = _toy(seed)
    for p in student.parameters():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    tt = forward(teacher, batch.target_x).data
    soft = {i: Tensor(rng.uniform(0.3, 1.2, student.spec.layers[i].out_channels), requires_grad=True)
            for i in student.spec.prunable_ids()}
    hard = {0: np.array([1.0, 0, 1, 1, 0, 1])}
    masks = MaskPair(soft, hard)
    tensors = student.parameters() + list(soft.values())
    # bandwidths are per-batch constants, so freeze them before differencing
    _, fs = forward(student, batch.source_x, return_features=True)
    _, ft = forward(student, batch.target_x, return_features=True)
    bw = median_bandwidths(fs, ft)

    def mmd():
        _, a = forward(student, batch.source_x, masks=MaskPair(soft, {}), return_features=True)
        _, b = forward(student, batch.target_x, masks=MaskPair(soft, {}), return_features=True)
        return mmd_rbf(a, b, bw)

    builds = [
        lambda: adversarial_update_objective(student, masks, batch, tt, LossWeights(1.0, 0.5, 0.3)).total,
        lambda: channel_search_objective(student, masks, batch, tt).total,
        mmd,
    ]
    for build in builds:
        assert check_gradients(build, tensors) < 1e-4


def test_uda_objective_without_mmd_is_cross_entropy():
    _, student, _, batch = _toy(3)
    rep = uda_objective(student, batch, 0.0)
    assert rep.value == cross_entropy(forward(student, batch.source_x), batch.source_y).item()
    assert uda_objective(student, batch, 2.0).components["mmd"] >= 0


def test_batch_validation():
    with pytest.raises(DimensionError):
        Batch(np.ones((0, 2)), np.ones(0, int), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        Batch(np.ones((2, 2)), np.ones(3, int), np.ones((3, 2)))
