import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from admp.errors import CheckpointError, DimensionError, NumericError, StateError, StructureError
from admp.masking import MaskPair
from admp.micronet import (
    LayerSpec,
    Network,
    NetworkSpec,
    Tensor,
    conv2d,
    convnet_spec,
    forward,
    load_checkpoint,
    mlp_spec,
    save_checkpoint,
    sgd_step,
)
from admp.micronet.gradcheck import check_gradients
from admp.objectives import cross_entropy


def _hand_forward(W1, b1, W2, b2, x):
    # scalar-by-scalar evaluation, no numpy broadcasting
    hidden = []
    for j in range(len(b1)):
        z = b1[j]
        for i in range(len(x)):
            z += W1[j][i] * x[i]
        hidden.append(z if z > 0 else 0.0)
    logits = []
    for k in range(len(b2)):
        z = b2[k]
        for j in range(len(hidden)):
            z += W2[k][j] * hidden[j]
        logits.append(z)
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    return [v / sum(e) for v in e]


def test_dense_forward_matches_hand_evaluation():
    W1 = [[0.5, -1.0], [1.5, 0.25], [-0.75, 0.8]]
    b1 = [0.1, -0.2, 0.05]
    W2 = [[1.0, -0.5, 0.3], [-0.4, 0.9, 1.2]]
    b2 = [0.0, 0.1]
    x = [0.7, -0.3]
    net = Network.init(mlp_spec([2, 3, 2]), 0)
    net.params[0]["weight"].data = np.array(W1)
    net.params[0]["bias"].data = np.array(b1)
    net.params[2]["weight"].data = np.array(W2)
    net.params[2]["bias"].data = np.array(b2)
    got = forward(net, np.array([x])).data[0]
    np.testing.assert_allclose(got, _hand_forward(W1, b1, W2, b2, x), rtol=0, atol=1e-15)


def _conv_net(seed=0):
    return Network.init(convnet_spec(image_size=7, channels=(3, 4), kernel=3, num_classes=3), seed)


@pytest.mark.parametrize("make", [lambda s: Network.init(mlp_spec([3, 5, 4, 3]), s), _conv_net])
def test_identity_masks_equal_no_masks(make):
    net = make(1)
    x = np.random.default_rng(0).normal(size=(6, *net.spec.input_shape))
    ref = forward(net, x).data
    got = forward(net, x, masks=MaskPair.identity(net.spec)).data
    np.testing.assert_array_equal(ref, got)


@pytest.mark.parametrize("make", [lambda s: Network.init(mlp_spec([3, 5, 4, 3]), s), _conv_net])
def test_hard_mask_equals_zeroed_activation(make):
    net = make(2)
    x = np.random.default_rng(1).normal(size=(5, *net.spec.input_shape))
    layer = net.spec.prunable_ids()[0]
    n = net.spec.layers[layer].out_channels
    hard = {layer: np.ones(n)}
    hard[layer][1] = 0.0
    got = forward(net, x, masks=MaskPair({}, hard)).data

    # reference: run the layers by hand and zero channel 1 after the ReLU
    h = Tensor(x)
    for i, spec in enumerate(net.spec.layers):
        if spec.kind == "dense":
            h = h @ net.params[i]["weight"].T + net.params[i]["bias"]
        elif spec.kind == "conv2d":
            h = conv2d(h, net.params[i]["weight"], net.params[i]["bias"])
        elif spec.kind == "relu":
            h = h.relu()
            if i == layer + 1:
                d = h.data.copy()
                d[:, 1] = 0.0
                h = Tensor(d)
        elif spec.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        else:
            h = h.softmax()
    np.testing.assert_array_equal(got, h.data)


def test_softmax_rows_are_distributions():
    net = Network.init(mlp_spec([4, 8, 5]), 3)
    x = np.random.default_rng(2).normal(scale=20.0, size=(50, 4))
    p = forward(net, x).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_forward_is_deterministic():
    a = forward(Network.init(mlp_spec([2, 6, 2]), 11), np.ones((3, 2))).data
    b = forward(Network.init(mlp_spec([2, 6, 2]), 11), np.ones((3, 2))).data
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_raises():
    net = Network.init(mlp_spec([2, 3, 2]), 0)
    with pytest.raises(DimensionError):
        forward(net, np.ones((4, 3)))
    with pytest.raises(DimensionError):
        forward(net, np.ones((4, 2)), masks=MaskPair({0: np.ones(4)}, {}))


def test_non_finite_intermediate_names_layer():
    net = Network.init(mlp_spec([2, 3, 2]), 0)
    with pytest.raises(NumericError, match="layer 0"):
        forward(net, np.array([[np.inf, 0.0]]))


def test_spec_validation():
    with pytest.raises(StructureError):
        NetworkSpec((2,), (LayerSpec("dense", 2, 3, prunable=True), LayerSpec("softmax")))
    with pytest.raises(StructureError):
        NetworkSpec((2,), (LayerSpec("dense", 2, 3), LayerSpec("relu"), LayerSpec("dense", 4, 2), LayerSpec("softmax")))
    with pytest.raises(StructureError):
        mlp_spec([2, 3, 2], prune_hidden=False)


def test_weight_init_bounds():
    net = Network.init(mlp_spec([10, 30, 2]), 0)
    w = net.params[0]["weight"].data
    assert np.abs(w).max() <= math.sqrt(6 / 40)
    assert np.all(net.params[0]["bias"].data == 0)


# -- backward ---------------------------------------------------------------

def test_sum_of_params_has_unit_grads():
    net = Network.init(mlp_spec([2, 4, 3]), 0)
    loss = None
    for p in net.parameters():
        loss = p.sum() if loss is None else loss + p.sum()
    loss.backward()
    for p in net.parameters():
        np.testing.assert_array_equal(p.grad, np.ones_like(p.data))


def test_zero_times_forward_gives_zero_grads():
    net = Network.init(mlp_spec([2, 4, 3]), 0)
    (forward(net, np.ones((3, 2))).sum() * 0.0).backward()
    for p in net.parameters():
        np.testing.assert_array_equal(p.grad, 0.0)


def test_backward_twice_is_state_error():
    net = Network.init(mlp_spec([2, 4, 3]), 0)
    loss = forward(net, np.ones((3, 2))).sum()
    loss.backward()
    with pytest.raises(StateError):
        loss.backward()


def test_backward_needs_scalar():
    with pytest.raises(DimensionError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_random_mlp_cross_entropy_gradcheck():
    rng = np.random.default_rng(0)
    net = Network.init(mlp_spec([2, 4, 3]), rng)
    x = rng.normal(size=(7, 2))
    y = rng.integers(0, 3, size=7)
    err = check_gradients(lambda: cross_entropy(forward(net, x), y), net.parameters())
    assert err < 1e-4


@pytest.mark.parametrize("trial", range(20))
def test_conv_net_gradcheck(trial):
    rng = np.random.default_rng(100 + trial)
    net = Network.init(convnet_spec(image_size=6, channels=(2, 3), kernel=3, num_classes=3), rng)
    x = Tensor(rng.normal(size=(3, 1, 6, 6)), requires_grad=True)
    y = rng.integers(0, 3, size=3)
    err = check_gradients(lambda: cross_entropy(forward(net, x), y), net.parameters() + [x])
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["add", "mul", "matmul", "abs", "exp", "relu", "softmax"]))
def test_elementary_op_gradients(seed, op):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    build = {
        "add": lambda: ((a + b) * w).sum(),
        "mul": lambda: (a * b * w).sum(),
        "matmul": lambda: ((a @ m) * (a @ m)).sum(),
        "abs": lambda: (a.abs() * w).sum(),
        "exp": lambda: (a.exp() * w).mean(),
        "relu": lambda: (a.relu() * w).sum(),
        "softmax": lambda: (a.softmax() * w).sum(),
    }[op]
    assert check_gradients(build, [a, b, m]) < 1e-4


# -- sgd and checkpoints ------------------------------------------------------

def test_sgd_lr_zero_and_exact_step():
    w = Tensor(np.array([1.25]), requires_grad=True)
    w.grad = np.array([0.5])
    sgd_step([w], 0.0)
    assert w.data[0] == 1.25
    sgd_step([w], 0.1)
    assert w.data[0] == 1.25 - 0.1 * 0.5


def test_checkpoint_round_trip(tmp_path):
    net = _conv_net(4)
    path = save_checkpoint(net, tmp_path / "net.json", extra={"plan": {"0": [0, 2]}})
    back, extra = load_checkpoint(path, with_extra=True)
    assert extra == {"plan": {"0": [0, 2]}}
    assert back.spec == net.spec
    for p, q in zip(net.parameters(), back.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.normal(size=(4, 1, 7, 7))
        assert forward(net, x).data.tobytes() == forward(back, x).data.tobytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    path = save_checkpoint(_conv_net(), tmp_path / "net.json")
    text = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(text)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
