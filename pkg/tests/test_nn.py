import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamfed.nn import tensor as T
from beamfed.nn.model import (
    CnnArch,
    GateArch,
    ModelParams,
    SkippedClient,
    backward,
    forward,
    init_params,
    local_train,
    loss_and_grad,
    mean_loss,
    nll_loss,
    train_early_stopping,
)
from beamfed.personalize import gate_loss_and_grad

TINY = CnnArch(conv1_filters=2, conv2_filters=2, filter_size=3, fc1_units=4, fc2_units=3,
               num_classes=4, input_shape=(3, 2))


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f, x, h):
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def check_op(op, shapes, rng, dtype, h, tol, nonneg=False):
    """Gradient of sum(R * op(*inputs)) against central differences in float64."""
    xs = [rng.normal(size=s) for s in shapes]
    if nonneg:
        xs = [np.abs(x) + 0.5 for x in xs]
    R = rng.normal(size=op(*[T.Tensor(x) for x in xs]).shape)

    leaves = [T.Tensor(x.astype(dtype), requires_grad=True) for x in xs]
    out = op(*leaves)
    out.backward(R.astype(dtype))
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            args = [T.Tensor(xi if j == i else xs[j]) for j in range(len(xs))]
            return float((op(*args).data * R).sum())
        num = central_diff(f, xs[i], h)
        assert max_rel_err(leaf.grad, num, floor=1e-2) <= tol, (op, i)


LAYER_OPS = [
    (lambda x, w, b: T.conv2d(x, w, b), [(2, 2, 4, 3), (3, 2, 3, 3), (3,)]),
    (lambda x, w, b: T.conv2d(x, w, b), [(1, 3, 2, 5), (2, 3, 1, 1), (2,)]),
    (lambda x, w, b: T.linear(x, w, b), [(3, 5), (4, 5), (4,)]),
    (lambda x: T.flatten(x), [(2, 3, 2)]),
    (lambda x: T.log_softmax(x), [(3, 6)]),
    (lambda x: T.softmax(x), [(3, 6)]),
]


@pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-4, 1e-3), (np.float64, 1e-6, 1e-6)])
@pytest.mark.parametrize("k", range(len(LAYER_OPS)))
def test_layer_gradients_match_central_differences(k, dtype, h, tol):
    op, shapes = LAYER_OPS[k]
    for trial in range(10):
        check_op(op, shapes, np.random.default_rng([k, trial]), dtype, h, tol)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_relu_log_mix_nll_gradients(dtype, tol):
    rng = np.random.default_rng(5)
    for trial in range(10):
        # keep inputs away from the relu kink so differences are well defined
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 0.05] = 0.3
        R = rng.normal(size=x.shape)
        leaf = T.Tensor(x.astype(dtype), requires_grad=True)
        T.relu(leaf).backward(R.astype(dtype))
        np.testing.assert_array_equal(leaf.grad, (R * (x > 0)).astype(dtype))

        check_op(lambda a: T.log(a), [(3, 4)], rng, dtype, 1e-6, tol, nonneg=True)

        experts = rng.dirichlet(np.ones(5), size=(2, 3))
        check_op(lambda wgt: T.mix(wgt, experts), [(3, 2)], rng, dtype, 1e-6, tol)

        labels = rng.integers(0, 5, size=3)
        check_op(lambda lp: T.nll(lp, labels), [(3, 5)], rng, dtype, 1e-6, tol)


def test_dropout_gradient_uses_the_same_mask():
    x = T.Tensor(np.ones((50, 40)), requires_grad=True)
    y = T.dropout(x, 0.5, np.random.default_rng(1), training=True)
    y.backward(np.ones_like(y.data))
    np.testing.assert_array_equal(x.grad, y.data)
    assert set(np.unique(y.data)) == {0.0, 2.0}
    assert T.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, None, training=True)


def _net_fd(arch, rng, dtype, h, tol):
    params = init_params(arch, rng, dtype=np.float64)
    params = params.with_values(params.values + 0.05 * rng.normal(size=len(params)))
    X = rng.normal(size=(5, arch.in_channels, *arch.input_shape))
    y = rng.integers(0, arch.num_outputs, size=5)
    _, g = loss_and_grad(params.astype(dtype), arch, X, y)

    def f(v):
        return mean_loss(params.with_values(v), arch, X, y)

    num = central_diff(f, params.values, h)
    return max_rel_err(g, num, floor=1e-2)


@pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-5, 1e-3), (np.float64, 1e-6, 1e-6)])
def test_full_network_gradient(dtype, h, tol):
    assert TINY.num_params() <= 200
    errs = [_net_fd(TINY, np.random.default_rng([1, t]), dtype, h, tol) for t in range(12)]
    assert max(errs) <= tol


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_gate_gradient_through_mixture(dtype, tol):
    gate_arch = GateArch(filters1=2, filters2=0, hidden1=3, hidden2=2, input_shape=(3, 2))
    for t in range(12):
        rng = np.random.default_rng([2, t])
        gate = init_params(gate_arch, rng, dtype=np.float64)
        # zero biases put dead units exactly on the relu kink
        gate = gate.with_values(gate.values + 0.05 * rng.normal(size=len(gate)))
        X = rng.normal(size=(4, 2, 3, 2))
        y = rng.integers(0, 6, size=4)
        experts = rng.dirichlet(np.ones(6), size=(2, 4))
        _, g = gate_loss_and_grad(gate.astype(dtype), gate_arch, X, experts, y)

        def f(v):
            logits = forward(gate.with_values(v), gate_arch, X)
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            wts = z / z.sum(axis=1, keepdims=True)
            mixed = np.einsum("ne,enb->nb", wts, experts)
            return float(-np.log(mixed[np.arange(4), y]).mean())

        num = central_diff(f, gate.values, 1e-6)
        assert max_rel_err(g, num, floor=1e-2) <= tol


# -- forward ------------------------------------------------------------------


def test_zero_weights_give_zero_logits():
    params = init_params(TINY, 0)
    params = params.with_values(np.zeros_like(params.values))
    X = np.random.default_rng(0).normal(size=(3, 2, 3, 2))
    np.testing.assert_array_equal(forward(params, TINY, X), 0.0)


def test_eval_forward_is_repeatable_and_dropout_only_in_training():
    arch = CnnArch(conv1_filters=2, conv2_filters=2, fc1_units=8, fc2_units=4, num_classes=3,
                   dropout_rate=0.5, input_shape=(3, 2))
    params = init_params(arch, 1)
    X = np.random.default_rng(1).normal(size=(4, 2, 3, 2)).astype(np.float32)
    np.testing.assert_array_equal(forward(params, arch, X), forward(params, arch, X))
    a = forward(params, arch, X, training=True, rng=np.random.default_rng(3))
    b = forward(params, arch, X, training=True, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, forward(params, arch, X))


def test_one_by_one_conv_by_hand():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]],
                            [[0.5, -1.0], [2.0, 0.0]]]]))
    w = T.Tensor(np.array([[[[2.0]], [[-1.0]]]]))
    b = T.Tensor(np.array([0.5]))
    out = T.conv2d(x, w, b).data[0, 0]
    # 2 * ch0 - ch1 + 0.5
    np.testing.assert_array_equal(out, [[2.0, 5.5], [4.5, 8.5]])


def test_same_padding_3x3_conv_matches_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 4, 5))
    for n in range(2):
        for o in range(2):
            for i in range(4):
                for j in range(5):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data, ref, rtol=1e-12)


def test_shape_mismatch_is_rejected():
    params = init_params(TINY, 0)
    with pytest.raises(ValueError):
        forward(params, TINY, np.zeros((2, 2, 4, 2)))
    other = init_params(CnnArch(num_classes=5, input_shape=(3, 2)), 0)
    with pytest.raises(ValueError):
        forward(other, TINY, np.zeros((2, 2, 3, 2)))


def test_arch_and_layout_validation():
    with pytest.raises(ValueError):
        CnnArch(conv1_filters=0)
    with pytest.raises(ValueError):
        CnnArch(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelParams(np.zeros(3), (("a", (2,), 0), ("b", (2,), 2)))
    p = init_params(TINY, 0)
    assert sum(math.prod(s) for _, s, _ in p.layout) == len(p) == TINY.num_params()


# -- loss ---------------------------------------------------------------------


def test_uniform_logits_give_log_b():
    loss, grad = nll_loss(np.zeros((5, 64)), np.arange(5))
    assert loss == pytest.approx(math.log(64), abs=1e-12)
    assert loss == pytest.approx(4.1589, abs=1e-4)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_dominant_logit_gives_zero_loss():
    z = np.zeros((3, 8))
    z[np.arange(3), [1, 4, 7]] = 1e6
    loss, _ = nll_loss(z, np.array([1, 4, 7]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_nll_gradient_matches_differences():
    rng = np.random.default_rng(9)
    for _ in range(20):
        z = rng.normal(size=(4, 7)).astype(np.float32)
        y = rng.integers(0, 7, size=4)
        _, g = nll_loss(z, y)
        num = central_diff(lambda v: nll_loss(v, y)[0], z, 1e-6)
        assert max_rel_err(g, num, floor=1e-2) <= 1e-3


def test_nll_rejects_bad_labels():
    with pytest.raises(ValueError):
        nll_loss(np.zeros((2, 4)), np.array([0, 4]))
    with pytest.raises(ValueError):
        loss_and_grad(init_params(TINY, 0), TINY, np.zeros((1, 2, 3, 2)), np.array([9]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nll_gradient_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    n, b = rng.integers(1, 6), rng.integers(2, 10)
    _, g = nll_loss(rng.normal(size=(n, b)) * 5, rng.integers(0, b, size=n))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)
    assert np.all(g[g > 0] <= 1.0 / n + 1e-12)


# -- backward -----------------------------------------------------------------


def test_zero_input_gives_zero_conv_weight_gradient():
    params = init_params(TINY, 3)
    g = ModelParams(backward(params, TINY, np.zeros((3, 2, 3, 2), np.float32), np.array([0, 1, 2])),
                    params.layout)
    np.testing.assert_array_equal(g.view("conv1.w"), 0.0)


def test_duplicated_sample_gradient_equals_single():
    params = init_params(TINY, 3, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 2))
    g1 = backward(params, TINY, x, np.array([2]))
    g3 = backward(params, TINY, np.repeat(x, 3, axis=0), np.array([2, 2, 2]))
    np.testing.assert_allclose(g3, g1, rtol=1e-12, atol=1e-15)


def test_backward_deterministic_with_dropout_stream():
    arch = CnnArch(conv1_filters=2, conv2_filters=2, fc1_units=8, fc2_units=4, num_classes=3,
                   dropout_rate=0.3, input_shape=(3, 2))
    params = init_params(arch, 0)
    X = np.random.default_rng(0).normal(size=(6, 2, 3, 2)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2])
    a = backward(params, arch, X, y, training=True, rng=np.random.default_rng(5))
    b = backward(params, arch, X, y, training=True, rng=np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()


# -- local training -----------------------------------------------------------


def _client(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2, 3, 2)).astype(np.float32), rng.integers(0, 4, size=n)


def test_zero_learning_rate_leaves_params_unchanged():
    params = init_params(TINY, 0)
    X, y = _client(10)
    out, n = local_train(params, TINY, X, y, epochs=3, batch_size=4, lr=0.0, weight_decay=0.1)
    assert n == 10
    np.testing.assert_array_equal(out.values, params.values)


def test_single_sample_single_step():
    params = init_params(TINY, 1, dtype=np.float64)
    X, y = _client(1)
    lr, wd = 0.1, 0.01
    g = backward(params, TINY, X, y)
    out, n = local_train(params, TINY, X, y, epochs=1, batch_size=1, lr=lr, weight_decay=wd)
    assert n == 1
    np.testing.assert_allclose(out.values, params.values - lr * (g + wd * params.values), rtol=1e-12)


def test_learning_rate_decay_is_hyperbolic():
    params = init_params(TINY, 1, dtype=np.float64)
    X, y = _client(1)
    lr, decay = 0.1, 0.5
    p1, _ = local_train(params, TINY, X, y, 1, 1, lr, decay)
    g1 = backward(p1, TINY, X, y)
    p2, _ = local_train(params, TINY, X, y, 2, 1, lr, decay)
    np.testing.assert_allclose(p2.values, p1.values - lr / (1 + decay) * g1, rtol=1e-12)


def test_local_train_is_byte_deterministic():
    params = init_params(TINY, 0)
    X, y = _client(40)
    a, _ = local_train(params, TINY, X, y, 2, 8, 0.05, rng=np.random.default_rng(11))
    b, _ = local_train(params, TINY, X, y, 2, 8, 0.05, rng=np.random.default_rng(11))
    assert a.values.tobytes() == b.values.tobytes()


def test_empty_client_is_skipped():
    with pytest.raises(SkippedClient):
        local_train(init_params(TINY, 0), TINY, np.zeros((0, 2, 3, 2)), np.zeros(0, int), 1, 4, 0.1)


def test_early_stopping_never_worsens_validation_loss():
    params = init_params(TINY, 0)
    X, y = _client(30)
    Xv, yv = _client(10, seed=1)
    best, epochs = train_early_stopping(params, TINY, X, y, Xv, yv, max_epochs=8, patience=2,
                                        batch_size=8, lr=0.5, lr_decay=0.0, weight_decay=0.0,
                                        rng=np.random.default_rng(0))
    assert 1 <= epochs <= 8
    assert mean_loss(best, TINY, Xv, yv) <= mean_loss(params, TINY, Xv, yv)
