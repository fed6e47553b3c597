"""Layer forward passes checked against slow, loop-based reference code."""

import numpy as np
import pytest

from obfusim.nn.layers import (
    DenseHead,
    DenseLayer,
    LstmCell,
    Param,
    ShapeError,
    TextCnnEncoder,
    cross_entropy,
    cross_entropy_dlogits,
    one_hot,
    softmax,
)
from obfusim.nn.optim import SgdOptimizer, clip_gradients, global_grad_norm


def ref_textcnn(x, kernel_heights, weights, biases):
    """Triple-loop TextCNN forward: conv over rows, ReLU, max over positions."""
    rows, d = x.shape
    parts = []
    for k, w, b in zip(kernel_heights, weights, biases):
        n_filters = w.shape[0]
        pooled = np.empty(n_filters)
        for f in range(n_filters):
            kernel = w[f].reshape(k, d)
            best = -np.inf
            for p in range(rows - k + 1):
                score = float(np.sum(x[p:p + k] * kernel)) + b[f]
                best = max(best, max(score, 0.0))
            pooled[f] = best
        parts.append(pooled)
    return np.concatenate(parts)


def ref_lstm_step(x, h, c, wx, wh, b, n):
    z = wx @ x + wh @ h + b
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i = sig(z[0 * n:1 * n])
    f = sig(z[1 * n:2 * n])
    g = np.tanh(z[2 * n:3 * n])
    o = sig(z[3 * n:4 * n])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def test_textcnn_matches_reference(rng):
    enc = TextCnnEncoder(rows=5, embed_dim=6, kernel_heights=(2, 3), filters_per_kernel=4, rng=rng)
    for _ in range(10):
        x = rng.normal(0.0, 1.0, (5, 6))
        expected = ref_textcnn(x, enc.kernel_heights,
                               [w.value for w in enc.weights],
                               [b.value for b in enc.biases])
        got = enc.forward(x)
        np.testing.assert_allclose(got[0], expected, rtol=1e-12)


def test_textcnn_batch_consistency(rng):
    enc = TextCnnEncoder(rows=4, embed_dim=5, kernel_heights=(2,), filters_per_kernel=3, rng=rng)
    batch = rng.normal(0.0, 1.0, (6, 4, 5))
    together = enc.forward(batch)
    for i in range(6):
        np.testing.assert_allclose(together[i], enc.forward(batch[i])[0], rtol=1e-12)


def test_textcnn_shape_guards(rng):
    with pytest.raises(ShapeError):
        TextCnnEncoder(rows=3, embed_dim=4, kernel_heights=(5,), filters_per_kernel=2, rng=rng)
    enc = TextCnnEncoder(rows=3, embed_dim=4, kernel_heights=(2,), filters_per_kernel=2, rng=rng)
    with pytest.raises(ShapeError):
        enc.forward(np.zeros((4, 4)))
    assert enc.output_dim == 2


def test_lstm_matches_reference(rng):
    cell = LstmCell(input_dim=5, hidden_dim=3, rng=rng)
    state = cell.init_state()
    h_ref = np.zeros(3)
    c_ref = np.zeros(3)
    for _ in range(8):
        x = rng.normal(0.0, 1.0, 5)
        h, state = cell.step(x, state)
        h_ref, c_ref = ref_lstm_step(x, h_ref, c_ref,
                                     cell.wx.value, cell.wh.value, cell.b.value, 3)
        np.testing.assert_allclose(h[0], h_ref, rtol=1e-10)
        np.testing.assert_allclose(state.c[0], c_ref, rtol=1e-10)


def test_lstm_init_state_zero(rng):
    cell = LstmCell(input_dim=2, hidden_dim=4, rng=rng)
    state = cell.init_state(batch=3)
    assert state.h.shape == (3, 4)
    assert not state.h.any()
    assert not state.c.any()


def test_softmax_properties(rng):
    logits = rng.normal(0.0, 3.0, (7, 5))
    p = softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), np.ones(7), rtol=1e-12)
    assert (p >= 0.0).all()
    # shift invariance
    np.testing.assert_allclose(softmax(logits + 100.0), p, rtol=1e-9)


def test_one_hot():
    out = one_hot(np.array([0, 2, 1]), 3)
    np.testing.assert_array_equal(out, np.array([[1, 0, 0], [0, 0, 1], [0, 1, 0]], dtype=float))


def test_cross_entropy_reference(rng):
    probs = softmax(rng.normal(0.0, 1.0, (6, 4)))
    labels = rng.integers(0, 4, 6)
    expected = -np.mean([np.log(probs[i, labels[i]]) for i in range(6)])
    assert cross_entropy(probs, labels) == pytest.approx(expected, rel=1e-12)
    weights = rng.uniform(0.5, 2.0, 6)
    expected_w = (sum(-np.log(probs[i, labels[i]]) * weights[i] for i in range(6))
                  / weights.sum())
    assert cross_entropy(probs, labels, weights) == pytest.approx(expected_w, rel=1e-12)


def test_cross_entropy_dlogits_is_softmax_gradient(rng):
    """Finite-difference check of the fused softmax+NLL logit gradient."""
    logits = rng.normal(0.0, 1.0, (3, 4))
    labels = np.array([1, 3, 0])
    grad = cross_entropy_dlogits(softmax(logits), labels)
    eps = 1e-6
    for i in range(3):
        for j in range(4):
            bumped = logits.copy()
            bumped[i, j] += eps
            up = cross_entropy(softmax(bumped), labels)
            bumped[i, j] -= 2 * eps
            down = cross_entropy(softmax(bumped), labels)
            assert grad[i, j] == pytest.approx((up - down) / (2 * eps), abs=1e-6)


def test_dense_layer_forward(rng):
    layer = DenseLayer(4, 3, activation="tanh", rng=rng)
    x = rng.normal(0.0, 1.0, (2, 4))
    out, _ = layer.forward_cached(x)
    expected = np.tanh(x @ layer.w.value.T + layer.b.value)
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    with pytest.raises(ValueError):
        DenseLayer(2, 2, activation="gelu", rng=rng)


def test_dense_head_stack(rng):
    head = DenseHead((4, 5, 3), final="softmax", rng=rng)
    x = rng.normal(0.0, 1.0, (2, 4))
    out = head.forward(x)
    np.testing.assert_allclose(out.sum(axis=1), np.ones(2), rtol=1e-12)
    hidden = np.maximum(x @ head.layers[0].w.value.T + head.layers[0].b.value, 0.0)
    logits = hidden @ head.layers[1].w.value.T + head.layers[1].b.value
    np.testing.assert_allclose(out, softmax(logits), rtol=1e-12)
    with pytest.raises(ValueError):
        head.backward(np.zeros((2, 3)), head.forward_cached(x)[1])
    with pytest.raises(ValueError):
        DenseHead((4,), rng=rng)


def test_param_zero_grad():
    p = Param(np.ones(3), name="p")
    p.grad += 2.0
    p.zero_grad()
    assert not p.grad.any()


def test_grad_norm_and_clipping():
    a = Param(np.zeros(2))
    b = Param(np.zeros(2))
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    assert global_grad_norm([a, b]) == pytest.approx(5.0)
    clip_gradients([a, b], 2.5)
    assert global_grad_norm([a, b]) == pytest.approx(2.5)
    np.testing.assert_allclose(a.grad, [1.5, 0.0])
    # below the ceiling: untouched
    clip_gradients([a, b], 100.0)
    assert global_grad_norm([a, b]) == pytest.approx(2.5)


def test_sgd_momentum_matches_manual(rng):
    p = Param(np.array([1.0, -2.0]))
    opt = SgdOptimizer([p], lr=0.1, momentum=0.9)
    velocity = np.zeros(2)
    value = p.value.copy()
    for step in range(4):
        grad = np.array([0.5, step * 1.0])
        p.grad[:] = grad
        opt.step()
        velocity = 0.9 * velocity + grad
        value = value - 0.1 * velocity
        np.testing.assert_allclose(p.value, value, rtol=1e-12)
