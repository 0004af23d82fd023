"""Network ops: worked examples, independent oracles, gradient checks."""

import numpy as np
import pytest

from sleepstager.autodiff import (
    BatchNormState,
    LSTMDirectionParams,
    Tensor,
    batchnorm1d,
    bilstm_layer,
    conv1d,
    dropout,
    linear,
    log_softmax,
    maxpool1d,
    softmax,
    weighted_cross_entropy,
)

from helpers import check_gradients


def _t(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def conv1d_oracle(x, w, b, stride, padding):
    """Direct sliding-window arithmetic, scalar loops only."""
    batch, in_ch, length = x.shape
    out_ch, _, kernel = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    out_len = (length + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, out_ch, out_len))
    for n in range(batch):
        for o in range(out_ch):
            for j in range(out_len):
                acc = 0.0
                for c in range(in_ch):
                    for k in range(kernel):
                        acc += padded[n, c, j * stride + k] * w[o, c, k]
                out[n, o, j] = acc + b[o]
    return out


def test_conv1d_zero_input_gives_bias():
    x = _t(np.zeros((2, 3, 8)), requires_grad=False)
    w = _t(np.random.default_rng(0).normal(size=(4, 3, 3)))
    b = _t([1.0, -2.0, 0.5, 3.0])
    out = conv1d(x, w, b, stride=1, padding=0)
    for o in range(4):
        assert np.allclose(out.data[:, o, :], b.data[o])


def test_conv1d_identity_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = _t(rng.normal(size=(2, 3, 7)))
    w = np.zeros((3, 3, 1))
    for c in range(3):
        w[c, c, 0] = 1.0
    out = conv1d(x, _t(w), _t(np.zeros(3)), stride=1, padding=0)
    assert np.allclose(out.data, x.data)


def test_conv1d_sliding_window_example():
    x = _t([[[1.0, 2.0, 3.0, 4.0, 5.0]]])
    w = _t([[[1.0, 0.0, -1.0]]])
    b = _t([0.0])
    out = conv1d(x, w, b, stride=1, padding=0)
    assert np.allclose(out.data, [[[-2.0, -2.0, -2.0]]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1), (3, 2)])
def test_conv1d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(7 + stride + padding)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=4)
    out = conv1d(_t(x), _t(w), _t(b), stride=stride, padding=padding)
    assert np.allclose(out.data, conv1d_oracle(x, w, b, stride, padding),
                       atol=1e-12)


def test_conv1d_output_length_contract():
    x = _t(np.ones((1, 1, 10)))
    out = conv1d(x, _t(np.ones((1, 1, 3))), _t([0.0]), stride=2, padding=1)
    assert out.shape == (1, 1, (10 + 2 - 3) // 2 + 1)


def test_conv1d_shape_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv1d(_t(np.ones((1, 2, 8))), _t(np.ones((3, 4, 3))), _t(np.zeros(3)))
    with pytest.raises(ValueError, match="kernel"):
        conv1d(_t(np.ones((1, 1, 4))), _t(np.ones((1, 1, 7))), _t(np.zeros(1)))
    with pytest.raises(ValueError, match="stride"):
        conv1d(_t(np.ones((1, 1, 8))), _t(np.ones((1, 1, 3))), _t(np.zeros(1)),
               stride=0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1)])
def test_conv1d_gradients(stride, padding):
    rng = np.random.default_rng(11)
    x = _t(rng.normal(size=(2, 2, 9)))
    w = _t(rng.normal(size=(3, 2, 3)))
    b = _t(rng.normal(size=3))
    check_gradients(
        lambda: (conv1d(x, w, b, stride=stride, padding=padding) ** 2.0).sum(),
        [x, w, b])


# ---------------------------------------------------------------------------
# maxpool / relu / dropout / linear
# ---------------------------------------------------------------------------

def test_maxpool_windowed_max_example():
    x = _t([[[1.0, 4.0, 2.0, 9.0, 3.0, 3.0]]])
    out = maxpool1d(x, window=2, stride=2)
    assert np.allclose(out.data, [[[4.0, 9.0, 3.0]]])


def test_maxpool_overlapping_windows_gradients():
    rng = np.random.default_rng(13)
    # Distinct values keep argmax stable under the finite-difference step.
    x = _t(rng.permutation(24).reshape(1, 2, 12) * 0.37)
    check_gradients(lambda: (maxpool1d(x, window=3, stride=2) ** 2.0).sum(), [x])


def test_maxpool_routes_gradient_to_argmax():
    x = _t([[[1.0, 5.0, 2.0, 7.0]]])
    out = maxpool1d(x, window=2, stride=2)
    out.sum().backward()
    assert np.array_equal(x.grad, [[[0.0, 1.0, 0.0, 1.0]]])


def test_dropout_p0_is_identity_both_modes():
    x = _t(np.random.default_rng(3).normal(size=(4, 5)))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, "train", rng) is x
    assert dropout(x, 0.0, "eval") is x


def test_dropout_train_zeroes_and_rescales():
    rng = np.random.default_rng(5)
    x = _t(np.ones((200, 50)))
    out = dropout(x, 0.5, "train", rng)
    vals = np.unique(np.round(out.data, 6))
    assert set(vals) == {0.0, 2.0}
    assert abs(out.data.mean() - 1.0) < 0.05  # inverted scaling preserves scale
    assert dropout(x, 0.5, "eval") is x


def test_linear_matches_affine_and_grads():
    rng = np.random.default_rng(17)
    x = _t(rng.normal(size=(4, 3)))
    w = _t(rng.normal(size=(2, 3)))
    b = _t(rng.normal(size=2))
    out = linear(x, w, b)
    assert np.allclose(out.data, x.data @ w.data.T + b.data)
    check_gradients(lambda: (linear(x, w, b) ** 2.0).sum(), [x, w, b])
    with pytest.raises(ValueError, match="does not match"):
        linear(_t(np.ones((4, 5))), w, b)


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

def _bn_state(ch):
    return BatchNormState(n_channels=ch)


def test_batchnorm_train_normalizes_per_channel():
    rng = np.random.default_rng(19)
    x = _t(rng.normal(loc=3.0, scale=2.5, size=(4, 3, 50)))
    out = batchnorm1d(x, _t(np.ones(3)), _t(np.zeros(3)), _bn_state(3), "train")
    for c in range(3):
        vals = out.data[:, c, :]
        assert abs(vals.mean()) < 1e-6
        assert abs(vals.var() - 1.0) < 1e-5


def test_batchnorm_zero_gamma_gives_beta():
    rng = np.random.default_rng(23)
    x = _t(rng.normal(size=(2, 3, 10)))
    beta = np.array([1.0, -2.0, 0.5])
    out = batchnorm1d(x, _t(np.zeros(3)), _t(beta), _bn_state(3), "train")
    for c in range(3):
        assert np.allclose(out.data[:, c, :], beta[c])


def test_batchnorm_constant_channel_equals_beta():
    x = _t(np.full((2, 1, 10), 7.0))
    out = batchnorm1d(x, _t(np.ones(1)), _t([0.25]), _bn_state(1), "train")
    # variance 0: the epsilon guard keeps the output finite at beta
    assert np.allclose(out.data, 0.25)


def test_batchnorm_eval_before_init_errors():
    x = _t(np.ones((2, 1, 4)))
    with pytest.raises(RuntimeError, match="running-stat"):
        batchnorm1d(x, _t(np.ones(1)), _t(np.zeros(1)), _bn_state(1), "eval")


def test_batchnorm_running_stats_and_eval_path():
    rng = np.random.default_rng(29)
    state = _bn_state(2)
    x = rng.normal(loc=1.0, scale=2.0, size=(8, 2, 40))
    batchnorm1d(_t(x), _t(np.ones(2)), _t(np.zeros(2)), state, "train")
    # first update adopts the batch stats outright
    assert np.allclose(state.running_mean, x.mean(axis=(0, 2)))
    assert np.allclose(state.running_var, x.var(axis=(0, 2)))
    out = batchnorm1d(_t(x), _t(np.ones(2)), _t(np.zeros(2)), state, "eval")
    expect = (x - state.running_mean[None, :, None]) / np.sqrt(
        state.running_var[None, :, None] + state.eps)
    assert np.allclose(out.data, expect, atol=1e-6)


def test_batchnorm_gradients():
    rng = np.random.default_rng(31)
    x = _t(rng.normal(size=(3, 2, 6)))
    gamma = _t(rng.normal(size=2))
    beta = _t(rng.normal(size=2))
    state = _bn_state(2)
    check_gradients(
        lambda: (batchnorm1d(x, gamma, beta, state, "train") ** 2.0).sum(),
        [x, gamma, beta])


# ---------------------------------------------------------------------------
# softmax / cross entropy
# ---------------------------------------------------------------------------

def test_softmax_rows_sum_to_one_and_bounds():
    rng = np.random.default_rng(37)
    x = _t(rng.normal(scale=30.0, size=(50, 7)))  # large logits stay stable
    out = softmax(x, axis=-1)
    assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_and_log_softmax_gradients():
    rng = np.random.default_rng(41)
    x = _t(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(4, 5)))
    check_gradients(lambda: (softmax(x) * w).sum(), [x])
    check_gradients(lambda: (log_softmax(x) * w).sum(), [x])


def test_cross_entropy_confident_correct_is_tiny():
    logits = np.zeros((3, 5))
    targets = np.array([0, 2, 4])
    logits[np.arange(3), targets] = 50.0  # margin-50 approximation of one-hot
    loss = weighted_cross_entropy(_t(logits), targets, np.ones(5))
    assert float(loss.data) < 1e-6


def test_cross_entropy_uniform_logits_is_log_c():
    for c in (2, 5, 7):
        logits = np.zeros((4, c))
        targets = np.arange(4) % c
        weights = np.random.default_rng(c).uniform(0.5, 3.0, size=c)
        loss = weighted_cross_entropy(_t(logits), targets, weights)
        assert abs(float(loss.data) - np.log(c)) < 1e-12


def test_cross_entropy_weighted_mean_convention():
    rng = np.random.default_rng(43)
    logits = rng.normal(size=(2, 3))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    targets = np.array([1, 2])
    a, b = -logp[0, 1], -logp[1, 2]
    weights = np.array([5.0, 1.0, 3.0])  # target classes carry weights 1 and 3
    loss = weighted_cross_entropy(_t(logits), targets, weights)
    assert abs(float(loss.data) - (a + 3.0 * b) / 4.0) < 1e-12


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="empty"):
        weighted_cross_entropy(_t(np.zeros((0, 3))), np.array([], dtype=int),
                               np.ones(3))
    with pytest.raises(ValueError, match="out of range"):
        weighted_cross_entropy(_t(np.zeros((1, 3))), np.array([3]), np.ones(3))


def test_cross_entropy_gradients():
    rng = np.random.default_rng(47)
    logits = _t(rng.normal(size=(6, 4)))
    targets = rng.integers(0, 4, size=6)
    weights = rng.uniform(0.5, 4.0, size=4)
    check_gradients(lambda: weighted_cross_entropy(logits, targets, weights),
                    [logits])


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def lstm_oracle(inputs, w_ih, w_hh, b_ih, b_hh):
    """Step-by-step scalar recurrence for one sequence [T, D]."""
    hidden = w_hh.shape[1]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    outputs = []
    for x in inputs:
        gates = w_ih @ x + w_hh @ h + b_ih + b_hh
        i = _sigmoid(gates[:hidden])
        f = _sigmoid(gates[hidden:2 * hidden])
        g = np.tanh(gates[2 * hidden:3 * hidden])
        o = _sigmoid(gates[3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        outputs.append(h.copy())
    return np.stack(outputs)


def _direction_params(rng, in_dim, hidden):
    return LSTMDirectionParams(
        w_ih=_t(rng.normal(size=(4 * hidden, in_dim))),
        w_hh=_t(rng.normal(size=(4 * hidden, hidden))),
        b_ih=_t(rng.normal(size=4 * hidden)),
        b_hh=_t(rng.normal(size=4 * hidden)))


def _zero_params(in_dim, hidden):
    return LSTMDirectionParams(
        w_ih=_t(np.zeros((4 * hidden, in_dim))),
        w_hh=_t(np.zeros((4 * hidden, hidden))),
        b_ih=_t(np.zeros(4 * hidden)),
        b_hh=_t(np.zeros(4 * hidden)))


def test_bilstm_zero_parameters_fixed_point():
    x = _t(np.random.default_rng(53).normal(size=(2, 5, 3)), requires_grad=False)
    out = bilstm_layer(x, _zero_params(3, 4), _zero_params(3, 4))
    assert out.shape == (2, 5, 8)
    assert np.allclose(out.data, 0.0)


def test_bilstm_single_timestep_direction_symmetry():
    rng = np.random.default_rng(59)
    x = _t(rng.normal(size=(3, 1, 4)), requires_grad=False)
    shared = _direction_params(rng, 4, 5)
    out = bilstm_layer(x, shared, shared)
    assert np.allclose(out.data[:, :, :5], out.data[:, :, 5:])


def test_bilstm_matches_scalar_oracle():
    rng = np.random.default_rng(61)
    batch, time, in_dim, hidden = 3, 2, 3, 2
    x = rng.normal(size=(batch, time, in_dim))
    fwd = _direction_params(rng, in_dim, hidden)
    bwd = _direction_params(rng, in_dim, hidden)
    out = bilstm_layer(_t(x, requires_grad=False), fwd, bwd)
    for n in range(batch):
        expected_f = lstm_oracle(x[n], fwd.w_ih.data, fwd.w_hh.data,
                                 fwd.b_ih.data, fwd.b_hh.data)
        expected_b = lstm_oracle(x[n][::-1], bwd.w_ih.data, bwd.w_hh.data,
                                 bwd.b_ih.data, bwd.b_hh.data)[::-1]
        assert np.allclose(out.data[n, :, :hidden], expected_f, atol=1e-10)
        assert np.allclose(out.data[n, :, hidden:], expected_b, atol=1e-10)


def test_bilstm_gradients_through_time():
    rng = np.random.default_rng(67)
    x = _t(rng.normal(size=(2, 3, 2)))
    fwd = _direction_params(rng, 2, 2)
    bwd = _direction_params(rng, 2, 2)
    leaves = [x, fwd.w_ih, fwd.w_hh, fwd.b_ih, fwd.b_hh,
              bwd.w_ih, bwd.w_hh, bwd.b_ih, bwd.b_hh]
    check_gradients(lambda: (bilstm_layer(x, fwd, bwd) ** 2.0).sum(), leaves)
