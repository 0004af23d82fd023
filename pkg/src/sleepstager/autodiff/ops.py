"""Differentiable network operations built on the tensor engine.

Convolution, pooling, batch norm, dropout, softmax, the LSTM recurrence
and the weighted cross-entropy loss. Everything here participates in the
reverse-mode graph; shapes are validated eagerly with descriptive errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _make, concat


def linear(x, weight, bias=None):
    """y = x @ weight.T + bias, with weight shaped [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear input width {x.shape[-1]} does not match weight in-dim "
            f"{weight.shape[1]}")
    flat = x if x.data.ndim == 2 else x.reshape(-1, x.shape[-1])
    out = flat @ weight.transpose(1, 0)
    if bias is not None:
        out = out + bias
    if x.data.ndim != 2:
        out = out.reshape(*x.shape[:-1], weight.shape[0])
    return out


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """1-D convolution over [batch, in_ch, length] inputs.

    weight is [out_ch, in_ch, kernel]; output length is
    floor((length + 2*padding - kernel)/stride) + 1.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv1d expects [batch, ch, length], got shape {x.shape}")
    if weight.data.ndim != 3:
        raise ValueError(f"conv1d weight must be [out, in, kernel], got {weight.shape}")
    batch, in_ch, length = x.shape
    out_ch, w_in_ch, kernel = weight.shape
    if in_ch != w_in_ch:
        raise ValueError(
            f"conv1d channel mismatch: input has {in_ch} channels, weight expects {w_in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ValueError(f"conv1d bias shape {bias.shape} != ({out_ch},)")
    if stride < 1:
        raise ValueError(f"conv1d stride must be >= 1, got {stride}")
    if kernel > length + 2 * padding:
        raise ValueError(
            f"conv1d kernel {kernel} exceeds padded length {length + 2 * padding}")

    if padding > 0:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    else:
        padded = x.data
    out_len = (length + 2 * padding - kernel) // stride + 1
    # windows: [batch, in_ch, out_len, kernel]
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=2)
    windows = windows[:, :, ::stride, :]
    # contract in_ch and kernel against the weight
    out_data = np.tensordot(windows, weight.data, axes=([1, 3], [1, 2]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 2, 1))
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, "conv1d")
    if out.requires_grad:
        def backward(g):
            # g: [batch, out_ch, out_len]
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2)))
            if weight.requires_grad:
                # [out_ch, in_ch, kernel]
                weight._accumulate(
                    np.tensordot(g, windows, axes=([0, 2], [0, 2])))
            if x.requires_grad:
                # cols: [batch, in_ch, out_len, kernel]
                cols = np.tensordot(g, weight.data, axes=([1], [0]))
                cols = cols.transpose(0, 2, 1, 3)
                gpad = np.zeros_like(padded)
                span = stride * out_len
                for j in range(kernel):
                    gpad[:, :, j:j + span:stride] += cols[:, :, :, j]
                if padding > 0:
                    gpad = gpad[:, :, padding:padding + length]
                x._accumulate(gpad)
        out._backward = backward
    return out


def maxpool1d(x, window, stride=None):
    """Max pooling over the last axis of [batch, ch, length]."""
    if x.data.ndim != 3:
        raise ValueError(f"maxpool1d expects [batch, ch, length], got {x.shape}")
    if window < 1:
        raise ValueError(f"maxpool1d window must be >= 1, got {window}")
    stride = window if stride is None else stride
    batch, ch, length = x.shape
    if window > length:
        raise ValueError(f"maxpool1d window {window} exceeds length {length}")
    out_len = (length - window) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=2)
    windows = windows[:, :, ::stride, :]
    arg = windows.argmax(axis=3)
    out_data = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    out = _make(np.ascontiguousarray(out_data), (x,), "maxpool1d")
    if out.requires_grad:
        starts = np.arange(out_len) * stride
        src = starts[None, None, :] + arg  # position in the length axis
        def backward(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            b_idx = np.arange(batch)[:, None, None]
            c_idx = np.arange(ch)[None, :, None]
            np.add.at(x.grad, (b_idx, c_idx, src), g)
        out._backward = backward
    return out


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer.

    Stores the population (biased) variance so that a frozen running
    estimate reproduces the train-mode normalization exactly.
    """

    n_channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    initialized: bool = False

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.n_channels, dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones(self.n_channels, dtype=np.float64)

    def update(self, batch_mean, batch_var):
        if not self.initialized:
            self.running_mean = batch_mean.astype(np.float64)
            self.running_var = batch_var.astype(np.float64)
            self.initialized = True
        else:
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
            self.running_var = (1.0 - m) * self.running_var + m * batch_var

    def copy(self):
        return BatchNormState(
            n_channels=self.n_channels, momentum=self.momentum, eps=self.eps,
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            initialized=self.initialized)


def batchnorm1d(x, gamma, beta, state, mode):
    """Per-channel normalization of [batch, ch, length] activations.

    Train mode normalizes by batch statistics over (batch, length) and
    updates the running estimates; eval mode uses the running estimates.
    """
    if x.data.ndim != 3:
        raise ValueError(f"batchnorm1d expects [batch, ch, length], got {x.shape}")
    batch, ch, length = x.shape
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ValueError(
            f"batchnorm1d gamma/beta must be ({ch},), got {gamma.shape}/{beta.shape}")
    g = gamma.reshape(1, ch, 1)
    b = beta.reshape(1, ch, 1)
    if mode == "train":
        if batch * length < 2:
            raise ValueError("batchnorm1d train mode needs >= 2 values per channel")
        mu = x.mean(axis=(0, 2), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2), keepdims=True)
        inv = (var + state.eps) ** -0.5
        out = g * (centered * inv) + b
        state.update(mu.data.reshape(ch).astype(np.float64),
                     var.data.reshape(ch).astype(np.float64))
        return out
    if mode == "eval":
        if not state.initialized:
            raise RuntimeError(
                "batchnorm1d eval mode before any running-stat update")
        rm = Tensor(state.running_mean.reshape(1, ch, 1).astype(x.dtype))
        ri = Tensor(((state.running_var + state.eps) ** -0.5)
                    .reshape(1, ch, 1).astype(x.dtype))
        return g * ((x - rm) * ri) + b
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def dropout(x, p, mode, rng=None):
    """Inverted dropout: train-mode survivors are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an RNG")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * Tensor(mask)


def softmax(x, axis=-1):
    """Numerically stable softmax along an axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), "softmax")
    if out.requires_grad:
        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - dot))
        out._backward = backward
    return out


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _make(shifted - logsum, (x,), "log_softmax")
    if out.requires_grad:
        sm = np.exp(out.data)
        def backward(g):
            x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))
        out._backward = backward
    return out


def weighted_cross_entropy(logits, targets, class_weights):
    """Class-weighted mean negative log-likelihood.

    loss = sum_i w[t_i] * nll_i / sum_i w[t_i], so the scale is comparable
    across batches regardless of their class mix.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"weighted_cross_entropy expects [n, classes] logits, got {logits.shape}")
    n, n_classes = logits.shape
    if n == 0:
        raise ValueError("weighted_cross_entropy on an empty batch")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ValueError("target class index out of range")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ValueError(f"class_weights shape {weights.shape} != ({n_classes},)")
    if np.any(weights < 0):
        raise ValueError("class weights must be non-negative")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    sample_w = weights[targets]
    total_w = sample_w.sum()
    if total_w <= 0:
        raise ValueError("all selected class weights are zero")
    nll = -logp[np.arange(n), targets]
    loss_val = np.asarray((sample_w * nll).sum() / total_w, dtype=logits.dtype)

    out = _make(loss_val, (logits,), "weighted_cross_entropy")
    if out.requires_grad:
        sm = np.exp(logp)
        def backward(g):
            grad = sm * (sample_w / total_w)[:, None]
            grad[np.arange(n), targets] -= sample_w / total_w
            logits._accumulate((g * grad).astype(logits.dtype))
        out._backward = backward
    return out


@dataclass
class LSTMDirectionParams:
    """Gate parameters for one LSTM direction (gate order i, f, g, o)."""

    w_ih: Tensor  # [4H, in_dim]
    w_hh: Tensor  # [4H, H]
    b_ih: Tensor  # [4H]
    b_hh: Tensor  # [4H]

    @property
    def hidden_dim(self):
        return self.w_hh.shape[1]


def _lstm_direction(steps, params):
    """Run the LSTM recurrence over a list of [batch, in_dim] tensors."""
    hidden = params.hidden_dim
    batch = steps[0].shape[0]
    dtype = steps[0].dtype
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    w_ih_t = params.w_ih.transpose(1, 0)
    w_hh_t = params.w_hh.transpose(1, 0)
    outputs = []
    for x_t in steps:
        gates = x_t @ w_ih_t + h @ w_hh_t + params.b_ih + params.b_hh
        i = gates.narrow(1, 0, hidden).sigmoid()
        f = gates.narrow(1, hidden, hidden).sigmoid()
        g = gates.narrow(1, 2 * hidden, hidden).tanh()
        o = gates.narrow(1, 3 * hidden, hidden).sigmoid()
        c = f * c + i * g
        h = o * c.tanh()
        outputs.append(h)
    return outputs


def bilstm_layer(x, forward_params, backward_params):
    """Bidirectional LSTM over [batch, time, in_dim].

    Both directions start from zero states; their per-timestep hidden
    vectors are concatenated to [batch, time, 2*hidden].
    """
    if x.data.ndim != 3:
        raise ValueError(f"bilstm_layer expects [batch, time, dim], got {x.shape}")
    batch, time, in_dim = x.shape
    if time < 1:
        raise ValueError("bilstm_layer needs at least one timestep")
    if forward_params.w_ih.shape[1] != in_dim:
        raise ValueError(
            f"bilstm input dim {in_dim} does not match gate weights "
            f"{forward_params.w_ih.shape}")
    steps = [x.narrow(1, t, 1).reshape(batch, in_dim) for t in range(time)]
    fwd = _lstm_direction(steps, forward_params)
    bwd = list(reversed(_lstm_direction(list(reversed(steps)), backward_params)))
    hidden = forward_params.hidden_dim
    per_t = [concat([fwd[t], bwd[t]], axis=1) for t in range(time)]
    stacked = concat(per_t, axis=0)                      # [time*batch, 2H]
    return stacked.reshape(time, batch, 2 * hidden).transpose(1, 0, 2)
