"""CNN feature extractor + two-layer BiLSTM + per-timestep classifier.

Each 30-second epoch runs independently through four conv blocks
(conv -> batch norm -> ReLU -> max pool), dropout after the final block,
and a flatten-then-project linear layer that yields one compact feature
vector per epoch. The sequence of feature vectors passes through a
stacked bidirectional LSTM, and a fully connected head produces one
logit row per epoch in the sequence.

The default configuration matches the full-scale network (7 channels x
3000 samples, filters 64/128/128/256, 256-d features, 128 hidden units
per direction, sequences of 20 epochs); a small "toy" configuration is
provided for fast tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    BatchNormState,
    LSTMDirectionParams,
    ParamStore,
    Tensor,
    batchnorm1d,
    bilstm_layer,
    conv1d,
    dropout,
    linear,
    maxpool1d,
)


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 7
    samples_per_epoch: int = 3000
    conv_filters: tuple[int, ...] = (64, 128, 128, 256)
    conv_kernel: int = 5
    conv_padding: int = 2
    pool_window: int = 2
    dropout_p: float = 0.5
    feature_dim: int = 256
    lstm_hidden: int = 128
    lstm_layers: int = 2
    seq_len: int = 20
    n_classes: int = 5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if len(self.conv_filters) != 4:
            raise ValueError("conv_filters must have exactly 4 entries")
        positive = (self.n_channels, self.samples_per_epoch, self.conv_kernel,
                    self.pool_window, self.feature_dim, self.lstm_hidden,
                    self.lstm_layers, self.seq_len, self.n_classes,
                    *self.conv_filters)
        if any(v < 1 for v in positive):
            raise ValueError("all model dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.conv_padding < 0:
            raise ValueError("conv_padding must be non-negative")
        if self.pooled_length() < 1:
            raise ValueError(
                "samples_per_epoch collapses to zero length after the four "
                "conv/pool blocks; increase it or shrink the pooling window")

    def block_lengths(self):
        """Signal length after each conv/pool block."""
        lengths = []
        length = self.samples_per_epoch
        for _ in self.conv_filters:
            length = (length + 2 * self.conv_padding - self.conv_kernel) + 1
            if length < self.pool_window:
                lengths.append(0)
                return lengths
            length = (length - self.pool_window) // self.pool_window + 1
            lengths.append(length)
        return lengths

    def pooled_length(self):
        return self.block_lengths()[-1]

    def to_dict(self):
        return {
            "n_channels": self.n_channels,
            "samples_per_epoch": self.samples_per_epoch,
            "conv_filters": list(self.conv_filters),
            "conv_kernel": self.conv_kernel,
            "conv_padding": self.conv_padding,
            "pool_window": self.pool_window,
            "dropout_p": self.dropout_p,
            "feature_dim": self.feature_dim,
            "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers,
            "seq_len": self.seq_len,
            "n_classes": self.n_classes,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_filters"] = tuple(d["conv_filters"])
        return cls(**d)


def toy_config(**overrides):
    """A fast configuration for tests: same topology, tiny dimensions."""
    base = dict(n_channels=2, samples_per_epoch=64, conv_filters=(4, 8, 8, 16),
                conv_kernel=5, conv_padding=2, pool_window=2, dropout_p=0.5,
                feature_dim=16, lstm_hidden=8, lstm_layers=2, seq_len=4,
                n_classes=5)
    base.update(overrides)
    return ModelConfig(**base)


def param_count(config):
    """Trainable parameter count (running stats excluded)."""
    total = 0
    in_ch = config.n_channels
    for out_ch in config.conv_filters:
        total += out_ch * in_ch * config.conv_kernel + out_ch  # conv w + b
        total += 2 * out_ch                                    # bn gamma + beta
        in_ch = out_ch
    flat = config.conv_filters[-1] * config.pooled_length()
    total += flat * config.feature_dim + config.feature_dim    # projection
    hidden = config.lstm_hidden
    in_dim = config.feature_dim
    for _ in range(config.lstm_layers):
        per_direction = 4 * hidden * in_dim + 4 * hidden * hidden + 8 * hidden
        total += 2 * per_direction
        in_dim = 2 * hidden
    total += config.n_classes * 2 * hidden + config.n_classes  # head
    return total


@dataclass
class ModelParams:
    """Parameter store plus batch-norm running state for one model."""

    config: ModelConfig
    store: ParamStore
    bn_states: dict[str, BatchNormState]
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def lstm_direction(self, layer, direction):
        prefix = f"lstm{layer}.{direction}"
        return LSTMDirectionParams(
            w_ih=self.store[f"{prefix}.w_ih"], w_hh=self.store[f"{prefix}.w_hh"],
            b_ih=self.store[f"{prefix}.b_ih"], b_hh=self.store[f"{prefix}.b_hh"])

    def copy(self):
        clone = build_model(self.config, seed=0, dtype=self.dtype)
        clone.store.load_values(self.store.copy_values())
        clone.bn_states = {k: v.copy() for k, v in self.bn_states.items()}
        return clone

    def state_arrays(self):
        """All state in declaration order: parameters, then BN buffers."""
        arrays = {name: t.data for name, t in self.store.items()}
        for name, st in self.bn_states.items():
            arrays[f"{name}.running_mean"] = st.running_mean
            arrays[f"{name}.running_var"] = st.running_var
        return arrays

    def bn_initialized(self):
        return all(st.initialized for st in self.bn_states.values())


def _uniform(rng, shape, scale, dtype):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def build_model(config, seed, dtype=np.float32):
    """Deterministically initialized parameters for the given config.

    Conv and linear weights draw from a fan-in-scaled uniform; LSTM gate
    weights use a hidden-scaled uniform with the forget-gate bias set to
    +1; biases start at zero. Batch-norm stats start uninitialized.
    """
    dtype = np.dtype(dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    bn_states = {}

    in_ch = config.n_channels
    for i, out_ch in enumerate(config.conv_filters):
        fan_in = in_ch * config.conv_kernel
        scale = 1.0 / np.sqrt(fan_in)
        store.register(f"conv{i}.weight",
                       _uniform(rng, (out_ch, in_ch, config.conv_kernel), scale, dtype))
        store.register(f"conv{i}.bias", np.zeros(out_ch, dtype=dtype))
        store.register(f"bn{i}.gamma", np.ones(out_ch, dtype=dtype))
        store.register(f"bn{i}.beta", np.zeros(out_ch, dtype=dtype))
        bn_states[f"bn{i}"] = BatchNormState(
            n_channels=out_ch, momentum=config.bn_momentum, eps=config.bn_eps)
        in_ch = out_ch

    flat = config.conv_filters[-1] * config.pooled_length()
    scale = 1.0 / np.sqrt(flat)
    store.register("proj.weight", _uniform(rng, (config.feature_dim, flat), scale, dtype))
    store.register("proj.bias", np.zeros(config.feature_dim, dtype=dtype))

    hidden = config.lstm_hidden
    in_dim = config.feature_dim
    lstm_scale = 1.0 / np.sqrt(hidden)
    for layer in range(config.lstm_layers):
        for direction in ("fwd", "bwd"):
            prefix = f"lstm{layer}.{direction}"
            store.register(f"{prefix}.w_ih",
                           _uniform(rng, (4 * hidden, in_dim), lstm_scale, dtype))
            store.register(f"{prefix}.w_hh",
                           _uniform(rng, (4 * hidden, hidden), lstm_scale, dtype))
            b_ih = np.zeros(4 * hidden, dtype=dtype)
            b_ih[hidden:2 * hidden] = 1.0  # forget gate starts open
            store.register(f"{prefix}.b_ih", b_ih)
            store.register(f"{prefix}.b_hh", np.zeros(4 * hidden, dtype=dtype))
        in_dim = 2 * hidden

    scale = 1.0 / np.sqrt(2 * hidden)
    store.register("head.weight",
                   _uniform(rng, (config.n_classes, 2 * hidden), scale, dtype))
    store.register("head.bias", np.zeros(config.n_classes, dtype=dtype))

    return ModelParams(config=config, store=store, bn_states=bn_states, dtype=dtype)


def _as_input_tensor(params, batch):
    cfg = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params.dtype))
    if x.data.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype), requires_grad=x.requires_grad)
    if x.data.ndim != 4:
        raise ValueError(
            f"expected input [batch, seq, channels, samples], got shape {x.shape}")
    b, s, c, length = x.shape
    if (s, c, length) != (cfg.seq_len, cfg.n_channels, cfg.samples_per_epoch):
        raise ValueError(
            f"input shape {x.shape} does not match config "
            f"(seq={cfg.seq_len}, channels={cfg.n_channels}, "
            f"samples={cfg.samples_per_epoch})")
    return x


def encode_epochs(params, batch, mode, rng=None):
    """Per-epoch feature vectors [batch, seq, feature_dim].

    Epochs are encoded independently; all cross-epoch interaction
    happens later in the BiLSTM.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    x = _as_input_tensor(params, batch)
    b = x.shape[0]
    h = x.reshape(b * cfg.seq_len, cfg.n_channels, cfg.samples_per_epoch)
    for i in range(len(cfg.conv_filters)):
        h = conv1d(h, params.store[f"conv{i}.weight"], params.store[f"conv{i}.bias"],
                   stride=1, padding=cfg.conv_padding)
        h = batchnorm1d(h, params.store[f"bn{i}.gamma"], params.store[f"bn{i}.beta"],
                        params.bn_states[f"bn{i}"], mode)
        h = h.relu()
        h = maxpool1d(h, cfg.pool_window)
    if mode == "train":
        h = dropout(h, cfg.dropout_p, mode, rng)
    flat = h.reshape(b * cfg.seq_len, cfg.conv_filters[-1] * cfg.pooled_length())
    features = linear(flat, params.store["proj.weight"], params.store["proj.bias"])
    return features.reshape(b, cfg.seq_len, cfg.feature_dim)


def forward(params, batch, mode, rng=None):
    """Logits [batch, seq_len, n_classes], one row per epoch in the sequence."""
    cfg = params.config
    if mode == "eval" and not params.bn_initialized():
        raise RuntimeError(
            "eval-mode forward before batch-norm statistics were initialized")
    if mode == "train" and cfg.dropout_p > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an RNG")
    features = encode_epochs(params, batch, mode, rng)
    h = features
    for layer in range(cfg.lstm_layers):
        h = bilstm_layer(h, params.lstm_direction(layer, "fwd"),
                         params.lstm_direction(layer, "bwd"))
    b = h.shape[0]
    flat = h.reshape(b * cfg.seq_len, 2 * cfg.lstm_hidden)
    logits = linear(flat, params.store["head.weight"], params.store["head.bias"])
    return logits.reshape(b, cfg.seq_len, cfg.n_classes)
