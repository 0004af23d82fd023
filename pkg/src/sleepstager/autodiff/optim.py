"""Parameter store, Adam, gradient clipping and the epoch controller."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: float = 5.0
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 10
    min_improvement: float = 1e-6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.adam_beta1 < 1.0 or not 0.0 < self.adam_beta2 < 1.0:
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ValueError("adam_epsilon must be positive")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")

    def with_learning_rate(self, lr):
        return replace(self, learning_rate=lr)


class ParamStore:
    """Named parameter tensors plus their Adam state.

    Gradient buffers live on the tensors and accumulate across backward
    calls; the trainer zeroes them once per batch. Adam moments are
    created zero-filled alongside each registered parameter.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def register(self, name, data, requires_grad=True):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = requires_grad
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def adam_moments(self, name):
        return self._m[name], self._v[name]

    @property
    def n_params(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy_values(self):
        """Snapshot of parameter arrays (for best-epoch restore)."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values):
        for name, t in self._params.items():
            arr = values[name]
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r} shape {t.data.shape} != stored {arr.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


def global_grad_norm(store):
    """L2 norm over every populated gradient buffer, in float64."""
    total = 0.0
    for t in store.tensors():
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_gradients(store, max_norm):
    """Scale all gradients so the global norm is at most max_norm.

    Returns the applied factor (1.0 when no clipping was needed).
    """
    norm = global_grad_norm(store)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for t in store.tensors():
        if t.grad is not None:
            t.grad *= t.data.dtype.type(factor)
    return factor


def adam_step(store, config, lr=None):
    """One Adam update with bias correction; gradient buffers untouched.

    Parameters whose gradient buffer is unpopulated (frozen or unused)
    are skipped entirely.
    """
    lr = config.learning_rate if lr is None else lr
    store.step_count += 1
    t = store.step_count
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        m, v = store._m[name], store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


@dataclass
class ControllerAction:
    improved: bool
    lr_reduced: bool
    stop: bool
    lr: float


class TrainController:
    """Plateau learning-rate reduction and early stopping on val loss.

    Improvement means the monitored loss dropped below the best seen by
    at least min_improvement. The plateau counter resets after each
    reduction; the early-stop counter only resets on improvement.
    """

    def __init__(self, config, early_stopping=True):
        self.config = config
        self.lr = config.learning_rate
        self.early_stopping = early_stopping
        self.best_loss = float("inf")
        self._plateau_count = 0
        self._stale_count = 0

    def step(self, loss):
        """Register one epoch's monitored loss; returns the actions taken."""
        loss = float(loss)
        improved = loss < self.best_loss - self.config.min_improvement
        lr_reduced = False
        stop = False
        if improved:
            self.best_loss = loss
            self._plateau_count = 0
            self._stale_count = 0
        else:
            self._plateau_count += 1
            self._stale_count += 1
            if self._plateau_count >= self.config.plateau_patience:
                self.lr *= self.config.plateau_factor
                self._plateau_count = 0
                lr_reduced = True
            if (self.early_stopping
                    and self._stale_count >= self.config.early_stop_patience):
                stop = True
        return ControllerAction(improved=improved, lr_reduced=lr_reduced,
                                stop=stop, lr=self.lr)
