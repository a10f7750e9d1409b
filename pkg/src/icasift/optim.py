"""Adam updates and validation-driven early stopping."""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .archive import load_parameters, save_parameters_bytes
from .errors import ContractError, ParameterError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; gradients belong to the caller.

    `step` consumes the gradients currently stored on the parameters and
    leaves them in place, so the caller decides when to zero them.
    """

    def __init__(self, params: Mapping[str, Tensor], learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ParameterError(f"learning rate must be positive, got {learning_rate}")
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ParameterError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.epsilon)
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class EarlyStopping:
    """Stop after `patience` epochs without strict improvement.

    The metric is higher-is-better (validation accuracy).  Each improving
    epoch snapshots the full model state as an in-memory parameter
    archive; on stop the caller loads `best_arrays()` back into the model.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ParameterError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_metric: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.epochs_since_improvement = 0
        self.best_snapshot: Optional[bytes] = None
        self._epochs_seen = 0

    def update(self, metric: float, named_state: Mapping) -> bool:
        """Record one epoch's validation metric; True means stop now."""
        if not np.isfinite(metric):
            raise ParameterError(f"validation metric must be finite, got {metric}")
        self._epochs_seen += 1
        if self.best_metric is None or metric > self.best_metric:
            self.best_metric = float(metric)
            self.best_epoch = self._epochs_seen
            self.epochs_since_improvement = 0
            self.best_snapshot = save_parameters_bytes(named_state)
            return False
        self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience

    def best_arrays(self) -> dict:
        """State arrays of the best epoch, decoded from the snapshot archive."""
        if self.best_snapshot is None:
            raise ContractError("no snapshot available; update was never called")
        arrays, _ = load_parameters(self.best_snapshot)
        return arrays
