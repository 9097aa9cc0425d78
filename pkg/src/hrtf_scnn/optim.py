"""Adam and the mini-batch training loop with validation early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .network import ModelParams, loss_and_gradients, lsd_loss_and_grad, model_forward

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 14
    max_epochs: int = 700
    patience: int = 50
    seed: int = 0

    def __post_init__(self):
        errors = []
        if not self.learning_rate >= 0:
            errors.append("learning_rate must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                errors.append(f"{name} must lie in (0, 1)")
        if not self.epsilon > 0:
            errors.append("epsilon must be > 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.max_epochs < 0:
            errors.append("max_epochs must be >= 0")
        if self.patience < 1:
            errors.append("patience must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, tensors) -> "AdamState":
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors], 0)


def adam_step(params: List[np.ndarray], grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    grads = list(grads)
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("parameter, gradient and state lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    t = state.step_count + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class Sample:
    """One training example: sparse input field and dense target, both P x L dB."""

    sparse: np.ndarray
    dense: np.ndarray
    label: str = ""


@dataclass
class EpochRecord:
    epoch: int
    train_lsd: float
    val_lsd: float


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord]
    best_epoch: int
    best_val_lsd: float
    state: Optional[AdamState] = None
    stopped_early: bool = False


def evaluate_loss(params: ModelParams, samples: Sequence[Sample], rows=None) -> float:
    """Mean per-sample LSD over ``samples``."""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    H = np.stack([s.sparse for s in samples])
    T = np.stack([s.dense for s in samples])
    out, _ = model_forward(H, params)
    per_sample, _ = lsd_loss_and_grad(out, T, rows)
    return float(per_sample.mean())


def train(train_samples: Sequence[Sample], val_samples: Sequence[Sample], params: ModelParams,
          cfg: TrainConfig, rows=None, val_fn=None, progress=None) -> TrainResult:
    """Mini-batch Adam on mean per-sample LSD with validation early stopping.

    ``rows`` restricts the loss to a subset of dense directions (default
    all). ``val_fn(params) -> float`` replaces the validation metric.
    ``progress(record)`` is called after every epoch.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    if not val_samples and val_fn is None:
        raise ValueError("validation split is empty")
    if val_fn is None:
        val_fn = lambda p: evaluate_loss(p, val_samples, rows)  # noqa: E731

    rng = np.random.default_rng(cfg.seed)
    X = np.stack([s.sparse for s in train_samples])
    T = np.stack([s.dense for s in train_samples])
    tensors = [t.copy() for t in params.learnable()]
    state = AdamState.zeros_like(tensors)
    best = params.copy()
    best_val = np.inf
    best_epoch = 0
    wait = 0
    history: List[EpochRecord] = []
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = np.empty(len(order))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            current = params.with_learnable(tensors)
            loss, per_sample, grads = loss_and_gradients(current, X[idx], T[idx], rows)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            losses[idx] = per_sample
            tensors, state = adam_step(tensors, grads.tensors, state, cfg)
        current = params.with_learnable(tensors)
        val = float(val_fn(current))
        if not np.isfinite(val):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, float(np.mean(losses)), val)
        history.append(record)
        if progress is not None:
            progress(record)
        if val < best_val:
            best_val, best, best_epoch, wait = val, current.copy(), epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                log.info("early stop at epoch %d (best %d, val %.4f)", epoch, best_epoch, best_val)
                stopped = True
                break
    return TrainResult(best, history, best_epoch, float(best_val), state, stopped)
