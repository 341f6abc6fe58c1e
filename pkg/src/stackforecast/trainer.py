"""Mini-batch Adam training with MSE loss, clipping and early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import kernel as K

log = logging.getLogger(__name__)


class Trainable(Protocol):
    params: dict[str, K.Tensor]

    def forward(self, X: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> K.Tensor: ...


class TrainingError(RuntimeError):
    """Training diverged; carries the history and last finite parameters."""

    def __init__(self, message: str, history: "TrainHistory", last_params: dict[str, np.ndarray]):
        super().__init__(message)
        self.history = history
        self.last_params = last_params


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 10
    clip_norm: float | None = None
    seed: int = 0
    shuffle: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None  # 0-based
    stop_reason: str = "not started"

    @property
    def best_val_loss(self) -> float | None:
        return None if self.best_epoch is None else self.val_loss[self.best_epoch]

    def write_csv(self, path, header_extra: dict | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            for k, v in (header_extra or {}).items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(a), repr(b)])

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, K.Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.value) for k, p in params.items()},
                   {k: np.zeros_like(p.value) for k, p in params.items()})


def adam_step(params: dict[str, K.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient in '{k}' ({bad} entries) at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        if params[k].value.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter '{k}' {params[k].value.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[k].value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}
    return grads


def mse_loss(pred: K.Tensor, y: np.ndarray) -> K.Tensor:
    diff = K.sub(pred, K.Tensor(y))
    return K.mean(K.mul(diff, diff))


def predict_batched(model: Trainable, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.forward(X[i:i + batch_size], training=False).value.reshape(-1)
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def evaluate_mse(model: Trainable, X: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    pred = predict_batched(model, X, batch_size)
    return float(np.mean((pred - y) ** 2))


def snapshot(params: dict[str, K.Tensor]) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in params.items()}


def restore(params: dict[str, K.Tensor], values: dict[str, np.ndarray]) -> None:
    for k, v in values.items():
        params[k].value = v.copy()


def train(model: Trainable, train_data: tuple[np.ndarray, np.ndarray],
          val_data: tuple[np.ndarray, np.ndarray], config: TrainConfig) -> TrainHistory:
    """Fit ``model`` in place and restore the best-validation parameters.

    Early stopping triggers once ``patience`` epochs pass without a strict
    improvement of validation MSE.
    """
    X, y = train_data
    Xv, yv = val_data
    history = TrainHistory()
    if config.max_epochs == 0:
        history.stop_reason = "max_epochs=0"
        return history

    rng = K.make_rng(config.seed)
    state = AdamState.zeros_like(model.params)
    best = snapshot(model.params)
    last_finite = best
    best_loss = np.inf
    since_best = 0
    n = len(X)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                for p in model.params.values():
                    p.grad = None
                loss = mse_loss(model.forward(X[idx], training=True, rng=rng), y[idx])
                K.backward(loss)
                grads = {k: (np.zeros_like(p.value) if p.grad is None else p.grad)
                         for k, p in model.params.items()}
                if config.clip_norm is not None:
                    grads = clip_gradients(grads, config.clip_norm)
                adam_step(model.params, grads, state, config.learning_rate,
                          config.beta1, config.beta2, config.eps)
                total += float(loss.value) * len(idx)
            last_finite = snapshot(model.params)
            val = evaluate_mse(model, Xv, yv)
        except (K.NonFiniteError, FloatingPointError) as exc:
            restore(model.params, last_finite)
            history.stop_reason = f"diverged at epoch {epoch + 1}: {exc}"
            raise TrainingError(history.stop_reason, history, last_finite) from exc
        if not np.isfinite(val):
            restore(model.params, last_finite)
            history.stop_reason = f"validation loss non-finite at epoch {epoch + 1}"
            raise TrainingError(history.stop_reason, history, last_finite)

        history.train_loss.append(total / n)
        history.val_loss.append(val)
        log.debug("epoch %d train %.6g val %.6g", epoch + 1, total / n, val)
        if val < best_loss:
            best_loss = val
            best = snapshot(model.params)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stop_reason = f"early stop: no improvement for {config.patience} epochs"
                break
    else:
        history.stop_reason = f"reached max_epochs={config.max_epochs}"
    restore(model.params, best)
    return history


class LinearModel:
    """y = X_flat @ w + b; used to sanity-check the training loop."""

    def __init__(self, n_in: int, seed: int = 0):
        rng = K.make_rng(seed)
        limit = 1.0 / np.sqrt(n_in)
        self.params = {"w": K.parameter(rng.uniform(-limit, limit, (n_in, 1))),
                       "b": K.parameter(np.zeros(1))}

    def forward(self, X, training=False, rng=None):
        X = np.asarray(X).reshape(len(X), -1)
        out = K.add(K.matmul(K.Tensor(X), self.params["w"]), self.params["b"])
        return K.reshape(out, (-1,))
