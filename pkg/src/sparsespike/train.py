"""SGD-with-momentum training loop for adversarial ANN pretraining."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attacks
from .losses import trades_loss
from .network import AnnModel
from .tensor import Array, Rng, Tape, Tensor, cross_entropy, no_grad


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"  # "none" | "cosine"
    loss: str = "ce"  # "ce" | "trades"
    trades_lambda: float = 2.0
    attack: "attacks.AttackSpec | None" = None  # inner maximization (trades)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.trades_lambda < 0:
            raise ValueError("trades lambda must be >= 0")
        if self.loss not in ("ce", "trades"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.schedule not in ("none", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


class SgdState:
    """Momentum buffers, allocated lazily per parameter name."""

    def __init__(self):
        self.buffers: dict[str, Array] = {}

    def buffer(self, name: str, like: Array) -> Array:
        if name not in self.buffers:
            self.buffers[name] = np.zeros_like(like)
        return self.buffers[name]


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: SgdState,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
):
    """Classic momentum update; L2 decay is added to the raw gradient."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay:
            g = g + np.float32(weight_decay) * p.data
        if momentum:
            buf = state.buffer(name, p.data)
            buf *= np.float32(momentum)
            buf += g
            g = buf
        p.data = p.data - np.float32(lr) * g


def collect_grads(params: dict[str, Tensor]) -> dict[str, Array]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None


def iterate_batches(x: Array, y: Array, batch_size: int, rng: Rng | None = None):
    n = x.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield x[idx], y[idx]


def evaluate_accuracy(model: AnnModel, x: Array, y: Array, batch_size: int = 256) -> float:
    correct = 0
    with no_grad():
        for xb, yb in iterate_batches(x, y, batch_size):
            logits = model.forward(Tensor(xb), train=False)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return correct / x.shape[0]


def _trades_adversary(model: AnnModel, xb: Array, yb: Array, spec, rng: Rng) -> Array:
    """Inner maximization of the KL regularizer around the clean prediction."""
    with no_grad():
        ref = model.forward(Tensor(xb), train=False).data
    grad_model = attacks.AnnGradModel(model, loss="kl", ref_logits=ref)
    return attacks.run_attack(grad_model, xb, yb, spec, rng)


def pretrain_robust_ann(
    model: AnnModel,
    x_train: Array,
    y_train: Array,
    cfg: TrainConfig,
    rng: Rng,
    x_eval: Array | None = None,
    y_eval: Array | None = None,
) -> list[dict]:
    """Train in place; returns per-epoch history records."""
    if cfg.loss == "trades" and cfg.attack is None:
        raise ValueError("trades loss requires an inner attack spec")
    state = SgdState()
    batch_rng = rng.spawn("batches")
    attack_rng = rng.spawn("inner-attack")
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.schedule == "cosine" else cfg.lr
        losses = []
        correct = 0
        for xb, yb in iterate_batches(x_train, y_train, cfg.batch_size, batch_rng):
            if cfg.loss == "trades":
                x_adv = _trades_adversary(model, xb, yb, cfg.attack, attack_rng)
            with Tape() as tape:
                logits = model.forward(Tensor(xb), train=True)
                if cfg.loss == "trades":
                    logits_adv = model.forward(Tensor(x_adv), train=True, update_stats=False)
                    loss = trades_loss(logits, logits_adv, yb, cfg.trades_lambda)
                else:
                    loss = cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
                zero_grads(model.params)
                tape.backward(loss)
            sgd_step(
                model.params,
                collect_grads(model.params),
                state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )
            losses.append(float(loss.data))
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "train_acc": correct / x_train.shape[0] if x_train.shape[0] else 0.0,
        }
        if x_eval is not None:
            record["eval_acc"] = evaluate_accuracy(model, x_eval, y_eval)
        history.append(record)
    return history
