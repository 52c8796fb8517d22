"""Post-conversion robust finetuning of the sparse SNN.

Each step crafts an adversarial batch against the KL regularizer, runs clean
and adversarial T-step forwards, backpropagates through time with the
training surrogate, and applies mask-gated weight updates. Batch-norm
statistics refresh on the clean training forward only. Thresholds, affine
batch-norm parameters and biases are never masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .losses import snn_robust_loss
from .pruning import SparsityMask, masked_sgd_step
from .snn import TRAINING_SURROGATE, SnnGradModel, SnnModel, SurrogateSpec
from .tensor import Array, Rng, Tape, Tensor, cross_entropy, kl_divergence, no_grad
from .train import (
    SgdState,
    TrainingDiverged,
    collect_grads,
    cosine_lr,
    iterate_batches,
    zero_grads,
)


@dataclass
class FinetuneConfig:
    epochs: int = 10
    beta: float = 2.0
    eps: float = 2.0 / 255.0
    inner: str = "rfgsm"  # "rfgsm" | "fgsm" | "pgd"
    inner_steps: int = 1
    alpha_r: float | None = None  # rfgsm random step, defaults to eps/2
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    t_steps: int = 8
    batch_size: int = 64
    surrogate: SurrogateSpec = field(default_factory=lambda: TRAINING_SURROGATE)
    threshold_floor: float = 1e-3
    probe_samples: int = 256  # history probe size per epoch (0 disables)

    def __post_init__(self):
        if self.beta < 0 or self.eps < 0:
            raise ValueError("beta and eps must be >= 0")
        if self.inner not in ("rfgsm", "fgsm", "pgd"):
            raise ValueError(f"unknown inner attack {self.inner!r}")


def masked_update(w: Tensor, dw: Array, m: Array, lr: float) -> None:
    """W <- W - lr * (dW ⊙ M), in place."""
    w.data = w.data - np.float32(lr) * (dw * m)


def _inner_spec(cfg: FinetuneConfig) -> attacks.AttackSpec:
    return attacks.AttackSpec(
        kind=cfg.inner,
        eps=cfg.eps,
        steps=cfg.inner_steps if cfg.inner == "pgd" else 1,
        alpha_r=cfg.alpha_r,
        random_start=cfg.inner == "pgd",
    )


def _trainable(model: SnnModel) -> dict[str, Tensor]:
    merged = dict(model.params)
    merged.update(model.thresholds)
    return merged


def finetune_snn(
    model: SnnModel,
    mask: SparsityMask,
    x_train: Array,
    y_train: Array,
    cfg: FinetuneConfig,
    rng: Rng,
    x_probe: Array | None = None,
    y_probe: Array | None = None,
) -> list[dict]:
    """Finetune in place; returns per-epoch history records.

    With beta == 0 and eps == 0 this reduces to a plain cross-entropy BPTT
    trainer (no adversarial branch at all).
    """
    model.mask = mask
    for name, m in mask.masks.items():
        model.params[name].data = model.params[name].data * m
    params = _trainable(model)
    state = SgdState()
    batch_rng = rng.spawn("snnft-batches")
    attack_rng = rng.spawn("snnft-attack")
    inner = _inner_spec(cfg) if (cfg.beta > 0 and cfg.eps > 0) else None
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.schedule == "cosine" else cfg.lr
        ce_terms, kl_terms = [], []
        clamped = 0
        correct = 0
        for xb, yb in iterate_batches(x_train, y_train, cfg.batch_size, batch_rng):
            if inner is not None:
                with no_grad():
                    ref, _ = model.forward(
                        Tensor(xb), cfg.t_steps, cfg.surrogate, train=True, update_stats=False
                    )
                adversary = SnnGradModel(
                    model,
                    cfg.t_steps,
                    cfg.surrogate,
                    loss="kl",
                    ref_logits=ref.data,
                    batch_stats=True,
                )
                x_adv = attacks.run_attack(adversary, xb, yb, inner, attack_rng)
            with Tape() as tape:
                logits_clean, _ = model.forward(
                    Tensor(xb), cfg.t_steps, cfg.surrogate, train=True, update_stats=True
                )
                ce = cross_entropy(logits_clean, yb)
                if cfg.beta > 0:
                    if inner is not None:
                        logits_adv, _ = model.forward(
                            Tensor(x_adv), cfg.t_steps, cfg.surrogate, train=True,
                            update_stats=False,
                        )
                    else:
                        logits_adv = logits_clean
                    kl = kl_divergence(logits_adv, logits_clean)
                    loss = snn_robust_loss(logits_clean, logits_adv, yb, cfg.beta)
                    kl_terms.append(float(kl.data))
                else:
                    loss = ce
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"finetune loss non-finite at epoch {epoch}")
                zero_grads(params)
                tape.backward(loss)
            masked_sgd_step(
                params,
                collect_grads(params),
                mask.masks,
                state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )
            for t in model.thresholds.values():
                if float(t.data) < cfg.threshold_floor:
                    t.data = np.float32(cfg.threshold_floor)
                    clamped += 1
            ce_terms.append(float(ce.data))
            correct += int((np.argmax(logits_clean.data, axis=1) == yb).sum())
        record = {
            "epoch": epoch,
            "lr": lr,
            "ce": float(np.mean(ce_terms)) if ce_terms else 0.0,
            "kl": float(np.mean(kl_terms)) if kl_terms else 0.0,
            "train_acc": correct / x_train.shape[0] if x_train.shape[0] else 0.0,
            "thresholds_clamped": clamped,
        }
        if x_probe is not None and cfg.probe_samples:
            record.update(
                _probe(model, x_probe[: cfg.probe_samples], y_probe[: cfg.probe_samples], cfg,
                       attack_rng)
            )
        history.append(record)
    return history


def _probe(model: SnnModel, x: Array, y: Array, cfg: FinetuneConfig, rng: Rng) -> dict:
    """Clean accuracy plus robust accuracy under a training-surrogate FGSM."""
    gm = SnnGradModel(model, cfg.t_steps, cfg.surrogate)
    clean = float((gm.predict(x) == y).mean())
    if cfg.eps > 0:
        x_adv = attacks.fgsm(gm, x, y, cfg.eps)
        robust = float((gm.predict(x_adv) == y).mean())
    else:
        robust = clean
    return {"probe_clean_acc": clean, "probe_robust_acc": robust}


def evaluate_snn_accuracy(
    model: SnnModel, x: Array, y: Array, t_steps: int, batch_size: int = 256,
    batch_stats: bool = False,
) -> float:
    gm = SnnGradModel(model, t_steps, batch_stats=batch_stats)
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        correct += int((gm.predict(xb) == yb).sum())
    return correct / x.shape[0] if x.shape[0] else 0.0
