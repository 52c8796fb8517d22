"""Composite training objectives built from the fused CE / KL primitives."""

from __future__ import annotations

from .tensor import Tensor, add, cross_entropy, kl_divergence, scale


def trades_loss(logits_clean: Tensor, logits_adv: Tensor, y, lam: float) -> Tensor:
    """CE(clean, y) + lam * KL(adv || clean); gradients reach both branches."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    ce = cross_entropy(logits_clean, y)
    if lam == 0:
        return ce
    return add(ce, scale(kl_divergence(logits_adv, logits_clean), lam))


def snn_robust_loss(logits_clean: Tensor, logits_adv: Tensor, y, beta: float) -> Tensor:
    """Robust finetuning objective on integrated output potentials.

    Same composite shape as trades_loss; kept as its own entry point because
    the finetuning stage owns its trade-off weight beta.
    """
    return trades_loss(logits_clean, logits_adv, y, beta)
