"""Importance scores, top-k sparsity masks, and sparse adversarial finetuning.

Masks cover conv/linear weights only; batch-norm affine parameters and biases
are never pruned. Keep counts use floor((1-kappa)*n) per scope, ties at the
threshold keep the lowest flat index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .losses import trades_loss
from .network import AnnModel, Conv
from .tensor import Array, Rng, Tape, Tensor, active_tape, cross_entropy, mul, no_grad
from .train import (
    SgdState,
    TrainConfig,
    TrainingDiverged,
    collect_grads,
    cosine_lr,
    iterate_batches,
    sgd_step,
    zero_grads,
)


class InfeasibleSparsity(ValueError):
    pass


@dataclass
class SparsityMask:
    masks: dict[str, Array]  # float32 {0,1} per prunable weight
    kappa: float
    granularity: str  # "uniform" | "nonuniform" | "global"

    def total_weights(self) -> int:
        return sum(m.size for m in self.masks.values())

    def nnz(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    def achieved_sparsity(self) -> float:
        n = self.total_weights()
        return 1.0 - self.nnz() / n if n else 0.0

    def layer_sparsities(self) -> dict[str, float]:
        return {k: 1.0 - float(m.sum()) / m.size for k, m in self.masks.items()}

    def check_budget(self):
        budget = (1.0 - self.kappa) * self.total_weights()
        if self.nnz() > budget + 1e-6:
            raise InfeasibleSparsity(
                f"mask keeps {self.nnz()} weights, budget is {budget:.1f}"
            )


@dataclass
class ImportanceScores:
    scores: dict[str, Array]
    quotas: dict[str, float] | None = None  # per-layer keep fractions (nonuniform)

    def __post_init__(self):
        for name, s in self.scores.items():
            if not np.all(np.isfinite(s)):
                raise ValueError(f"non-finite importance scores in {name}")


def _topk_mask(scores: Array, keep: int) -> Array:
    """Keep the `keep` largest scores; equal scores keep lowest flat index."""
    flat = scores.reshape(-1)
    mask = np.zeros(flat.size, dtype=np.float32)
    if keep > 0:
        order = np.argsort(-flat, kind="stable")
        mask[order[:keep]] = 1.0
    return mask.reshape(scores.shape)


def _out_axis_view(arr: Array, name: str, model_spec) -> Array:
    """View a weight array as [out_units, fan_in] for the min-keep floor."""
    idx = int(name.split(".")[0].removeprefix("layer"))
    layer = model_spec.layers[idx]
    if isinstance(layer, Conv):
        return arr.reshape(arr.shape[0], -1)
    return arr.T  # linear stored [in, out]


def mask_from_scores(
    scores: ImportanceScores,
    kappa: float,
    granularity: str,
    allow_empty_layer: bool = False,
    spec=None,
) -> SparsityMask:
    """Binary masks keeping the top-scoring weights per scope.

    global: one threshold across all layers. uniform: keep floor((1-k)*n_l)
    per layer. nonuniform: per-layer quotas from `scores.quotas`, clipped
    proportionally if they exceed the global budget, with at least one kept
    weight per output unit (needs `spec` for the layer shapes).
    """
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must lie in [0,1)")
    names = sorted(scores.scores)
    sizes = {k: scores.scores[k].size for k in names}
    n_total = sum(sizes.values())
    budget = math.floor((1.0 - kappa) * n_total)
    masks: dict[str, Array] = {}
    if granularity == "global":
        flat = np.concatenate([scores.scores[k].reshape(-1) for k in names])
        big = _topk_mask(flat, budget)
        pos = 0
        for k in names:
            masks[k] = big[pos : pos + sizes[k]].reshape(scores.scores[k].shape)
            pos += sizes[k]
    elif granularity == "uniform":
        for k in names:
            keep = math.floor((1.0 - kappa) * sizes[k])
            if keep == 0 and not allow_empty_layer:
                raise InfeasibleSparsity(f"kappa={kappa} keeps no weights in {k}")
            masks[k] = _topk_mask(scores.scores[k], keep)
    elif granularity == "nonuniform":
        if scores.quotas is None:
            raise ValueError("nonuniform masks need per-layer quotas")
        if spec is None:
            raise ValueError("nonuniform masks need the network spec")
        keeps = {k: math.floor(scores.quotas[k] * sizes[k]) for k in names}
        floors = {}
        for k in names:
            out_units = _out_axis_view(scores.scores[k], k, spec).shape[0]
            floors[k] = out_units
            keeps[k] = max(keeps[k], out_units)
        if sum(floors.values()) > budget:
            raise InfeasibleSparsity(
                f"min-keep floors ({sum(floors.values())}) exceed budget ({budget})"
            )
        total = sum(keeps.values())
        if total > budget:
            shrink = budget / total
            keeps = {k: max(floors[k], math.floor(keeps[k] * shrink)) for k in names}
            # proportional floor can still overshoot via the min-keep floors
            over = sum(keeps.values()) - budget
            for k in sorted(names, key=lambda k: keeps[k] - floors[k], reverse=True):
                if over <= 0:
                    break
                take = min(over, keeps[k] - floors[k])
                keeps[k] -= take
                over -= take
        for k in names:
            view = _out_axis_view(scores.scores[k], k, spec)
            m2 = _topk_mask(view, keeps[k])
            forced = np.zeros_like(m2)
            forced[np.arange(view.shape[0]), np.argmax(view, axis=1)] = 1.0
            merged = np.maximum(m2, forced)
            extra = int(merged.sum()) - keeps[k]
            if extra > 0:
                # drop the lowest-scoring kept weights that are not forced
                droppable = (merged > 0) & (forced == 0)
                cand = np.flatnonzero(droppable.reshape(-1))
                order = np.argsort(view.reshape(-1)[cand], kind="stable")
                merged.reshape(-1)[cand[order[:extra]]] = 0.0
            idx = int(k.split(".")[0].removeprefix("layer"))
            layer = spec.layers[idx]
            if isinstance(layer, Conv):
                masks[k] = merged.reshape(scores.scores[k].shape)
            else:
                masks[k] = np.ascontiguousarray(merged.T)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    result = SparsityMask(masks, kappa, granularity)
    result.check_budget()
    return result


def lwm_scores(model: AnnModel) -> ImportanceScores:
    """Least-weight-magnitude scores: |w| per prunable weight."""
    return ImportanceScores(
        {name: np.abs(model.params[name].data) for name in model.prunable_names()}
    )


def apply_mask(model: AnnModel, mask: SparsityMask):
    """Zero masked weights in place (bit-exact zeros)."""
    for name, m in mask.masks.items():
        model.params[name].data = model.params[name].data * m


def _straight_through(s: Tensor, mask_data: Array) -> Tensor:
    """Forward the binary mask, backward the identity (gradient goes to s)."""
    out = Tensor(mask_data)
    tape = active_tape()
    if tape is not None and s.requires_grad:
        out.requires_grad = True
        tape.record((s,), (out,), lambda g: (g,))
    return out


@dataclass
class PruneConfig:
    kappa: float
    mode: str = "uniform"  # "uniform" | "nonuniform" | "lwm" | "global"
    score_epochs: int = 10
    score_lr: float = 0.01
    score_momentum: float = 0.9
    quota_lr: float = 1.0
    quota_penalty: float = 1e-4  # weight on the squared over-budget term
    quota_band: float = 0.005  # fraction of layer weights in the STE band
    loss: str = "trades"
    trades_lambda: float = 2.0
    attack: "attacks.AttackSpec | None" = None
    batch_size: int = 64
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=0.01))

    def __post_init__(self):
        if self.mode not in ("uniform", "nonuniform", "lwm", "global"):
            raise ValueError(f"unknown prune mode {self.mode!r}")


def _masked_view(model: AnnModel, mask_arrays: dict[str, Array]) -> AnnModel:
    view = AnnModel(model.spec, dict(model.params), model.buffers)
    for name, m in mask_arrays.items():
        view.params[name] = Tensor(model.params[name].data * m)
    return view


def optimize_scores(
    model: AnnModel,
    x_train: Array,
    y_train: Array,
    cfg: PruneConfig,
    rng: Rng,
) -> ImportanceScores:
    """Train importance scores (and quotas in nonuniform mode) on the robust
    loss with frozen weights; gradients reach the scores through a
    straight-through estimator on the binary mask."""
    mode = "uniform" if cfg.mode == "lwm" else cfg.mode
    prunable = model.prunable_names()
    s_params = {
        name: Tensor(np.abs(model.params[name].data), requires_grad=True) for name in prunable
    }
    quotas = None
    q_logits = None
    if mode == "nonuniform":
        base = 1.0 - cfg.kappa
        q_logits = {name: math.log(base / (1.0 - base)) for name in prunable}
        quotas = {name: base for name in prunable}
    state = SgdState()
    batch_rng = rng.spawn("score-batches")
    attack_rng = rng.spawn("score-attack")
    sizes = {name: model.params[name].data.size for name in prunable}
    n_total = sum(sizes.values())
    budget = (1.0 - cfg.kappa) * n_total

    def current_scores() -> ImportanceScores:
        return ImportanceScores(
            {k: sp.data.copy() for k, sp in s_params.items()},
            dict(quotas) if quotas is not None else None,
        )

    for epoch in range(cfg.score_epochs):
        for xb, yb in iterate_batches(x_train, y_train, cfg.batch_size, batch_rng):
            mask = mask_from_scores(
                current_scores(), cfg.kappa, mode, allow_empty_layer=True, spec=model.spec
            )
            if cfg.loss == "trades" and cfg.attack is not None:
                crafted = _masked_view(model, mask.masks)
                with no_grad():
                    ref = crafted.forward(Tensor(xb), train=False).data
                x_adv = attacks.run_attack(
                    attacks.AnnGradModel(crafted, loss="kl", ref_logits=ref),
                    xb,
                    yb,
                    cfg.attack,
                    attack_rng,
                )
            with Tape() as tape:
                view = AnnModel(model.spec, dict(model.params), model.buffers)
                for name in prunable:
                    w_const = Tensor(model.params[name].data)
                    view.params[name] = mul(w_const, _straight_through(s_params[name], mask.masks[name]))
                logits = view.forward(Tensor(xb), train=False)
                if cfg.loss == "trades" and cfg.attack is not None:
                    logits_adv = view.forward(Tensor(x_adv), train=False)
                    loss = trades_loss(logits, logits_adv, yb, cfg.trades_lambda)
                else:
                    loss = cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"score loss non-finite at epoch {epoch}")
                zero_grads(s_params)
                tape.backward(loss)
            if mode == "nonuniform":
                _update_quotas(q_logits, quotas, s_params, mask, sizes, budget, cfg)
            sgd_step(s_params, collect_grads(s_params), state, cfg.score_lr, cfg.score_momentum)
    return current_scores()


def _update_quotas(q_logits, quotas, s_params, mask, sizes, budget, cfg: PruneConfig):
    """Quota descent: quadratic over-budget penalty plus a boundary-band
    straight-through estimate of the task gradient w.r.t. the keep count."""
    total_keep = sum(quotas[k] * sizes[k] for k in quotas)
    over = max(0.0, total_keep - budget)
    for name in list(q_logits):
        s = s_params[name]
        grad_sigma = 0.0
        if s.grad is not None:
            excluded = mask.masks[name].reshape(-1) == 0
            if excluded.any():
                band = max(1, int(round(cfg.quota_band * sizes[name])))
                ex_idx = np.flatnonzero(excluded)
                order = np.argsort(-s.data.reshape(-1)[ex_idx], kind="stable")
                band_idx = ex_idx[order[:band]]
                grad_sigma = float(s.grad.reshape(-1)[band_idx].mean())
        r = quotas[name]
        dr = grad_sigma * sizes[name] + 2.0 * cfg.quota_penalty * over * sizes[name]
        q_logits[name] -= cfg.quota_lr * dr * r * (1.0 - r)  # sigmoid chain
        quotas[name] = 1.0 / (1.0 + math.exp(-q_logits[name]))


def masked_sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    masks: dict[str, Array],
    state: SgdState,
    lr: float,
    momentum: float,
    weight_decay: float,
):
    """SGD step with gradients and momentum buffers masked per layer."""
    masked_grads = {}
    for name, g in grads.items():
        masked_grads[name] = g * masks[name] if name in masks else g
    sgd_step(params, masked_grads, state, lr, momentum, weight_decay)
    for name, m in masks.items():
        if name in state.buffers:
            state.buffers[name] *= m
        params[name].data = params[name].data * m  # keeps pruned entries bit-zero


def finetune_sparse_ann(
    model: AnnModel,
    mask: SparsityMask,
    x_train: Array,
    y_train: Array,
    cfg: TrainConfig,
    rng: Rng,
) -> list[dict]:
    """Adversarial finetuning with masked weight updates; pruned entries stay
    exactly zero throughout."""
    apply_mask(model, mask)
    state = SgdState()
    batch_rng = rng.spawn("sft-batches")
    attack_rng = rng.spawn("sft-attack")
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.schedule == "cosine" else cfg.lr
        losses = []
        correct = 0
        for xb, yb in iterate_batches(x_train, y_train, cfg.batch_size, batch_rng):
            if cfg.loss == "trades":
                with no_grad():
                    ref = model.forward(Tensor(xb), train=False).data
                x_adv = attacks.run_attack(
                    attacks.AnnGradModel(model, loss="kl", ref_logits=ref),
                    xb,
                    yb,
                    cfg.attack,
                    attack_rng,
                )
            with Tape() as tape:
                logits = model.forward(Tensor(xb), train=True)
                if cfg.loss == "trades":
                    logits_adv = model.forward(Tensor(x_adv), train=True, update_stats=False)
                    loss = trades_loss(logits, logits_adv, yb, cfg.trades_lambda)
                else:
                    loss = cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"sparse finetune diverged at epoch {epoch}")
                zero_grads(model.params)
                tape.backward(loss)
            masked_sgd_step(
                model.params,
                collect_grads(model.params),
                mask.masks,
                state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )
            losses.append(float(loss.data))
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)) if losses else 0.0,
                "train_acc": correct / x_train.shape[0] if x_train.shape[0] else 0.0,
            }
        )
    return history
