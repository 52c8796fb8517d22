"""White-box l-infinity attacks: FGSM, RFGSM, PGD and the surrogate ensemble.

Attack functions are generic over a small adapter protocol: the target needs
`predict(x) -> labels` and `input_grad(x, y) -> d(loss)/dx`. SNN adapters also
expose `with_surrogate(spec)` so the ensemble can swap backward rules.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import AnnModel
from .tensor import Array, Rng, Tape, Tensor, cross_entropy, kl_divergence, no_grad


@dataclass(frozen=True)
class AttackSpec:
    kind: str  # "fgsm" | "rfgsm" | "pgd"
    eps: float
    steps: int = 1
    alpha: float | None = None  # pgd step size; defaults to 2.5*eps/steps
    alpha_r: float | None = None  # rfgsm random step; defaults to eps/2
    random_start: bool = False
    surrogate: "object | None" = None  # SurrogateSpec override for SNN targets

    def __post_init__(self):
        if self.kind not in ("fgsm", "rfgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.steps > 1 and self.eps > 0 and self.pgd_alpha() <= 0:
            raise ValueError("alpha must be positive for multi-step attacks")

    def pgd_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.eps / self.steps  # evaluation-protocol step-size rule

    def rfgsm_alpha(self) -> float:
        return self.eps / 2.0 if self.alpha_r is None else self.alpha_r


def clip_to_ball(x_adv: Array, x: Array, eps: float) -> Array:
    """Project onto the eps-ball around x intersected with the [0,1] box.

    Bounds are materialized in float32 so ball membership is exact under the
    same comparison the tests—and any downstream consumer—can re-derive.
    """
    eps = np.float32(eps)
    lo = np.maximum(np.float32(0.0), x - eps)
    hi = np.minimum(np.float32(1.0), x + eps)
    return np.clip(x_adv, lo, hi)


def fgsm(model, x: Array, y: Array, eps: float) -> Array:
    """Single full-budget step along the gradient sign."""
    if eps == 0:
        return x.copy()
    g = model.input_grad(x, y)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient in fgsm")
    return clip_to_ball(x + np.float32(eps) * np.sign(g, dtype=np.float32), x, eps)


def rfgsm(model, x: Array, y: Array, eps: float, alpha_r: float, rng: Rng) -> Array:
    """Random sign step of alpha_r, then a (eps - alpha_r) gradient-sign step."""
    if alpha_r > eps:
        raise ValueError("alpha_r must not exceed eps")
    if eps == 0:
        return x.copy()
    noise = np.sign(rng.normal(x.shape), dtype=np.float32)
    x_start = clip_to_ball(x + np.float32(alpha_r) * noise, x, eps)
    g = model.input_grad(x_start, y)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient in rfgsm")
    step = np.float32(eps - alpha_r) * np.sign(g, dtype=np.float32)
    return clip_to_ball(x_start + step, x, eps)


def pgd(
    model,
    x: Array,
    y: Array,
    eps: float,
    steps: int,
    alpha: float,
    random_start: bool = False,
    rng: Rng | None = None,
) -> Array:
    """Iterated sign steps with per-step projection onto the eps-ball and box."""
    if eps == 0:
        return x.copy()
    if random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        x_adv = clip_to_ball(x + rng.uniform(-eps, eps, x.shape), x, eps)
    else:
        x_adv = x.copy()
    for _ in range(steps):
        g = model.input_grad(x_adv, y)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient in pgd")
        x_adv = clip_to_ball(x_adv + np.float32(alpha) * np.sign(g, dtype=np.float32), x, eps)
    return x_adv


def run_attack(model, x: Array, y: Array, spec: AttackSpec, rng: Rng | None = None) -> Array:
    if spec.surrogate is not None and hasattr(model, "with_surrogate"):
        model = model.with_surrogate(spec.surrogate)
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.eps)
    if spec.kind == "rfgsm":
        if rng is None:
            raise ValueError("rfgsm requires an rng")
        return rfgsm(model, x, y, spec.eps, min(spec.rfgsm_alpha(), spec.eps), rng)
    return pgd(model, x, y, spec.eps, spec.steps, spec.pgd_alpha(), spec.random_start, rng)


# ---------------------------------------------------------------------------
# surrogate-gradient ensemble protocol


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple
    stop_at_first_success: bool = True

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble must have at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValueError("ensemble members must be unique")


def ensemble_attack(
    snn_model,
    x: Array,
    y: Array,
    base: AttackSpec,
    ens: EnsembleSpec,
    rng: Rng | None = None,
):
    """Run the base attack once per surrogate member; a sample counts as
    fooled if any member's adversarial example is misclassified.

    Returns (x_adv, fooled): per-sample adversarial inputs (the first fooling
    member's, else the last member's) and the fooled flags.
    """
    n = x.shape[0]
    fooled = np.zeros(n, dtype=bool)
    succeeded = np.zeros(n, dtype=bool)  # has a recorded fooling example
    x_adv = x.copy()
    for member in ens.members:
        if ens.stop_at_first_success:
            active = np.flatnonzero(~fooled)
            if active.size == 0:
                break
        else:
            active = np.arange(n)
        member_model = snn_model.with_surrogate(member)
        member_rng = rng.spawn(f"member-{member!r}") if rng is not None else None
        xa = run_attack(
            member_model, x[active], y[active], replace(base, surrogate=None), member_rng
        )
        miss = member_model.predict(xa) != y[active]
        pending = ~succeeded[active]  # keep the first fooling example per sample
        x_adv[active[pending]] = xa[pending]
        succeeded[active[miss & pending]] = True
        fooled[active[miss]] = True
    # never-fooled samples end up carrying the last member's attempt
    return x_adv, fooled


class AnnGradModel:
    """Attack adapter for the dense ANN: CE loss or KL against fixed logits."""

    def __init__(self, model: AnnModel, loss: str = "ce", ref_logits: Array | None = None):
        if loss not in ("ce", "kl"):
            raise ValueError(f"unknown attack loss {loss!r}")
        if loss == "kl" and ref_logits is None:
            raise ValueError("kl attack loss needs reference logits")
        self.model = model
        self.loss = loss
        self.ref_logits = ref_logits

    def predict(self, x: Array) -> Array:
        with no_grad():
            logits = self.model.forward(Tensor(x), train=False)
        return np.argmax(logits.data, axis=1)

    def input_grad(self, x: Array, y: Array) -> Array:
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            logits = self.model.forward(xt, train=False)
            if self.loss == "ce":
                loss = cross_entropy(logits, y)
            else:
                loss = kl_divergence(logits, Tensor(self.ref_logits))
            tape.backward(loss)
        return xt.grad if xt.grad is not None else np.zeros_like(x)
