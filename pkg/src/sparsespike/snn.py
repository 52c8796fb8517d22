"""Spiking forward dynamics, surrogate-gradient families, and BPTT.

The simulation is layer-major: each layer's input currents for all T
timesteps are stacked along axis 0 ([T*N, ...]), so conv/matmul run once per
layer and batch-norm on the stacked tensor pools statistics over batch and
time. Only the membrane scan walks timesteps individually.

Hidden units are hard-reset (L)IF neurons: v- = tau*v + I, spike when
v- >= V_th (spike at exact threshold), then v resets to zero. The output
layer integrates its potential without spiking; logits are v_out(T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks
from .network import AvgPool, BatchNorm, Conv, Flatten, Linear, NetworkSpec, Relu
from .pruning import SparsityMask
from .tensor import (
    Array,
    Tape,
    Tensor,
    active_tape,
    add,
    avgpool2d,
    batchnorm,
    concat0,
    conv2d,
    cross_entropy,
    flatten,
    kl_divergence,
    matmul,
    mul_const,
    no_grad,
    relu,
    reshape,
    scale,
    split0,
    sub,
    sum_time,
)

BPTT_FAMILIES = ("piecewise_linear", "exponential", "rectangular", "ste")
SPECIAL_FAMILIES = ("bptr", "conversion_approx")


@dataclass(frozen=True)
class SurrogateSpec:
    family: str
    gamma_w: float | None = None
    gamma_d: float | None = None
    gamma_s: float | None = None

    def __post_init__(self):
        if self.family not in BPTT_FAMILIES + SPECIAL_FAMILIES:
            raise ValueError(f"unknown surrogate family {self.family!r}")
        if self.family in ("piecewise_linear", "rectangular") and not (
            self.gamma_w and self.gamma_w > 0
        ):
            raise ValueError(f"{self.family} needs gamma_w > 0")
        if self.family == "exponential" and not (
            self.gamma_d and self.gamma_d > 0 and self.gamma_s and self.gamma_s > 0
        ):
            raise ValueError("exponential needs gamma_d > 0 and gamma_s > 0")

    def derivative(self, u: Array) -> Array:
        """d(spike)/d(membrane) evaluated at u = v- - V_th."""
        if self.family == "piecewise_linear":
            gw = np.float32(self.gamma_w)
            return np.maximum(0.0, gw - np.abs(u)).astype(np.float32) / (gw * gw)
        if self.family == "exponential":
            return np.float32(self.gamma_d) * np.exp(
                -np.float32(self.gamma_s) * np.abs(u), dtype=np.float32
            )
        if self.family == "rectangular":
            gw = np.float32(self.gamma_w)
            return (np.abs(u) < gw / 2).astype(np.float32) / gw
        if self.family == "ste":
            return np.ones_like(u)
        raise ValueError(f"{self.family} has no pointwise derivative")

    def label(self) -> str:
        parts = [self.family]
        for key in ("gamma_w", "gamma_d", "gamma_s"):
            v = getattr(self, key)
            if v is not None:
                parts.append(f"{key.split('_')[1]}{v:g}")
        return "-".join(parts)


TRAINING_SURROGATE = SurrogateSpec("piecewise_linear", gamma_w=1.0)


def default_ensemble_members() -> tuple[SurrogateSpec, ...]:
    """Attack ensemble grid: pcw, exp, rect families plus the three
    whole-path approximations, in listing order."""
    members = [SurrogateSpec("piecewise_linear", gamma_w=g) for g in (0.25, 0.5, 1.0, 2.0, 3.0)]
    members += [
        SurrogateSpec("exponential", gamma_d=d, gamma_s=s)
        for d, s in ((0.3, 0.5), (0.3, 1.0), (0.3, 2.0), (1.0, 0.5), (1.0, 1.0), (1.0, 2.0))
    ]
    members += [SurrogateSpec("rectangular", gamma_w=g) for g in (0.25, 0.5, 1.0, 2.0, 4.0)]
    members += [SurrogateSpec("ste"), SurrogateSpec("bptr"), SurrogateSpec("conversion_approx")]
    return tuple(members)


def default_ensemble(stop_at_first_success: bool = True) -> attacks.EnsembleSpec:
    return attacks.EnsembleSpec(default_ensemble_members(), stop_at_first_success)


def surrogate_grad(spec: SurrogateSpec, v_minus: Array, v_th) -> Array:
    """Pointwise surrogate derivative at the given membrane/threshold values."""
    return spec.derivative(np.asarray(v_minus, dtype=np.float32) - np.float32(v_th))


def spike(u: Tensor, surrogate: SurrogateSpec) -> Tensor:
    """Heaviside with H(0)=1 forward; surrogate derivative backward."""
    out = Tensor((u.data >= 0).astype(np.float32))
    tape = active_tape()
    if tape is not None and u.requires_grad:
        out.requires_grad = True
        u_data = u.data

        def backward(g):
            return (g * surrogate.derivative(u_data),)

        tape.record((u,), (out,), backward)
    return out


def lif_step(v_prev: Tensor | None, input_current: Tensor, v_th: Tensor, tau: float,
             surrogate: SurrogateSpec) -> tuple[Tensor, Tensor]:
    """One hard-reset step: v- = tau*v + I; o = H(v- - V_th); v' = v-*(1-o).

    The reset gate treats o as a constant in backward; gradient flows through
    the surviving leak path only.
    """
    if v_prev is None:
        v_minus = input_current
    elif tau == 1.0:
        v_minus = add(v_prev, input_current)
    else:
        v_minus = add(scale(v_prev, tau), input_current)
    o = spike(sub(v_minus, v_th), surrogate)
    v_next = mul_const(v_minus, 1.0 - o.data)
    return o, v_next


def direct_encode(x: Tensor, t_steps: int) -> list[Tensor]:
    """Constant input current at layer 1: the same frame for every timestep."""
    return [x] * t_steps


def tdbn_forward(
    inputs: list[Tensor],
    phi: Tensor,
    omega: Tensor,
    running_mean: Array,
    running_var: Array,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> list[Tensor]:
    """Batch-norm with statistics pooled over batch and time.

    Implemented by normalizing the time-concatenated batch, which is exactly
    the pooled-moments definition.
    """
    stacked = concat0(inputs)
    out = batchnorm(stacked, phi, omega, running_mean, running_var, train, momentum, eps,
                    update_stats)
    return split0(out, len(inputs))


@dataclass
class SpikeTrace:
    """Binary spike records per spiking stage: arrays of shape [T, N, ...]."""

    stage_names: list[str]
    spikes: list[Array]
    t_steps: int
    batch: int

    def total_spikes(self) -> float:
        return float(sum(s.sum(dtype=np.float64) for s in self.spikes))

    def spikes_per_sample(self) -> float:
        return self.total_spikes() / self.batch if self.batch else 0.0

    def save(self, path):
        np.savez_compressed(
            path,
            t_steps=self.t_steps,
            batch=self.batch,
            stage_names=np.array(self.stage_names),
            **{f"stage{i}": s for i, s in enumerate(self.spikes)},
        )

    @staticmethod
    def load(path) -> "SpikeTrace":
        payload = np.load(path, allow_pickle=False)
        names = [str(n) for n in payload["stage_names"]]
        spikes = [payload[f"stage{i}"] for i in range(len(names))]
        return SpikeTrace(names, spikes, int(payload["t_steps"]), int(payload["batch"]))


class SnnModel:
    """Spiking interpretation of a NetworkSpec with per-stage thresholds."""

    def __init__(
        self,
        spec: NetworkSpec,
        params: dict[str, Tensor],
        buffers: dict[str, Array],
        thresholds: dict[str, Tensor],
        tau: float = 1.0,
        mask: SparsityMask | None = None,
    ):
        if not isinstance(spec.layers[-1], Linear):
            raise ValueError("the final layer must be linear (output integrator)")
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.thresholds = thresholds
        self.tau = tau
        self.mask = mask
        self._stages = spec.spike_stages()

    @property
    def stage_count(self) -> int:
        return len(self._stages)

    def threshold(self, stage: int) -> Tensor:
        return self.thresholds[f"vth{stage}"]

    def threshold_values(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in sorted(self.thresholds.items())}

    def clone(self) -> "SnnModel":
        params = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()
        }
        thresholds = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
            for k, v in self.thresholds.items()
        }
        return SnnModel(
            self.spec,
            params,
            {k: v.copy() for k, v in self.buffers.items()},
            thresholds,
            self.tau,
            self.mask,
        )

    # ------------------------------------------------------------------
    def forward(
        self,
        x: Tensor,
        t_steps: int,
        surrogate: SurrogateSpec = TRAINING_SURROGATE,
        train: bool = False,
        update_stats: bool | None = None,
        record_trace: bool = False,
        stop_before_stage: int | None = None,
    ):
        """Run T timesteps; returns (logits, SpikeTrace | None).

        `train` selects batch statistics in the tdBN layers; running averages
        are only updated when both train and update_stats hold. With
        `stop_before_stage` set, returns the stacked post-norm input currents
        feeding that spiking stage instead (used by threshold calibration).
        """
        if surrogate.family == "conversion_approx":
            if stop_before_stage is not None:
                raise ValueError("calibration must use actual spiking dynamics")
            return self._conversion_clone(x, t_steps, train), None
        if update_stats is None:
            update_stats = train
        n = x.data.shape[0]
        if t_steps == 0:
            return Tensor(np.zeros((n, self.spec.num_classes), dtype=np.float32)), None
        h = x  # current activation; either one frame (reps=1) or stacked T frames
        reps = 1
        stage = 0
        trace_spikes: list[Array] = []
        trace_names: list[str] = []
        for i, layer in enumerate(self.spec.layers):
            name = f"layer{i}"
            if isinstance(layer, Conv):
                h = conv2d(h, self.params[f"{name}.weight"], layer.stride, layer.padding)
                if layer.bias:
                    h = add(h, reshape(self.params[f"{name}.bias"], (1, -1, 1, 1)))
            elif isinstance(layer, Linear):
                h = matmul(h, self.params[f"{name}.weight"])
                if layer.bias:
                    h = add(h, reshape(self.params[f"{name}.bias"], (1, -1)))
            elif isinstance(layer, BatchNorm):
                h = batchnorm(
                    h,
                    self.params[f"{name}.phi"],
                    self.params[f"{name}.omega"],
                    self.buffers[f"{name}.running_mean"],
                    self.buffers[f"{name}.running_var"],
                    train=train,
                    momentum=layer.momentum,
                    eps=layer.eps,
                    update_stats=train and update_stats,
                )
            elif isinstance(layer, AvgPool):
                h = avgpool2d(h, layer.kernel)
            elif isinstance(layer, Flatten):
                h = flatten(h)
            elif isinstance(layer, Relu):
                if stop_before_stage is not None and stage == stop_before_stage:
                    return h, reps
                v_th = self.threshold(stage)
                if surrogate.family == "bptr":
                    h = _bptr_stage(h, reps, t_steps, v_th)
                else:
                    parts = split0(h, t_steps) if reps == t_steps else [h] * t_steps
                    outs = []
                    v = None
                    for t in range(t_steps):
                        o, v = lif_step(v, parts[t], v_th, self.tau, surrogate)
                        outs.append(o)
                    h = concat0(outs)
                reps = t_steps
                if record_trace:
                    trace_spikes.append(
                        h.data.reshape((t_steps, n) + h.data.shape[1:]).astype(np.uint8)
                    )
                    trace_names.append(f"stage{stage}")
                stage += 1
        if stop_before_stage is not None:
            raise ValueError(f"stage {stop_before_stage} not reached (have {stage})")
        logits = sum_time(h, t_steps) if reps == t_steps else scale(h, float(t_steps))
        trace = (
            SpikeTrace(trace_names, trace_spikes, t_steps, n) if record_trace else None
        )
        return logits, trace

    def _conversion_clone(self, x: Tensor, t_steps: int, train: bool) -> Tensor:
        """ReLU clone sharing weights: spiking stages become relu(I)/V_th and
        the output is scaled by T to match the integrated-potential scale.
        Thresholds act as constants on this gradient path."""
        h = x
        stage = 0
        for i, layer in enumerate(self.spec.layers):
            name = f"layer{i}"
            if isinstance(layer, Conv):
                h = conv2d(h, self.params[f"{name}.weight"], layer.stride, layer.padding)
                if layer.bias:
                    h = add(h, reshape(self.params[f"{name}.bias"], (1, -1, 1, 1)))
            elif isinstance(layer, Linear):
                h = matmul(h, self.params[f"{name}.weight"])
                if layer.bias:
                    h = add(h, reshape(self.params[f"{name}.bias"], (1, -1)))
            elif isinstance(layer, BatchNorm):
                h = batchnorm(
                    h,
                    self.params[f"{name}.phi"],
                    self.params[f"{name}.omega"],
                    self.buffers[f"{name}.running_mean"],
                    self.buffers[f"{name}.running_var"],
                    train=train,
                    update_stats=False,
                    momentum=layer.momentum,
                    eps=layer.eps,
                )
            elif isinstance(layer, AvgPool):
                h = avgpool2d(h, layer.kernel)
            elif isinstance(layer, Flatten):
                h = flatten(h)
            elif isinstance(layer, Relu):
                h = scale(relu(h), 1.0 / float(self.threshold(stage).data))
                stage += 1
        return scale(h, float(t_steps))


def _bptr_stage(h: Tensor, reps: int, t_steps: int, v_th: Tensor) -> Tensor:
    """Spiking stage whose backward is the rate-derivative straight-through:
    d o(t) / d I(t) = 1(0 < mean_t I / V_th < 1) / V_th, uniform over t; the
    membrane recurrence carries no gradient in this mode."""
    vth_val = float(v_th.data)
    if reps == t_steps:
        n = h.data.shape[0] // t_steps
        frames = h.data.reshape((t_steps, n) + h.data.shape[1:])
    else:
        n = h.data.shape[0]
        frames = np.broadcast_to(h.data, (t_steps,) + h.data.shape)
    v = np.zeros_like(frames[0])
    spikes = np.empty_like(frames)
    for t in range(t_steps):
        v = v + frames[t]
        o = (v >= vth_val).astype(np.float32)
        spikes[t] = o
        v = v * (1.0 - o)
    out = Tensor(spikes.reshape((t_steps * n,) + frames.shape[2:]))
    tape = active_tape()
    if tape is not None and (h.requires_grad or v_th.requires_grad):
        out.requires_grad = True
        m = frames.mean(axis=0) / vth_val
        inside = ((m > 0) & (m < 1)).astype(np.float32)
        g_local = inside / np.float32(vth_val)
        dvth_local = -m * g_local

        def backward(g):
            g_frames = g.reshape((t_steps, n) + frames.shape[2:])
            if reps == t_steps:
                dh = (g_frames * g_local[None]).reshape(h.data.shape)
            else:
                dh = (g_frames * g_local[None]).sum(axis=0)
            dvth = np.float32((g_frames * dvth_local[None]).sum(dtype=np.float64))
            return dh, dvth.reshape(v_th.data.shape)

        tape.record((h, v_th), (out,), backward)
    return out


def snn_forward(
    model: SnnModel,
    x: Tensor,
    t_steps: int,
    surrogate: SurrogateSpec = TRAINING_SURROGATE,
    train: bool = False,
    record_trace: bool = False,
):
    """Logits from integrated output potentials plus an optional spike trace."""
    return model.forward(x, t_steps, surrogate, train=train, record_trace=record_trace)


def collect_preactivations(
    model: SnnModel, x: Array, t_steps: int, stage: int
) -> Array:
    """Stacked post-norm input currents feeding the given spiking stage,
    using batch statistics without touching running averages."""
    with no_grad():
        h, _reps = model.forward(
            Tensor(x), t_steps, train=True, update_stats=False, stop_before_stage=stage
        )
    return h.data


class SnnGradModel:
    """Attack adapter for the SNN; carries the surrogate used for backward."""

    def __init__(
        self,
        model: SnnModel,
        t_steps: int,
        surrogate: SurrogateSpec = TRAINING_SURROGATE,
        loss: str = "ce",
        ref_logits: Array | None = None,
        batch_stats: bool = False,
    ):
        if loss not in ("ce", "kl"):
            raise ValueError(f"unknown attack loss {loss!r}")
        if loss == "kl" and ref_logits is None:
            raise ValueError("kl attack loss needs reference logits")
        self.model = model
        self.t_steps = t_steps
        self.surrogate = surrogate
        self.loss = loss
        self.ref_logits = ref_logits
        self.batch_stats = batch_stats

    def with_surrogate(self, surrogate: SurrogateSpec) -> "SnnGradModel":
        return SnnGradModel(
            self.model, self.t_steps, surrogate, self.loss, self.ref_logits, self.batch_stats
        )

    def _forward(self, x: Tensor) -> Tensor:
        logits, _ = self.model.forward(
            x,
            self.t_steps,
            self.surrogate,
            train=self.batch_stats,
            update_stats=False,
        )
        return logits

    def predict(self, x: Array) -> Array:
        with no_grad():
            logits, _ = self.model.forward(
                Tensor(x),
                self.t_steps,
                TRAINING_SURROGATE,
                train=self.batch_stats,
                update_stats=False,
            )
        return np.argmax(logits.data, axis=1)

    def logits(self, x: Array) -> Array:
        with no_grad():
            return self._forward(Tensor(x)).data

    def input_grad(self, x: Array, y: Array) -> Array:
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            logits = self._forward(xt)
            if self.loss == "ce":
                loss = cross_entropy(logits, y)
            else:
                ref = self.ref_logits
                if ref.shape[0] != x.shape[0]:
                    raise ValueError("reference logits batch mismatch")
                loss = kl_divergence(logits, Tensor(ref))
            tape.backward(loss)
        return xt.grad if xt.grad is not None else np.zeros_like(x)
