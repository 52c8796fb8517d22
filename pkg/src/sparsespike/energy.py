"""Spike-activity accounting and the accumulate-operation energy model.

Every spiking stage's energy contribution is the number of accumulate
operations its spikes trigger: spikes weighted by the neuron's active
fanout, the count of nonzero downstream synapses reading that neuron.
Fanouts are always computed by exact connection enumeration; the dense
closed forms (next-layer filter count, or c*k^2 scaled by the feature-map
ratio) serve as test oracles on interior neurons only. Average pooling
between stages folds into the position mapping: the pooled cell's fanout is
apportioned equally over its constituent neurons. The direct-coded input
layer performs multiply-accumulate work and is excluded from the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .network import AvgPool, BatchNorm, Conv, Flatten, Linear, NetworkSpec, Relu
from .snn import SnnModel, SpikeTrace
from .tensor import Array


@dataclass
class EnergyReport:
    e_ac: float
    t_steps: int
    samples: int
    total_spikes_per_sample: float
    possible_spikes_per_sample: float  # neurons * T over spiking stages
    spike_ratio: float  # coding efficiency: actual / possible
    per_layer: list[dict]
    energy_per_sample: float  # E_SNN in units of e_ac
    reference: dict | None = None  # ratios vs a named reference report

    def to_dict(self) -> dict:
        return {
            "e_ac": self.e_ac,
            "t_steps": self.t_steps,
            "samples": self.samples,
            "total_spikes_per_sample": self.total_spikes_per_sample,
            "possible_spikes_per_sample": self.possible_spikes_per_sample,
            "spike_ratio": self.spike_ratio,
            "per_layer": self.per_layer,
            "energy_per_sample": self.energy_per_sample,
            "reference": self.reference,
        }

    @staticmethod
    def from_dict(d: dict) -> "EnergyReport":
        return EnergyReport(
            d["e_ac"],
            d["t_steps"],
            d["samples"],
            d["total_spikes_per_sample"],
            d["possible_spikes_per_sample"],
            d["spike_ratio"],
            d["per_layer"],
            d["energy_per_sample"],
            d.get("reference"),
        )

    def compare_to(self, ref: "EnergyReport", name: str) -> "EnergyReport":
        """Attach #spikes and energy ratios (reference / this), Table-style."""
        self.reference = {
            "name": name,
            "spikes_ratio": ref.total_spikes_per_sample / self.total_spikes_per_sample
            if self.total_spikes_per_sample
            else float("inf"),
            "energy_ratio": ref.energy_per_sample / self.energy_per_sample
            if self.energy_per_sample
            else float("inf"),
        }
        return self


def _nonzero_weight(model: SnnModel, name: str) -> Array:
    w = model.params[name].data
    nz = w != 0
    if model.mask is not None and name in model.mask.masks:
        nz = nz & (model.mask.masks[name] != 0)
    return nz


def _stage_downstream(spec: NetworkSpec, relu_index: int):
    """(pool_kernel, flattened, next weight layer index) after a spiking stage."""
    pool = 1
    flattened = False
    for j in range(relu_index + 1, len(spec.layers)):
        layer = spec.layers[j]
        if isinstance(layer, AvgPool):
            pool *= layer.kernel
        elif isinstance(layer, Flatten):
            flattened = True
        elif isinstance(layer, (Conv, Linear)):
            return pool, flattened, j
        elif isinstance(layer, (BatchNorm, Relu)):
            raise ValueError(
                f"unsupported layer between spiking stage {relu_index} and the next weights"
            )
    raise ValueError(f"spiking stage at layer {relu_index} has no downstream weights")


def _valid_positions(k: int, stride: int, padding: int, in_size: int, out_size: int) -> Array:
    """A[tap, position] = 1 iff some output location reads that input position
    through that kernel tap."""
    a = np.zeros((k, in_size), dtype=np.float64)
    for ki in range(k):
        for y in range(in_size):
            off = y + padding - ki
            if off % stride == 0 and 0 <= off // stride < out_size:
                a[ki, y] = 1.0
    return a


def active_fanout(model: SnnModel, stage: int) -> Array:
    """Per-neuron active outgoing connection counts for a spiking stage.

    Shape matches the stage output ([C,H,W] or [D]). Counts are exact sums of
    (output position, kernel tap) pairs over nonzero weights; pooling divides
    the pooled cell's count over its k^2 members, matching the feature-map
    ratio normalization of the dense closed form.
    """
    spec = model.spec
    stages = spec.spike_stages()
    if not 0 <= stage < len(stages):
        raise ValueError(f"stage {stage} out of range")
    relu_index = stages[stage]
    shapes = spec.shapes()
    stage_shape = shapes[relu_index]
    pool, flattened, nxt = _stage_downstream(spec, relu_index)
    next_layer = spec.layers[nxt]
    nz = _nonzero_weight(model, f"layer{nxt}.weight")
    if isinstance(next_layer, Linear):
        per_input = nz.sum(axis=1).astype(np.float64)  # weight stored [in, out]
        if not flattened and len(stage_shape) != 1:
            raise ValueError("linear after an unflattened conv stage")
        if len(stage_shape) == 1:
            return per_input
        c, h, w = stage_shape
        pooled = per_input.reshape(c, h // pool, w // pool)
        psi = np.repeat(np.repeat(pooled, pool, axis=1), pool, axis=2) / (pool * pool)
        return psi
    # conv consumer
    c, h, w = stage_shape
    h_in, w_in = h // pool, w // pool
    k = next_layer.kernel
    out_c, out_h, out_w = shapes[nxt]
    nz_c = nz.sum(axis=0).astype(np.float64)  # [C, k, k]
    rows = _valid_positions(k, next_layer.stride, next_layer.padding, h_in, out_h)
    cols = _valid_positions(k, next_layer.stride, next_layer.padding, w_in, out_w)
    pooled = np.einsum("ckl,kh,lw->chw", nz_c, rows, cols)
    if pool == 1:
        return pooled
    psi = np.repeat(np.repeat(pooled, pool, axis=1), pool, axis=2) / (pool * pool)
    return psi


def stage_fanouts(model: SnnModel) -> list[Array]:
    return [active_fanout(model, s) for s in range(model.stage_count)]


def estimate_energy(trace: SpikeTrace, fanouts: list[Array], e_ac: float = 1.0) -> EnergyReport:
    """Accumulate-operation energy: e_ac * sum over stages, timesteps and
    neurons of fanout * spike, averaged over the traced samples."""
    if len(fanouts) != len(trace.spikes):
        raise ValueError(
            f"fanouts cover {len(fanouts)} stages but trace has {len(trace.spikes)}"
        )
    per_layer = []
    total_energy = 0.0
    total_spikes = 0.0
    possible = 0.0
    n = max(trace.batch, 1)
    for name, spikes, psi in zip(trace.stage_names, trace.spikes, fanouts):
        if spikes.shape[2:] != psi.shape:
            raise ValueError(f"{name}: trace shape {spikes.shape[2:]} vs fanout {psi.shape}")
        spk = spikes.astype(np.float64)
        term = float((spk * psi[None, None]).sum() / n)
        layer_spikes = float(spk.sum() / n)
        neurons = int(psi.size)
        per_layer.append(
            {
                "stage": name,
                "neurons": neurons,
                "spikes_per_sample": layer_spikes,
                "rate": layer_spikes / (neurons * trace.t_steps) if neurons else 0.0,
                "mean_fanout": float(psi.mean()),
                "fanout_term": term,
            }
        )
        total_energy += term
        total_spikes += layer_spikes
        possible += neurons * trace.t_steps
    return EnergyReport(
        e_ac=e_ac,
        t_steps=trace.t_steps,
        samples=trace.batch,
        total_spikes_per_sample=total_spikes,
        possible_spikes_per_sample=possible,
        spike_ratio=total_spikes / possible if possible else 0.0,
        per_layer=per_layer,
        energy_per_sample=e_ac * total_energy,
    )


def spike_stats(trace: SpikeTrace) -> dict:
    """Per-layer firing rates, totals, and the coding-efficiency ratio."""
    n = max(trace.batch, 1)
    layers = []
    total = 0.0
    possible = 0.0
    for name, spikes in zip(trace.stage_names, trace.spikes):
        spk = float(spikes.sum(dtype=np.float64) / n)
        neurons = int(np.prod(spikes.shape[2:]))
        layers.append(
            {
                "stage": name,
                "neurons": neurons,
                "spikes_per_sample": spk,
                "rate": spk / (neurons * trace.t_steps) if neurons else 0.0,
            }
        )
        total += spk
        possible += neurons * trace.t_steps
    return {
        "total_spikes_per_sample": total,
        "possible_spikes_per_sample": possible,
        "spike_ratio": total / possible if possible else 0.0,
        "per_layer": layers,
    }


def merge_traces(traces: list[SpikeTrace]) -> SpikeTrace:
    """Concatenate traces along the sample axis (same stages and T)."""
    first = traces[0]
    spikes = [
        np.concatenate([t.spikes[i] for t in traces], axis=1) for i in range(len(first.spikes))
    ]
    return SpikeTrace(first.stage_names, spikes, first.t_steps, sum(t.batch for t in traces))


def save_report(report: EnergyReport, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)


def load_report(path) -> EnergyReport:
    with open(path) as f:
        return EnergyReport.from_dict(json.load(f))
