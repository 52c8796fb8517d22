"""Sparse ANN-to-SNN conversion: weight transfer, threshold calibration,
threshold scaling, and sparsity-mask extraction.

Calibration walks spiking stages from the input: direct-coded calibration
batches run for T_c timesteps, the post-norm input currents of the stage are
collected, and the stage threshold becomes the running maximum over batches
of each batch's nearest-rank percentile. Earlier stages therefore shape the
spike statistics that later stages are calibrated on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import AnnModel, BatchNorm, Conv, Linear
from .pruning import SparsityMask
from .snn import SnnModel, collect_preactivations
from .tensor import Array, Tensor


class CalibrationError(RuntimeError):
    pass


@dataclass
class ConversionConfig:
    t_c: int = 100  # calibration timesteps
    rho: float = 99.7  # percentile
    lam: float = 0.3  # threshold scaling factor
    calib_batches: int = 10
    batch_size: int = 64
    t_steps: int = 8  # target simulation horizon
    tau: float = 1.0
    pooled: bool = False  # single pooled distribution instead of per-batch max

    def __post_init__(self):
        if not 0 < self.rho <= 100:
            raise ValueError("rho must lie in (0, 100]")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        if self.t_c < self.t_steps:
            raise ValueError("calibration horizon t_c must be >= t_steps")


def nearest_rank_percentile(values: Array, rho: float) -> float:
    """Exact order statistic: the ceil(rho/100 * n)-th smallest value."""
    flat = np.sort(values, axis=None)
    if flat.size == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(rho / 100.0 * flat.size))
    return float(flat[rank - 1])


def transfer_weights(ann: AnnModel, tau: float = 1.0, mask: SparsityMask | None = None) -> SnnModel:
    """Copy ANN parameters verbatim into a spiking model.

    BatchNorm running statistics are reset to (0, 1); they are re-estimated
    on spiking data during finetuning. Thresholds start at zero so the
    calibration max-update is well defined.
    """
    params = {
        k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in ann.params.items()
    }
    buffers = {}
    for i, layer in enumerate(ann.spec.layers):
        if isinstance(layer, BatchNorm):
            c = params[f"layer{i}.phi"].data.shape[0]
            buffers[f"layer{i}.running_mean"] = np.zeros(c, dtype=np.float32)
            buffers[f"layer{i}.running_var"] = np.ones(c, dtype=np.float32)
    thresholds = {
        f"vth{j}": Tensor(np.float32(0.0), requires_grad=True)
        for j in range(len(ann.spec.spike_stages()))
    }
    return SnnModel(ann.spec, params, buffers, thresholds, tau=tau, mask=mask)


def calibrate_thresholds(
    snn: SnnModel, calib_batches: list[Array], cfg: ConversionConfig
) -> dict[str, float]:
    """Set stage thresholds in place; returns the calibrated values."""
    if not calib_batches:
        raise ValueError("calibration needs at least one batch")
    out: dict[str, float] = {}
    for stage in range(snn.stage_count):
        if cfg.pooled:
            pool = [
                collect_preactivations(snn, xb, cfg.t_c, stage).ravel() for xb in calib_batches
            ]
            v_th = nearest_rank_percentile(np.concatenate(pool), cfg.rho)
        else:
            v_th = 0.0
            for xb in calib_batches:
                vals = collect_preactivations(snn, xb, cfg.t_c, stage)
                v_th = max(v_th, nearest_rank_percentile(vals, cfg.rho))
        if v_th <= 0.0:
            raise CalibrationError(
                f"stage {stage}: percentile of pre-activations is {v_th}; "
                "threshold would not be positive"
            )
        snn.thresholds[f"vth{stage}"].data = np.float32(v_th)
        out[f"vth{stage}"] = float(v_th)
    return out


def scale_thresholds(snn: SnnModel, lam: float) -> dict[str, float]:
    """V_th <- lam * V_th for every stage; thresholds stay trainable."""
    if not 0 < lam <= 1:
        raise ValueError("lam must lie in (0, 1]")
    out = {}
    for key, t in snn.thresholds.items():
        t.data = np.float32(float(t.data) * lam)
        t.requires_grad = True
        out[key] = float(t.data)
    return out


def extract_mask(params: dict[str, Tensor], prunable: list[str]) -> SparsityMask:
    """Recover the connectivity mask from exact weight zeros."""
    masks = {name: (params[name].data != 0).astype(np.float32) for name in prunable}
    total = sum(m.size for m in masks.values())
    nnz = sum(int(m.sum()) for m in masks.values())
    kappa = 1.0 - nnz / total if total else 0.0
    return SparsityMask(masks, kappa, "extracted")


def convert(
    ann: AnnModel,
    cfg: ConversionConfig,
    calib_batches: list[Array],
    mask: SparsityMask | None = None,
) -> tuple[SnnModel, dict]:
    """Full conversion: transfer -> calibrate -> scale -> attach mask.

    Weight values are never altered. When a pruning mask is supplied it must
    be consistent with the ANN zeros and is attached as the frozen contract;
    otherwise the mask is extracted from the weights.
    """
    if mask is not None:
        for name, m in mask.masks.items():
            if np.any(ann.params[name].data[m == 0] != 0.0):
                raise ValueError(f"mask inconsistent with nonzero weights in {name}")
    snn = transfer_weights(ann, tau=cfg.tau)
    raw = calibrate_thresholds(snn, calib_batches, cfg)
    scaled = scale_thresholds(snn, cfg.lam)
    snn.mask = mask if mask is not None else extract_mask(snn.params, _prunable(ann))
    metadata = {
        "rho": cfg.rho,
        "lam": cfg.lam,
        "t_c": cfg.t_c,
        "t_steps": cfg.t_steps,
        "tau": cfg.tau,
        "calib_batches": len(calib_batches),
        "batch_size": int(calib_batches[0].shape[0]),
        "pooled": cfg.pooled,
        "thresholds_raw": raw,
        "thresholds": scaled,
    }
    return snn, metadata


def _prunable(ann: AnnModel) -> list[str]:
    return [
        f"layer{i}.weight"
        for i, layer in enumerate(ann.spec.layers)
        if isinstance(layer, (Conv, Linear))
    ]
