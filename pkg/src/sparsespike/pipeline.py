"""Stage runners behind the service endpoints: dataset resolution, stage
execution, artifact emission (checkpoints, CSV/JSON reports)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import attacks, checkpoint as ckpt_io, data, energy as energy_mod, schemas
from .conversion import ConversionConfig, convert, extract_mask
from .network import PRESETS, AnnModel
from .pruning import PruneConfig, finetune_sparse_ann, lwm_scores, mask_from_scores, optimize_scores
from .snn import (
    SnnGradModel,
    SnnModel,
    SurrogateSpec,
    default_ensemble_members,
    snn_forward,
)
from .snn_finetune import FinetuneConfig, evaluate_snn_accuracy, finetune_snn
from .tensor import Rng, Tensor, no_grad
from .train import TrainConfig, evaluate_accuracy, pretrain_robust_ann


class PipelineError(ValueError):
    pass


def resolve_dataset(cfg: schemas.DatasetConfig, seed: int) -> tuple[data.Dataset, data.Dataset]:
    ds_seed = cfg.seed if cfg.seed is not None else seed
    if cfg.kind == "blobs":
        ds = data.make_blobs(ds_seed, cfg.n, cfg.classes, dim=cfg.dim, spread=cfg.spread)
    elif cfg.kind == "glyphs":
        ds = data.make_glyphs(
            ds_seed,
            cfg.n,
            cfg.classes,
            size=cfg.size,
            noise=cfg.noise,
            max_shift=cfg.max_shift,
            amplitude=cfg.amplitude,
        )
    elif cfg.kind == "idx":
        if not cfg.images or not cfg.labels:
            raise PipelineError("idx datasets need both 'images' and 'labels' paths")
        ds = data.load_idx_pair(cfg.images, cfg.labels)
    elif cfg.kind == "raw":
        if not cfg.manifest:
            raise PipelineError("raw datasets need a 'manifest' path")
        ds = data.load_raw_container(cfg.manifest)
    else:  # pragma: no cover - pydantic guards the literal
        raise PipelineError(f"unknown dataset kind {cfg.kind}")
    return data.train_test_split(ds, cfg.test_fraction, ds_seed)


def _outdir(req) -> Path:
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_history_csv(path: Path, history: list[dict]):
    if not history:
        path.write_text("")
        return
    keys = sorted({k for rec in history for k in rec})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def _attack_cfg(cfg: schemas.AttackConfig | None) -> attacks.AttackSpec | None:
    return None if cfg is None else cfg.to_spec()


def run_pretrain(req: schemas.PretrainRequest) -> schemas.StageResponse:
    if req.arch not in PRESETS:
        raise PipelineError(f"unknown arch {req.arch!r}; have {sorted(PRESETS)}")
    train_ds, test_ds = resolve_dataset(req.dataset, req.seed)
    spec = PRESETS[req.arch](train_ds.classes)
    if spec.input_shape != train_ds.x.shape[1:]:
        raise PipelineError(
            f"arch {req.arch} expects input {spec.input_shape}, dataset has {train_ds.x.shape[1:]}"
        )
    rng = Rng(req.seed)
    model = AnnModel.initialize(spec, rng.spawn("init"))
    cfg = TrainConfig(
        epochs=req.epochs,
        batch_size=req.batch_size,
        lr=req.lr,
        momentum=req.momentum,
        weight_decay=req.weight_decay,
        schedule=req.schedule,
        loss=req.loss,
        trades_lambda=req.trades_lambda,
        attack=_attack_cfg(req.attack),
        seed=req.seed,
    )
    history = pretrain_robust_ann(
        model, train_ds.x, train_ds.y, cfg, rng, x_eval=test_ds.x, y_eval=test_ds.y
    )
    out = _outdir(req)
    ckpt = ckpt_io.Checkpoint.from_ann(
        model,
        metadata={"stage": "pretrain", "seed": req.seed, "request": req.model_dump(exclude={"out", "tag", "checkpoint"})},
    )
    path = out / f"{req.tag}.ckpt"
    digest = ckpt_io.save(ckpt, path)
    hist_path = out / f"{req.tag}_history.csv"
    _write_history_csv(hist_path, history)
    metrics = {
        "train_acc": history[-1]["train_acc"] if history else None,
        "eval_acc": history[-1].get("eval_acc") if history else None,
        "epochs": req.epochs,
    }
    return schemas.StageResponse(
        stage="pretrain",
        checkpoint=str(path),
        checkpoint_sha256=digest,
        metrics=metrics,
        files={"history": str(hist_path)},
    )


def run_prune(req: schemas.PruneRequest) -> schemas.StageResponse:
    loaded = ckpt_io.load(req.checkpoint)
    model = loaded.ann_model()
    train_ds, test_ds = resolve_dataset(req.dataset, req.seed)
    rng = Rng(req.seed)
    prune_cfg = PruneConfig(
        kappa=req.kappa,
        mode=req.method,
        score_epochs=req.score_epochs,
        score_lr=req.score_lr,
        quota_lr=req.quota_lr,
        quota_penalty=req.quota_penalty,
        loss=req.loss,
        trades_lambda=req.trades_lambda,
        attack=_attack_cfg(req.attack),
        batch_size=req.batch_size,
    )
    if req.method == "lwm":
        scores = lwm_scores(model)
        granularity = "uniform"
    else:
        scores = optimize_scores(model, train_ds.x, train_ds.y, prune_cfg, rng.spawn("scores"))
        granularity = "uniform" if req.method == "uniform" else req.method
    mask = mask_from_scores(scores, req.kappa, granularity, spec=model.spec)
    ft_cfg = TrainConfig(
        epochs=req.finetune_epochs,
        batch_size=req.batch_size,
        lr=req.finetune_lr,
        loss=req.loss,
        trades_lambda=req.trades_lambda,
        attack=_attack_cfg(req.attack),
        seed=req.seed,
    )
    history = finetune_sparse_ann(model, mask, train_ds.x, train_ds.y, ft_cfg, rng.spawn("sft"))
    out = _outdir(req)
    metrics = {
        "kappa": req.kappa,
        "achieved_sparsity": mask.achieved_sparsity(),
        "layer_sparsities": mask.layer_sparsities(),
        "eval_acc": evaluate_accuracy(model, test_ds.x, test_ds.y),
    }
    ckpt = ckpt_io.Checkpoint.from_ann(
        model,
        metadata={
            "stage": "prune",
            "seed": req.seed,
            "parent_sha256": ckpt_io.sha256(req.checkpoint),
            "method": req.method,
            "kappa": req.kappa,
            "layer_sparsities": metrics["layer_sparsities"],
            "request": req.model_dump(exclude={"out", "tag", "checkpoint"}),
        },
        mask=mask,
    )
    path = out / f"{req.tag}.ckpt"
    digest = ckpt_io.save(ckpt, path)
    hist_path = out / f"{req.tag}_history.csv"
    _write_history_csv(hist_path, history)
    return schemas.StageResponse(
        stage="prune",
        checkpoint=str(path),
        checkpoint_sha256=digest,
        metrics=metrics,
        files={"history": str(hist_path)},
    )


def run_convert(req: schemas.ConvertRequest) -> schemas.StageResponse:
    loaded = ckpt_io.load(req.checkpoint)
    if loaded.thresholds:
        raise PipelineError("checkpoint is already a spiking model")
    model = loaded.ann_model()
    train_ds, _ = resolve_dataset(req.dataset, req.seed)
    rng = Rng(req.seed)
    order = rng.spawn("calib").permutation(len(train_ds))
    batches = []
    for b in range(req.calib_batches):
        idx = order[b * req.batch_size : (b + 1) * req.batch_size]
        if idx.size == 0:
            raise PipelineError("not enough samples for the requested calibration batches")
        batches.append(train_ds.x[idx])
    cfg = ConversionConfig(
        t_c=req.t_c,
        rho=req.rho,
        lam=req.lam,
        calib_batches=req.calib_batches,
        batch_size=req.batch_size,
        t_steps=req.t_steps,
        tau=req.tau,
        pooled=req.pooled,
    )
    snn, meta = convert(model, cfg, batches, mask=loaded.mask)
    out = _outdir(req)
    metadata = {
        "stage": "convert",
        "seed": req.seed,
        "parent_stage": loaded.metadata.get("stage"),
        "parent_sha256": ckpt_io.sha256(req.checkpoint),
        "conversion": meta,
        "tau": req.tau,
        "request": req.model_dump(exclude={"out", "tag", "checkpoint"}),
    }
    ckpt = ckpt_io.Checkpoint.from_snn(snn, metadata=metadata)
    path = out / f"{req.tag}.ckpt"
    digest = ckpt_io.save(ckpt, path)
    metrics = {
        "thresholds": meta["thresholds"],
        "thresholds_raw": meta["thresholds_raw"],
        "mask_sparsity": snn.mask.achieved_sparsity() if snn.mask else 0.0,
    }
    return schemas.StageResponse(
        stage="convert", checkpoint=str(path), checkpoint_sha256=digest, metrics=metrics
    )


def run_finetune(req: schemas.FinetuneRequest) -> schemas.StageResponse:
    loaded = ckpt_io.load(req.checkpoint)
    rng = Rng(req.seed)
    if req.init == "random":
        # end-to-end baseline: fresh weights, unit thresholds, inherited mask
        spec = loaded.spec
        fresh = AnnModel.initialize(spec, rng.spawn("init"))
        thresholds = {
            f"vth{j}": Tensor(np.float32(1.0), requires_grad=True)
            for j in range(len(spec.spike_stages()))
        }
        snn = SnnModel(spec, fresh.params, fresh.buffers, thresholds, tau=1.0, mask=loaded.mask)
    else:
        snn = loaded.snn_model()
    if snn.mask is None:
        prunable = [name for name in snn.params if name.endswith(".weight")]
        snn.mask = extract_mask(snn.params, prunable)
    train_ds, test_ds = resolve_dataset(req.dataset, req.seed)
    cfg = FinetuneConfig(
        epochs=req.epochs,
        beta=req.beta,
        eps=req.eps,
        inner=req.inner,
        inner_steps=req.inner_steps,
        alpha_r=req.alpha_r,
        lr=req.lr,
        momentum=req.momentum,
        weight_decay=req.weight_decay,
        schedule=req.schedule,
        t_steps=req.t_steps,
        batch_size=req.batch_size,
        threshold_floor=req.threshold_floor,
        probe_samples=req.probe_samples,
    )
    history = finetune_snn(
        snn, snn.mask, train_ds.x, train_ds.y, cfg, rng, x_probe=test_ds.x, y_probe=test_ds.y
    )
    out = _outdir(req)
    metadata = {
        "stage": "finetune",
        "seed": req.seed,
        "parent_stage": loaded.metadata.get("stage"),
        "parent_sha256": ckpt_io.sha256(req.checkpoint),
        "tau": snn.tau,
        "request": req.model_dump(exclude={"out", "tag", "checkpoint"}),
    }
    ckpt = ckpt_io.Checkpoint.from_snn(snn, metadata=metadata)
    path = out / f"{req.tag}.ckpt"
    digest = ckpt_io.save(ckpt, path)
    hist_path = out / f"{req.tag}_history.csv"
    _write_history_csv(hist_path, history)
    metrics = {
        "final": history[-1] if history else {},
        "eval_acc": evaluate_snn_accuracy(snn, test_ds.x, test_ds.y, req.t_steps),
        "sparsity": snn.mask.achieved_sparsity() if snn.mask else 0.0,
    }
    return schemas.StageResponse(
        stage="finetune",
        checkpoint=str(path),
        checkpoint_sha256=digest,
        metrics=metrics,
        files={"history": str(hist_path)},
    )


def parse_surrogate(label: str) -> SurrogateSpec:
    """Compact member syntax: pcw:G, exp:D:S, rect:G, ste, bptr, conversion."""
    parts = label.split(":")
    head = parts[0].strip().lower()
    if head in ("pcw", "piecewise_linear"):
        return SurrogateSpec("piecewise_linear", gamma_w=float(parts[1]))
    if head in ("exp", "exponential"):
        return SurrogateSpec("exponential", gamma_d=float(parts[1]), gamma_s=float(parts[2]))
    if head in ("rect", "rectangular"):
        return SurrogateSpec("rectangular", gamma_w=float(parts[1]))
    if head == "ste":
        return SurrogateSpec("ste")
    if head == "bptr":
        return SurrogateSpec("bptr")
    if head in ("conversion", "conversion_approx"):
        return SurrogateSpec("conversion_approx")
    raise PipelineError(f"unknown ensemble member {label!r}")


def _ensemble_spec(req: schemas.EvaluateRequest) -> attacks.EnsembleSpec:
    if req.ensemble_members is None:
        members = default_ensemble_members()
    else:
        members = tuple(parse_surrogate(m) for m in req.ensemble_members)
    return attacks.EnsembleSpec(members, req.stop_at_first_success)


def _base_spec(kind: str, eps: float, req: schemas.EvaluateRequest) -> attacks.AttackSpec:
    return attacks.AttackSpec(
        kind=kind,
        eps=eps,
        steps=req.pgd_steps if kind == "pgd" else 1,
        random_start=req.random_start and kind == "pgd",
    )


def run_evaluate(req: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
    loaded = ckpt_io.load(req.checkpoint)
    _, test_ds = resolve_dataset(req.dataset, req.seed)
    cap = min(req.sample_cap, len(test_ds)) if req.sample_cap else len(test_ds)
    x, y = test_ds.x[:cap], test_ds.y[:cap]
    rng = Rng(req.seed)
    is_snn = bool(loaded.thresholds)
    if is_snn:
        batch_stats = (
            req.batch_stats
            if req.batch_stats is not None
            else loaded.metadata.get("stage") == "convert"
        )
        model = loaded.snn_model()
        grad_model = SnnGradModel(model, req.t_steps, batch_stats=batch_stats)
        ens = _ensemble_spec(req)
    else:
        grad_model = attacks.AnnGradModel(loaded.ann_model())
    clean_correct = 0
    for start in range(0, cap, req.batch_size):
        xb, yb = x[start : start + req.batch_size], y[start : start + req.batch_size]
        clean_correct += int((grad_model.predict(xb) == yb).sum())
    clean_acc = clean_correct / cap if cap else 0.0
    rows = []
    dumps = {}
    for kind in req.attacks:
        for eps in req.eps_grid:
            spec = _base_spec(kind, float(eps), req)
            fooled_total = 0
            adv_parts = []
            for start in range(0, cap, req.batch_size):
                xb, yb = x[start : start + req.batch_size], y[start : start + req.batch_size]
                arng = rng.spawn(f"{kind}-{eps}-{start}")
                if is_snn:
                    x_adv, fooled = attacks.ensemble_attack(grad_model, xb, yb, spec, ens, arng)
                else:
                    x_adv = attacks.run_attack(grad_model, xb, yb, spec, arng)
                    fooled = grad_model.predict(x_adv) != yb
                fooled_total += int(fooled.sum())
                if req.dump_adversarial:
                    adv_parts.append(x_adv)
            rows.append(
                schemas.EvalRow(
                    attack=kind,
                    eps=float(eps),
                    robust_acc=1.0 - fooled_total / cap if cap else 0.0,
                    fooled=fooled_total,
                    n=cap,
                )
            )
            if req.dump_adversarial:
                dumps[f"{kind}_{eps:.6f}"] = np.concatenate(adv_parts, axis=0)
    out = _outdir(req)
    report = {
        "stage": "evaluate",
        "checkpoint": req.checkpoint,
        "target": "snn" if is_snn else "ann",
        "clean_acc": clean_acc,
        "rows": [r.model_dump() for r in rows],
    }
    json_path = out / f"{req.tag}.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    csv_path = out / f"{req.tag}.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["attack", "eps", "robust_acc", "fooled", "n"])
        for r in rows:
            writer.writerow([r.attack, r.eps, r.robust_acc, r.fooled, r.n])
    files = {"report": str(json_path), "csv": str(csv_path)}
    if dumps:
        dump_path = out / f"{req.tag}_adv.npz"
        np.savez_compressed(dump_path, **dumps)
        files["adversarial"] = str(dump_path)
    return schemas.EvaluateResponse(clean_acc=clean_acc, rows=rows, files=files)


def run_energy(req: schemas.EnergyRequest) -> schemas.EnergyResponse:
    loaded = ckpt_io.load(req.checkpoint)
    if not loaded.thresholds:
        raise PipelineError("energy accounting needs a spiking checkpoint")
    model = loaded.snn_model()
    batch_stats = (
        req.batch_stats
        if req.batch_stats is not None
        else loaded.metadata.get("stage") == "convert"
    )
    _, test_ds = resolve_dataset(req.dataset, req.seed)
    cap = min(req.sample_cap, len(test_ds)) if req.sample_cap else len(test_ds)
    traces = []
    with no_grad():
        for start in range(0, cap, req.batch_size):
            xb = test_ds.x[start : start + req.batch_size]
            _, trace = snn_forward(
                model,
                Tensor(xb),
                req.t_steps,
                train=batch_stats,
                record_trace=True,
            )
            traces.append(trace)
    trace = energy_mod.merge_traces(traces)
    fanouts = energy_mod.stage_fanouts(model)
    report = energy_mod.estimate_energy(trace, fanouts, e_ac=req.e_ac)
    if req.reference_report:
        ref = energy_mod.load_report(req.reference_report)
        report.compare_to(ref, req.reference_report)
    out = _outdir(req)
    json_path = out / f"{req.tag}.json"
    energy_mod.save_report(report, json_path)
    csv_path = out / f"{req.tag}_layers.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "neurons", "spikes_per_sample", "rate", "mean_fanout", "fanout_term"])
        for row in report.per_layer:
            writer.writerow(
                [row["stage"], row["neurons"], row["spikes_per_sample"], row["rate"],
                 row["mean_fanout"], row["fanout_term"]]
            )
    return schemas.EnergyResponse(
        report=report.to_dict(), files={"report": str(json_path), "csv": str(csv_path)}
    )
