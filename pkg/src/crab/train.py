"""Training, evaluation, alpha sweeps, and loss-ablation drivers.

A run writes, under its output directory:
    run_log.jsonl   one record per epoch plus one final record (deterministic)
    timing.json     wall-clock sidecar (kept out of the run log so two runs
                    from one config produce bit-identical logs)
    ckpt_best/      checkpoint with the highest dev UAR (earliest on ties)
    ckpt_last/      checkpoint after the final epoch
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tt
from .checkpoint import load_checkpoint, probes_to_extras, save_checkpoint
from .config import DataSpec, LossSpec, RunConfig, resolve_synth_spec, run_config_from_dict
from .data import Dataset, LabelMap, generate_synthetic, load_split
from .errors import ConfigError, DataError, NumericError
from .layers import LinearParams, init_linear
from .losses import (
    ClassWeights,
    ContrastiveConfig,
    LossConfig,
    Objective,
    class_weights_from_counts,
    combined_objective,
)
from .metrics import MetricReport, confusion, emit_report, report
from .model import (
    GROUP_ENCODER,
    GROUP_MAIN,
    Batch,
    CrabParams,
    ModalityMode,
    forward,
    init_params,
    named_parameters,
)
from .optim import AdamState, OptimConfig, adamw_step, cosine_lr, scale_gradients, zero_gradients

RUN_LOG_NAME = "run_log.jsonl"
PROBE_SEED_STREAM = 7  # sub-stream tag for MLS probe head initialization


def num_eval_threads() -> int:
    raw = os.environ.get("CRAB_NUM_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CRAB_NUM_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# data resolution


def resolve_dataset(cfg: RunConfig) -> tuple[Path, LabelMap]:
    """Return (manifest path, label map), generating synthetic data if needed."""
    data = cfg.data
    if data.manifest is not None:
        if cfg.label_map is None:
            raise ConfigError("external manifests need an explicit label_map")
        manifest = Path(data.manifest)
        if not manifest.exists():
            raise DataError(f"manifest not found: {manifest}")
        return manifest, cfg.label_map

    spec = resolve_synth_spec(data, cfg.seed)
    cache_dir = Path(data.cache_dir) if data.cache_dir else Path(cfg.output_dir) / "dataset"
    manifest = cache_dir / "manifest.jsonl"
    if not manifest.exists():
        generate_synthetic(spec, cache_dir)
    label_map = LabelMap(tuple(spec.labels))
    if cfg.label_map is not None and cfg.label_map.names != label_map.names:
        raise ConfigError("label_map does not match the synthetic generator's labels")
    if len(label_map) != cfg.model.num_classes:
        raise ConfigError(
            f"generator produces {len(label_map)} classes, model declares "
            f"{cfg.model.num_classes}"
        )
    return manifest, label_map


def build_loss_config(spec: LossSpec, train_counts: np.ndarray) -> LossConfig:
    weights: Optional[ClassWeights] = None
    if spec.class_weighting == "inverse_frequency":
        weights = class_weights_from_counts(train_counts)
    return LossConfig(
        objective=spec.objective,
        alpha=spec.alpha,
        contrastive=ContrastiveConfig(tau=spec.tau),
        class_weights=weights,
    )


def init_probes(cfg: RunConfig) -> list[LinearParams]:
    """Linear probe heads for the MLS+CE objective, one per supervision leg."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, PROBE_SEED_STREAM]))
    dims = _probe_dims(cfg)
    return [init_linear(rng, d, cfg.model.num_classes) for d in dims]


def _probe_dims(cfg: RunConfig) -> list[int]:
    d = cfg.model.seq_dim
    if cfg.model.modality_mode is ModalityMode.BIMODAL:
        return [d, d, d, d, cfg.model.hidden]
    return [d, d, cfg.model.hidden]


# ---------------------------------------------------------------------------
# evaluation


def predict_dataset(
    params: CrabParams, dataset: Dataset, batch_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (labels, predictions) over a split, in manifest order.

    The inference path never executes the supervision legs. Argmax ties break
    toward the lowest class index. Batches may be processed by a worker pool
    (CRAB_NUM_THREADS); result order is fixed either way.
    """
    batches = list(dataset.batches(batch_size, shuffle_seed=None))

    def run_batch(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        out = forward(params, batch, compute_csl=False)
        return batch.labels, np.argmax(out.logits.data, axis=1)

    threads = num_eval_threads()
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_batch, batches))
    else:
        results = [run_batch(b) for b in batches]
    labels = np.concatenate([r[0] for r in results])
    preds = np.concatenate([r[1] for r in results])
    return labels, preds


def evaluate_params(
    params: CrabParams, dataset: Dataset, batch_size: int
) -> tuple[MetricReport, np.ndarray]:
    labels, preds = predict_dataset(params, dataset, batch_size)
    cm = confusion(labels, preds, len(dataset.label_map))
    return report(cm), cm


def evaluate_checkpoint(
    ckpt_dir,
    manifest_path,
    split: str,
    batch_size: int = 32,
    out_dir=None,
) -> tuple[MetricReport, np.ndarray, Path]:
    """Load a checkpoint and emit metrics.json + confusion.csv for one split."""
    params, label_map, _extras = load_checkpoint(ckpt_dir)
    dataset = load_split(manifest_path, split, label_map)
    if not len(dataset):
        raise DataError(f"split {split!r} is empty")
    rep, cm = evaluate_params(params, dataset, batch_size)
    out_dir = Path(out_dir) if out_dir else Path(ckpt_dir) / f"eval_{split}"
    emit_report(rep, cm, out_dir, label_map.names)
    return rep, cm, out_dir


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    run_log_path: Path
    best_checkpoint: Path
    last_checkpoint: Path
    best_dev_uar: float
    best_epoch: int
    final_metrics: dict[str, dict]
    epochs: list[dict]


def train_run(cfg: RunConfig) -> TrainResult:
    started = time.time()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest, label_map = resolve_dataset(cfg)
    train_ds = load_split(manifest, "train", label_map)
    if not len(train_ds):
        raise DataError("train split is empty")
    dev_ds = load_split(manifest, "dev", label_map)
    loss_cfg = build_loss_config(cfg.loss, train_ds.class_counts())

    params = init_params(cfg.model, cfg.seed)
    named = named_parameters(params)
    probes: list[LinearParams] = []
    if cfg.loss.objective is Objective.MLS_CE:
        probes = init_probes(cfg)
        for i, p in enumerate(probes):
            named = named + [
                (f"mls_probe.{i}.weight", p.weight, GROUP_MAIN),
                (f"mls_probe.{i}.bias", p.bias, GROUP_MAIN),
            ]

    opt = cfg.optim
    state = AdamState()
    batches_per_epoch = -(-len(train_ds) // opt.batch_size)
    steps_per_epoch = -(-batches_per_epoch // opt.grad_accum)
    total_steps = steps_per_epoch * opt.epochs

    needs_csl = cfg.loss.objective in (
        Objective.CE_PLUS_MPCL,
        Objective.MLCS,
        Objective.MLCS_SCL,
    )

    run_log_path = out_dir / RUN_LOG_NAME
    log_file = open(run_log_path, "w")
    best_dev_uar = -1.0
    best_epoch = -1
    best_dir = out_dir / "ckpt_best"
    last_dir = out_dir / "ckpt_last"
    step_index = 0
    current_lrs = {g: cosine_lr(lr, 0, total_steps, opt.eta_min) for g, lr in opt.group_lrs().items()}

    try:
        for epoch in range(opt.epochs):
            zero_gradients(named, fill=True)
            accumulated = 0
            epoch_terms: list[dict] = []
            for step, batch in enumerate(
                train_ds.batches(opt.batch_size, shuffle_seed=cfg.seed, epoch=epoch)
            ):
                try:
                    with tt.Tape() as tape:
                        out = forward(params, batch, compute_csl=needs_csl)
                        loss, breakdown = combined_objective(
                            out.logits,
                            out.csl_embeddings,
                            batch.labels,
                            loss_cfg,
                            leg_inputs=out.leg_inputs,
                            probes=probes or None,
                        )
                        tape.backward(loss)
                except NumericError as e:
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}: {e}"
                    ) from e
                epoch_terms.append(
                    {"total": breakdown.total, "wce": breakdown.wce, "legs": breakdown.leg_terms}
                )
                accumulated += 1
                last_batch = step == batches_per_epoch - 1
                if accumulated == opt.grad_accum or last_batch:
                    scale_gradients(named, 1.0 / accumulated)
                    current_lrs = {
                        g: cosine_lr(lr, step_index, total_steps, opt.eta_min)
                        for g, lr in opt.group_lrs().items()
                    }
                    adamw_step(named, state, current_lrs, opt)
                    zero_gradients(named, fill=True)
                    step_index += 1
                    accumulated = 0

            record: dict = {
                "type": "epoch",
                "epoch": epoch,
                "loss": {
                    "total": float(np.mean([t["total"] for t in epoch_terms])),
                    "wce": float(np.mean([t["wce"] for t in epoch_terms])),
                    "legs": _mean_leg_terms(epoch_terms),
                },
                "lr": {g: current_lrs[g] for g in sorted(current_lrs)},
            }
            if len(dev_ds):
                dev_report, _ = evaluate_params(params, dev_ds, opt.batch_size)
                record["dev"] = {
                    "war": dev_report.war,
                    "uar": dev_report.uar,
                    "macro_f1": dev_report.macro_f1,
                }
                if dev_report.uar > best_dev_uar:
                    best_dev_uar = dev_report.uar
                    best_epoch = epoch
                    save_checkpoint(best_dir, params, label_map, extras=probes_to_extras(probes))
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

        save_checkpoint(last_dir, params, label_map, extras=probes_to_extras(probes))
        if best_epoch < 0:  # no dev split: fall back to the final state
            best_dev_uar = float("nan")
            save_checkpoint(best_dir, params, label_map, extras=probes_to_extras(probes))

        eval_params, _, _ = load_checkpoint(best_dir)
        final_metrics: dict[str, dict] = {}
        for split in cfg.eval_splits:
            split_ds = load_split(manifest, split, label_map)
            if not len(split_ds):
                raise DataError(f"eval split {split!r} is empty")
            rep, cm = evaluate_params(eval_params, split_ds, opt.batch_size)
            final_metrics[split] = {
                "war": rep.war,
                "uar": rep.uar,
                "macro_f1": rep.macro_f1,
                "per_class_recall": [c.recall for c in rep.per_class],
            }
            emit_report(rep, cm, out_dir / f"eval_{split}", label_map.names)

        final_record = {
            "type": "final",
            "best_epoch": best_epoch,
            "best_dev_uar": best_dev_uar,
            "metrics": final_metrics,
            "config": cfg.to_json_dict(),
        }
        log_file.write(json.dumps(final_record, sort_keys=True) + "\n")
    finally:
        log_file.close()

    (out_dir / "timing.json").write_text(
        json.dumps({"wall_clock_sec": time.time() - started}) + "\n"
    )
    return TrainResult(
        run_log_path=run_log_path,
        best_checkpoint=best_dir,
        last_checkpoint=last_dir,
        best_dev_uar=best_dev_uar,
        best_epoch=best_epoch,
        final_metrics=final_metrics,
        epochs=_read_epoch_records(run_log_path),
    )


def _mean_leg_terms(epoch_terms: list[dict]) -> list[float]:
    if not epoch_terms or not epoch_terms[0]["legs"]:
        return []
    legs = np.array([t["legs"] for t in epoch_terms], dtype=np.float64)
    return [float(v) for v in legs.mean(axis=0)]


def _read_epoch_records(run_log_path) -> list[dict]:
    records = []
    for line in Path(run_log_path).read_text().splitlines():
        obj = json.loads(line)
        if obj.get("type") == "epoch":
            records.append(obj)
    return records


# ---------------------------------------------------------------------------
# sweeps and ablations


def parse_alpha_values(text: str) -> list[float]:
    """Either "start:stop:step" (inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"alpha range must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError("alpha range needs step > 0 and stop >= start")
        values = []
        k = 0
        while True:
            v = start + k * step
            if v > stop + 1e-9:
                break
            values.append(round(v, 10))
            k += 1
        return values
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ConfigError("no alpha values given")
    return values


def _shared_data_spec(cfg: RunConfig) -> tuple[DataSpec, LabelMap]:
    """Materialize the dataset once so sibling runs share it."""
    manifest, label_map = resolve_dataset(cfg)
    return DataSpec(manifest=str(manifest)), label_map


def _derived_config(cfg: RunConfig, out_dir: Path, data: DataSpec, label_map: LabelMap,
                    seed: Optional[int] = None,
                    loss: Optional[LossSpec] = None,
                    optim: Optional[OptimConfig] = None,
                    model=None) -> RunConfig:
    return RunConfig(
        model=model or cfg.model,
        optim=optim or cfg.optim,
        loss=loss or cfg.loss,
        data=data,
        output_dir=str(out_dir),
        seed=cfg.seed if seed is None else seed,
        label_map=label_map,
        eval_splits=cfg.eval_splits,
    )


def run_config_worker(config_dict: dict) -> dict:
    """Process-pool entry point: train from a snapshot dict, return metrics."""
    result = train_run(run_config_from_dict(config_dict))
    return {
        "final_metrics": result.final_metrics,
        "best_dev_uar": result.best_dev_uar,
        "run_log_path": str(result.run_log_path),
    }


def _run_many(configs: list[RunConfig], jobs: int) -> list[dict]:
    snapshots = [c.to_json_dict() for c in configs]
    if jobs > 1 and len(snapshots) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_config_worker, snapshots))
    return [run_config_worker(s) for s in snapshots]


def sweep_alpha(cfg: RunConfig, alphas: Sequence[float], jobs: int = 1) -> Path:
    """Train one run per alpha on shared data; write alpha_summary.csv."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, label_map = _shared_data_spec(cfg)
    configs = []
    for alpha in alphas:
        loss = LossSpec(
            objective=cfg.loss.objective,
            alpha=alpha,
            tau=cfg.loss.tau,
            class_weighting=cfg.loss.class_weighting,
        )
        configs.append(
            _derived_config(cfg, out_dir / f"alpha_{alpha:.2f}", data, label_map, loss=loss)
        )
    results = _run_many(configs, jobs)

    summary = out_dir / "alpha_summary.csv"
    split = cfg.eval_splits[0]
    with open(summary, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "war", "uar", "macro_f1"])
        for alpha, res in zip(alphas, results):
            m = res["final_metrics"][split]
            writer.writerow([f"{alpha:.2f}", repr(m["war"]), repr(m["uar"]), repr(m["macro_f1"])])
    return summary


ABLATION_VARIANTS = ("CE", "CE+MPCL", "MLS+CE", "MLCS", "MLCS_SCL", "MLCS_flat_lr")

_VARIANT_OBJECTIVES = {
    "CE": Objective.CE,
    "CE+MPCL": Objective.CE_PLUS_MPCL,
    "MLS+CE": Objective.MLS_CE,
    "MLCS": Objective.MLCS,
    "MLCS_SCL": Objective.MLCS_SCL,
    "MLCS_flat_lr": Objective.MLCS,
}


def variant_config(cfg: RunConfig, variant: str, out_dir: Path, data: DataSpec,
                   label_map: LabelMap, seed: int) -> RunConfig:
    if variant not in _VARIANT_OBJECTIVES:
        raise ConfigError(
            f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}"
        )
    loss = LossSpec(
        objective=_VARIANT_OBJECTIVES[variant],
        alpha=cfg.loss.alpha,
        tau=cfg.loss.tau,
        class_weighting=cfg.loss.class_weighting,
    )
    optim = cfg.optim
    if variant == "MLCS_flat_lr":
        # the single-learning-rate ablation: encoder group runs at the main rate
        optim = OptimConfig(
            lr_main=cfg.optim.lr_main,
            lr_encoder=cfg.optim.lr_main,
            beta1=cfg.optim.beta1,
            beta2=cfg.optim.beta2,
            eps=cfg.optim.eps,
            weight_decay=cfg.optim.weight_decay,
            epochs=cfg.optim.epochs,
            batch_size=cfg.optim.batch_size,
            grad_accum=cfg.optim.grad_accum,
            eta_min=cfg.optim.eta_min,
        )
    return _derived_config(cfg, out_dir, data, label_map, seed=seed, loss=loss, optim=optim)


def ablate(
    cfg: RunConfig,
    variants: Sequence[str],
    seeds: Optional[Sequence[int]] = None,
    jobs: int = 1,
) -> Path:
    """Run each variant on shared data/seeds; write ablation.csv with per-seed
    rows plus one mean row per variant."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds else [cfg.seed]
    data, label_map = _shared_data_spec(cfg)

    configs = []
    keys = []
    for variant in variants:
        for seed in seeds:
            run_dir = out_dir / variant.replace("+", "_plus_") / f"seed_{seed}"
            configs.append(variant_config(cfg, variant, run_dir, data, label_map, seed))
            keys.append((variant, seed))
    results = _run_many(configs, jobs)

    split = cfg.eval_splits[0]
    table = out_dir / "ablation.csv"
    by_variant: dict[str, list[dict]] = {}
    with open(table, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "seed", "war", "uar", "macro_f1"])
        for (variant, seed), res in zip(keys, results):
            m = res["final_metrics"][split]
            by_variant.setdefault(variant, []).append(m)
            writer.writerow([variant, seed, repr(m["war"]), repr(m["uar"]), repr(m["macro_f1"])])
        for variant in variants:
            ms = by_variant[variant]
            writer.writerow(
                [
                    f"{variant}:mean",
                    "",
                    repr(float(np.mean([m["war"] for m in ms]))),
                    repr(float(np.mean([m["uar"] for m in ms]))),
                    repr(float(np.mean([m["macro_f1"] for m in ms]))),
                ]
            )
    return table
