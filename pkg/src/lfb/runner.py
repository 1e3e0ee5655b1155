"""Orchestration: config -> data -> model -> training -> metrics files."""

from __future__ import annotations

import datetime as _dt
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .bank import WindowSpec
from .config import RunConfig, config_hash, dumps
from .metrics import topk_accuracy
from .model import LfbModel
from .synthetic import BatchSampler, SyntheticDataset, WindowedSplit, generate, read_dataset
from .tensor import RngStream
from .training import SGD, Schedule, ce_loss, fit, freeze


class MissingCheckpointError(FileNotFoundError):
    pass


class MetricsLog:
    """``iteration split metric value`` lines; fixed formatting so reruns are byte-identical."""

    def __init__(self):
        self.lines: list[str] = []

    def add(self, iteration: int, split: str, metric: str, value: float) -> None:
        self.lines.append(f"{iteration} {split} {metric} {value:.6f}\n")

    def text(self) -> str:
        return "".join(self.lines)

    def write(self, path) -> None:
        Path(path).write_text(self.text())


@dataclass
class RunResult:
    model: LfbModel
    losses: list[float]
    metrics: dict[str, float]
    log: MetricsLog
    outputs: list[Path] = field(default_factory=list)


def load_data(cfg: RunConfig, data_dir=None) -> SyntheticDataset:
    if data_dir is not None:
        return read_dataset(cfg.task, data_dir)
    return generate(cfg.task, cfg.run.seed)


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.run.precision == "float32" else np.float64


def build_model(cfg: RunConfig, ds: SyntheticDataset, kind: str | None = None) -> LfbModel:
    model = LfbModel(kind or cfg.model.kind, cfg.task.d, cfg.task.num_classes, cfg.fbo_config(),
                     cfg.sto_config(), seed=cfg.run.seed, reservoir=ds.reservoir())
    dtype = _dtype(cfg)
    for p in model.parameters().values():
        p.value = p.value.astype(dtype)
        p.zero_grad()
    return model


def splits(cfg: RunConfig, ds: SyntheticDataset) -> tuple[WindowedSplit, WindowedSplit]:
    spec = WindowSpec(cfg.model.window, cfg.model.mode)
    return (WindowedSplit(ds.train, spec, cfg.task.clip_span),
            WindowedSplit(ds.test, spec, cfg.task.clip_span))


def _cast(batch, dtype):
    if dtype == np.float64:
        return batch
    batch.queries = batch.queries.astype(dtype)
    batch.bank_rows = batch.bank_rows.astype(dtype)
    batch.clip_rows = batch.clip_rows.astype(dtype)
    return batch


def evaluate(model: LfbModel, split: WindowedSplit, batch_size: int = 512, dtype=np.float64) -> dict[str, float]:
    probs = []
    for lo in range(0, len(split), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(split)))
        probs.append(model.predict(_cast(split.batch(idx), dtype)))
    probs = np.concatenate(probs)
    k5 = min(5, probs.shape[1])
    return {"top1": topk_accuracy(probs, split.labels, 1), f"top{k5}": topk_accuracy(probs, split.labels, k5)}


def train_model(cfg: RunConfig, model: LfbModel, train_split: WindowedSplit, schedule: Schedule,
                log: MetricsLog, stage: str = "train") -> list[float]:
    dtype = _dtype(cfg)
    sampler = BatchSampler(len(train_split), cfg.train.batch_size, RngStream(cfg.run.seed, f"{stage}/batches"))
    drop = RngStream(cfg.run.seed, f"{stage}/dropout")

    def loss_fn(it):
        b = _cast(train_split.batch(sampler.next()), dtype)
        return ce_loss(model.logits(b, drop, training=True), b.labels)

    opt = SGD(list(model.parameters().values()), schedule, momentum=cfg.train.momentum)
    return fit(loss_fn, opt, schedule.total_iterations,
               log=lambda it, loss: log.add(it, stage, "loss", loss), log_every=cfg.train.log_every)


def train_run(cfg: RunConfig, ds: SyntheticDataset | None = None, out_dir=None) -> RunResult:
    """Single-stage (joint) training plus held-out evaluation."""
    ds = ds if ds is not None else load_data(cfg)
    train_split, test_split = splits(cfg, ds)
    model = build_model(cfg, ds)
    log = MetricsLog()
    schedule = cfg.schedule()
    losses = train_model(cfg, model, train_split, schedule, log)
    metrics = evaluate(model, test_split, dtype=_dtype(cfg))
    for name, value in metrics.items():
        log.add(schedule.total_iterations, "test", name, value)
    result = RunResult(model, losses, metrics, log)
    if out_dir is not None:
        result.outputs = _write_run(cfg, result, Path(out_dir), {"model.lfbp": model.state_dict()})
    return result


def two_stage_train(cfg: RunConfig, ds: SyntheticDataset | None = None, out_dir=None,
                    stage1_checkpoint=None) -> RunResult:
    """Stage 1 trains the short-term path and head without an FBO; stage 2 freezes
    the short-term encoder, adds the FBO, and trains FBO + head for half as long.

    With ``stage1_checkpoint`` given, stage 1 is skipped and the file must exist.
    """
    ds = ds if ds is not None else load_data(cfg)
    train_split, test_split = splits(cfg, ds)
    log = MetricsLog()
    schedule = cfg.schedule()
    outputs = []

    if stage1_checkpoint is None:
        base = build_model(cfg, ds, kind="none")
        train_model(cfg, base, train_split, schedule, log, stage="stage1")
        for name, value in evaluate(base, test_split, dtype=_dtype(cfg)).items():
            log.add(schedule.total_iterations, "stage1-test", name, value)
        state1 = base.state_dict()
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            stage1_checkpoint = Path(out_dir) / "stage1.lfbp"
            checkpoint.save(stage1_checkpoint, state1)
            outputs.append(stage1_checkpoint)
    else:
        if not Path(stage1_checkpoint).is_file():
            raise MissingCheckpointError(f"stage-1 checkpoint {stage1_checkpoint} not found")
        state1 = checkpoint.load(stage1_checkpoint)

    model = build_model(cfg, ds)
    warm_start_from_stage1(model, state1)
    freeze(model.feature_parameters())
    stage2 = schedule.scaled_to(max(1, schedule.total_iterations // 2))
    losses = train_model(cfg, model, train_split, stage2, log, stage="stage2")
    metrics = evaluate(model, test_split, dtype=_dtype(cfg))
    for name, value in metrics.items():
        log.add(stage2.total_iterations, "test", name, value)
    result = RunResult(model, losses, metrics, log)
    if out_dir is not None:
        result.outputs = outputs + _write_run(cfg, result, Path(out_dir), {"stage2.lfbp": model.state_dict()},
                                              extra=outputs)
    return result


def warm_start_from_stage1(model: LfbModel, state1: dict[str, np.ndarray]) -> None:
    """Copy the encoder and the short-term rows of the head; FBO rows of the head start at 0."""
    params = model.parameters()
    dtype = model.encoder_w.value.dtype
    for name in ("encoder.w", "encoder.b", "head.b"):
        params[name].value = np.array(state1[name], dtype=dtype)
    head = np.zeros_like(params["head.w"].value)
    head[:model.d_in] = state1["head.w"]
    params["head.w"].value = head


def _write_run(cfg: RunConfig, result: RunResult, out: Path, checkpoints: dict, extra=()) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    paths = []
    for name, state in checkpoints.items():
        checkpoint.save(out / name, state)
        paths.append(out / name)
    (out / "config.ini").write_text(dumps(cfg))
    result.log.write(out / "metrics.log")
    paths += [out / "config.ini", out / "metrics.log"]
    write_manifest(out / "manifest.json", "train", cfg, list(extra) + paths, started)
    return paths


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command: str, cfg: RunConfig | None, outputs, started: str | None = None,
                   seed: int | None = None) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "seed": cfg.run.seed if cfg is not None else seed,
        "started": started or _now(),
        "finished": _now(),
        "outputs": sorted(os.path.relpath(p, Path(path).parent) for p in outputs),
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def window_sweep(cfg: RunConfig, windows, modes=("batch",), ds: SyntheticDataset | None = None,
                 out_dir=None, progress: Callable[[str], None] | None = None) -> list[dict]:
    """One run per (mode, window); returns a metrics row per setting."""
    ds = ds if ds is not None else load_data(cfg)
    rows = []
    for mode in modes:
        for w in windows:
            sub = cfg.with_overrides(model={"window": int(w), "mode": mode})
            sub_dir = None if out_dir is None else Path(out_dir) / f"{mode}_w{w}"
            runner = two_stage_train if sub.run.stage == "two-stage" else train_run
            res = runner(sub, ds, sub_dir)
            row = {"kind": sub.model.kind, "mode": mode, "window": int(w), **res.metrics}
            rows.append(row)
            if progress:
                progress(format_row(row))
    return rows


def format_row(row: dict) -> str:
    metrics = " ".join(f"{k}={v:.6f}" for k, v in row.items() if isinstance(v, float))
    return f"kind={row['kind']} mode={row['mode']} window={row['window']} {metrics}"
