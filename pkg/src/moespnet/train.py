"""Two-stage training and evaluation loops.

Stage 1 trains the plain head; stage 2 attaches the adaptive head and
fine-tunes everything.  Batches come from a stream indexed by a global
iteration counter that keeps running across stages, so ``--stage both`` and
separate stage-1/stage-2 invocations see identical data.

Each stage directory holds a checkpoint, ``loss.csv`` (``iter,lr,loss``, one row
per optimizer step, ``iter`` counted from the start of the stage) and
``stage.json``, whose ``final_loss`` is the loss of the final parameters on
the next batch of the stream, i.e. the batch the following stage starts on.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from moespnet import formats
from moespnet.config import RunConfig
from moespnet.data import Dataset, batch_at
from moespnet.metrics import ConfusionMatrix, UndefinedMetricError
from moespnet.models import SegmentationModel
from moespnet.optim import SgdState, sgd_step
from moespnet.tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class UsageError(RuntimeError):
    pass


@dataclass
class StageResult:
    losses: list[tuple[int, float, float]]
    final_loss: float
    start_iteration: int
    end_iteration: int


def train_stage(model: SegmentationModel, ds: Dataset, cfg: RunConfig, stage: int,
                start_iteration: int = 0, log_every: int = 0) -> StageResult:
    tc = cfg.train
    n_iter = tc.max_iter if stage == 1 else tc.stage2_iter
    state = SgdState(tc.base_lr, tc.momentum, tc.weight_decay, tc.power, n_iter)
    params = model.parameters()
    mult = {name: tc.head_lr_mult for name in model.head_names} if stage == 2 else None
    crop = cfg.model_config.crop_size
    rows = []
    for it in range(n_iter):
        images, labels = batch_at(ds, tc.seed, start_iteration + it, tc.batch, crop, tc.augment)
        loss = model.loss(Tensor(images), labels)
        backward(loss)
        lr = sgd_step(state, params, mult)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at stage {stage} iteration {it}")
        rows.append((it, lr, value))
        if log_every and it % log_every == 0:
            log.info("stage %d iter %d lr %.5f loss %.4f", stage, it, lr, value)
    end = start_iteration + n_iter
    images, labels = batch_at(ds, tc.seed, end, tc.batch, crop, tc.augment)
    with no_grad():
        final = model.loss(Tensor(images), labels).item()
    return StageResult(rows, final, start_iteration, end)


def save_stage(directory: str | Path, model: SegmentationModel, cfg: RunConfig, result: StageResult) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(d, {k: t.data for k, t in model.params.items()},
                            {"model": model.kind, "stage": model.stage, "run_config": cfg.to_dict()})
    with open(d / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "loss"])
        for it, lr, loss in result.losses:
            w.writerow([it, repr(lr), repr(loss)])
    (d / "stage.json").write_text(json.dumps(
        {"stage": model.stage, "final_loss": result.final_loss,
         "start_iteration": result.start_iteration, "end_iteration": result.end_iteration}, indent=1))
    return d


def load_model(directory: str | Path) -> tuple[SegmentationModel, RunConfig, dict]:
    params, extra = formats.load_checkpoint(directory)
    if "run_config" not in extra:
        raise UsageError(f"{directory} has no checkpoint.json with a run config")
    cfg = RunConfig.from_dict(extra["run_config"])
    model = SegmentationModel(extra["model"], cfg.model_config, cfg.train.seed, stage=extra.get("stage", 1))
    missing = set(model.params) - set(params)
    if missing:
        raise UsageError(f"checkpoint {directory} lacks parameters: {', '.join(sorted(missing))}")
    for name, arr in params.items():
        if name not in model.params:
            raise UsageError(f"checkpoint {directory} has unexpected parameter {name!r}")
        model.params[name].data = arr.astype(model.params[name].dtype)
    info = {}
    sj = Path(directory) / "stage.json"
    if sj.exists():
        info = json.loads(sj.read_text())
    return model, cfg, info


def run_training(cfg: RunConfig, ds: Dataset, out: str | Path, stage: str = "both",
                 log_every: int = 0) -> dict[int, StageResult]:
    """Train stage 1, stage 2, or both; writes ``out/stage1`` and/or ``out/stage2``."""
    out = Path(out)
    results = {}
    if stage in ("1", "both"):
        model = SegmentationModel(cfg.model, cfg.model_config, cfg.train.seed, stage=1)
        results[1] = train_stage(model, ds, cfg, 1, 0, log_every)
        save_stage(out / "stage1", model, cfg, results[1])
    if stage in ("2", "both"):
        ckpt = out / "stage1"
        if not (ckpt / "manifest.json").exists():
            raise UsageError(f"stage 2 needs a stage-1 checkpoint at {ckpt}")
        model, saved_cfg, info = load_model(ckpt)
        if saved_cfg.model != cfg.model and not _shares_stage1(saved_cfg.model, cfg.model):
            raise UsageError(f"stage-1 checkpoint is for {saved_cfg.model}, not {cfg.model}")
        model = _retarget(model, cfg)
        model.enter_stage2()
        start = info.get("end_iteration", cfg.train.max_iter)
        results[2] = train_stage(model, ds, cfg, 2, start, log_every)
        save_stage(out / "stage2", model, cfg, results[2])
    return results


_STAGE1_FAMILY = {"moe-spnet": "moe", "moe-spnet-cf": "moe", "moe-spnet-ef": "moe",
                  "deeplab-aspp-baseline": "moe", "fcn-ahfa": "fcn", "fcn-baseline": "fcn"}


def _shares_stage1(a: str, b: str) -> bool:
    """Stage 1 of every MoE kind is the uniform-average network; likewise FCN kinds."""
    return _STAGE1_FAMILY[a] == _STAGE1_FAMILY[b]


def _retarget(model: SegmentationModel, cfg: RunConfig) -> SegmentationModel:
    if model.kind == cfg.model:
        return model
    fresh = SegmentationModel(cfg.model, cfg.model_config, cfg.train.seed, stage=1)
    for name, t in model.params.items():
        fresh.params[name].data = t.data
    return fresh


def evaluate(model: SegmentationModel, ds: Dataset, batch: int = 8) -> ConfusionMatrix:
    if len(ds) == 0:
        raise UndefinedMetricError("cannot evaluate an empty split")
    cm = ConfusionMatrix(model.cfg.num_classes)
    for i in range(0, len(ds), batch):
        pred = model.predict(Tensor(ds.images[i:i + batch]))
        cm.accumulate(pred, ds.labels[i:i + batch, 0])
    return cm
