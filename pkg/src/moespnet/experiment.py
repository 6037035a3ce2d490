"""Paired-seed comparison of adaptive heads against their baselines.

For each seed, stage 1 is trained once per family (the uniform-average MoE
network, the sum-fusion FCN network).  Both members of a pair then fine-tune
from that same checkpoint for the same number of stage-2 iterations on the
same batch stream, and are scored by validation mean IoU.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from moespnet.config import ModelConfig, RunConfig, TrainConfig
from moespnet.data import Dataset
from moespnet.metrics import mean_iou
from moespnet.models import SegmentationModel
from moespnet.train import evaluate, train_stage

log = logging.getLogger(__name__)

PAIRS = (("moe-spnet", "deeplab-aspp-baseline"), ("fcn-ahfa", "fcn-baseline"))

# Rates of 6/12/18/24 on a ~41-pixel stride-8 map, rescaled to the 8-pixel map of a 64 crop.
DESK_DILATIONS = (1, 2, 4, 5)


@dataclass
class PairResult:
    seed: int
    model: str
    baseline: str
    model_miou: float
    baseline_miou: float
    seconds: float

    @property
    def margin(self) -> float:
        return self.model_miou - self.baseline_miou


def _clone(model: SegmentationModel, kind: str) -> SegmentationModel:
    m = SegmentationModel(kind, model.cfg, model.seed, stage=1)
    for name, t in model.params.items():
        m.params[name].data = t.data.copy()
    return m


def run_pair(train: Dataset, val: Dataset, cfg: RunConfig, model_kind: str, baseline_kind: str) -> PairResult:
    t0 = time.time()
    stage1 = SegmentationModel(baseline_kind, cfg.model_config, cfg.train.seed, stage=1)
    s1 = train_stage(stage1, train, replace(cfg, model=baseline_kind), 1)
    scores = {}
    for kind in (model_kind, baseline_kind):
        m = _clone(stage1, kind)
        m.enter_stage2()
        train_stage(m, train, replace(cfg, model=kind), 2, s1.end_iteration)
        scores[kind] = mean_iou(evaluate(m, val))
    return PairResult(cfg.train.seed, model_kind, baseline_kind, scores[model_kind],
                      scores[baseline_kind], time.time() - t0)


def run_comparison(train: Dataset, val: Dataset, seeds, model_config: ModelConfig | None = None,
                   train_config: TrainConfig | None = None, pairs=PAIRS,
                   out: str | Path | None = None) -> list[PairResult]:
    mc = model_config or ModelConfig(dilations=DESK_DILATIONS)
    tc = train_config or TrainConfig()
    results = []
    for seed in seeds:
        cfg = RunConfig(model=pairs[0][0], model_config=mc, train=replace(tc, seed=seed))
        for model_kind, baseline_kind in pairs:
            r = run_pair(train, val, cfg, model_kind, baseline_kind)
            log.info("seed %d %s %.4f vs %s %.4f (%.0fs)", seed, model_kind, r.model_miou,
                     baseline_kind, r.baseline_miou, r.seconds)
            results.append(r)
            if out is not None:
                write_results(out, results)
    return results


def write_results(path: str | Path, results: list[PairResult]) -> None:
    rows = [{"seed": r.seed, "model": r.model, "baseline": r.baseline, "model_miou": r.model_miou,
             "baseline_miou": r.baseline_miou, "margin": r.margin, "seconds": r.seconds} for r in results]
    Path(path).write_text(json.dumps(rows, indent=1))


def wins(results: list[PairResult], model_kind: str) -> tuple[int, int]:
    rs = [r for r in results if r.model == model_kind]
    return sum(r.margin > 0 for r in rs), len(rs)
