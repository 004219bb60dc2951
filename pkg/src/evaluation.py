"""
Validation metrics: per-task fixed-time losses, inactive-region PSNR and flicker.
"""
import logging
import math
import os
from typing import Dict, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel
from tabulate import tabulate

from src import numerics as num
from src.config import EvalConfig, config_digest
from src.container import dataset_digest
from src.errors import ArgumentError
from src.sampler import euler_sample
from src.train import validation_losses

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


class TaskLoss(BaseModel):
    loss: float
    count: int


class EvalReport(BaseModel):
    per_task: Dict[str, TaskLoss]
    psnr_inactive: Optional[float] = None
    psnr_samples: int = 0
    flicker: Optional[float] = None
    sampled: int = 0
    config_digest: str
    data_digest: str

    @property
    def mean_loss(self):
        return float(np.mean([v.loss for v in self.per_task.values()]))


def psnr_inactive(output, source, masks):
    """
    PSNR over pixels with mask 0, signal range 2: 10 * log10(4 / mse), capped at 99 dB

    Returns None when the mask keeps no pixel.
    """
    keep = np.asarray(masks) == 0
    if not keep.any():
        return None
    diff = np.asarray(output, dtype=np.float64) - np.asarray(source, dtype=np.float64)
    mse = float(np.mean(np.square(diff)[keep]))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(4.0 / mse))


def flicker(video):
    """Mean absolute difference between consecutive frames (0 for a single frame)."""
    video = np.asarray(video, dtype=np.float64)
    if len(video) < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(video, axis=0))))


def _is_repaint(sample):
    tag = sample.vcu.task_tag
    return tag.kind == "MV2V" or "MV2V" in tag.parts


def _sample_one(params, model_cfg, sample, sample_cfg, seed):
    return euler_sample(params, model_cfg, sample.vcu, sample_cfg.model_copy(update={"seed": seed}))


def evaluate(params, model_cfg, valset, eval_cfg=None, n_jobs=1):
    """
    Evaluate parameters on a validation set

    Per-task losses use fixed evaluation times and fixed per-sample noise; up to
    ``max_sampled`` repainting samples are generated with the Euler sampler for
    inactive-region PSNR and flicker. Repeated calls give identical reports.
    """
    eval_cfg = eval_cfg or EvalConfig()
    if not valset:
        raise ArgumentError("evaluation needs a non-empty validation set")
    losses = validation_losses(params, model_cfg, valset, eval_cfg.eval_times, eval_cfg.seed)

    chosen = [i for i, s in enumerate(valset) if _is_repaint(s)][:eval_cfg.max_sampled]
    seeds = [int(num.make_rng(eval_cfg.seed, "eval-sample", i).integers(0, 2 ** 31 - 1)) for i in chosen]
    videos = Parallel(n_jobs=n_jobs)(
        delayed(_sample_one)(params, model_cfg, valset[i], eval_cfg.sample, s) for i, s in zip(chosen, seeds)
    )
    psnrs = []
    for i, video in zip(chosen, videos):
        value = psnr_inactive(video, valset[i].vcu.video_frames, valset[i].vcu.video_masks)
        if value is not None:
            psnrs.append(value)

    report = EvalReport(
        per_task={task: TaskLoss(loss=loss, count=count) for task, (loss, count) in losses.items()},
        psnr_inactive=float(np.mean(psnrs)) if psnrs else None,
        psnr_samples=len(psnrs),
        flicker=float(np.mean([flicker(v) for v in videos])) if videos else None,
        sampled=len(videos),
        config_digest=config_digest(model_cfg, eval_cfg),
        data_digest=dataset_digest(valset),
    )
    logger.info(f"Evaluation: mean loss {report.mean_loss:.6g} over {len(report.per_task)} tasks, "
                f"psnr_inactive {report.psnr_inactive}, flicker {report.flicker}")
    return report


def report_frame(report):
    """Machine-readable rows; columns: metric, task, value, count."""
    rows = [("loss", task, v.loss, v.count) for task, v in report.per_task.items()]
    rows.append(("psnr_inactive", "*", report.psnr_inactive, report.psnr_samples))
    rows.append(("flicker", "*", report.flicker, report.sampled))
    return pd.DataFrame(rows, columns=["metric", "task", "value", "count"])


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    frame = report_frame(report)
    frame.to_csv(os.path.join(out_dir, "eval.tsv"), sep="\t", index=False, float_format="%.6g")
    with open(os.path.join(out_dir, "eval.json"), "w") as f:
        f.write(report.model_dump_json(indent=2))
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(tabulate(frame.values.tolist(), headers=list(frame.columns), floatfmt=".4g") + "\n")
        f.write(f"config digest {report.config_digest}\ndata digest {report.data_digest}\n")
    logger.info(f"Wrote evaluation report to {out_dir}")
