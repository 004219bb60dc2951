"""
Budget-matched ablation arms.

Every arm of an axis trains from the same pretrained base on the same data
stream for the same number of steps. Each arm folds the samples and slot noise it
trains on into a SHA-256 digest, and arms of one seed must agree. The report holds
per-arm loss curves, final per-task validation losses and medians across seeds.
"""
import logging
import os
from dataclasses import dataclass

import pandas as pd
from joblib import Parallel, delayed
from tabulate import tabulate

from src.config import AblationConfig, Geometry, ModelConfig, PlacementSpec, TrainConfig
from src.datagen import generate_dataset, resolve_tasks
from src.errors import ArgumentError, ContractError
from src.model import init_base_params
from src.train import fit, pretrain_base

logger = logging.getLogger(__name__)

AXES = ("structure", "placement", "decouple", "shift", "pzero", "weighting")
DEFAULT_TASKS = {
    "decouple": ["v2v_gray", "v2v_depth", "mv2v_inpaint", "mv2v_outpaint"],
}
FALLBACK_TASKS = ["mv2v_inpaint", "mv2v_outpaint", "v2v_depth", "extension_first"]
DECOUPLE_OFF_NOTE = "decouple off: every frame goes to the reactive stream and the inactive stream is zero"


@dataclass
class AblationReport:
    axis: str
    finals: pd.DataFrame
    curves: pd.DataFrame
    summary: pd.DataFrame
    notes: list


def arms(axis, model_cfg, train_cfg, placement_k=None):
    """(name, ModelConfig, TrainConfig) for every arm of an axis."""
    if axis == "structure":
        return [(mode, model_cfg.model_copy(update={"mode": mode}), train_cfg) for mode in ("fullft", "adapter")]
    if axis == "placement":
        L = model_cfg.layers
        ks = placement_k or sorted({max(1, L // 4), max(1, L // 2), L})
        out = []
        for k in ks:
            for strategy in ("continuous_first", "distributed_even"):
                cfg = model_cfg.model_copy(update={"mode": "adapter", "placement": PlacementSpec(strategy=strategy, k=k)})
                out.append((f"{strategy}(k={k})", cfg, train_cfg))
        return out
    if axis == "decouple":
        return [(name, model_cfg.model_copy(update={"concept_decouple": flag}), train_cfg)
                for name, flag in (("decouple_on", True), ("decouple_off", False))]
    if axis == "shift":
        return [(f"shift={s:g}", model_cfg, train_cfg.model_copy(update={"shift": s})) for s in (1.0, 3.0)]
    if axis == "pzero":
        return [(f"p_zero={p:g}", model_cfg, train_cfg.model_copy(update={"p_zero": p})) for p in (0.0, 0.1, 0.3)]
    if axis == "weighting":
        return [(w, model_cfg, train_cfg.model_copy(update={"time_sampling": w})) for w in ("uniform", "logit_normal")]
    raise ArgumentError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def _run_arm(name, model_cfg, train_cfg, base, dataset, valset):
    state, history = fit(model_cfg, train_cfg, dataset, valset=valset, base=base)
    curve = pd.DataFrame([(r.step, r.loss) for r in state.loss_log], columns=["step", "loss"])
    curve = curve.groupby("step", as_index=False)["loss"].mean() if len(curve) else curve
    final = history[-1][1] if history else {}
    return name, curve, final, state.stream_digest


def ablate(axis, model_cfg=None, train_cfg=None, ablation_cfg=None, geometry=None, progress=False):
    """
    Run every arm of ``axis`` for each seed

    Returns:
    --------
    AblationReport with
      finals  - columns axis, arm, seed, task, loss, data_digest
      curves  - columns axis, arm, seed, step, loss (mean training loss per step)
      summary - columns arm, median_final_loss, seeds (median across seeds of the mean task loss)
    """
    model_cfg = model_cfg or ModelConfig()
    ablation_cfg = ablation_cfg or AblationConfig(axis=axis)
    train_cfg = (train_cfg or TrainConfig()).model_copy(update={"steps": ablation_cfg.steps})
    geometry = geometry or Geometry()
    tasks = resolve_tasks(ablation_cfg.tasks or DEFAULT_TASKS.get(axis, FALLBACK_TASKS))

    jobs = []
    for seed in range(ablation_cfg.seeds):
        dataset = generate_dataset(tasks, ablation_cfg.train_count, seed, geometry, "train")
        valset = generate_dataset(tasks, ablation_cfg.val_per_task * len(tasks), seed, geometry, "val")
        seed_cfg = train_cfg.model_copy(update={"seed": seed})
        base = init_base_params(model_cfg, seed)
        if seed_cfg.base_steps > 0:
            base = pretrain_base(base, model_cfg, seed_cfg, dataset, progress)
        for name, arm_model, arm_train in arms(axis, model_cfg, seed_cfg, ablation_cfg.placement_k):
            jobs.append((seed, name, arm_model, arm_train.model_copy(update={"seed": seed}), base, dataset, valset))

    logger.info(f"Ablation {axis}: {len(jobs)} arm runs over {ablation_cfg.seeds} seed(s), {train_cfg.steps} steps each")
    results = Parallel(n_jobs=ablation_cfg.n_jobs)(
        delayed(_run_arm)(name, m, t, base, data, val) for _, name, m, t, base, data, val in jobs
    )

    finals, curves = [], []
    digests = {}
    for (seed, *_), (name, curve, final, digest) in zip(jobs, results):
        digests.setdefault(seed, set()).add(digest)
        for task, (loss, _) in final.items():
            finals.append((axis, name, seed, task, loss, digest))
        for step, loss in curve.itertuples(index=False):
            curves.append((axis, name, seed, int(step), float(loss)))
        logger.info(f"Arm {name} seed {seed} finished")
    if any(len(d) != 1 for d in digests.values()):
        raise ContractError(f"ablation arms saw different data streams: {digests}")

    finals = pd.DataFrame(finals, columns=["axis", "arm", "seed", "task", "loss", "data_digest"])
    curves = pd.DataFrame(curves, columns=["axis", "arm", "seed", "step", "loss"])
    arm_order = list(dict.fromkeys(name for _, name, *_ in jobs))
    per_seed = finals.groupby(["arm", "seed"], sort=False)["loss"].mean().reset_index()
    summary = (per_seed.groupby("arm", sort=False)["loss"].agg(["median", "count"]).reindex(arm_order)
               .reset_index().rename(columns={"median": "median_final_loss", "count": "seeds"}))
    notes = [DECOUPLE_OFF_NOTE] if axis == "decouple" else []
    return AblationReport(axis=axis, finals=finals, curves=curves, summary=summary, notes=notes)


def write_ablation(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    report.finals.to_csv(os.path.join(out_dir, "finals.tsv"), sep="\t", index=False, float_format="%.6g")
    report.curves.to_csv(os.path.join(out_dir, "curves.tsv"), sep="\t", index=False, float_format="%.6g")
    report.summary.to_csv(os.path.join(out_dir, "summary.tsv"), sep="\t", index=False, float_format="%.6g")
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(f"ablation axis: {report.axis}\n")
        f.write(tabulate(report.summary.values.tolist(), headers=list(report.summary.columns), floatfmt=".4g") + "\n")
        for note in report.notes:
            f.write(f"note: {note}\n")
    logger.info(f"Wrote ablation report to {out_dir}")
