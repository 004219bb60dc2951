"""
Rectified-flow training.

A sample's clean latent x0 (references first, then the target video) is mixed
with Gaussian noise at a shifted time t: x_t = (1 - t) x0 + t eps, and the
model regresses the velocity eps - x0 with a plain mean squared error over all
tokens. Parameters are updated with AdamW (decoupled weight decay); only the
tensors flagged trainable in the ParamStore ever change.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from src import numerics as num
from src.codec import encode_target, encode_video, encode_vcu
from src.errors import ArgumentError, DimensionError, VaceError
from src.model import (GradSink, TokenGrid, attach_context, backward, base_trainable_names, embed_context_backward,
                       embed_context_forward, forward_with_cache, init_base_params, patch_rearrange, text_tokens)
from src.vcu import validate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossRecord:
    step: int
    task_tag: str
    loss: float


@dataclass
class TrainState:
    params: object
    moments: dict
    step: int
    rng: np.random.Generator
    loss_log: list = field(default_factory=list)
    stream: str = "train"
    stream_digest: str = ""


def new_state(params, train_cfg, stream="train"):
    """Fresh optimizer state: zero first/second moments for exactly the trainable tensors."""
    moments = {name: (np.zeros_like(params[name]), np.zeros_like(params[name])) for name in params.trainable_names()}
    return TrainState(params=params, moments=moments, step=0, rng=num.make_rng(train_cfg.seed, stream), stream=stream)


def shift_time(u, s):
    """t = s*u / (1 + (s-1)*u); a monotone bijection of (0, 1) with inverse shift_time(t, 1/s)."""
    if not 0.0 < u < 1.0:
        raise ArgumentError(f"shift_time needs 0 < u < 1, got {u}")
    if s <= 0:
        raise ArgumentError(f"shift must be positive, got {s}")
    return s * u / (1.0 + (s - 1.0) * u)


def unshift_time(t, s):
    return shift_time(t, 1.0 / s)


def flow_pair(x0, noise, t):
    if np.shape(x0) != np.shape(noise):
        raise DimensionError("flow_pair", "clean latent and noise differ in shape", [np.shape(x0), np.shape(noise)])
    if not 0.0 <= t <= 1.0:
        raise ArgumentError(f"flow_pair needs t in [0, 1], got {t}")
    x0 = np.asarray(x0, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    t = np.float32(t)
    x_t = (np.float32(1.0) - t) * x0 + t * noise
    return x_t, noise - x0


def draw_time(rng, train_cfg):
    """Training time: uniform or logit-normal u, then the timestep shift."""
    while True:
        if train_cfg.time_sampling == "logit_normal":
            u = 1.0 / (1.0 + math.exp(-float(num.normal(rng, ()))))
        else:
            u = float(num.uniform(rng, ()))
        if 0.0 < u < 1.0:
            return shift_time(u, train_cfg.shift)


def clean_latent(sample, model_cfg, use_context=True):
    """x0 and its token grid; without context the references are left out (plain text-to-video)."""
    codec = model_cfg.codec
    if use_context:
        x0 = encode_target(sample.vcu, sample.target, codec)
        ref = sample.vcu.ref_count
    else:
        x0, ref = encode_video(sample.target, codec), 0
    return x0, TokenGrid.from_latent(x0.shape, ref, model_cfg)


def sample_loss(params, model_cfg, sample, t, noise, drop_text=False, wanted=None, use_context=True):
    """
    Flow-matching loss of one sample at time t with the given noise

    Parameters:
    -----------
    wanted : set of str or None
        Parameter names to return gradients for; None skips the backward pass
    use_context : bool
        False runs the base transformer alone on the target video

    Returns:
    --------
    (loss, grads) with grads a dict name -> gradient (None when wanted is None)
    """
    x0, grid = clean_latent(sample, model_cfg, use_context)
    x_t, v = flow_pair(x0, noise, t)
    dtype = params["patch_embed.weight"].dtype
    xt_tokens = patch_rearrange(x_t, model_cfg.patch).astype(dtype, copy=False)
    v_tokens = patch_rearrange(v, model_cfg.patch).astype(dtype, copy=False)

    ctx, c_ctx = None, None
    if use_context:
        bundle = encode_vcu(sample.vcu, model_cfg.codec, decouple_concepts=model_cfg.concept_decouple)
        ctx, c_ctx = embed_context_forward(bundle, params, model_cfg)
    ids = text_tokens("" if drop_text else sample.vcu.prompt, model_cfg)
    pred, cache = forward_with_cache(params, model_cfg, grid, xt_tokens, ctx, ids, t)

    diff, c_sub = num.sub_forward(pred, v_tokens)
    sq, c_sq = num.mul_forward(diff, diff)
    loss, c_mean = num.mean_forward(sq)
    if wanted is None:
        return float(loss), None

    (g,) = num.mean_backward(np.ones((), dtype=dtype), c_mean)
    ga, gb = num.mul_backward(g, c_sq)
    g, _ = num.sub_backward(ga + gb, c_sub)
    sink = GradSink(wanted)
    dctx = backward(cache, g, sink)
    if dctx is not None:
        embed_context_backward(dctx, c_ctx, sink)
    return float(loss), dict(sink)


def _check_sample(sample, model_cfg, train_cfg):
    problems = [str(v) for v in validate(sample.vcu)]
    if len(sample.target) != sample.vcu.video_len:
        problems.append(f"target length {len(sample.target)} != video_len {sample.vcu.video_len}")
    codec = model_cfg.codec
    n, h, w = sample.vcu.video_len, sample.vcu.height, sample.vcu.width
    if n % codec.temporal_stride or h % codec.spatial_stride or w % codec.spatial_stride:
        problems.append(f"geometry {(n, h, w)} does not conform to the codec strides")
    if not problems:
        return True
    message = f"invalid sample {getattr(sample, 'task', '?')}/{getattr(sample, 'seed', '?')}: {'; '.join(problems)}"
    if train_cfg.on_invalid == "abort":
        logger.error(message)
        raise ArgumentError(message)
    logger.warning(f"skipping {message}")
    return False


def clip_gradients(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm


def adamw_update(state, grads, train_cfg, learning_rate):
    """One AdamW step over the trainable tensors; frozen tensors are never touched."""
    state.step += 1
    b1, b2 = train_cfg.beta1, train_cfg.beta2
    bias1, bias2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    params = state.params
    for name, (m, v) in state.moments.items():
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = (b1 * m + (1.0 - b1) * g).astype(p.dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(p.dtype)
        decayed = p - learning_rate * train_cfg.weight_decay * p
        step = learning_rate * (m / bias1) / (np.sqrt(v / bias2) + train_cfg.adam_eps)
        params[name] = (decayed - step).astype(p.dtype)
        state.moments[name] = (m, v)


def slot_noise(train_cfg, stream, step, slot, shape):
    """Noise for batch position ``slot`` of ``step``; independent of time sampling and model settings."""
    return num.normal(num.make_rng(train_cfg.seed, stream, "noise", step, slot), shape)


def fold_stream(digest, sample, noise):
    """Chain one (sample, noise) pair into a running SHA-256 over everything a run trained on."""
    h = hashlib.sha256(digest.encode("ascii"))
    h.update(sample.vcu.prompt.encode("utf-8"))
    for array in (sample.vcu.frames, sample.vcu.masks, sample.target, noise):
        h.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return h.hexdigest()


def _optimize(state, model_cfg, train_cfg, batch, learning_rate, use_context, record):
    wanted = set(state.moments)
    totals, losses = {}, []
    for slot, sample in enumerate(batch):
        if not _check_sample(sample, model_cfg, train_cfg):
            continue
        t = draw_time(state.rng, train_cfg)
        x0, _ = clean_latent(sample, model_cfg, use_context)
        noise = slot_noise(train_cfg, state.stream, state.step + 1, slot, x0.shape)
        state.stream_digest = fold_stream(state.stream_digest, sample, noise)
        drop_text = bool(num.uniform(state.rng, ()) < train_cfg.p_zero)
        loss, grads = sample_loss(state.params, model_cfg, sample, t, noise, drop_text, wanted, use_context)
        if not np.isfinite(loss):
            raise ArgumentError(f"non-finite loss {loss} at step {state.step + 1}")
        for name, g in grads.items():
            totals[name] = totals[name] + g if name in totals else g
        losses.append(loss)
        if record:
            state.loss_log.append(LossRecord(state.step + 1, str(sample.vcu.task_tag), loss))
    if not losses:
        logger.warning(f"step {state.step + 1}: every sample in the batch was skipped")
        return state, float("nan")
    grads = {name: g / len(losses) for name, g in totals.items()}
    grads, _ = clip_gradients(grads, train_cfg.grad_clip)
    adamw_update(state, grads, train_cfg, learning_rate)
    return state, float(np.mean(losses))


def train_step(state, model_cfg, train_cfg, batch):
    """
    One optimizer step over ``batch`` (batch_size * grad_accum_steps samples)

    Per sample: draw t and text dropout from the state's generator, take the noise of
    its batch slot, compute loss and gradients, and append (step, task tag, loss)
    to the loss log.
    Gradients are averaged over the batch before a single AdamW update.
    """
    if not batch:
        raise ArgumentError("train_step needs a non-empty batch")
    return _optimize(state, model_cfg, train_cfg, batch, train_cfg.learning_rate, True, True)


def _batch_indices(rng, count, size):
    return [int(i) for i in rng.integers(0, count, size=size)]


def pretrain_base(params, model_cfg, train_cfg, dataset, progress=False):
    """Train the base transformer alone as a text-to-video model on the dataset's target videos."""
    if not dataset:
        raise ArgumentError("pretrain_base needs a non-empty dataset")
    store = params.copy()
    store.set_trainable(base_trainable_names(store.names()))
    state = new_state(store, train_cfg, "pretrain")
    data_rng = num.make_rng(train_cfg.seed, "pretrain-batches")
    size = train_cfg.batch_size * train_cfg.grad_accum_steps
    losses = []
    for _ in tqdm(range(train_cfg.base_steps), desc="pretrain", disable=not progress):
        batch = [dataset[i] for i in _batch_indices(data_rng, len(dataset), size)]
        state, loss = _optimize(state, model_cfg, train_cfg, batch, train_cfg.base_learning_rate, False, False)
        losses.append(loss)
    if losses:
        logger.info(f"Base pretraining finished: {len(losses)} steps, first loss {losses[0]:.6g}, last loss {losses[-1]:.6g}")
    return state.params


def validation_losses(params, model_cfg, samples, eval_times=(0.25, 0.5, 0.75), seed=0):
    """
    Per-task mean flow-matching loss at fixed evaluation times with fixed per-sample noise

    Returns:
    --------
    dict task -> (mean loss, sample count), ordered by task name
    """
    if not samples:
        raise ArgumentError("validation set is empty")
    per_task = {}
    for index, sample in enumerate(samples):
        x0, _ = clean_latent(sample, model_cfg)
        values = []
        for k, t in enumerate(eval_times):
            noise = num.normal(num.make_rng(seed, "val-noise", index, k), x0.shape)
            values.append(sample_loss(params, model_cfg, sample, float(t), noise)[0])
        per_task.setdefault(sample.task, []).append(float(np.mean(values)))
    return {task: (float(np.mean(v)), len(v)) for task, v in sorted(per_task.items())}


def fit(model_cfg, train_cfg, dataset, valset=None, base=None, params=None, progress=False, eval_times=(0.25, 0.5, 0.75)):
    """
    Full training run

    Parameters:
    -----------
    dataset : list of TrainSample
    valset : list of TrainSample or None
        Held-out samples evaluated every ``eval_every`` steps and at the end
    base : ParamStore or None
        Pretrained base transformer; when None a fresh one is created and, if
        ``base_steps > 0``, pretrained on the dataset first
    params : ParamStore or None
        Start from these parameters instead (context pathway included)

    Returns:
    --------
    (TrainState, history) where history is a list of (step, {task: (loss, count)})
    """
    if not dataset:
        raise ArgumentError("fit needs a non-empty dataset")
    if params is None:
        if base is None:
            base = init_base_params(model_cfg, train_cfg.seed)
            if train_cfg.base_steps > 0:
                base = pretrain_base(base, model_cfg, train_cfg, dataset, progress)
        params = attach_context(base, model_cfg)
    state = new_state(params, train_cfg)
    logger.info(f"Training {model_cfg.mode}: {len(state.moments)} trainable of {len(params)} tensors, {train_cfg.steps} steps")

    data_rng = num.make_rng(train_cfg.seed, "batches")
    size = train_cfg.batch_size * train_cfg.grad_accum_steps
    history = []
    for _ in tqdm(range(train_cfg.steps), desc="train", disable=not progress):
        batch = [dataset[i] for i in _batch_indices(data_rng, len(dataset), size)]
        try:
            state, loss = train_step(state, model_cfg, train_cfg, batch)
        except VaceError as e:
            logger.error(f"Training failed at step {state.step + 1}: {str(e)}")
            raise
        if valset and train_cfg.eval_every and state.step % train_cfg.eval_every == 0:
            history.append((state.step, validation_losses(state.params, model_cfg, valset, eval_times, train_cfg.seed)))
            logger.info(f"step {state.step}: train loss {loss:.6g}, validation {_format_losses(history[-1][1])}")
    if valset and (not history or history[-1][0] != state.step):
        history.append((state.step, validation_losses(state.params, model_cfg, valset, eval_times, train_cfg.seed)))
    return state, history


def _format_losses(losses):
    return ", ".join(f"{task}={value:.4g}" for task, (value, _) in losses.items())


def loss_log_frame(loss_log):
    return pd.DataFrame([(r.step, r.task_tag, r.loss) for r in loss_log], columns=["step", "task_tag", "loss"])


def write_loss_log(loss_log, path):
    """Tab-separated loss log: step, task tag, loss (6 significant digits)."""
    loss_log_frame(loss_log).to_csv(path, sep="\t", index=False, float_format="%.6g")
