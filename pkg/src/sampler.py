"""
Flow-Euler sampling with classifier-free guidance.
"""
import logging

import numpy as np

from src import numerics as num
from src.codec import decode_video, encode_vcu, latent_shape, strip_refs
from src.errors import ArgumentError
from src.model import TokenGrid, embed_context, forward, patch_rearrange, patch_restore, text_tokens
from src.train import shift_time
from src.vcu import validate

logger = logging.getLogger(__name__)


def seeded_noise_for(vcu, model_cfg, seed):
    """Initial latent noise over references and video; depends only on (seed, latent shape)."""
    shape = latent_shape(vcu, model_cfg.codec)
    return num.normal(num.make_rng(seed, "noise", *shape), shape)


def time_grid(sample_cfg):
    """K+1 decreasing times from 1 to 0; optionally warped by the training shift map."""
    K = sample_cfg.steps
    times = [1.0 - k / K for k in range(K + 1)]
    if sample_cfg.shift_grid:
        times = [t if t in (0.0, 1.0) else shift_time(t, sample_cfg.shift) for t in times]
    return times


def model_velocity(params, model_cfg, vcu, grid, context_scale=1.0):
    """Velocity callable ``v(x_tokens, t, text_ids)`` with the context tokens computed once."""
    bundle = encode_vcu(vcu, model_cfg.codec, decouple_concepts=model_cfg.concept_decouple)
    context = embed_context(bundle, params, model_cfg)

    def velocity(x_tokens, t, text_ids):
        return forward(params, model_cfg, grid, x_tokens, context, text_ids, t, context_scale)

    return velocity


def euler_sample(params, model_cfg, vcu, sample_cfg, velocity=None):
    """
    Generate the video of a unit

    Parameters:
    -----------
    params : ParamStore
    model_cfg : ModelConfig
    vcu : Vcu
    sample_cfg : SampleConfig
    velocity : callable or None
        Replacement velocity model ``v(x_tokens, t, text_ids)``; defaults to the transformer

    Returns:
    --------
    ndarray (n, h, w, 3) in [-1, 1]
    """
    problems = validate(vcu)
    if problems:
        raise ArgumentError(f"cannot sample an invalid unit: {'; '.join(str(p) for p in problems)}")
    x = seeded_noise_for(vcu, model_cfg, sample_cfg.seed)
    grid = TokenGrid.from_latent(x.shape, vcu.ref_count, model_cfg)
    if velocity is None:
        velocity = model_velocity(params, model_cfg, vcu, grid, sample_cfg.context_scale)

    cond_ids = text_tokens(vcu.prompt, model_cfg)
    uncond_ids = text_tokens("", model_cfg)
    g = sample_cfg.guide_scale
    x_tokens = patch_rearrange(x, model_cfg.patch)
    times = time_grid(sample_cfg)
    uniform = not sample_cfg.shift_grid
    for k in range(sample_cfg.steps):
        t = times[k]
        if g == 1.0:
            v = velocity(x_tokens, t, cond_ids)
        elif g == 0.0:
            v = velocity(x_tokens, t, uncond_ids)
        else:
            v_uncond = velocity(x_tokens, t, uncond_ids)
            v = v_uncond + np.float32(g) * (velocity(x_tokens, t, cond_ids) - v_uncond)
        dt = 1.0 / sample_cfg.steps if uniform else times[k] - times[k + 1]
        x_tokens = (x_tokens - np.float32(dt) * v).astype(np.float32, copy=False)

    latent = patch_restore(x_tokens, grid, model_cfg.codec.latent_channels)
    video = np.clip(decode_video(strip_refs(latent, vcu.ref_count), model_cfg.codec), -1.0, 1.0)
    if sample_cfg.composite_inactive:
        keep = np.asarray(vcu.video_masks) == 0
        video = np.where(keep[..., None], np.asarray(vcu.video_frames, dtype=np.float32), video)
    return video.astype(np.float32, copy=False)
