"""
Concept decoupling and the latent pathway.

The video codec is an exactly invertible space-to-depth rearrangement: each
``s_t x s_s x s_s x 3`` block of pixels becomes the ``d = 3 * s_t * s_s**2``
channels of one latent cell, ordered (dt, dy, dx, rgb). Masks are mapped to
the latent grid by area-average pooling over the same blocks.
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.errors import DimensionError
from src.vcu import as_frames

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatentBundle:
    x_c: np.ndarray
    x_k: np.ndarray
    m_lat: np.ndarray
    ref_latent_len: int

    @property
    def total_frames(self):
        return self.x_c.shape[0]


def decouple(frames, masks):
    """Split frames into reactive (F * M) and inactive (F * (1 - M)) parts."""
    frames = np.asarray(frames, dtype=np.float32)
    masks = np.asarray(masks, dtype=np.float32)
    if frames.shape[:-1] != masks.shape or frames.shape[-1] != 3:
        raise DimensionError("decouple", "frames and masks are not aligned", [frames.shape, masks.shape])
    m = masks[..., None]
    reactive = frames * m
    inactive = frames * (1.0 - m)
    return reactive, inactive


def _check_divisible(operation, shape, cfg):
    n, h, w = shape[:3]
    for axis, size, stride in (("frames", n, cfg.temporal_stride), ("height", h, cfg.spatial_stride),
                               ("width", w, cfg.spatial_stride)):
        if size % stride:
            raise DimensionError(operation, f"{axis} {size} not divisible by stride {stride}", [shape])


def encode_video(video, cfg):
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise DimensionError("encode_video", "video must have shape (n, h, w, 3)", [video.shape])
    _check_divisible("encode_video", video.shape, cfg)
    n, h, w, _ = video.shape
    st, ss = cfg.temporal_stride, cfg.spatial_stride
    blocks = video.reshape(n // st, st, h // ss, ss, w // ss, ss, 3)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(blocks.reshape(n // st, h // ss, w // ss, cfg.latent_channels))


def decode_video(latent, cfg):
    latent = np.asarray(latent, dtype=np.float32)
    if latent.ndim != 4 or latent.shape[-1] != cfg.latent_channels:
        raise DimensionError("decode_video", f"expected {cfg.latent_channels} latent channels", [latent.shape])
    n, h, w, _ = latent.shape
    st, ss = cfg.temporal_stride, cfg.spatial_stride
    blocks = latent.reshape(n, h, w, st, ss, ss, 3).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(blocks.reshape(n * st, h * ss, w * ss, 3))


def encode_mask(masks, cfg):
    masks = np.asarray(masks, dtype=np.float32)
    if masks.ndim != 3:
        raise DimensionError("encode_mask", "masks must have shape (n, h, w)", [masks.shape])
    _check_divisible("encode_mask", masks.shape, cfg)
    n, h, w = masks.shape
    st, ss = cfg.temporal_stride, cfg.spatial_stride
    blocks = masks.reshape(n // st, st, h // ss, ss, w // ss, ss).astype(np.float64)
    pooled = blocks.sum(axis=(1, 3, 5)) / float(st * ss * ss)
    return pooled.astype(np.float32)[..., None]


def encode_reference(ref, cfg):
    """A single reference image becomes exactly one latent frame (replicated s_t times, then encoded)."""
    ref = np.asarray(ref, dtype=np.float32)
    return encode_video(np.repeat(ref[None], cfg.temporal_stride, axis=0), cfg)


def encode_vcu(vcu, cfg, decouple_concepts=True):
    """
    Encode a unit into aligned reactive/inactive latents and a latent mask

    References are keep-content: they go to the front of x_k with zero x_c and
    zero latent mask. With ``decouple_concepts=False`` every frame (references
    included) is routed to x_c and x_k is all zero.
    """
    frames = as_frames(vcu.frames, "encode_vcu")
    l = vcu.ref_count
    video, masks = frames[l:], np.asarray(vcu.masks, dtype=np.float32)[l:]
    _check_divisible("encode_vcu", video.shape, cfg)
    if l:
        ref_lat = np.concatenate([encode_reference(r, cfg) for r in frames[:l]])
    else:
        ref_lat = np.zeros((0,) + _latent_shape(video.shape, cfg)[1:], dtype=np.float32)
    ref_zero = np.zeros_like(ref_lat)

    if decouple_concepts:
        reactive, inactive = decouple(video, masks)
        x_c = np.concatenate([ref_zero, encode_video(reactive, cfg)])
        x_k = np.concatenate([ref_lat, encode_video(inactive, cfg)])
    else:
        x_c = np.concatenate([ref_lat, encode_video(video, cfg)])
        x_k = np.zeros_like(x_c)
    m_video = encode_mask(masks, cfg)
    m_lat = np.concatenate([np.zeros((l,) + m_video.shape[1:], dtype=np.float32), m_video])
    return LatentBundle(x_c=x_c, x_k=x_k, m_lat=m_lat, ref_latent_len=l)


def encode_target(vcu, target, cfg):
    """Clean latent for training: reference latents followed by the encoded target video."""
    target = as_frames(target, "encode_target")
    video_lat = encode_video(target, cfg)
    refs = [encode_reference(r, cfg) for r in np.asarray(vcu.frames)[:vcu.ref_count]]
    return np.concatenate(refs + [video_lat]) if refs else video_lat


def _latent_shape(shape, cfg):
    n, h, w = shape[:3]
    return (n // cfg.temporal_stride, h // cfg.spatial_stride, w // cfg.spatial_stride, cfg.latent_channels)


def latent_shape(vcu, cfg):
    n, h, w, d = _latent_shape((vcu.video_len, vcu.height, vcu.width), cfg)
    return (vcu.ref_count + n, h, w, d)


def strip_refs(latent, ref_latent_len):
    if not 0 <= ref_latent_len <= latent.shape[0]:
        raise DimensionError("strip_refs", f"cannot drop {ref_latent_len} reference frames", [latent.shape])
    return latent[ref_latent_len:]
