"""
Built-in invariant suite, runnable without pytest (``cli.py check``).

Each check returns a short detail string on success and raises on failure.
"""
import logging
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from src import numerics as num
from src.codec import decode_video, decouple, encode_vcu, encode_video
from src.config import CodecConfig, Geometry, ModelConfig, PlacementSpec, SampleConfig, TrainConfig, resolve_placement
from src.container import read_dataset, write_dataset
from src.datagen import generate_dataset, make_sample
from src.errors import ContractError
from src.model import (TokenGrid, embed_context, forward, init_params, patch_dim, patch_rearrange, perturb_params,
                       text_tokens)
from src.sampler import euler_sample, model_velocity, seeded_noise_for
from src.train import new_state, sample_loss, shift_time, train_step, unshift_time
from src.vcu import make_r2v, make_t2v, with_references

logger = logging.getLogger(__name__)

TINY_GEOMETRY = Geometry(frames=4, height=16, width=16, min_size=2, max_size=4)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def tiny_model(mode="adapter", **overrides):
    """L=2, D=16 configuration; TINY_GEOMETRY videos give 8 visual tokens."""
    values = dict(layers=2, model_dim=16, heads=2, text_buckets=32, max_text_tokens=6, mode=mode,
                  placement=PlacementSpec(strategy="distributed_even", k=1))
    values.update(overrides)
    return ModelConfig(**values)


def _require(condition, message):
    if not condition:
        raise ContractError(message)


def check_codec_roundtrip():
    cfg = CodecConfig()
    rng = num.make_rng(0, "check-codec")
    for _ in range(20):
        video = (num.uniform(rng, (4, 16, 16, 3)) * 2.0 - 1.0).astype(np.float32)
        _require(np.array_equal(decode_video(encode_video(video, cfg), cfg), video), "decode(encode(v)) != v")
    return "20 random videos"


def check_vcu_algebra():
    refs = np.zeros((2, 8, 8, 3), dtype=np.float32)
    a = with_references(make_t2v("p", 4, 8, 8), refs)
    b = make_r2v("p", refs, 4)
    _require(np.array_equal(a.frames, b.frames) and np.array_equal(a.masks, b.masks) and a.ref_count == b.ref_count,
             "with_references(make_t2v) differs from make_r2v")
    return "with_references(make_t2v) == make_r2v"


def check_decouple_partition():
    rng = num.make_rng(0, "check-decouple")
    for _ in range(50):
        frames = (num.uniform(rng, (2, 8, 8, 3)) * 2.0 - 1.0).astype(np.float32)
        masks = (num.uniform(rng, (2, 8, 8)) < 0.5).astype(np.float32)
        fc, fk = decouple(frames, masks)
        _require(np.array_equal(fc + fk, frames), "F_c + F_k != F")
        _require(not np.any(fc * fk), "F_c * F_k != 0")
    return "50 random (F, M)"


def _tiny_inputs(cfg, seed=0, task="mv2v_inpaint"):
    sample = make_sample(task, seed, TINY_GEOMETRY)
    bundle = encode_vcu(sample.vcu, cfg.codec)
    grid = TokenGrid.from_latent(bundle.x_c.shape, bundle.ref_latent_len, cfg)
    rng = num.make_rng(seed, "check-inputs")
    noisy = num.normal(rng, (grid.total_tokens, patch_dim(cfg)))
    return sample, bundle, grid, noisy


def check_zero_init():
    for mode in ("fullft", "adapter"):
        cfg = tiny_model(mode)
        params = init_params(cfg, 0)
        for seed in range(5):
            sample, bundle, grid, noisy = _tiny_inputs(cfg, seed)
            ctx = embed_context(bundle, params, cfg)
            out = forward(params, cfg, grid, noisy, ctx, text_tokens(sample.vcu.prompt, cfg), 0.5)
            _require(float(np.max(np.abs(out))) <= 1e-7, f"{mode}: fresh model output is not zero")
    cfg = tiny_model("adapter")
    fresh = init_params(cfg, 0)
    base = perturb_params(fresh, 1, names={n for n in fresh.names() if ".gate." not in n})
    sample, bundle, grid, noisy = _tiny_inputs(cfg, 0)
    ids = text_tokens(sample.vcu.prompt, cfg)
    ctx = embed_context(bundle, base, cfg)
    ref = forward(base, cfg, grid, noisy, ctx, ids, 0.5)
    inner = {n for n in base.names() if n.startswith("context_block") and ".gate." not in n}
    moved = perturb_params(base, 2, scale=1.0, names=inner)
    _require(np.array_equal(forward(moved, cfg, grid, noisy, ctx, ids, 0.5), ref),
             "context-block internals change the output while gates are zero")
    _require(np.array_equal(forward(base, cfg, grid, noisy, None, ids, 0.5), ref),
             "zero-gated adapter differs from the base model")
    return "both modes, gated adapter identity"


def check_mask_neutrality():
    cfg = tiny_model()
    params = init_params(cfg, 0)
    _, bundle, _, _ = _tiny_inputs(cfg)
    other = bundle.__class__(bundle.x_c, bundle.x_k, 1.0 - bundle.m_lat, bundle.ref_latent_len)
    _require(np.array_equal(embed_context(bundle, params, cfg), embed_context(other, params, cfg)),
             "embed_context depends on m_lat at init")
    return "m_lat ignored at init"


def check_placement():
    for L in range(1, 17):
        for k in range(1, L + 1):
            idx = resolve_placement(PlacementSpec(strategy="distributed_even", k=k), L)
            _require(len(idx) == k and all(a < b for a, b in zip(idx, idx[1:])) and idx[-1] < L,
                     f"distributed_even({k}) with L={L} gave {idx}")
    return "1 <= k <= L <= 16"


def check_shift_inverse():
    for s in (1.0, 2.0, 3.0, 7.5):
        for u in np.linspace(0.01, 0.99, 25):
            _require(abs(unshift_time(shift_time(float(u), s), s) - u) <= 1e-6, f"shift inverse fails at u={u}, s={s}")
    return "4 shifts x 25 points"


def gradient_errors(mode="adapter", accumulate64=True, coords=4, seed=0):
    """Max relative gradient error per trainable tensor on the tiny configuration."""
    cfg = tiny_model(mode)
    params = perturb_params(init_params(cfg, seed), seed + 1, scale=0.05)
    if accumulate64:
        params = params.astype(np.float64)
    sample = make_sample("mv2v_inpaint", seed, TINY_GEOMETRY)
    x0_shape = encode_vcu(sample.vcu, cfg.codec).x_c.shape
    noise = num.normal(num.make_rng(seed, "grad-noise"), x0_shape)
    eps, floor = (1e-5, 1e-6) if accumulate64 else (1e-2, 1e-2)
    errors = {}
    for name in params.trainable_names():
        trial = params.copy()

        def fn(x, name=name, trial=trial):
            trial[name] = x
            loss, grads = sample_loss(trial, cfg, sample, 0.6, noise, wanted={name})
            return loss, grads[name]

        errors[name] = num.grad_check(fn, params[name], eps=eps, accumulate64=accumulate64, floor=floor,
                                      max_coords=coords, rng=num.make_rng(seed, "grad-coords", name))
    return errors


GRADIENT_TOLERANCE = {True: 1e-4, False: 1e-2}


def check_gradients():
    worst = {}
    for mode in ("adapter", "fullft"):
        for accumulate64, tolerance in GRADIENT_TOLERANCE.items():
            errors = gradient_errors(mode, accumulate64=accumulate64)
            name = max(errors, key=errors.get)
            bits = 64 if accumulate64 else 32
            _require(errors[name] <= tolerance, f"{mode}/{bits}-bit: gradient of {name} off by {errors[name]:.2e}")
            worst[f"{mode}/{bits}"] = errors[name]
    return ", ".join(f"{m} max rel err {e:.1e}" for m, e in worst.items())


FROZEN_STEPS = 50


def check_frozen_parameters():
    cfg = tiny_model("adapter")
    train_cfg = TrainConfig(batch_size=2, steps=FROZEN_STEPS, base_steps=0, learning_rate=1e-2)
    params = init_params(cfg, 0)
    state = new_state(params.copy(), train_cfg)
    data = generate_dataset(["mv2v_inpaint", "v2v_gray"], 4, 0, TINY_GEOMETRY)
    for step in range(FROZEN_STEPS):
        state, _ = train_step(state, cfg, train_cfg, data[2 * (step % 2):2 * (step % 2) + 2])
    for name in params.names():
        if not state.params.trainable[name]:
            _require(np.array_equal(state.params[name], params[name]), f"frozen parameter {name} changed")
    _require(set(state.moments) == set(state.params.trainable_names()), "moments do not match trainable tensors")
    return f"{state.step} adapter steps"


def check_sampler():
    cfg = tiny_model()
    params = perturb_params(init_params(cfg, 0), 3, scale=0.05)
    sample = make_sample("mv2v_inpaint", 0, TINY_GEOMETRY)
    guided = euler_sample(params, cfg, sample.vcu, SampleConfig(steps=2, guide_scale=1.0))
    latent = seeded_noise_for(sample.vcu, cfg, 0)
    grid = TokenGrid.from_latent(latent.shape, sample.vcu.ref_count, cfg)
    velocity = model_velocity(params, cfg, sample.vcu, grid)
    cond_ids = text_tokens(sample.vcu.prompt, cfg)
    plain = euler_sample(params, cfg, sample.vcu, SampleConfig(steps=2, guide_scale=1.0),
                         velocity=lambda x, t, ids: velocity(x, t, cond_ids))
    _require(np.array_equal(guided, plain), "guide scale 1 differs from conditional-only sampling")

    eps = patch_rearrange(latent, cfg.patch)
    endpoint = euler_sample(params, cfg, sample.vcu, SampleConfig(steps=1, guide_scale=1.0),
                            velocity=lambda x, t, ids: eps)
    _require(not np.any(endpoint), "one Euler step on a constant field misses the endpoint")
    return "g=1 identity, one-step Euler endpoint"


def check_container():
    samples = generate_dataset("all", 20, 5, TINY_GEOMETRY)
    with tempfile.TemporaryDirectory() as tmp:
        write_dataset(samples, tmp)
        loaded = read_dataset(tmp)
    for a, b in zip(samples, loaded):
        _require(a.task == b.task and a.seed == b.seed and a.vcu.prompt == b.vcu.prompt
                 and str(a.vcu.task_tag) == str(b.vcu.task_tag) and a.vcu.ref_count == b.vcu.ref_count
                 and np.array_equal(a.vcu.frames, b.vcu.frames) and np.array_equal(a.vcu.masks, b.vcu.masks)
                 and np.array_equal(a.target, b.target), f"container round trip changed a {a.task} sample")
    return f"{len(samples)} samples"


CHECKS = [
    ("codec roundtrip", check_codec_roundtrip),
    ("vcu algebra", check_vcu_algebra),
    ("decouple partition", check_decouple_partition),
    ("zero-init identity", check_zero_init),
    ("mask neutrality", check_mask_neutrality),
    ("placement", check_placement),
    ("shift inverse", check_shift_inverse),
    ("gradients", check_gradients),
    ("frozen parameters", check_frozen_parameters),
    ("sampler", check_sampler),
    ("container", check_container),
]


def run_checks(names=None):
    results = []
    for name, check in CHECKS:
        if names and name not in names:
            continue
        start = time.perf_counter()
        try:
            detail, passed = check(), True
        except Exception as e:
            logger.error(f"Check {name} failed: {str(e)}")
            detail, passed = f"{type(e).__name__}: {e}", False
        results.append(CheckResult(name, passed, detail, time.perf_counter() - start))
        logger.info(f"check {name}: {'ok' if passed else 'FAILED'} ({detail})")
    return results
