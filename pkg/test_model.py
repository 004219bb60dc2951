# File: test_model.py
import numpy as np
import pytest

from src import numerics as num
from src.checks import TINY_GEOMETRY, gradient_errors, tiny_model
from src.codec import encode_vcu
from src.config import PlacementSpec
from src.datagen import make_sample
from src.errors import DimensionError
from src.model import (GradSink, ParamStore, TokenGrid, attach_context, embed_context, forward, forward_with_cache,
                       backward, init_base_params, init_params, param_shapes, patch_dim, patch_rearrange,
                       patch_restore, perturb_params, positional_encoding, text_tokens, trainable_mask)


def _inputs(cfg, seed=0, task="mv2v_inpaint"):
    sample = make_sample(task, seed, TINY_GEOMETRY)
    bundle = encode_vcu(sample.vcu, cfg.codec)
    grid = TokenGrid.from_latent(bundle.x_c.shape, bundle.ref_latent_len, cfg)
    noisy = num.normal(num.make_rng(seed, "model-test"), (grid.total_tokens, patch_dim(cfg)))
    return sample, bundle, grid, noisy


def _trained_like(cfg, seed=1):
    """Perturbed parameters with zero gates, as if the base had been trained."""
    params = init_params(cfg, 0)
    return perturb_params(params, seed, scale=0.05, names={n for n in params.names() if ".gate." not in n})


def test_token_grid_counts():
    """Tiny videos give 2 latent frames of 2x2 patches"""
    cfg = tiny_model()
    _, bundle, grid, _ = _inputs(cfg)
    assert bundle.x_c.shape == (2, 4, 4, 96)
    assert (grid.ref_frames, grid.frames, grid.tokens_per_frame, grid.total_tokens) == (0, 2, 4, 8)
    with pytest.raises(DimensionError):
        TokenGrid.from_latent((2, 3, 4, 96), 0, cfg)


def test_patch_restore_inverts_rearrange():
    """Patch rearrangement is a pure permutation of the latent"""
    cfg = tiny_model()
    latent = num.normal(num.make_rng(3), (3, 4, 4, 96))
    grid = TokenGrid.from_latent(latent.shape, 1, cfg)
    tokens = patch_rearrange(latent, cfg.patch)
    assert tokens.shape == (12, 384)
    assert np.array_equal(patch_restore(tokens, grid, 96), latent)


def test_positional_encoding_distinct_rows():
    """Every token position gets its own encoding"""
    cfg = tiny_model()
    grid = TokenGrid.from_latent((3, 4, 4, 96), 1, cfg)
    pe = positional_encoding(grid, cfg.model_dim)
    assert pe.shape == (12, 16)
    assert len({row.tobytes() for row in pe}) == 12


def test_text_tokens_pad_and_truncate():
    """Prompts hash to bucket ids, padded or truncated to max_text_tokens"""
    cfg = tiny_model()
    ids = text_tokens("a red ball", cfg)
    assert len(ids) == 6 and ids[3:] == [cfg.pad_id] * 3
    assert all(0 <= i < cfg.text_buckets for i in ids[:3])
    assert ids == text_tokens("a  red\tball", cfg)
    assert text_tokens("", cfg) == [cfg.pad_id] * 6
    assert len(text_tokens("w " * 20, cfg)) == 6


def test_param_shapes_by_mode():
    """Only adapter mode has context blocks; both modes have the context embedder"""
    adapter, fullft = tiny_model("adapter"), tiny_model("fullft")
    assert "context_block.0.gate.weight" in param_shapes(adapter)
    assert not any(n.startswith("context_block.") for n in param_shapes(fullft))
    assert "context_embed.weight_m" in param_shapes(fullft)
    assert param_shapes(adapter)["text_embed.table"] == (33, 16)


def test_trainable_masks():
    """fullft trains everything; adapter trains only the context pathway"""
    adapter = init_params(tiny_model("adapter"), 0)
    fullft = init_params(tiny_model("fullft"), 0)
    assert set(fullft.trainable_names()) == set(fullft.names())
    assert adapter.trainable_names()
    assert all(n.startswith(("context_embed.", "context_block.")) for n in adapter.trainable_names())
    assert trainable_mask(tiny_model("fullft")) == set(param_shapes(tiny_model("fullft")))


def test_attach_context_copies_placed_blocks():
    """Context blocks start as copies of the main blocks they follow, with zero gates"""
    cfg = tiny_model("adapter", layers=4, placement=PlacementSpec(strategy="distributed_even", k=2))
    assert cfg.context_layers == [0, 2]
    base = init_base_params(cfg, 0)
    params = attach_context(base, cfg)
    assert np.array_equal(params["context_block.1.attn.qkv.weight"], base["main_block.2.attn.qkv.weight"])
    assert np.array_equal(params["context_embed.weight_c"], base["patch_embed.weight"])
    assert np.array_equal(params["context_embed.weight_k"], base["patch_embed.weight"])
    assert not params["context_embed.weight_m"].any()
    assert not params["context_block.0.gate.weight"].any()


def test_init_is_deterministic():
    """The same seed gives identical parameters"""
    a, b = init_params(tiny_model(), 4), init_params(tiny_model(), 4)
    assert all(np.array_equal(a[n], b[n]) for n in a.names())


@pytest.mark.parametrize("mode", ["adapter", "fullft"])
def test_fresh_model_predicts_zero(mode):
    """Zero-initialized output layers give an all-zero velocity"""
    cfg = tiny_model(mode)
    params = init_params(cfg, 0)
    sample, bundle, grid, noisy = _inputs(cfg)
    out = forward(params, cfg, grid, noisy, embed_context(bundle, params, cfg), text_tokens(sample.vcu.prompt, cfg), 0.3)
    assert out.shape == noisy.shape
    assert not out.any()


def test_zero_gates_keep_base_behavior():
    """With zero gates the adapter model equals the base transformer for any context"""
    cfg = tiny_model("adapter")
    params = _trained_like(cfg)
    sample, bundle, grid, noisy = _inputs(cfg)
    ids = text_tokens(sample.vcu.prompt, cfg)
    with_ctx = forward(params, cfg, grid, noisy, embed_context(bundle, params, cfg), ids, 0.5)
    without = forward(params, cfg, grid, noisy, None, ids, 0.5)
    assert with_ctx.any()
    assert np.array_equal(with_ctx, without)


def test_open_gates_inject_context():
    """Non-zero gates make the output depend on the context; context_scale 0 switches it off"""
    cfg = tiny_model("adapter")
    params = perturb_params(init_params(cfg, 0), 2, scale=0.05)
    sample, bundle, grid, noisy = _inputs(cfg)
    ids = text_tokens(sample.vcu.prompt, cfg)
    ctx = embed_context(bundle, params, cfg)
    base = forward(params, cfg, grid, noisy, None, ids, 0.5)
    assert not np.allclose(forward(params, cfg, grid, noisy, ctx, ids, 0.5), base)
    assert np.array_equal(forward(params, cfg, grid, noisy, ctx, ids, 0.5, context_scale=0.0), base)


def test_mask_channel_ignored_at_init():
    """The zero mask weights make the context embedding independent of the latent mask"""
    cfg = tiny_model()
    params = init_params(cfg, 0)
    _, bundle, _, _ = _inputs(cfg)
    flipped = bundle.__class__(bundle.x_c, bundle.x_k, 1.0 - bundle.m_lat, bundle.ref_latent_len)
    assert np.array_equal(embed_context(bundle, params, cfg), embed_context(flipped, params, cfg))


def test_references_extend_the_token_sequence():
    """Reference frames add one latent frame of tokens each"""
    cfg = tiny_model()
    params = _trained_like(cfg)
    sample, bundle, grid, _ = _inputs(cfg, task="r2v_object")
    assert grid.ref_frames == 1 and grid.total_tokens == 12
    noisy = num.normal(num.make_rng(0), (12, patch_dim(cfg)))
    out = forward(params, cfg, grid, noisy, embed_context(bundle, params, cfg), text_tokens(sample.vcu.prompt, cfg), 0.5)
    assert out.shape == (12, patch_dim(cfg))


def test_forward_shape_errors():
    """Misaligned noisy or context tokens raise DimensionError"""
    cfg = tiny_model()
    params = init_params(cfg, 0)
    sample, bundle, grid, noisy = _inputs(cfg)
    ids = text_tokens(sample.vcu.prompt, cfg)
    with pytest.raises(DimensionError):
        forward(params, cfg, grid, noisy[:-1], None, ids, 0.5)
    with pytest.raises(DimensionError):
        forward(params, cfg, grid, noisy, np.zeros((7, cfg.model_dim), dtype=np.float32), ids, 0.5)


def test_backward_without_context():
    """Backward returns no context gradient when the context was not used"""
    cfg = tiny_model("fullft")
    params = _trained_like(cfg)
    sample, _, grid, noisy = _inputs(cfg)
    out, cache = forward_with_cache(params, cfg, grid, noisy, None, text_tokens(sample.vcu.prompt, cfg), 0.5)
    sink = GradSink()
    assert backward(cache, np.ones_like(out), sink) is None
    assert "final.proj.weight" in sink and "main_block.0.attn.qkv.weight" in sink


def test_grad_sink_filters():
    """GradSink keeps only the wanted names and accumulates repeats"""
    sink = GradSink({"a"})
    sink.add("a", np.ones(2))
    sink.add("a", np.ones(2))
    sink.add("b", np.ones(2))
    assert set(sink) == {"a"} and np.array_equal(sink["a"], [2.0, 2.0])


def test_param_store_copy_is_independent():
    """Copies do not share tensors and keep the trainable flags"""
    store = ParamStore({"w": np.zeros(2, dtype=np.float32)}, {"w": False})
    clone = store.copy()
    clone["w"][0] = 1.0
    assert store["w"][0] == 0.0 and not clone.trainable["w"]


@pytest.mark.parametrize("mode", ["adapter", "fullft"])
def test_gradients_match_finite_differences(mode):
    """Analytic gradients of every trainable tensor agree with central differences in float64"""
    errors = gradient_errors(mode, accumulate64=True, coords=3)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-4, f"{worst}: {errors[worst]:.2e}"


@pytest.mark.parametrize("mode", ["adapter", "fullft"])
def test_float32_gradients_are_close(mode):
    """In 32-bit storage every trainable tensor's gradient is within 1e-2 relative error"""
    errors = gradient_errors(mode, accumulate64=False, coords=4)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-2, f"{worst}: {errors[worst]:.2e}"


def test_placement_lives_in_config():
    """Context block placement is resolved by src.config alone"""
    import src.model
    from src.config import resolve_placement

    cfg = tiny_model(layers=4, placement=PlacementSpec(strategy="distributed_even", k=2))
    assert not hasattr(src.model, "resolve_placement")
    assert cfg.context_layers == resolve_placement(cfg.placement, 4) == [0, 2]
    assert sum(name.startswith("context_block") and name.endswith(".gate.weight")
               for name in init_params(cfg, 0).names()) == 2
