"""
Minimal diffusion transformer with a context pathway.

Every layer is composed from the operations in ``src.numerics`` and has a
hand-written backward pass. Tensors are per sample: visual tokens are
(N, D), text embeddings are (S, D).

Modes:
  fullft  - context tokens are added to the embedded noisy tokens once, before the block stack
  adapter - the main blocks see noisy tokens only; a cascade of context blocks runs on the
            context tokens and each block's output, through a zero-initialized gate, is added
            to the main hidden state right after main block ``placement[j]``

Parameter names: ``patch_embed.*``, ``text_embed.table``, ``text_norm.*``, ``time_embed.*``,
``main_block.{i}.*``, ``final.*`` (the base transformer) and ``context_embed.*``,
``context_block.{j}.*`` (the context pathway).
"""
import logging
import math
from dataclasses import dataclass

import mmh3
import numpy as np

from src import numerics as num
from src.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

BLOCK_LINEARS = ("ada", "attn.qkv", "attn.out", "cross.q", "cross.kv", "cross.out", "mlp.fc1", "mlp.fc2")
CONTEXT_PREFIXES = ("context_embed.", "context_block.")


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with per-name trainable flags."""

    def __init__(self, tensors=None, trainable=None):
        self.tensors = dict(tensors or {})
        self.trainable = {name: bool((trainable or {}).get(name, True)) for name in self.tensors}

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value
        self.trainable.setdefault(name, True)

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return sorted(self.tensors)

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, dict(self.trainable))

    def astype(self, dtype):
        return ParamStore({k: v.astype(dtype) for k, v in self.tensors.items()}, dict(self.trainable))

    def set_trainable(self, names):
        names = set(names)
        self.trainable = {k: k in names for k in self.tensors}

    def trainable_names(self):
        return sorted(k for k, flag in self.trainable.items() if flag)


class GradSink(dict):
    """Accumulates gradients, ignoring parameters outside ``wanted`` (None keeps all)."""

    def __init__(self, wanted=None):
        super().__init__()
        self.wanted = None if wanted is None else set(wanted)

    def add(self, name, grad):
        if self.wanted is not None and name not in self.wanted:
            return
        if name in self:
            self[name] = self[name] + grad
        else:
            self[name] = np.array(grad, copy=True)


# ---------------------------------------------------------------------------
# Token geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenGrid:
    ref_frames: int
    frames: int
    height: int
    width: int
    patch: tuple

    @classmethod
    def from_latent(cls, shape, ref_frames, cfg):
        total, h, w = shape[:3]
        pt, ph, pw = cfg.patch
        if total % pt or h % ph or w % pw:
            raise DimensionError("patchify", f"latent grid not divisible by patch {cfg.patch}", [shape])
        return cls(int(ref_frames), int(total - ref_frames), int(h), int(w), tuple(cfg.patch))

    @property
    def total_frames(self):
        return self.ref_frames + self.frames

    @property
    def tokens_per_frame(self):
        return (self.height // self.patch[1]) * (self.width // self.patch[2])

    @property
    def total_tokens(self):
        return (self.total_frames // self.patch[0]) * self.tokens_per_frame


def patch_rearrange(latent, patch):
    """(T, h', w', c) -> (tokens, p_t*p_h*p_w*c), tokens ordered frame-major, then row, then column."""
    T, h, w, c = latent.shape
    pt, ph, pw = patch
    if T % pt or h % ph or w % pw:
        raise DimensionError("patchify", f"latent grid not divisible by patch {tuple(patch)}", [latent.shape])
    x = latent.reshape(T // pt, pt, h // ph, ph, w // pw, pw, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x.reshape((T // pt) * (h // ph) * (w // pw), pt * ph * pw * c))


def patch_restore(tokens, grid, channels):
    pt, ph, pw = grid.patch
    T, h, w = grid.total_frames, grid.height, grid.width
    if tokens.shape != (grid.total_tokens, pt * ph * pw * channels):
        raise DimensionError("unpatchify", "token matrix does not match the grid", [tokens.shape])
    x = tokens.reshape(T // pt, h // ph, w // pw, pt, ph, pw, channels).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x.reshape(T, h, w, channels))


def _sinusoid(positions, dim):
    """Sinusoidal features [sin(p * f_k), cos(p * f_k)] with f_k = 10000^(-k / (dim/2))."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(out), 1))], axis=1)
    return out


def positional_encoding(grid, dim):
    """
    Additive positional encoding over (frame, row, col) of each token

    The row and column parts use ``2 * (dim // 6)`` channels each and the
    frame part uses the rest. Reference frames occupy frame indices
    0..l'-1 and video frames continue from l'.
    """
    axis_dim = 2 * (dim // 6)
    frame_dim = dim - 2 * axis_dim
    tf = grid.total_frames // grid.patch[0]
    th, tw = grid.height // grid.patch[1], grid.width // grid.patch[2]
    f, r, c = np.meshgrid(np.arange(tf), np.arange(th), np.arange(tw), indexing="ij")
    parts = [_sinusoid(f.ravel(), frame_dim)]
    if axis_dim:
        parts += [_sinusoid(r.ravel(), axis_dim), _sinusoid(c.ravel(), axis_dim)]
    return np.concatenate(parts, axis=1).astype(np.float32)


def timestep_embedding(t, dim):
    return _sinusoid(np.array([1000.0 * float(t)]), dim).astype(np.float32)


def text_tokens(prompt, cfg):
    """
    Whitespace-split words hashed into [0, text_buckets) with MurmurHash3 (x64, 128-bit, seed 0;
    the low unsigned 64 bits), truncated/padded to max_text_tokens with pad id = text_buckets.
    """
    ids = [mmh3.hash64(word, 0, True, False)[0] % cfg.text_buckets for word in prompt.split()]
    ids = ids[:cfg.max_text_tokens]
    return ids + [cfg.pad_id] * (cfg.max_text_tokens - len(ids))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def patch_dim(cfg, channels=None):
    pt, ph, pw = cfg.patch
    return pt * ph * pw * (cfg.codec.latent_channels if channels is None else channels)


def _block_shapes(cfg):
    D = cfg.model_dim
    H = cfg.mlp_ratio * D
    return {
        "ada": (D, 9 * D),
        "attn.qkv": (D, 3 * D),
        "attn.out": (D, D),
        "cross.q": (D, D),
        "cross.kv": (D, 2 * D),
        "cross.out": (D, D),
        "mlp.fc1": (D, H),
        "mlp.fc2": (H, D),
    }


def base_param_shapes(cfg):
    D, P = cfg.model_dim, patch_dim(cfg)
    shapes = {
        "patch_embed.weight": (P, D),
        "patch_embed.bias": (D,),
        "text_embed.table": (cfg.text_buckets + 1, D),
        "text_norm.weight": (D,),
        "text_norm.bias": (D,),
        "time_embed.fc1.weight": (D, D),
        "time_embed.fc1.bias": (D,),
        "time_embed.fc2.weight": (D, D),
        "time_embed.fc2.bias": (D,),
        "final.ada.weight": (D, 2 * D),
        "final.ada.bias": (2 * D,),
        "final.proj.weight": (D, P),
        "final.proj.bias": (P,),
    }
    for i in range(cfg.layers):
        for name, (fan_in, fan_out) in _block_shapes(cfg).items():
            shapes[f"main_block.{i}.{name}.weight"] = (fan_in, fan_out)
            shapes[f"main_block.{i}.{name}.bias"] = (fan_out,)
    return shapes


def param_shapes(cfg):
    D, P = cfg.model_dim, patch_dim(cfg)
    shapes = base_param_shapes(cfg)
    shapes.update({
        "context_embed.weight_c": (P, D),
        "context_embed.weight_k": (P, D),
        "context_embed.weight_m": (patch_dim(cfg, 1), D),
        "context_embed.bias": (D,),
    })
    for j, _ in enumerate(cfg.context_layers):
        for name, (fan_in, fan_out) in _block_shapes(cfg).items():
            shapes[f"context_block.{j}.{name}.weight"] = (fan_in, fan_out)
            shapes[f"context_block.{j}.{name}.bias"] = (fan_out,)
        shapes[f"context_block.{j}.gate.weight"] = (D, D)
        shapes[f"context_block.{j}.gate.bias"] = (D,)
    return shapes


def init_base_params(cfg, seed):
    """Fresh base transformer: normal(0, init_std) weights, zero biases, zero modulation and final projection."""
    rng = num.make_rng(seed, "init")
    tensors = {}
    for name, shape in base_param_shapes(cfg).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif name == "text_norm.weight":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif ".ada." in name or name.startswith("final.proj"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = num.normal(rng, shape) * np.float32(cfg.init_std)
    return ParamStore(tensors)


def attach_context(params, cfg):
    """
    Derive the context pathway from the base weights

    Context embedder: W_c and W_k copy the patch embedder, W_m is zero, the bias
    copies the patch bias. Context block j copies main block ``placement[j]``
    with a zero-initialized output gate.
    """
    tensors = {k: v.copy() for k, v in params.tensors.items() if not k.startswith(CONTEXT_PREFIXES)}
    D = cfg.model_dim
    tensors["context_embed.weight_c"] = tensors["patch_embed.weight"].copy()
    tensors["context_embed.weight_k"] = tensors["patch_embed.weight"].copy()
    tensors["context_embed.weight_m"] = np.zeros((patch_dim(cfg, 1), D), dtype=np.float32)
    tensors["context_embed.bias"] = tensors["patch_embed.bias"].copy()
    for j, i in enumerate(cfg.context_layers):
        for name in BLOCK_LINEARS:
            for suffix in (".weight", ".bias"):
                tensors[f"context_block.{j}.{name}{suffix}"] = tensors[f"main_block.{i}.{name}{suffix}"].copy()
        tensors[f"context_block.{j}.gate.weight"] = np.zeros((D, D), dtype=np.float32)
        tensors[f"context_block.{j}.gate.bias"] = np.zeros((D,), dtype=np.float32)
    store = ParamStore(tensors)
    store.set_trainable(trainable_mask(cfg, store.names()))
    return store


def init_params(cfg, seed):
    return attach_context(init_base_params(cfg, seed), cfg)


def perturb_params(params, seed, scale=0.02, names=None):
    """Add seeded normal noise to the named tensors (all when None); a stand-in for trained weights."""
    rng = num.make_rng(seed, "perturb")
    out = params.copy()
    for name in params.names():
        if names is None or name in names:
            out[name] = (params[name] + num.normal(rng, params[name].shape) * np.float32(scale)).astype(params[name].dtype)
    return out


def trainable_mask(cfg, names=None):
    """fullft: every parameter; adapter: only the context embedder and context blocks."""
    names = list(param_shapes(cfg)) if names is None else list(names)
    if cfg.mode == "fullft":
        return set(names)
    if cfg.mode == "adapter":
        return {n for n in names if n.startswith(CONTEXT_PREFIXES)}
    raise ConfigError(f"unknown mode {cfg.mode!r}")


def base_trainable_names(names):
    return {n for n in names if not n.startswith(CONTEXT_PREFIXES)}


# ---------------------------------------------------------------------------
# Layers (forward returns (out, cache); backward returns input gradients)
# ---------------------------------------------------------------------------

def _linear(x, params, name):
    y, c_mm = num.matmul_forward(x, params[name + ".weight"])
    y, c_add = num.add_forward(y, params[name + ".bias"])
    return y, (name, c_mm, c_add)


def _linear_back(g, cache, grads):
    name, c_mm, c_add = cache
    g, gb = num.add_backward(g, c_add)
    gx, gw = num.matmul_backward(g, c_mm)
    grads.add(name + ".weight", gw)
    grads.add(name + ".bias", gb)
    return gx


def _modulate(x, shift, scale):
    xn, c_ln = num.layer_norm_forward(x)
    one_plus, c_one = num.add_forward(scale, 1.0)
    y, c_mul = num.mul_forward(xn, one_plus)
    y, c_add = num.add_forward(y, shift)
    return y, (c_ln, c_one, c_mul, c_add)


def _modulate_back(g, cache):
    c_ln, c_one, c_mul, c_add = cache
    g, dshift = num.add_backward(g, c_add)
    dxn, done = num.mul_backward(g, c_mul)
    dscale, _ = num.add_backward(done, c_one)
    dx, _, _ = num.layer_norm_backward(dxn, c_ln)
    return dx, dshift, dscale


def _split_heads(x, heads):
    n, d = x.shape
    y, c_r = num.reshape_forward(x, (n, heads, d // heads))
    y, c_p = num.permute_forward(y, (1, 0, 2))
    return y, (c_r, c_p)


def _split_heads_back(g, cache):
    c_r, c_p = cache
    (g,) = num.permute_backward(g, c_p)
    (g,) = num.reshape_backward(g, c_r)
    return g


def _merge_heads(x):
    h, n, dh = x.shape
    y, c_p = num.permute_forward(x, (1, 0, 2))
    y, c_r = num.reshape_forward(y, (n, h * dh))
    return y, (c_p, c_r)


def _merge_heads_back(g, cache):
    c_p, c_r = cache
    (g,) = num.reshape_backward(g, c_r)
    (g,) = num.permute_backward(g, c_p)
    return g


def _attention_core(q, k, v):
    """Scaled dot-product attention over (heads, tokens, head_dim) tensors."""
    kt, c_kt = num.permute_forward(k, (0, 2, 1))
    s, c_s = num.matmul_forward(q, kt)
    s, c_sc = num.scale_forward(s, 1.0 / math.sqrt(q.shape[-1]))
    p, c_sm = num.softmax_forward(s)
    o, c_o = num.matmul_forward(p, v)
    return o, (c_kt, c_s, c_sc, c_sm, c_o)


def _attention_core_back(g, cache):
    c_kt, c_s, c_sc, c_sm, c_o = cache
    dp, dv = num.matmul_backward(g, c_o)
    (ds,) = num.softmax_backward(dp, c_sm)
    (ds,) = num.scale_backward(ds, c_sc)
    dq, dkt = num.matmul_backward(ds, c_s)
    (dk,) = num.permute_backward(dkt, c_kt)
    return dq, dk, dv


def _chunks(x, count):
    size = x.shape[-1] // count
    out, caches = [], []
    for i in range(count):
        y, c = num.slice_forward(x, x.ndim - 1, i * size, (i + 1) * size)
        out.append(y)
        caches.append(c)
    return out, caches


def _chunks_back(grads, caches):
    total = None
    for g, c in zip(grads, caches):
        if g is None:
            continue
        (d,) = num.slice_backward(g, c)
        total = d if total is None else total + d
    return total


def _self_attention(x, params, prefix, heads):
    qkv, c_lin = _linear(x, params, prefix + "attn.qkv")
    (q, k, v), c_chunks = _chunks(qkv, 3)
    q, c_q = _split_heads(q, heads)
    k, c_k = _split_heads(k, heads)
    v, c_v = _split_heads(v, heads)
    o, c_core = _attention_core(q, k, v)
    o, c_merge = _merge_heads(o)
    y, c_out = _linear(o, params, prefix + "attn.out")
    return y, (c_lin, c_chunks, c_q, c_k, c_v, c_core, c_merge, c_out)


def _self_attention_back(g, cache, grads):
    c_lin, c_chunks, c_q, c_k, c_v, c_core, c_merge, c_out = cache
    g = _linear_back(g, c_out, grads)
    g = _merge_heads_back(g, c_merge)
    dq, dk, dv = _attention_core_back(g, c_core)
    dq = _split_heads_back(dq, c_q)
    dk = _split_heads_back(dk, c_k)
    dv = _split_heads_back(dv, c_v)
    dqkv = _chunks_back([dq, dk, dv], c_chunks)
    return _linear_back(dqkv, c_lin, grads)


def _cross_attention(x, text, params, prefix, heads):
    q, c_q_lin = _linear(x, params, prefix + "cross.q")
    kv, c_kv_lin = _linear(text, params, prefix + "cross.kv")
    (k, v), c_chunks = _chunks(kv, 2)
    q, c_q = _split_heads(q, heads)
    k, c_k = _split_heads(k, heads)
    v, c_v = _split_heads(v, heads)
    o, c_core = _attention_core(q, k, v)
    o, c_merge = _merge_heads(o)
    y, c_out = _linear(o, params, prefix + "cross.out")
    return y, (c_q_lin, c_kv_lin, c_chunks, c_q, c_k, c_v, c_core, c_merge, c_out)


def _cross_attention_back(g, cache, grads):
    c_q_lin, c_kv_lin, c_chunks, c_q, c_k, c_v, c_core, c_merge, c_out = cache
    g = _linear_back(g, c_out, grads)
    g = _merge_heads_back(g, c_merge)
    dq, dk, dv = _attention_core_back(g, c_core)
    dq = _split_heads_back(dq, c_q)
    dk = _split_heads_back(dk, c_k)
    dv = _split_heads_back(dv, c_v)
    dkv = _chunks_back([dk, dv], c_chunks)
    dtext = _linear_back(dkv, c_kv_lin, grads)
    dx = _linear_back(dq, c_q_lin, grads)
    return dx, dtext


def _mlp(x, params, prefix):
    h, c_fc1 = _linear(x, params, prefix + "mlp.fc1")
    h, c_act = num.gelu_forward(h)
    y, c_fc2 = _linear(h, params, prefix + "mlp.fc2")
    return y, (c_fc1, c_act, c_fc2)


def _mlp_back(g, cache, grads):
    c_fc1, c_act, c_fc2 = cache
    g = _linear_back(g, c_fc2, grads)
    (g,) = num.gelu_backward(g, c_act)
    return _linear_back(g, c_fc1, grads)


def _gated_residual(h, branch, gate):
    gb, c_mul = num.mul_forward(branch, gate)
    out, c_add = num.add_forward(h, gb)
    return out, (c_mul, c_add)


def _gated_residual_back(g, cache):
    c_mul, c_add = cache
    dh, dgb = num.add_backward(g, c_add)
    dbranch, dgate = num.mul_backward(dgb, c_mul)
    return dh, dbranch, dgate


def block_forward(h, cond, text, params, prefix, heads):
    """
    adaLN block: h += g1 * SelfAttn(mod(LN h)); h += g2 * CrossAttn(mod(LN h), text); h += g3 * MLP(mod(LN h))

    ``cond`` is the (1, D) activated timestep embedding; the nine (1, D) modulation
    vectors (shift, scale, gate per sub-layer) come from a zero-initialized linear.
    """
    mod, c_mod = _linear(cond, params, prefix + "ada")
    chunks, c_chunks = _chunks(mod, 9)
    caches = []
    for sub in range(3):
        shift, scale, gate = chunks[3 * sub:3 * sub + 3]
        x, c_m = _modulate(h, shift, scale)
        if sub == 0:
            y, c_y = _self_attention(x, params, prefix, heads)
        elif sub == 1:
            y, c_y = _cross_attention(x, text, params, prefix, heads)
        else:
            y, c_y = _mlp(x, params, prefix)
        h, c_r = _gated_residual(h, y, gate)
        caches.append((c_m, c_y, c_r))
    return h, (prefix, c_mod, c_chunks, caches)


def block_backward(g, cache, grads):
    prefix, c_mod, c_chunks, caches = cache
    dchunks = [None] * 9
    dtext = None
    for sub in reversed(range(3)):
        c_m, c_y, c_r = caches[sub]
        g_skip, dy, dgate = _gated_residual_back(g, c_r)
        if sub == 0:
            dx = _self_attention_back(dy, c_y, grads)
        elif sub == 1:
            dx, dtext = _cross_attention_back(dy, c_y, grads)
        else:
            dx = _mlp_back(dy, c_y, grads)
        dh, dshift, dscale = _modulate_back(dx, c_m)
        g = g_skip + dh
        dchunks[3 * sub:3 * sub + 3] = [dshift, dscale, dgate]
    dmod = _chunks_back(dchunks, c_chunks)
    dcond = _linear_back(dmod, c_mod, grads)
    return g, dcond, dtext


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

def patchify(latent, params, cfg, ref_frames=0):
    """Rearranged latent patches projected to D plus the positional encoding."""
    grid = TokenGrid.from_latent(latent.shape, ref_frames, cfg)
    tokens, _ = _patch_embed(patch_rearrange(latent, cfg.patch), grid, params, cfg)
    return tokens


def _patch_embed(patches, grid, params, cfg):
    y, c_lin = _linear(patches.astype(params["patch_embed.weight"].dtype, copy=False), params, "patch_embed")
    y, c_pos = num.add_forward(y, positional_encoding(grid, cfg.model_dim).astype(y.dtype))
    return y, (c_lin, c_pos)


def _patch_embed_back(g, cache, grads):
    c_lin, c_pos = cache
    g, _ = num.add_backward(g, c_pos)
    return _linear_back(g, c_lin, grads)


def embed_context(bundle, params, cfg):
    tokens, _ = embed_context_forward(bundle, params, cfg)
    return tokens


def embed_context_forward(bundle, params, cfg):
    """
    Context tokens: per-patch channel concatenation [x_c | x_k | m_lat] projected by the
    block weight [W_c; W_k; W_m], computed as the sum of the three block products.
    """
    shapes = {bundle.x_c.shape[:3], bundle.x_k.shape[:3], bundle.m_lat.shape[:3]}
    if len(shapes) != 1:
        raise DimensionError("embed_context", "x_c, x_k and m_lat are not aligned",
                             [bundle.x_c.shape, bundle.x_k.shape, bundle.m_lat.shape])
    grid = TokenGrid.from_latent(bundle.x_c.shape, bundle.ref_latent_len, cfg)
    dtype = params["context_embed.weight_c"].dtype
    pc = patch_rearrange(bundle.x_c, cfg.patch).astype(dtype, copy=False)
    pk = patch_rearrange(bundle.x_k, cfg.patch).astype(dtype, copy=False)
    pm = patch_rearrange(bundle.m_lat, cfg.patch).astype(dtype, copy=False)
    if pc.shape[1] != params["context_embed.weight_c"].shape[0] or pm.shape[1] != params["context_embed.weight_m"].shape[0]:
        raise DimensionError("embed_context", "latent channels do not match the embedder",
                             [pc.shape, params["context_embed.weight_c"].shape])
    yc, c_c = num.matmul_forward(pc, params["context_embed.weight_c"])
    yk, c_k = num.matmul_forward(pk, params["context_embed.weight_k"])
    ym, c_m = num.matmul_forward(pm, params["context_embed.weight_m"])
    y, c_a1 = num.add_forward(yc, yk)
    y, c_a2 = num.add_forward(y, ym)
    y, c_b = num.add_forward(y, params["context_embed.bias"])
    y, c_pos = num.add_forward(y, positional_encoding(grid, cfg.model_dim).astype(y.dtype))
    return y, (c_c, c_k, c_m, c_a1, c_a2, c_b, c_pos)


def embed_context_backward(g, cache, grads):
    c_c, c_k, c_m, c_a1, c_a2, c_b, c_pos = cache
    g, _ = num.add_backward(g, c_pos)
    g, db = num.add_backward(g, c_b)
    g, dym = num.add_backward(g, c_a2)
    dyc, dyk = num.add_backward(g, c_a1)
    grads.add("context_embed.bias", db)
    grads.add("context_embed.weight_c", num.matmul_backward(dyc, c_c)[1])
    grads.add("context_embed.weight_k", num.matmul_backward(dyk, c_k)[1])
    grads.add("context_embed.weight_m", num.matmul_backward(dym, c_m)[1])


def _time_embed(t, params, cfg):
    dtype = params["time_embed.fc1.weight"].dtype
    x = timestep_embedding(t, cfg.model_dim).astype(dtype)
    h, c1 = _linear(x, params, "time_embed.fc1")
    h, c_act = num.gelu_forward(h)
    h, c2 = _linear(h, params, "time_embed.fc2")
    cond, c_cond = num.gelu_forward(h)
    return cond, (c1, c_act, c2, c_cond)


def _time_embed_back(g, cache, grads):
    c1, c_act, c2, c_cond = cache
    (g,) = num.gelu_backward(g, c_cond)
    g = _linear_back(g, c2, grads)
    (g,) = num.gelu_backward(g, c_act)
    _linear_back(g, c1, grads)


def _text_embed(text_ids, params):
    e, c_e = num.embedding_forward(params["text_embed.table"], text_ids)
    e, c_ln = num.layer_norm_forward(e, params["text_norm.weight"], params["text_norm.bias"])
    return e, (c_e, c_ln)


def _text_embed_back(g, cache, grads):
    c_e, c_ln = cache
    dx, dgamma, dbeta = num.layer_norm_backward(g, c_ln)
    grads.add("text_norm.weight", dgamma)
    grads.add("text_norm.bias", dbeta)
    (dtable,) = num.embedding_backward(dx, c_e)
    grads.add("text_embed.table", dtable)


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------

def forward(params, cfg, grid, noisy_tokens, context_tokens, text_ids, t, context_scale=1.0):
    """
    Predict velocity patch tokens

    Parameters:
    -----------
    grid : TokenGrid
        Geometry of the token sequence (reference frames lead)
    noisy_tokens : ndarray (total_tokens, p_t*p_h*p_w*d)
        Rearranged noisy latent patches
    context_tokens : ndarray (total_tokens, D) or None
        Output of embed_context; None runs the base transformer alone
    text_ids : list of int
    t : float in [0, 1]
    context_scale : float
        Multiplier on adapter injections (adapter mode only)

    Returns:
    --------
    ndarray with the shape of noisy_tokens
    """
    out, _ = forward_with_cache(params, cfg, grid, noisy_tokens, context_tokens, text_ids, t, context_scale)
    return out


def forward_with_cache(params, cfg, grid, noisy_tokens, context_tokens, text_ids, t, context_scale=1.0):
    if cfg.mode not in ("fullft", "adapter"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    if not np.isfinite(t):
        raise DimensionError("forward", f"timestep must be finite, got {t}")
    expected = (grid.total_tokens, patch_dim(cfg))
    if tuple(noisy_tokens.shape) != expected:
        raise DimensionError("forward", "noisy tokens do not match the grid", [noisy_tokens.shape, expected])
    if context_tokens is not None and context_tokens.shape != (grid.total_tokens, cfg.model_dim):
        raise DimensionError("forward", "context tokens do not match the noisy tokens",
                             [context_tokens.shape, noisy_tokens.shape])

    heads = cfg.heads
    h, c_patch = _patch_embed(noisy_tokens, grid, params, cfg)
    cond, c_time = _time_embed(t, params, cfg)
    text, c_text = _text_embed(text_ids, params)

    c_input = None
    if cfg.mode == "fullft" and context_tokens is not None:
        h, c_input = num.add_forward(h, context_tokens.astype(h.dtype, copy=False))

    injections = {}
    c_ctx_blocks = []
    if cfg.mode == "adapter" and context_tokens is not None:
        state = context_tokens.astype(h.dtype, copy=False)
        for j, layer in enumerate(cfg.context_layers):
            prefix = f"context_block.{j}."
            state, c_blk = block_forward(state, cond, text, params, prefix, heads)
            hint, c_gate = _linear(state, params, prefix + "gate")
            hint, c_scale = num.scale_forward(hint, context_scale)
            injections[layer] = (j, hint)
            c_ctx_blocks.append((c_blk, c_gate, c_scale))

    c_main = []
    c_inject = {}
    for i in range(cfg.layers):
        h, c_blk = block_forward(h, cond, text, params, f"main_block.{i}.", heads)
        c_main.append(c_blk)
        if i in injections:
            h, c_inject[i] = num.add_forward(h, injections[i][1])

    mod, c_fmod = _linear(cond, params, "final.ada")
    (shift, scale), c_fchunks = _chunks(mod, 2)
    x, c_fm = _modulate(h, shift, scale)
    out, c_proj = _linear(x, params, "final.proj")
    cache = {
        "patch": c_patch, "time": c_time, "text": c_text, "input": c_input,
        "ctx_blocks": c_ctx_blocks, "injections": {i: j for i, (j, _) in injections.items()},
        "main": c_main, "inject": c_inject,
        "final": (c_fmod, c_fchunks, c_fm, c_proj),
    }
    return out, cache


def backward(cache, grad_out, grads):
    """
    Backpropagate ``grad_out`` (d loss / d velocity tokens) through the model

    Parameter gradients go into ``grads`` (a GradSink); returns the gradient
    with respect to the context tokens (None when the context was not used).
    """
    c_fmod, c_fchunks, c_fm, c_proj = cache["final"]
    g = _linear_back(grad_out, c_proj, grads)
    g, dshift, dscale = _modulate_back(g, c_fm)
    dmod = _chunks_back([dshift, dscale], c_fchunks)
    dcond = _linear_back(dmod, c_fmod, grads)
    dtext = None

    dhints = {}
    for i in reversed(range(len(cache["main"]))):
        if i in cache["inject"]:
            g, dhint = num.add_backward(g, cache["inject"][i])
            dhints[cache["injections"][i]] = dhint
        g, dc, dt = block_backward(g, cache["main"][i], grads)
        dcond = dcond + dc
        dtext = dt if dtext is None else dtext + dt

    dcontext = None
    if cache["ctx_blocks"]:
        dstate = None
        for j in reversed(range(len(cache["ctx_blocks"]))):
            c_blk, c_gate, c_scale = cache["ctx_blocks"][j]
            (dhint,) = num.scale_backward(dhints[j], c_scale)
            dgate_in = _linear_back(dhint, c_gate, grads)
            dstate = dgate_in if dstate is None else dstate + dgate_in
            dstate, dc, dt = block_backward(dstate, c_blk, grads)
            dcond = dcond + dc
            dtext = dtext + dt
        dcontext = dstate

    if cache["input"] is not None:
        g, dcontext = num.add_backward(g, cache["input"])

    _patch_embed_back(g, cache["patch"], grads)
    _time_embed_back(dcond, cache["time"], grads)
    _text_embed_back(dtext, cache["text"], grads)
    return dcontext
