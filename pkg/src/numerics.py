"""
Dense float tensors, a closed set of operations with hand-written reverse-mode
derivatives, gradient checking, and the seeded random-number contract.

Tensors are plain numpy arrays (float32 storage, float64 when a gradient check
asks for 64-bit accumulation). Every operation is a pair of functions:
``forward(*inputs, **attrs) -> (output, cache)`` and
``backward(grad_output, cache) -> tuple of input gradients``.

Random numbers come from numpy's counter-based Philox generator. Normal draws
use the Box-Muller transform on the generator's uniform stream:
``z0 = sqrt(-2 ln(1 - u1)) cos(2 pi u2)``, ``z1 = sqrt(-2 ln(1 - u1)) sin(2 pi u2)``,
taking ``u1`` from the first half of a ``2 * ceil(size / 2)`` block of uniforms
and ``u2`` from the second half, interleaving ``z0, z1`` pairs.
"""
import hashlib
import logging
from collections import namedtuple

import numpy as np

from src.errors import ArgumentError, ContractError, DimensionError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

RNG_ALGORITHM = "philox4x64-boxmuller-v1"

Op = namedtuple("Op", ["name", "forward", "backward"])


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

def make_rng(seed, *path):
    """
    Create a Philox generator for ``seed``, optionally split into a sub-stream

    The sub-stream key is the first 8 bytes of SHA-256 over ``"seed/p1/p2/..."``
    so independent parts of a run (samples, arms, validation draws) never share draws.
    """
    seed = int(seed)
    if seed < 0:
        raise ArgumentError(f"seed must be non-negative, got {seed}")
    if not path:
        return np.random.Generator(np.random.Philox(seed))
    key = "/".join([str(seed)] + [str(p) for p in path])
    child = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    return np.random.Generator(np.random.Philox(child))


def uniform(rng, shape):
    return rng.random(size=shape, dtype=np.float64)


def normal(rng, shape):
    """I.i.d. standard normal float32 tensor via Box-Muller on the uniform stream."""
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape, dtype=np.int64))
    pairs = (size + 1) // 2
    u = rng.random(size=2 * pairs, dtype=np.float64)
    u1, u2 = u[:pairs], u[pairs:]
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:size].astype(np.float32).reshape(shape)


def rng_state(rng):
    """JSON-serializable generator state (64-bit integers stored as decimal strings)."""
    state = rng.bit_generator.state
    return {"algorithm": RNG_ALGORITHM, "state": _to_jsonable(state)}


def rng_from_state(payload):
    if payload.get("algorithm") != RNG_ALGORITHM:
        raise ArgumentError(f"unsupported rng algorithm {payload.get('algorithm')!r}")
    bit_generator = np.random.Philox()
    bit_generator.state = _from_jsonable(payload["state"])
    return np.random.Generator(bit_generator)


def _to_jsonable(value):
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__array__": [str(int(x)) for x in value.tolist()], "dtype": str(value.dtype)}
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return {"__int__": str(int(value))}
    return value


def _from_jsonable(value):
    if isinstance(value, dict):
        if "__array__" in value:
            return np.array([int(x) for x in value["__array__"]], dtype=value["dtype"])
        if "__int__" in value:
            return int(value["__int__"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise DimensionError(name, "operands cannot be broadcast together", [np.shape(a), np.shape(b)]) from None


def add_forward(a, b):
    _broadcast_shape("add", a, b)
    return a + b, (np.shape(a), np.shape(b))


def add_backward(g, cache):
    sa, sb = cache
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub_forward(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, (np.shape(a), np.shape(b))


def sub_backward(g, cache):
    sa, sb = cache
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def mul_forward(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, (a, b)


def mul_backward(g, cache):
    a, b = cache
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def scale_forward(a, s):
    return a * s, s


def scale_backward(g, s):
    return (g * s,)


def matmul_forward(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", "inner dimensions do not match", [a.shape, b.shape])
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise DimensionError("matmul", "batch dimensions do not broadcast", [a.shape, b.shape]) from None
    return out, (a, b)


def matmul_backward(g, cache):
    a, b = cache
    da = np.matmul(g, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)


def permute_forward(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("permute", f"axes {axes} are not a permutation", [a.shape])
    return np.transpose(a, axes), axes


def permute_backward(g, axes):
    return (np.transpose(g, np.argsort(axes)),)


def reshape_forward(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise DimensionError("reshape", "element count changes", [a.shape, shape])
    try:
        return np.reshape(a, shape), a.shape
    except ValueError:
        raise DimensionError("reshape", "element count changes", [a.shape, shape]) from None


def reshape_backward(g, shape):
    return (np.reshape(g, shape),)


def slice_forward(a, axis, start, stop):
    if not 0 <= start <= stop <= a.shape[axis]:
        raise DimensionError("slice", f"range [{start}, {stop}) outside axis {axis}", [a.shape])
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return a[tuple(index)], (a.shape, axis, start, stop)


def slice_backward(g, cache):
    shape, axis, start, stop = cache
    out = np.zeros(shape, dtype=g.dtype)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    out[tuple(index)] = g
    return (out,)


def concat_forward(arrays, axis):
    arrays = list(arrays)
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise DimensionError("concat", f"shapes disagree off axis {axis}", [a.shape for a in arrays]) from None
    return out, (axis, [a.shape[axis] for a in arrays])


def concat_backward(g, cache):
    axis, sizes = cache
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def softmax_forward(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(g, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def layer_norm_forward(x, gamma=None, beta=None, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat
    if gamma is not None:
        if gamma.shape != (x.shape[-1],):
            raise DimensionError("layer_norm", "scale must match the last axis", [x.shape, gamma.shape])
        y = y * gamma
    if beta is not None:
        if beta.shape != (x.shape[-1],):
            raise DimensionError("layer_norm", "shift must match the last axis", [x.shape, beta.shape])
        y = y + beta
    return y, (xhat, inv_std, gamma, beta is not None)


def layer_norm_backward(g, cache):
    xhat, inv_std, gamma, has_beta = cache
    lead = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead) if gamma is not None else None
    dbeta = g.sum(axis=lead) if has_beta else None
    dxhat = g * gamma if gamma is not None else g
    n = xhat.shape[-1]
    dx = inv_std / n * (
        n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu_forward(x):
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    th = np.tanh(inner)
    return (0.5 * x * (1.0 + th)).astype(x.dtype, copy=False), (x, th)


def gelu_backward(g, cache):
    x, th = cache
    d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return ((g * d).astype(g.dtype, copy=False),)


def sum_forward(x, axis=None, keepdims=False):
    return x.sum(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)


def sum_backward(g, cache):
    shape, axis, keepdims = cache
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).astype(np.result_type(g), copy=True),)


def mean_forward(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return x.mean(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims, count)


def mean_backward(g, cache):
    shape, axis, keepdims, count = cache
    (grad,) = sum_backward(g, (shape, axis, keepdims))
    return (grad / count,)


def embedding_forward(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding", "ids outside the table", [table.shape, ids.shape])
    return table[ids], (table.shape, table.dtype, ids)


def embedding_backward(g, cache):
    shape, dtype, ids = cache
    dtable = np.zeros(shape, dtype=g.dtype)
    np.add.at(dtable, ids, g)
    return (dtable,)


_CATALOG = {
    op.name: op for op in [
        Op("add", add_forward, add_backward),
        Op("sub", sub_forward, sub_backward),
        Op("mul", mul_forward, mul_backward),
        Op("scale", scale_forward, scale_backward),
        Op("matmul", matmul_forward, matmul_backward),
        Op("permute", permute_forward, permute_backward),
        Op("reshape", reshape_forward, reshape_backward),
        Op("slice", slice_forward, slice_backward),
        Op("concat", concat_forward, concat_backward),
        Op("softmax", softmax_forward, softmax_backward),
        Op("layer_norm", layer_norm_forward, layer_norm_backward),
        Op("gelu", gelu_forward, gelu_backward),
        Op("sum", sum_forward, sum_backward),
        Op("mean", mean_forward, mean_backward),
        Op("embedding", embedding_forward, embedding_backward),
    ]
}


def op_set():
    """Catalog of supported operations, keyed by name."""
    return dict(_CATALOG)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, x, eps=1e-3, accumulate64=False, floor=1e-8, max_coords=None, rng=None):
    """
    Compare an analytic gradient with central differences

    Parameters:
    -----------
    fn : callable
        ``fn(x) -> (value, grad)`` where ``value`` is a scalar and ``grad`` has x's shape
    x : ndarray
        Point at which to check
    eps : float
        Finite-difference half step
    accumulate64 : bool
        Evaluate in float64 instead of the input's dtype
    floor : float
        Lower bound of the relative-error denominator
    max_coords : int or None
        Check a random subset of this many coordinates (all when None)

    Returns:
    --------
    float : max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64 if accumulate64 else np.asarray(x).dtype, copy=True)
    value, analytic = fn(x)
    if np.ndim(value) != 0:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {np.shape(value)}")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ContractError(f"analytic gradient shape {analytic.shape} differs from input shape {x.shape}")

    coords = list(np.ndindex(x.shape))
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else make_rng(0, "grad_check")
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for idx in coords:
        original = x[idx]
        x[idx] = original + eps
        plus_at = float(x[idx])
        f_plus = float(fn(x)[0])
        x[idx] = original - eps
        minus_at = float(x[idx])
        f_minus = float(fn(x)[0])
        x[idx] = original
        numeric = (f_plus - f_minus) / (plus_at - minus_at)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
