"""Shared building blocks: parameter store, attention, patching, embeddings."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, concat, layer_norm, matmul, softmax

__all__ = [
    "ParamStore",
    "attention",
    "patchify",
    "unpatchify",
    "sinusoidal_embedding",
]


class ParamStore:
    """Named parameter registry with the standard initializers."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(arr.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def trunc_normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        vals = self.rng.standard_normal(shape) * std
        return self._register(name, np.clip(vals, -2 * std, 2 * std))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))

    def constant(self, name: str, value: np.ndarray) -> Tensor:
        return self._register(name, np.asarray(value))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    return x.reshape(*lead, s, heads, d // heads).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, s, h * dh)


def attention(
    q_in: Tensor,
    kv_in: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    bq: Tensor | None = None,
    bk: Tensor | None = None,
    bv: Tensor | None = None,
    bo: Tensor | None = None,
    record: list | None = None,
    tag: str = "",
) -> Tensor:
    """Multi-head scaled dot-product attention over the second-to-last axis.

    ``q_in`` has shape (..., S_q, d) and ``kv_in`` (..., S_k, d) with matching
    leading axes. Explicit QK^T -> softmax -> V composition; the weight tensor
    shape is appended to ``record`` when given, for cost inspection.
    """
    d = q_in.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"hidden {d} not divisible by heads {heads}")
    dh = d // heads
    q = _split_heads(linear(q_in, wq, bq), heads)
    k = _split_heads(linear(kv_in, wk, bk), heads)
    v = _split_heads(linear(kv_in, wv, bv), heads)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    if record is not None:
        record.append({"tag": tag, "weights_shape": weights.shape})
    out = _merge_heads(matmul(weights, v))
    return linear(out, wo, bo)


def patchify(x: Tensor, p: int) -> Tensor:
    """(..., H, W, C) -> (..., P, p*p*C) with raster patch order.

    Patch interiors flatten as (row, col, channel); ``unpatchify`` is the
    exact inverse.
    """
    *lead, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError(f"spatial extents ({h}, {w}) not divisible by patch {p}")
    gh, gw = h // p, w // p
    n = len(lead)
    x = x.reshape(*lead, gh, p, gw, p, c)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(*perm)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(tokens: Tensor, p: int, h: int, w: int, c: int) -> Tensor:
    """Inverse of :func:`patchify`: (..., P, p*p*C) -> (..., H, W, C)."""
    *lead, pp, dim = tokens.shape
    gh, gw = h // p, w // p
    if pp != gh * gw or dim != p * p * c:
        raise ShapeError(
            f"token shape ({pp}, {dim}) incompatible with ({h}, {w}, {c}) patch {p}"
        )
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, p, p, c)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(*perm)
    return x.reshape(*lead, h, w, c)


def sinusoidal_embedding(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer sin/cos embedding: first half sines, second half cosines.

    Position 0 maps to zeros in the sine half and ones in the cosine half.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    angles = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((positions.size, 1))], axis=1)
    return emb
