"""Shared building blocks: parameter init, multi-head attention, fusion, gates."""

from __future__ import annotations

import numpy as np

from .numerics import Value, attention, concat, matmul, sigmoid, softmax, tanh, transpose

Params = dict  # name -> Value


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def param(store: Params, name: str, data) -> None:
    if name in store:
        raise KeyError(f"duplicate parameter {name!r}")
    store[name] = Value(data, requires_grad=True, name=name)


def init_attention(store: Params, prefix: str, rng, d: int) -> None:
    for k in ("wq", "wk", "wv"):
        param(store, f"{prefix}.{k}", glorot(rng, d, d))


def init_fusion(store: Params, prefix: str, rng, d: int) -> None:
    """concat(a, b) [2d] -> linear -> d."""
    param(store, f"{prefix}.w", glorot(rng, 2 * d, d))
    param(store, f"{prefix}.b", np.zeros(d))


def init_gate(store: Params, prefix: str, rng, d_in: int) -> None:
    param(store, f"{prefix}.w", glorot(rng, d_in, 1))
    param(store, f"{prefix}.b", np.zeros(1))


def split_heads(x: Value, heads: int) -> Value:
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    x = x.reshape(*lead, n, heads, d // heads)
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    return transpose(x, axes)


def merge_heads(x: Value) -> Value:
    """[..., heads, n, dz] -> [..., n, heads*dz]."""
    *lead, h, n, dz = x.shape
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    return transpose(x, axes).reshape(*lead, n, h * dz)


def attention_weights(queries: Value, keys: Value, store: Params, prefix: str, heads: int,
                      mask: np.ndarray | None = None) -> tuple[Value, Value]:
    """Scaled dot-product weights per head and the per-head value vectors.

    Returns (alpha [..., heads, n_q, n_k], values [..., heads, n_k, dz]).
    ``mask`` is boolean [..., n_q, n_k] (broadcast over heads); True = edge present.
    """
    q = split_heads(matmul(queries, store[f"{prefix}.wq"]), heads)
    k = split_heads(matmul(keys, store[f"{prefix}.wk"]), heads)
    v = split_heads(matmul(keys, store[f"{prefix}.wv"]), heads)
    dz = q.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(dz))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    return softmax(scores, axis=-1, mask=mask), v


def multihead_attention(queries: Value, keys: Value, store: Params, prefix: str, heads: int,
                        mask: np.ndarray | None = None) -> Value:
    """Concatenated head outputs, [..., n_q, d]; no output projection."""
    return attention(queries, keys, store[f"{prefix}.wq"], store[f"{prefix}.wk"],
                     store[f"{prefix}.wv"], heads, mask)


def fuse_residual(attended: Value, prev: Value, store: Params, prefix: str) -> Value:
    """prev + tanh([attended; prev] W + b)."""
    cat = concat([attended, prev], axis=-1)
    return prev + tanh(matmul(cat, store[f"{prefix}.w"]) + store[f"{prefix}.b"])


def gate(x: Value, store: Params, prefix: str) -> Value:
    """Scalar sigmoid gate per row: [n, d_in] -> [n, 1]."""
    return sigmoid(matmul(x, store[f"{prefix}.w"]) + store[f"{prefix}.b"])


def gated_update(old: Value, new: Value, gamma: Value) -> Value:
    """(1 - gamma) * old + gamma * new."""
    return (1.0 - gamma) * old + gamma * new
