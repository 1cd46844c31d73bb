from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tf
from .params import ParamStore, init_affine, init_layer_norm
from .tensor import Tensor

LN_EPS = 1e-5
MASK_FILL = -1e9


@dataclass
class Mode:
    """Forward-pass context: dropout and masking are active only when ``train``."""

    train: bool = False
    rng: np.random.Generator | None = None

    def generator(self) -> np.random.Generator:
        if self.rng is None:
            raise ValueError("training mode needs an rng")
        return self.rng


EVAL = Mode(train=False)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"affine: input width {x.shape[-1]} does not match W {W.shape}")
    y = tf.matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ValueError(f"affine: bias shape {b.shape} does not match W {W.shape}")
        y = y + b
    return y


def softmax_stable(logits) -> np.ndarray:
    """Row softmax of a plain array via max-shift; rejects NaN input."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("softmax_stable: NaN in logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two features")
    return tf.layer_norm(x, gamma, beta, LN_EPS)


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even width, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def dropout_mask(shape, p: float = 0.1, rng: np.random.Generator | None = None, train: bool = True) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return np.ones(shape)
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x: Tensor, p: float, mode: Mode) -> Tensor:
    if not mode.train or p == 0.0:
        return x
    return x * dropout_mask(x.shape, p, mode.generator())


# ---------------------------------------------------------------- attention


def init_attention(store: ParamStore, name: str, d: int, rng: np.random.Generator, stage: str = "") -> None:
    init_affine(store, f"{name}.q", d, d, rng, stage)
    # A key bias only shifts every score in a row by the same amount, which
    # softmax ignores, so it is left out.
    init_affine(store, f"{name}.k", d, d, rng, stage, bias=False)
    init_affine(store, f"{name}.v", d, d, rng, stage)
    init_affine(store, f"{name}.o", d, d, rng, stage)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = x.reshape(tuple(lead) + (T, heads, d // heads))
    return tf.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = tf.swapaxes(x, -2, -3)
    *lead, T, h, dh = x.shape
    return x.reshape(tuple(lead) + (T, h * dh))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    store: ParamStore,
    name: str,
    heads: int,
    key_mask: np.ndarray | None = None,
    mode: Mode = EVAL,
    dropout_p: float = 0.0,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads with an output projection.

    ``q`` is ``[..., Tq, d]`` and ``k``/``v`` are ``[..., Tk, d]``. ``key_mask``
    (``[..., Tk]``, True = valid) hides padded keys.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError("attention: query/key/value shapes do not conform")
    Q = _split_heads(affine(q, store[f"{name}.q.W"], store[f"{name}.q.b"]), heads)
    K = _split_heads(affine(k, store[f"{name}.k.W"]), heads)
    V = _split_heads(affine(v, store[f"{name}.v.W"], store[f"{name}.v.b"]), heads)
    scores = tf.matmul(Q, tf.swapaxes(K, -1, -2)) * (1.0 / np.sqrt(d // heads))
    if key_mask is not None:
        fill = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL)
        scores = scores + fill[..., None, None, :]
    weights = tf.softmax(scores, axis=-1)
    attn = dropout(weights, dropout_p, mode)
    out = affine(_merge_heads(tf.matmul(attn, V)), store[f"{name}.o.W"], store[f"{name}.o.b"])
    if return_weights:
        return out, weights.data
    return out


# ---------------------------------------------------------------- encoder


def init_encoder_block(
    store: ParamStore, name: str, d: int, d_ff: int, rng: np.random.Generator, stage: str = ""
) -> None:
    init_layer_norm(store, f"{name}.ln1", d, stage)
    init_attention(store, f"{name}.attn", d, rng, stage)
    init_layer_norm(store, f"{name}.ln2", d, stage)
    init_affine(store, f"{name}.ff1", d, d_ff, rng, stage)
    init_affine(store, f"{name}.ff2", d_ff, d, rng, stage)


def transformer_encoder_block(
    x: Tensor,
    store: ParamStore,
    name: str,
    heads: int,
    key_mask: np.ndarray | None = None,
    mode: Mode = EVAL,
    dropout_p: float = 0.1,
) -> Tensor:
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""
    h = layer_norm(x, store[f"{name}.ln1.gamma"], store[f"{name}.ln1.beta"])
    a = multi_head_attention(h, h, h, store, f"{name}.attn", heads, key_mask, mode, dropout_p)
    x = x + dropout(a, dropout_p, mode)
    h = layer_norm(x, store[f"{name}.ln2.gamma"], store[f"{name}.ln2.beta"])
    h = tf.gelu(affine(h, store[f"{name}.ff1.W"], store[f"{name}.ff1.b"]))
    h = affine(dropout(h, dropout_p, mode), store[f"{name}.ff2.W"], store[f"{name}.ff2.b"])
    return x + dropout(h, dropout_p, mode)
