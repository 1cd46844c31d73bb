"""Temporal alignment, gated aggregation of the expert streams and the fusion encoder.

The fusion stage consumes the experts' per-frame posteriors (frozen), projects
each stream to a common width ``d``, mixes the manual streams with the routing
weights, combines the result with the lip stream (gated, concat+MLP or
cross-attention) and encodes it with a transformer into a gloss CTC lattice.
Parameter names of this stage live under ``fusion.``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import experts as ex
from .numerics import tensor as tf
from .numerics.layers import (
    EVAL,
    Mode,
    affine,
    dropout,
    init_attention,
    init_encoder_block,
    layer_norm,
    multi_head_attention,
    positional_encoding,
    transformer_encoder_block,
)
from .numerics.params import ParamStore, init_affine, init_layer_norm
from .numerics.tensor import Tensor
from .synthdata import Episode, FeatureStream

STAGE = "fusion"
VARIANTS = ("gated", "concat_mlp", "cross_attention")
GATES = ("vector", "scalar", "static")
SHIFTS = (-10, -5, 0, 5, 10)
LEARNED = "learned"


@dataclass(frozen=True)
class FusionConfig:
    n_gloss: int = 50
    k_sign: int = 51
    k_fs: int = 27
    k_lip: int = 40
    d: int = 512
    layers: int = 6
    heads: int = 8
    d_ff: int = 2048
    dropout: float = 0.1
    variant: str = "gated"
    gate: str = "vector"
    upsample: str = "nearest"
    positional: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}")
        if self.gate not in GATES:
            raise ValueError(f"unknown gate kind {self.gate!r}")
        if self.upsample not in ("nearest", "linear"):
            raise ValueError(f"unknown upsampling {self.upsample!r}")
        if self.d % self.heads:
            raise ValueError("fusion width must be divisible by the head count")

    def replace(self, **kw) -> "FusionConfig":
        return dataclasses.replace(self, **kw)


PROFILES = {
    "default": dict(d=512, layers=6, heads=8, d_ff=2048),
    "tiny": dict(d=64, layers=2, heads=4, d_ff=128),
}


def fusion_config(profile: str = "tiny", **kw) -> FusionConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    return FusionConfig(**{**PROFILES[profile], **kw})


def init_fusion(store: ParamStore, cfg: FusionConfig, rng: np.random.Generator) -> None:
    d = cfg.d
    init_affine(store, "fusion.phi_sign", cfg.k_sign, d, rng, STAGE)
    init_affine(store, "fusion.phi_fs", cfg.k_fs, d, rng, STAGE)
    init_affine(store, "fusion.phi_lip", cfg.k_lip, d, rng, STAGE)
    store.add("fusion.null", rng.normal(0.0, 0.02, d), decay_exempt=True, stage=STAGE)
    if cfg.variant == "gated" and cfg.gate != "static":
        # zero weights: the gate starts as an even mix and learns to lean from there
        width = d if cfg.gate == "vector" else 1
        store.add("fusion.gate.W", np.zeros((2 * d, width)), stage=STAGE)
        store.add("fusion.gate.b", np.zeros(width), decay_exempt=True, stage=STAGE)
    elif cfg.variant == "concat_mlp":
        init_affine(store, "fusion.mix.fc1", 2 * d, d, rng, STAGE)
        init_affine(store, "fusion.mix.fc2", d, d, rng, STAGE)
    elif cfg.variant == "cross_attention":
        init_attention(store, "fusion.xattn", d, rng, STAGE)
        init_layer_norm(store, "fusion.xattn_ln", d, STAGE)
    for i in range(cfg.layers):
        init_encoder_block(store, f"fusion.enc{i}", d, cfg.d_ff, rng, STAGE)
    init_layer_norm(store, "fusion.ln_f", d, STAGE)
    init_affine(store, "fusion.out", d, cfg.n_gloss + 1, rng, STAGE)


# ---------------------------------------------------------------- alignment


def upsample_indices(Tp: int, T: int) -> np.ndarray:
    """Nearest-neighbour source index for each of ``T`` target frames."""
    if Tp > T:
        raise ValueError(f"cannot upsample {Tp} frames to fewer ({T})")
    return (np.arange(T) * Tp) // T


def upsample(x: np.ndarray, T: int, method: str = "nearest") -> np.ndarray:
    """Stretch ``[T', K]`` to ``[T, K]`` along time."""
    Tp = x.shape[0]
    if method == "nearest":
        return x[upsample_indices(Tp, T)]
    if Tp > T:
        raise ValueError(f"cannot upsample {Tp} frames to fewer ({T})")
    pos = (np.arange(T) + 0.5) * Tp / T - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, Tp - 1)
    hi = np.clip(lo + 1, 0, Tp - 1)
    w = np.clip(pos - lo, 0.0, 1.0)[:, None]
    return (1 - w) * x[lo] + w * x[hi]


def apply_temporal_shift(frames: np.ndarray, delta) -> np.ndarray:
    """Move frames ``delta`` steps later in time, repeating the edge frame.

    ``out[t] = frames[clip(t - delta, 0, T - 1)]``; ``"learned"`` is the identity.
    """
    if delta == LEARNED:
        return frames
    delta = int(delta)
    T = frames.shape[0]
    if abs(delta) >= T:
        raise ValueError(f"shift {delta} is not smaller than the stream length {T}")
    return frames[np.clip(np.arange(T) - delta, 0, T - 1)]


# ---------------------------------------------------------------- fusion ops


def project(x, store: ParamStore, stream: str) -> Tensor:
    return affine(tf.as_tensor(x), store[f"fusion.phi_{stream}.W"], store[f"fusion.phi_{stream}.b"])


def project_and_upsample(sign, fs, lip, store: ParamStore, method: str = "nearest"):
    """``(E_sign, E_fs, E_lip)``, all ``[T, d]``; the lip stream is stretched from ``T'`` first."""
    T = np.asarray(getattr(sign, "data", sign)).shape[-2]
    lip = np.asarray(getattr(lip, "data", lip))
    if lip.shape[-2] > T:
        raise ValueError(f"lip stream ({lip.shape[-2]} frames) is longer than the manual stream ({T})")
    lip_up = upsample(lip, T, method) if lip.ndim == 2 else np.stack([upsample(x, T, method) for x in lip])
    return project(sign, store, "sign"), project(fs, store, "fs"), project(lip_up, store, "lip")


def gated_manual_aggregate(E_sign: Tensor, E_fs: Tensor, g: np.ndarray, n_null: Tensor) -> Tensor:
    """``M = g_sign * E_sign + g_fs * E_fs + g_rest * n_null`` frame by frame."""
    g = np.asarray(g, dtype=np.float64)
    return E_sign * g[..., 0:1] + E_fs * g[..., 1:2] + tf.as_tensor(g[..., 2:3]) * n_null


def adaptive_gate(M: Tensor, E_lip: Tensor, W_g: Tensor, b_g: Tensor) -> tuple[Tensor, Tensor]:
    """``alpha = sigmoid([M; E_lip] W_g + b_g)``; ``H = alpha * M + (1 - alpha) * E_lip``."""
    alpha = tf.sigmoid(affine(tf.concat([M, E_lip], axis=-1), W_g, b_g))
    return alpha, E_lip + alpha * (M - E_lip)


def static_gate(M: Tensor, E_lip: Tensor, alpha: float = 0.5) -> tuple[Tensor, Tensor]:
    a = np.full(M.shape, alpha)
    return Tensor(a), E_lip + (M - E_lip) * alpha


def fusion_concat_mlp(M: Tensor, E_lip: Tensor, store: ParamStore, mode: Mode = EVAL, p: float = 0.1) -> Tensor:
    h = affine(tf.concat([M, E_lip], axis=-1), store["fusion.mix.fc1.W"], store["fusion.mix.fc1.b"])
    h = dropout(tf.gelu(h), p, mode)
    return affine(h, store["fusion.mix.fc2.W"], store["fusion.mix.fc2.b"])


def fusion_cross_attention(
    M: Tensor,
    E_lip: Tensor,
    store: ParamStore,
    heads: int,
    key_mask: np.ndarray | None = None,
    mode: Mode = EVAL,
) -> Tensor:
    """``LayerNorm(M + MHA(Q=M, K=E_lip, V=E_lip))``."""
    a = multi_head_attention(M, E_lip, E_lip, store, "fusion.xattn", heads, key_mask, mode)
    return layer_norm(M + a, store["fusion.xattn_ln.gamma"], store["fusion.xattn_ln.beta"])


def fuse_encode(
    H: Tensor,
    store: ParamStore,
    cfg: FusionConfig,
    key_mask: np.ndarray | None = None,
    mode: Mode = EVAL,
) -> tuple[Tensor, Tensor]:
    """Encoder stack then the gloss output head; returns ``(Z, log_probs)``."""
    x = H
    if cfg.positional:
        x = x + positional_encoding(H.shape[-2], cfg.d)
    x = dropout(x, cfg.dropout, mode)
    for i in range(cfg.layers):
        x = transformer_encoder_block(x, store, f"fusion.enc{i}", cfg.heads, key_mask, mode, cfg.dropout)
    Z = layer_norm(x, store["fusion.ln_f.gamma"], store["fusion.ln_f.beta"])
    logits = affine(Z, store["fusion.out.W"], store["fusion.out.b"])
    return Z, tf.log_softmax(logits)


@dataclass
class FusionState:
    E_sign: Tensor
    E_fs: Tensor
    E_lip: Tensor
    M: Tensor
    alpha: Tensor | None
    H: Tensor
    Z: Tensor
    log_probs: Tensor


def fusion_forward(
    inputs: "ExpertOutputs",
    store: ParamStore,
    cfg: FusionConfig,
    mode: Mode = EVAL,
) -> FusionState:
    """Full fusion path on (possibly batched) expert posteriors."""
    E_sign = project(inputs.sign, store, "sign")
    E_fs = project(inputs.fs, store, "fs")
    E_lip = project(inputs.lip, store, "lip")
    M = gated_manual_aggregate(E_sign, E_fs, inputs.g, store["fusion.null"])
    alpha = None
    if cfg.variant == "gated":
        if cfg.gate == "static":
            alpha, H = static_gate(M, E_lip)
        else:
            alpha, H = adaptive_gate(M, E_lip, store["fusion.gate.W"], store["fusion.gate.b"])
    elif cfg.variant == "concat_mlp":
        H = fusion_concat_mlp(M, E_lip, store, mode, cfg.dropout)
    else:
        H = fusion_cross_attention(M, E_lip, store, cfg.heads, inputs.key_mask, mode)
    Z, lp = fuse_encode(H, store, cfg, inputs.key_mask, mode)
    return FusionState(E_sign, E_fs, E_lip, M, alpha, H, Z, lp)


# ---------------------------------------------------------------- expert outputs


@dataclass
class ExpertOutputs:
    """Frozen expert posteriors aligned to the manual frame rate.

    Arrays are ``[T, K]`` for one episode or ``[B, T, K]`` for a padded batch.
    """

    sign: np.ndarray
    fs: np.ndarray
    lip: np.ndarray
    g: np.ndarray
    lengths: tuple[int, ...] = ()
    key_mask: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.sign.shape[-2]


def expert_outputs(
    ep: Episode,
    store: ParamStore,
    ecfg: ex.ExpertConfig,
    shift=0,
    upsample_method: str = "nearest",
) -> ExpertOutputs:
    """Run the experts in evaluation mode; the face stream is shifted by ``shift`` first.

    The streams hold per-frame log-probabilities, which is what the projections consume.
    """
    sign_lp, fs_lp, _ = ex.manual_heads(ep.manual, store, ecfg, EVAL)
    face = FeatureStream(apply_temporal_shift(ep.face.frames, shift), "face", ep.face.frame_rate)
    lip_lp = ex.lip_forward(face, store, ecfg)
    routes = ex.route(ep.manual, store)
    segs = ex.stream_segments(ep.manual)
    return ExpertOutputs(
        sign=sign_lp.data,
        fs=fs_lp.data,
        lip=upsample(lip_lp.data, ep.T, upsample_method),
        g=ex.frame_routing(ep.T, segs, routes),
        lengths=(ep.T,),
    )


def collate(outs: Sequence[ExpertOutputs]) -> ExpertOutputs:
    """Pad single-episode outputs to a batch; padded frames are masked as keys."""
    B = len(outs)
    T = max(o.T for o in outs)

    def pad(name):
        K = getattr(outs[0], name).shape[-1]
        arr = np.zeros((B, T, K))
        for b, o in enumerate(outs):
            arr[b, : o.T] = getattr(o, name)
        return arr

    g = pad("g")
    mask = np.zeros((B, T), dtype=bool)
    for b, o in enumerate(outs):
        mask[b, : o.T] = True
        g[b, o.T :, 2] = 1.0
    return ExpertOutputs(pad("sign"), pad("fs"), pad("lip"), g, tuple(o.T for o in outs), mask)
