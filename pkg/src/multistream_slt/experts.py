"""Segment router and the three modality heads (sign, fingerspelling, lip).

Parameter names live under ``router.``, ``sign.``, ``fs.`` and ``lip.``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import tensor as tf
from .numerics.layers import EVAL, Mode, affine, dropout, positional_encoding
from .numerics.params import ParamStore, init_affine
from .numerics.tensor import Tensor
from .synthdata import FS, REST, SIGN, FeatureStream

STAGE = "experts"
PREFIXES = ("router.", "sign.", "fs.", "lip.")
WINDOW = 16


@dataclass(frozen=True)
class ExpertConfig:
    d_feat: int = 32
    d_face: int = 32
    n_gloss: int = 50
    n_letters: int = 26
    n_phonemes: int = 39
    lip_hidden: int = 64
    kernel: int = 5
    stride: int = 2
    mask_ratio: float = 0.5
    dropout: float = 0.1
    pe_scale: float = 1.0

    def lip_length(self, T: int) -> int:
        return lip_length(T, self.kernel, self.stride)


def init_experts(store: ParamStore, cfg: ExpertConfig, rng: np.random.Generator) -> None:
    init_affine(store, "router.cls", cfg.d_feat, 3, rng, STAGE)
    init_affine(store, "sign.out", cfg.d_feat, cfg.n_gloss + 1, rng, STAGE)
    init_affine(store, "fs.out", cfg.d_feat, cfg.n_letters + 1, rng, STAGE)
    init_affine(store, "lip.conv", cfg.kernel * cfg.d_face, cfg.lip_hidden, rng, STAGE)
    init_affine(store, "lip.out", cfg.lip_hidden, cfg.n_phonemes + 1, rng, STAGE)


# ---------------------------------------------------------------- routing


@dataclass(frozen=True)
class RoutingVector:
    g: np.ndarray
    tau: float
    hard: bool

    def __post_init__(self):
        if self.g.shape != (3,) or np.any(self.g < 0) or abs(self.g.sum() - 1.0) > 1e-9:
            raise ValueError(f"routing weights {self.g} are not on the simplex")

    @property
    def kind(self) -> int:
        return int(np.argmax(self.g))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def gumbel_softmax(logits, tau: float, noise) -> np.ndarray:
    """``softmax((logits + noise) / tau)`` along the last axis."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = (np.asarray(logits, dtype=np.float64) + noise) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax_tensor(logits: Tensor, tau: float, noise: np.ndarray, hard: bool = False) -> Tensor:
    """Differentiable relaxation; ``hard`` returns a one-hot forward value with the soft gradient."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    soft = tf.softmax((logits + noise) * (1.0 / tau), axis=-1)
    if not hard:
        return soft
    onehot = np.eye(soft.shape[-1])[np.argmax(soft.data, axis=-1)]
    return soft + Tensor(onehot - soft.data)


def tau_schedule(step: int, total_steps: int, start: float = 1.0, end: float = 0.1) -> float:
    if total_steps <= 1:
        return end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start + (end - start) * frac


def window_segments(T: int, width: int = WINDOW) -> tuple[tuple[int, int, int], ...]:
    """Fixed-width segmentation for streams without annotations; kind is unknown (rest)."""
    return tuple((s, min(s + width, T), REST) for s in range(0, T, width))


def stream_segments(stream: FeatureStream) -> tuple[tuple[int, int, int], ...]:
    return stream.segments or window_segments(stream.T)


def pool_segments(frames: np.ndarray, segments) -> np.ndarray:
    out = np.empty((len(segments), frames.shape[1]))
    for i, (s, e, _) in enumerate(segments):
        if e <= s:
            raise ValueError(f"empty segment [{s}, {e})")
        out[i] = frames[s:e].mean(axis=0)
    return out


def router_logits(frames: np.ndarray, segments, store: ParamStore) -> Tensor:
    pooled = Tensor(pool_segments(frames, segments))
    return affine(pooled, store["router.cls.W"], store["router.cls.b"])


def route(
    stream: FeatureStream,
    store: ParamStore,
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
    hard: bool = True,
    train: bool = False,
) -> list[RoutingVector]:
    """One routing vector per segment.

    Evaluation returns the argmax one-hot (ties go to the lowest index);
    training draws Gumbel noise and returns the hard or soft sample.
    """
    if stream.modality != "manual":
        raise ValueError("routing runs on the manual stream")
    logits = router_logits(stream.frames, stream_segments(stream), store).data
    if not train:
        return [RoutingVector(np.eye(3)[int(np.argmax(row))], tau, True) for row in logits]
    if rng is None:
        raise ValueError("training-mode routing needs an rng")
    soft = gumbel_softmax(logits, tau, sample_gumbel(rng, logits.shape))
    if hard:
        return [RoutingVector(np.eye(3)[int(np.argmax(row))], tau, True) for row in soft]
    return [RoutingVector(row / row.sum(), tau, False) for row in soft]


def frame_routing(T: int, segments, routes: list[RoutingVector]) -> np.ndarray:
    """Broadcast per-segment routing weights to ``[T, 3]``; uncovered frames count as rest."""
    g = np.zeros((T, 3))
    g[:, REST] = 1.0
    for (s, e, _), r in zip(segments, routes):
        g[s:e] = r.g
    return g


# ---------------------------------------------------------------- manual heads


def shared_input(frames: np.ndarray, cfg: ExpertConfig, mode: Mode = EVAL) -> Tensor:
    """``Dropout(H + PE)``: the one tensor both manual heads read."""
    T, d = frames.shape
    if d != cfg.d_feat:
        raise ValueError(f"manual features have width {d}, expected {cfg.d_feat}")
    return dropout(Tensor(frames + cfg.pe_scale * positional_encoding(T, d)), cfg.dropout, mode)


def sign_head(h: Tensor, store: ParamStore) -> Tensor:
    return tf.log_softmax(affine(h, store["sign.out.W"], store["sign.out.b"]))


def fs_head(h: Tensor, store: ParamStore) -> Tensor:
    return tf.log_softmax(affine(h, store["fs.out.W"], store["fs.out.b"]))


def manual_heads(stream: FeatureStream, store: ParamStore, cfg: ExpertConfig, mode: Mode = EVAL):
    """Return ``(sign_log_probs, fs_log_probs, shared_tensor)``."""
    h = shared_input(stream.frames, cfg, mode)
    return sign_head(h, store), fs_head(h, store), h


# ---------------------------------------------------------------- lip module


def lip_length(T: int, kernel: int = 5, stride: int = 2) -> int:
    if T < kernel:
        raise ValueError(f"face stream of {T} frames is shorter than the kernel ({kernel})")
    return (T - kernel) // stride + 1


def frame_mask(T: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``round(ratio * T)`` frames set to zero, chosen uniformly."""
    keep = np.ones(T)
    keep[rng.choice(T, size=int(round(ratio * T)), replace=False)] = 0.0
    return keep


def lip_forward(
    face: FeatureStream | np.ndarray,
    store: ParamStore,
    cfg: ExpertConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Frame masking (train only), strided temporal convolution, linear head, log-softmax."""
    frames = face.frames if isinstance(face, FeatureStream) else np.asarray(face, dtype=np.float64)
    T, d = frames.shape
    if d != cfg.d_face:
        raise ValueError(f"face features have width {d}, expected {cfg.d_face}")
    Tp = lip_length(T, cfg.kernel, cfg.stride)
    if train:
        if rng is None:
            raise ValueError("training-mode lip masking needs an rng")
        frames = frames * frame_mask(T, cfg.mask_ratio, rng)[:, None]
    idx = np.arange(Tp)[:, None] * cfg.stride + np.arange(cfg.kernel)[None, :]
    windows = Tensor(frames[idx].reshape(Tp, cfg.kernel * d))
    h = affine(windows, store["lip.conv.W"], store["lip.conv.b"])
    return tf.log_softmax(affine(h, store["lip.out.W"], store["lip.out.b"]))


def lip_forward_tensor(frames: Tensor, store: ParamStore, cfg: ExpertConfig) -> Tensor:
    """Eval-mode lip path on a differentiable input, used for gradient checks."""
    T, d = frames.shape
    Tp = lip_length(T, cfg.kernel, cfg.stride)
    idx = np.arange(Tp)[:, None] * cfg.stride + np.arange(cfg.kernel)[None, :]
    windows = tf.take(frames, idx, axis=0).reshape(Tp, cfg.kernel * d)
    h = affine(windows, store["lip.conv.W"], store["lip.conv.b"])
    return tf.log_softmax(affine(h, store["lip.out.W"], store["lip.out.b"]))


# ---------------------------------------------------------------- helpers


def segment_kind_accuracy(stream: FeatureStream, store: ParamStore) -> tuple[int, int]:
    """(correct, total) eval-mode routing decisions against annotated segment kinds."""
    routes = route(stream, store)
    correct = sum(int(r.kind == k) for r, (_, _, k) in zip(routes, stream.segments))
    return correct, len(stream.segments)


__all__ = [
    "FS",
    "REST",
    "SIGN",
    "ExpertConfig",
    "RoutingVector",
    "frame_mask",
    "frame_routing",
    "fs_head",
    "gumbel_softmax",
    "gumbel_softmax_tensor",
    "init_experts",
    "lip_forward",
    "lip_forward_tensor",
    "lip_length",
    "manual_heads",
    "pool_segments",
    "route",
    "router_logits",
    "sample_gumbel",
    "shared_input",
    "sign_head",
    "stream_segments",
    "tau_schedule",
    "window_segments",
]
