"""CTC loss, decoding and a brute-force alignment oracle.

Lattices are ``[T, K]`` arrays of per-frame log-probabilities with the blank
at index 0.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics.tensor import Tensor

BLANK = 0
BLANK_SYMBOL = "∅"
NEG_INF = -np.inf


class CtcError(ValueError):
    pass


class InfeasibleTarget(CtcError):
    pass


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]
    blank_index: int = BLANK

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if self.blank_index != BLANK:
            raise ValueError("the blank must sit at index 0")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        return cls((BLANK_SYMBOL, *tokens))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.symbols[1:]

    def index(self, symbol: str) -> int:
        try:
            i = self._lookup[symbol]
        except KeyError:
            raise CtcError(f"unknown symbol {symbol!r}") from None
        if i == BLANK:
            raise CtcError("the blank cannot appear in a target")
        return i

    def encode(self, seq: Sequence) -> list[int]:
        return [self.index(s) if isinstance(s, str) else int(s) for s in seq]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    @property
    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_cache", cache)
        return cache

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != BLANK_SYMBOL:
            raise ValueError(f"{path}: line 0 must be the blank symbol {BLANK_SYMBOL!r}")
        return cls(tuple(lines))


@dataclass
class CtcResult:
    loss: float
    grad_wrt_logits: np.ndarray
    occupancy: np.ndarray


def check_lattice(lattice: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    lattice = np.asarray(lattice, dtype=np.float64)
    if lattice.ndim != 2:
        raise CtcError(f"lattice must be [T, K], got shape {lattice.shape}")
    lse = np.logaddexp.reduce(lattice, axis=1)
    if not np.all(np.abs(lse) <= tol):
        raise CtcError("lattice rows are not normalised log-probabilities")
    return lattice


def min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _encode_target(target, vocab: Vocab | None, K: int) -> list[int]:
    ids = vocab.encode(target) if vocab is not None else [int(s) for s in target]
    for i in ids:
        if i == BLANK:
            raise CtcError("the blank cannot appear in a target")
        if not 0 < i < K:
            raise CtcError(f"target symbol {i} outside vocabulary of size {K}")
    return ids


def _forward_backward(lp: np.ndarray, target: list[int]) -> tuple[float, np.ndarray]:
    """Return ``(log p(target), per-symbol occupancy [T, K])``."""
    T, K = lp.shape
    U = len(target)
    if T < min_frames(target):
        raise InfeasibleTarget(f"target of length {U} needs at least {min_frames(target)} frames, lattice has {T}")
    ext = np.zeros(2 * U + 1, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = lp[:, ext]  # [T, S]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_p):
        raise InfeasibleTarget("target has zero probability under this lattice")
    gamma = np.exp(alpha + beta - log_p)
    occ = np.zeros((T, K))
    np.add.at(occ, (slice(None), ext), gamma)
    return float(log_p), occ


def ctc_loss(lattice, target: Sequence, vocab: Vocab | None = None) -> CtcResult:
    """Negative log-likelihood of ``target`` summed over all CTC alignments.

    ``grad_wrt_logits`` is the gradient with respect to the unnormalised
    logits that produced the lattice through a log-softmax.
    """
    lp = check_lattice(lattice)
    ids = _encode_target(target, vocab, lp.shape[1])
    log_p, occ = _forward_backward(lp, ids)
    return CtcResult(loss=-log_p, grad_wrt_logits=np.exp(lp) - occ, occupancy=occ)


def ctc_loss_tensor(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """Differentiable CTC on a ``[T, K]`` log-probability tensor."""
    ids = _encode_target(target, None, log_probs.shape[-1])
    log_p, occ = _forward_backward(log_probs.data, ids)
    out_grad = -occ

    def bw(g):
        log_probs._accum(g * out_grad)

    if log_probs.requires_grad:
        return Tensor(-log_p, True, (log_probs,), bw)
    return Tensor(-log_p)


# ---------------------------------------------------------------- decoding


def collapse(path: Sequence[int], vocab: Vocab | None = None) -> list:
    """Merge repeated symbols, then drop blanks."""
    out: list[int] = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return vocab.decode(out) if vocab is not None else out


def ctc_greedy_decode(lattice, vocab: Vocab | None = None) -> list:
    path = np.argmax(np.asarray(lattice), axis=1)
    return collapse(path, vocab)


def ctc_beam_decode(lattice, beam_width: int = 4, vocab: Vocab | None = None) -> list:
    """Prefix beam search; scores are unnormalised prefix log-posteriors."""
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    lp = np.asarray(lattice, dtype=np.float64)
    T, K = lp.shape
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            ptot = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], ptot + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                cell[1] = np.logaddexp(cell[1], pnb + row[last])
            for k in range(1, K):
                ext = nxt[prefix + (k,)]
                src = pb if k == last else ptot
                ext[1] = np.logaddexp(ext[1], src + row[k])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {p: (v[0], v[1]) for p, v in ranked[:beam_width]}
    best = min(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))[0]
    return vocab.decode(list(best)) if vocab is not None else list(best)


# ---------------------------------------------------------------- oracle

MAX_BRUTE_PATHS = 10**6


def ctc_brute_force(lattice, vocab: Vocab | None = None) -> dict[tuple, float]:
    """Enumerate every frame path, collapse it and sum path probabilities."""
    lp = np.asarray(lattice, dtype=np.float64)
    T, K = lp.shape
    if K**T > MAX_BRUTE_PATHS:
        raise CtcError(f"brute force over {K}^{T} paths exceeds the {MAX_BRUTE_PATHS} limit")
    probs = np.exp(lp)
    out: dict[tuple, float] = defaultdict(float)
    for path in itertools.product(range(K), repeat=T):
        p = 1.0
        for t, k in enumerate(path):
            p *= probs[t, k]
        key = tuple(collapse(path))
        out[key] += p
    if vocab is not None:
        return {tuple(vocab.decode(list(k))): v for k, v in out.items()}
    return dict(out)


def ctc_brute_force_best(lattice, vocab: Vocab | None = None) -> list:
    table = ctc_brute_force(lattice)
    best = min(table.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return vocab.decode(list(best)) if vocab is not None else list(best)


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int]) -> Tensor:
    """Summed CTC over a padded ``[B, T, K]`` batch; frames past ``lengths[b]`` are ignored."""
    B = log_probs.shape[0]
    if len(targets) != B or len(lengths) != B:
        raise CtcError("batch size mismatch between log-probs, targets and lengths")
    K = log_probs.shape[-1]
    total = 0.0
    grad = np.zeros_like(log_probs.data)
    for b in range(B):
        ids = _encode_target(targets[b], None, K)
        log_p, occ = _forward_backward(log_probs.data[b, : lengths[b]], ids)
        total -= log_p
        grad[b, : lengths[b]] = -occ

    def bw(g):
        log_probs._accum(g * grad)

    if log_probs.requires_grad:
        return Tensor(total, True, (log_probs,), bw)
    return Tensor(total)
