"""Letter accuracy, token error rate, BLEU and ROUGE-L over token lists."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

Tokens = Sequence[Hashable]


def levenshtein(a: Tokens, b: Tokens) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def align(hyp: Tokens, ref: Tokens) -> list[tuple[int | None, int | None]]:
    """Minimum-edit alignment as ``(hyp_index, ref_index)`` pairs; ``None`` marks a gap.

    Ties prefer match/substitution, then deletion, then insertion.
    """
    n, m = len(hyp), len(ref)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = min(D[i - 1][j] + 1, D[i][j - 1] + 1, D[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]))
    out = []
    i, j = n, m
    while i or j:
        if i and j and D[i][j] == D[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            out.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j and D[i][j] == D[i][j - 1] + 1:
            out.append((None, j - 1))
            j -= 1
        else:
            out.append((i - 1, None))
            i -= 1
    return out[::-1]


def letter_accuracy(hyp: Tokens, ref: Tokens) -> float:
    """``1 - edit_distance / len(ref)``, clamped to [0, 1]."""
    if len(ref) == 0:
        raise ValueError("reference is empty")
    return max(0.0, 1.0 - levenshtein(list(hyp), list(ref)) / len(ref))


def token_error_rate(hyp: Tokens, ref: Tokens) -> float:
    if len(ref) == 0:
        raise ValueError("reference is empty")
    return levenshtein(list(hyp), list(ref)) / len(ref)


# ---------------------------------------------------------------- BLEU


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(hyp: Tokens, refs: Sequence[Tokens], n: int) -> tuple[list[int], list[int], int, int]:
    hyp = list(hyp)
    matches, totals = [], []
    for k in range(1, n + 1):
        counts = _ngrams(hyp, k)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(list(r), k).items():
                max_ref[g] = max(max_ref[g], c)
        matches.append(sum(min(c, max_ref[g]) for g, c in counts.items()))
        totals.append(max(len(hyp) - k + 1, 0))
    return matches, totals, len(hyp), _closest_ref_len(len(hyp), refs)


def _bleu_from_stats(matches, totals, c: int, r: int, smooth: bool) -> float:
    if c == 0:
        return 0.0
    log_p = 0.0
    for k, (m, t) in enumerate(zip(matches, totals)):
        if smooth and k > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / len(matches))


def bleu_n(hyp: Tokens, refs: Sequence[Tokens], n: int = 4, smooth: bool = True) -> float:
    """Sentence BLEU with uniform weights over 1..n-gram precisions.

    With ``smooth`` the precisions for orders above one get add-one counts.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not refs:
        raise ValueError("at least one reference is required")
    return _bleu_from_stats(*_bleu_stats(hyp, refs, n), smooth)


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU: n-gram counts and lengths are pooled before the geometric mean."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if n < 1:
        raise ValueError("n must be at least 1")
    M, Tt = [0] * n, [0] * n
    c = r = 0
    for h, rs in zip(hyps, refs):
        m, t, hc, rc = _bleu_stats(h, rs, n)
        M = [a + b for a, b in zip(M, m)]
        Tt = [a + b for a, b in zip(Tt, t)]
        c += hc
        r += rc
    return _bleu_from_stats(M, Tt, c, r, smooth)


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens, beta: float = 1.0) -> float:
    if len(ref) == 0:
        raise ValueError("reference is empty")
    lcs = lcs_length(list(hyp), list(ref))
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    letter_accuracy: float
    token_error_rate: float
    bleu: dict[int, float] = field(default_factory=dict)
    rouge_l: float = 0.0
    hyp_tokens: int = 0
    ref_tokens: int = 0
    fs_letters: int = 0

    def as_row(self) -> dict:
        return {
            "letter_accuracy": self.letter_accuracy,
            "token_error_rate": self.token_error_rate,
            "bleu1": self.bleu.get(1, 0.0),
            "bleu4": self.bleu.get(4, 0.0),
            "rougeL": self.rouge_l,
            "hyp_tokens": self.hyp_tokens,
            "ref_tokens": self.ref_tokens,
        }

    def to_csv(self) -> str:
        row = self.as_row()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def pretty(self) -> str:
        return (
            f"letter accuracy   {self.letter_accuracy:.4f}  ({self.fs_letters} letters)\n"
            f"token error rate  {self.token_error_rate:.4f}\n"
            f"BLEU-1 / BLEU-4   {self.bleu.get(1, 0.0):.4f} / {self.bleu.get(4, 0.0):.4f}\n"
            f"ROUGE-L           {self.rouge_l:.4f}\n"
            f"tokens hyp/ref    {self.hyp_tokens} / {self.ref_tokens}"
        )


def gloss_report(
    hyps: Sequence[Tokens],
    refs: Sequence[Tokens],
    letter_pairs: Sequence[tuple[Tokens, Tokens]] = (),
) -> MetricReport:
    """Corpus-level scores for decoded gloss sequences.

    Token error rate pools edit distance over the corpus; ROUGE-L is the mean of
    sentence scores; letter accuracy pools edits over ``letter_pairs``.
    """
    if len(hyps) != len(refs) or not refs:
        raise ValueError("need equally many, non-zero hypotheses and references")
    edits = sum(levenshtein(list(h), list(r)) for h, r in zip(hyps, refs))
    n_ref = sum(len(r) for r in refs)
    if letter_pairs:
        le = sum(levenshtein(list(h), list(r)) for h, r in letter_pairs)
        ln = sum(len(r) for _, r in letter_pairs)
        acc = max(0.0, 1.0 - le / ln)
    else:
        acc, ln = float("nan"), 0
    return MetricReport(
        letter_accuracy=acc,
        token_error_rate=edits / n_ref,
        bleu={n: corpus_bleu(hyps, [[r] for r in refs], n) for n in (1, 4)},
        rouge_l=sum(rouge_l(h, r) for h, r in zip(hyps, refs)) / len(refs),
        hyp_tokens=sum(len(h) for h in hyps),
        ref_tokens=n_ref,
        fs_letters=ln,
    )
