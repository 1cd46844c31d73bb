"""Synthetic asynchronous two-stream episodes with known targets.

A *world* (gloss lexicon, phoneme spellings and feature prototypes) is drawn
once from the seed. Each episode samples a gloss sentence, renders the manual
stream from sign/letter/rest prototypes and the face stream from phoneme
prototypes, the latter shifted by ``lip_offset_frames``. Schedule and noise use
separate RNG streams derived from ``(seed, episode index)``, so datasets that
differ only in noise level or lip offset share their token schedules.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import Vocab
from .textprep.phonemes import ARPABET

SIGN, FS, REST = 0, 1, 2
KINDS = ("sign", "fingerspelling", "rest")
LETTERS = tuple(string.ascii_uppercase)
FRAME_RATE = 25.0


@dataclass(frozen=True)
class GenConfig:
    gloss_vocab_size: int = 50
    d_feat: int = 32
    d_face: int = 32
    frames_per_gloss: tuple[int, int] = (4, 10)
    frames_per_letter: tuple[int, int] = (2, 5)
    rest_gap: tuple[int, int] = (0, 4)
    glosses_per_sentence: tuple[int, int] = (3, 8)
    gloss_name_length: tuple[int, int] = (2, 6)
    phonemes_per_gloss: tuple[int, int] = (2, 4)
    frames_per_phoneme: int = 3
    lip_rate_ratio: float = 1.0
    lip_offset_frames: int = 0
    lip_jitter_frames: int = 0
    edge_margin: int | None = None
    noise_sigma: float = 0.1
    manual_homonyms: int = 0
    fingerspell_probability: float = 0.2
    proto_scale: float = 1.0
    kind_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in (
            "frames_per_gloss",
            "frames_per_letter",
            "rest_gap",
            "glosses_per_sentence",
            "gloss_name_length",
            "phonemes_per_gloss",
        ):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.fingerspell_probability <= 1.0:
            raise ValueError("fingerspell_probability must lie in [0, 1]")
        if self.gloss_vocab_size < 2:
            raise ValueError("gloss_vocab_size must be at least 2")
        if self.frames_per_gloss[0] < 1 or self.frames_per_letter[0] < 1:
            raise ValueError("token durations must be at least one frame")
        if not 0 <= 2 * self.manual_homonyms <= self.gloss_vocab_size:
            raise ValueError("manual_homonyms pairs must fit in the gloss vocabulary")
        if self.lip_rate_ratio != 1.0:
            raise ValueError("the face stream is rendered at the manual frame rate (lip_rate_ratio=1)")

    @property
    def margin(self) -> int:
        if self.edge_margin is not None:
            return self.edge_margin
        return abs(self.lip_offset_frames) + self.lip_jitter_frames + 2

    def replace(self, **kw) -> "GenConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - names
        if extra:
            raise ValueError(f"unknown generator keys: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class World:
    """Lexicon and prototypes shared by every episode of one seed."""

    glosses: tuple[str, ...]
    lexicon: tuple[tuple[int, ...], ...]  # gloss index -> phoneme indices (1-based, vocab order)
    sign_protos: np.ndarray  # [V, d_feat]
    letter_protos: np.ndarray  # [26, d_feat]
    rest_proto: np.ndarray  # [d_feat]
    phoneme_protos: np.ndarray  # [39, d_face]
    silence_proto: np.ndarray  # [d_face]

    @property
    def gloss_vocab(self) -> Vocab:
        return Vocab.from_tokens(self.glosses)

    @property
    def letter_vocab(self) -> Vocab:
        return Vocab.from_tokens(LETTERS)

    @property
    def phoneme_vocab(self) -> Vocab:
        return Vocab.from_tokens(ARPABET)

    def spelling(self, gloss: int) -> tuple[int, ...]:
        """Letter-vocab indices spelling gloss ``gloss`` (1-based gloss index)."""
        return tuple(LETTERS.index(c) + 1 for c in self.glosses[gloss - 1])


def _no_adjacent_repeat(rng: np.random.Generator, n: int, k: int) -> list[int]:
    out: list[int] = []
    while len(out) < n:
        x = int(rng.integers(k))
        if not out or out[-1] != x:
            out.append(x)
    return out


def make_world(cfg: GenConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    names: list[str] = []
    seen: set[str] = set()
    lo, hi = cfg.gloss_name_length
    while len(names) < cfg.gloss_vocab_size:
        n = int(rng.integers(lo, hi + 1))
        name = "".join(LETTERS[i] for i in _no_adjacent_repeat(rng, n, 26))
        if name not in seen:
            seen.add(name)
            names.append(name)
    lexicon = []
    plo, phi = cfg.phonemes_per_gloss
    for _ in names:
        n = int(rng.integers(plo, phi + 1))
        lexicon.append(tuple(p + 1 for p in _no_adjacent_repeat(rng, n, len(ARPABET))))

    d, e = cfg.d_feat, cfg.d_face
    centers = rng.standard_normal((3, d)) * cfg.kind_scale
    sign = centers[SIGN] + rng.standard_normal((cfg.gloss_vocab_size, d)) * cfg.proto_scale
    # homonym pairs share their hand shape; only the mouthing tells them apart
    for j in range(cfg.manual_homonyms):
        sign[2 * j + 1] = sign[2 * j]
    letter = centers[FS] + rng.standard_normal((26, d)) * cfg.proto_scale
    rest = centers[REST].copy()
    mouth = rng.standard_normal(e) * cfg.kind_scale
    phon = mouth + rng.standard_normal((len(ARPABET), e)) * cfg.proto_scale
    silence = rng.standard_normal(e) * cfg.proto_scale
    return World(tuple(names), tuple(lexicon), sign, letter, rest, phon, silence)


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class FeatureStream:
    frames: np.ndarray
    modality: str
    frame_rate: float = FRAME_RATE
    segments: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if self.modality not in ("manual", "face"):
            raise ValueError(f"unknown modality {self.modality!r}")
        T = self.frames.shape[0]
        prev = 0
        for s, e, k in self.segments:
            if not (prev <= s < e <= T) or k not in (SIGN, FS, REST):
                raise ValueError(f"bad segment {(s, e, k)} for stream of length {T}")
            prev = e

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class Episode:
    manual: FeatureStream
    face: FeatureStream
    gloss_target: tuple[int, ...]
    sign_target: tuple[int, ...]
    letter_target: tuple[int, ...]
    phoneme_target: tuple[int, ...]
    fingerspelled: tuple[bool, ...]
    manual_onsets: tuple[int, ...] = ()
    face_onsets: tuple[int, ...] = ()

    @property
    def T(self) -> int:
        return self.manual.T

    @property
    def segments(self) -> tuple[tuple[int, int, int], ...]:
        return self.manual.segments

    def fs_words(self, world: World) -> list[tuple[int, ...]]:
        return [world.spelling(g) for g, f in zip(self.gloss_target, self.fingerspelled) if f]


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _sample_sentence(cfg: GenConfig, world: World, rng: np.random.Generator) -> tuple[list[int], list[bool]]:
    n = int(rng.integers(cfg.glosses_per_sentence[0], cfg.glosses_per_sentence[1] + 1))
    glosses: list[int] = []
    while len(glosses) < n:
        g = int(rng.integers(cfg.gloss_vocab_size)) + 1
        if glosses:
            prev = glosses[-1]
            # keep CTC targets separable across contiguous segments
            if g == prev or world.lexicon[prev - 1][-1] == world.lexicon[g - 1][0]:
                continue
        glosses.append(g)
    fs = [bool(rng.random() < cfg.fingerspell_probability) for _ in glosses]
    return glosses, fs


def _schedule(cfg: GenConfig, world: World, rng: np.random.Generator):
    """Token layout shared by every noise/offset variant of one episode index."""
    glosses, fs = _sample_sentence(cfg, world, rng)
    margin = cfg.margin
    pieces: list[tuple[str, int, int]] = [("rest", 0, margin)] if margin else []
    spans: list[tuple[int, int]] = []
    t = margin
    for i, (g, f) in enumerate(zip(glosses, fs)):
        gap = int(rng.integers(cfg.rest_gap[0], cfg.rest_gap[1] + 1)) if i else 0
        if i and f and fs[i - 1]:
            gap = max(gap, 1)  # letter runs of adjacent words must not merge
        if gap:
            pieces.append(("rest", 0, gap))
            t += gap
        n_ph = len(world.lexicon[g - 1])
        start = t
        if f:
            spelled = world.spelling(g)
            durs = [int(rng.integers(cfg.frames_per_letter[0], cfg.frames_per_letter[1] + 1)) for _ in spelled]
            short = cfg.frames_per_phoneme * n_ph - sum(durs)
            if short > 0:
                durs[-1] += short
            for letter, dur in zip(spelled, durs):
                pieces.append(("letter", letter, dur))
                t += dur
        else:
            dur = int(rng.integers(cfg.frames_per_gloss[0], cfg.frames_per_gloss[1] + 1))
            dur = max(dur, cfg.frames_per_phoneme * n_ph)
            pieces.append(("sign", g, dur))
            t += dur
        spans.append((start, t))
    if margin:
        pieces.append(("rest", 0, margin))
        t += margin
    jitter = [int(rng.integers(-cfg.lip_jitter_frames, cfg.lip_jitter_frames + 1)) for _ in glosses]
    return glosses, fs, pieces, spans, jitter, t


def gen_episode(cfg: GenConfig, index: int = 0, world: World | None = None) -> Episode:
    world = world or make_world(cfg)
    sched_rng = np.random.default_rng([cfg.seed, index, 1])
    noise_rng = np.random.default_rng([cfg.seed, index, 2])
    glosses, fs, pieces, spans, jitter, T = _schedule(cfg, world, sched_rng)

    manual = np.empty((T, cfg.d_feat))
    segments: list[tuple[int, int, int]] = []
    t = 0
    for kind, tok, dur in pieces:
        if kind == "sign":
            proto, k = world.sign_protos[tok - 1], SIGN
        elif kind == "letter":
            proto, k = world.letter_protos[tok - 1], FS
        else:
            proto, k = world.rest_proto, REST
        manual[t : t + dur] = proto
        if segments and segments[-1][2] == k == FS and kind == "letter" and segments[-1][1] == t:
            s0 = segments.pop()[0]
            segments.append((s0, t + dur, k))
        elif segments and segments[-1][2] == k == REST and segments[-1][1] == t:
            s0 = segments.pop()[0]
            segments.append((s0, t + dur, k))
        else:
            segments.append((t, t + dur, k))
        t += dur

    face = np.tile(world.silence_proto, (T, 1))
    face_onsets: list[int] = []
    prev_end = 0
    for (s, e), g, j in zip(spans, glosses, jitter):
        start = max(s + cfg.lip_offset_frames + j, prev_end)
        dur = e - s
        end = min(start + dur, T)
        if start >= end:
            raise ValueError("lip stream falls outside the episode; raise edge_margin")
        phones = world.lexicon[g - 1]
        t = start
        for p, d in zip(phones, _split(end - start, len(phones))):
            face[t : t + d] = world.phoneme_protos[p - 1]
            t += d
        face_onsets.append(start)
        prev_end = end

    if cfg.noise_sigma > 0:
        manual = manual + noise_rng.normal(0.0, cfg.noise_sigma, manual.shape)
        face = face + noise_rng.normal(0.0, cfg.noise_sigma, face.shape)

    letter_target = tuple(x for g, f in zip(glosses, fs) if f for x in world.spelling(g))
    phoneme_target = tuple(p for g in glosses for p in world.lexicon[g - 1])
    return Episode(
        manual=FeatureStream(manual, "manual", FRAME_RATE, tuple(segments)),
        face=FeatureStream(face, "face", FRAME_RATE, ()),
        gloss_target=tuple(glosses),
        sign_target=tuple(g for g, f in zip(glosses, fs) if not f),
        letter_target=letter_target,
        phoneme_target=phoneme_target,
        fingerspelled=tuple(fs),
        manual_onsets=tuple(s for s, _ in spans),
        face_onsets=tuple(face_onsets),
    )


def gen_episodes(cfg: GenConfig, n: int, start: int = 0) -> list[Episode]:
    world = make_world(cfg)
    return [gen_episode(cfg, start + i, world) for i in range(n)]


def nearest_prototype_labels(world: World, frames: np.ndarray) -> list[tuple[int, int]]:
    """Classify each manual frame to its closest prototype: (kind, token)."""
    protos = np.vstack([world.sign_protos, world.letter_protos, world.rest_proto[None]])
    labels = [(SIGN, i + 1) for i in range(len(world.sign_protos))]
    labels += [(FS, i + 1) for i in range(26)] + [(REST, 0)]
    d2 = ((frames[:, None, :] - protos[None]) ** 2).sum(-1)
    return [labels[i] for i in d2.argmin(1)]


# ---------------------------------------------------------------- files

EP_MAGIC = b"MSEP"
EP_VERSION = 1


def _targets(ep: Episode) -> list[tuple[int, ...]]:
    return [
        ep.gloss_target,
        ep.sign_target,
        ep.letter_target,
        ep.phoneme_target,
        tuple(int(f) for f in ep.fingerspelled),
        ep.manual_onsets,
        ep.face_onsets,
    ]


def targets_digest(ep: Episode) -> str:
    h = hashlib.sha256()
    for seq in _targets(ep):
        h.update(struct.pack(f"<I{len(seq)}i", len(seq), *seq))
    return h.hexdigest()[:16]


def encode_episode(ep: Episode) -> bytes:
    T, d = ep.manual.frames.shape
    e = ep.face.frames.shape[1]
    tg = _targets(ep)
    parts = [
        EP_MAGIC,
        struct.pack("<IIII", EP_VERSION, T, d, e),
        struct.pack("<I", len(ep.segments)),
        struct.pack(f"<{len(tg)}I", *(len(x) for x in tg)),
        np.ascontiguousarray(ep.manual.frames, dtype="<f8").tobytes(),
        np.ascontiguousarray(ep.face.frames, dtype="<f8").tobytes(),
    ]
    for seg in ep.segments:
        parts.append(struct.pack("<III", *seg))
    for seq in tg:
        parts.append(struct.pack(f"<{len(seq)}i", *seq))
    return b"".join(parts)


def decode_episode(buf: bytes) -> Episode:
    if buf[:4] != EP_MAGIC:
        raise ValueError("not an episode file")
    version, T, d, e = struct.unpack_from("<IIII", buf, 4)
    if version != EP_VERSION:
        raise ValueError(f"unsupported episode version {version}")
    pos = 20
    (n_seg,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    counts = struct.unpack_from("<7I", buf, pos)
    pos += 28
    manual = np.frombuffer(buf, "<f8", T * d, pos).reshape(T, d).copy()
    pos += 8 * T * d
    face = np.frombuffer(buf, "<f8", T * e, pos).reshape(T, e).copy()
    pos += 8 * T * e
    segs = []
    for _ in range(n_seg):
        segs.append(struct.unpack_from("<III", buf, pos))
        pos += 12
    seqs = []
    for c in counts:
        seqs.append(tuple(struct.unpack_from(f"<{c}i", buf, pos)))
        pos += 4 * c
    if pos != len(buf):
        raise ValueError("trailing bytes in episode file")
    g, s, lt, ph, fs, mo, fo = seqs
    return Episode(
        FeatureStream(manual, "manual", FRAME_RATE, tuple(segs)),
        FeatureStream(face, "face", FRAME_RATE, ()),
        g,
        s,
        lt,
        ph,
        tuple(bool(x) for x in fs),
        mo,
        fo,
    )


@dataclass
class Dataset:
    cfg: GenConfig
    world: World
    episodes: list[Episode] = field(default_factory=list)

    @property
    def total_frames(self) -> int:
        return sum(ep.T for ep in self.episodes)


def gen_dataset(cfg: GenConfig, n_episodes: int, out_path, start: int = 0) -> Path:
    """Write ``n_episodes`` episode files plus ``config.json`` and ``manifest.jsonl``."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    world = make_world(cfg)
    chash = cfg.digest()
    (out / "config.json").write_text(
        json.dumps({"generator": cfg.to_dict(), "config_hash": chash, "start": start}, sort_keys=True, indent=1) + "\n"
    )
    lines = []
    for i in range(n_episodes):
        ep = gen_episode(cfg, start + i, world)
        name = f"ep{start + i:06d}.bin"
        (out / name).write_bytes(encode_episode(ep))
        lines.append(json.dumps({"file": name, "T": ep.T, "targets_digest": targets_digest(ep), "config_hash": chash}))
    (out / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta = json.loads((root / "config.json").read_text())
    cfg = GenConfig.from_dict(meta["generator"])
    if cfg.digest() != meta["config_hash"]:
        raise ValueError(f"{root}: config hash mismatch")
    episodes = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        rec = json.loads(line)
        ep = decode_episode((root / rec["file"]).read_bytes())
        if ep.T != rec["T"] or targets_digest(ep) != rec["targets_digest"]:
            raise ValueError(f"{root / rec['file']}: does not match the manifest")
        episodes.append(ep)
    return Dataset(cfg, make_world(cfg), episodes)


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in (Path(path) / "manifest.jsonl").read_text().splitlines()]


# ---------------------------------------------------------------- sweeps

OFFSET_AXIS = (-10, -5, 0, 5, 10)
NOISE_AXIS = (0.0, 0.05, 0.1, 0.2)


def difficulty_sweep(
    cfg: GenConfig,
    axis: str,
    n_episodes: int,
    values: Sequence | None = None,
    out_dir=None,
    start: int = 0,
) -> dict:
    """Matched datasets varying one axis; token schedules are shared across members.

    With ``out_dir`` each member is written under ``<axis>=<value>``; the return
    value maps axis value to a :class:`Dataset` (or its path when written).
    """
    if axis == "lip_offset_frames":
        values = tuple(values if values is not None else OFFSET_AXIS)
        margin = cfg.edge_margin if cfg.edge_margin is not None else max(abs(v) for v in values) + cfg.lip_jitter_frames + 2
        base = cfg.replace(edge_margin=margin)
    elif axis == "noise_sigma":
        values = tuple(values if values is not None else NOISE_AXIS)
        base = cfg
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    family = {}
    for v in values:
        member = base.replace(**{axis: v})
        if out_dir is not None:
            family[v] = gen_dataset(member, n_episodes, Path(out_dir) / f"{axis}={v}", start)
        else:
            family[v] = Dataset(member, make_world(member), gen_episodes(member, n_episodes, start))
    return family
