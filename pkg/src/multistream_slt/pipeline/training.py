"""Expert training, fusion training, decoding and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import experts as ex
from .. import fusion as fu
from ..ctc import InfeasibleTarget, ctc_beam_decode, ctc_greedy_decode, ctc_loss_batch, ctc_loss_tensor
from ..metrics import MetricReport, align, gloss_report, levenshtein
from ..numerics import tensor as tf
from ..numerics.archive import load_store, save_store
from ..numerics.layers import Mode
from ..numerics.optim import NumericalError, OptimizerState, adamw_step, lr_schedule
from ..numerics.params import ParamStore
from ..numerics.tensor import Tensor
from ..synthdata import Episode, GenConfig, World, gen_episodes, load_dataset, make_world
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)

TEST_OFFSET = 1_000_000
BRANCHES = ("router", "sign", "fs", "lip")


class StageError(ValueError):
    """A checkpoint does not fit the requested training stage."""


@dataclass
class RunRecord:
    stage: str
    config_hash: str
    losses: dict[str, list[float]] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    max_clipped_norm: float = 0.0
    checkpoint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data


@dataclass
class Split:
    world: World
    gen: GenConfig
    episodes: list[Episode]


def load_split(cfg: RunConfig, split: str = "train", gen_overrides: dict | None = None) -> Split:
    """Episodes from a dataset directory, or generated in memory from ``data.generator``.

    Generated test episodes use indices far from the training ones, so the
    splits never share a schedule.
    """
    path = cfg.data.train if split == "train" else cfg.data.test
    if path:
        ds = load_dataset(path)
        return Split(ds.world, ds.cfg, ds.episodes)
    gen = cfg.data.gen_config(cfg.seed)
    if gen_overrides:
        gen = gen.replace(**gen_overrides)
    n, start = (cfg.data.n_train, 0) if split == "train" else (cfg.data.n_test, TEST_OFFSET)
    return Split(make_world(gen), gen, gen_episodes(gen, n, start))


def expert_config(cfg: RunConfig, gen: GenConfig) -> ex.ExpertConfig:
    e = cfg.experts
    return ex.ExpertConfig(
        d_feat=gen.d_feat,
        d_face=gen.d_face,
        n_gloss=gen.gloss_vocab_size,
        lip_hidden=e.lip_hidden,
        kernel=e.kernel,
        stride=e.stride,
        mask_ratio=e.mask_ratio,
        dropout=cfg.dropout,
        pe_scale=e.pe_scale,
    )


def fusion_cfg(cfg: RunConfig, gen: GenConfig, **kw) -> fu.FusionConfig:
    f = cfg.fusion
    base = dict(
        n_gloss=gen.gloss_vocab_size,
        k_sign=gen.gloss_vocab_size + 1,
        dropout=cfg.dropout,
        variant=f.variant,
        gate=f.gate,
        upsample=f.upsample,
        positional=f.positional,
    )
    base.update(kw)
    return fu.fusion_config(cfg.profile, **base)


# ---------------------------------------------------------------- optimisation


def branch_view(store: ParamStore, prefix: str) -> ParamStore:
    """A store sharing the parameter objects whose names start with ``prefix``."""
    return ParamStore({n: p for n, p in store.params.items() if n.startswith(prefix)})


def make_optimizer(cfg: RunConfig) -> OptimizerState:
    o = cfg.optim
    return OptimizerState(
        lr=o.lr_max, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay, clip_norm=o.clip_norm
    )


class Trainer:
    """One parameter group with its own AdamW state and warmup/cosine schedule."""

    def __init__(self, store: ParamStore, cfg: RunConfig, total_steps: int):
        self.store = store
        self.opt = make_optimizer(cfg)
        self.cfg = cfg
        self.total = total_steps
        self.warmup = min(cfg.optim.warmup, max(total_steps - 1, 0))
        self.max_clipped = 0.0

    def step(self) -> None:
        o = self.cfg.optim
        self.opt.lr = lr_schedule(self.opt.step + 1, self.total, self.warmup, o.lr_max, o.lr_min)
        adamw_step(self.store, self.opt)
        self.max_clipped = max(self.max_clipped, self.opt.last_clipped_norm)
        self.store.zero_grad()


def _batches(lengths: Sequence[int], size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Length-bucketed batches: shuffle, sort by length, chunk, then shuffle the chunks."""
    lengths = np.asarray(lengths)
    order = rng.permutation(len(lengths))
    order = order[np.argsort(lengths[order], kind="stable")]
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def _check_finite(loss: Tensor, what: str) -> None:
    if not np.isfinite(loss.data):
        raise NumericalError(f"{what} loss is not finite")


# ---------------------------------------------------------------- experts


def train_experts(cfg: RunConfig, split: Split) -> tuple[ParamStore, RunRecord]:
    """Router (segment cross-entropy), sign and fingerspelling heads and the lip module (CTC)."""
    eps = split.episodes
    if not eps:
        raise ConfigError("no training episodes")
    ecfg = expert_config(cfg, split.gen)
    store = ParamStore()
    ex.init_experts(store, ecfg, np.random.default_rng([cfg.seed, 11]))
    record = RunRecord("experts", cfg.digest())
    bs = cfg.optim.batch_size
    steps_per_epoch = math.ceil(len(eps) / bs)

    # router ------------------------------------------------------------
    trainer = Trainer(branch_view(store, "router."), cfg, steps_per_epoch * cfg.epochs.of("router"))
    rng = np.random.default_rng([cfg.seed, 21])
    pooled = [ex.pool_segments(ep.manual.frames, ep.segments) for ep in eps]
    kinds = [np.array([k for _, _, k in ep.segments]) for ep in eps]
    losses = []
    for _ in range(cfg.epochs.of("router")):
        total = 0.0
        for batch in _batches([ep.T for ep in eps], bs, rng):
            x = Tensor(np.vstack([pooled[i] for i in batch]))
            y = np.concatenate([kinds[i] for i in batch])
            lp = tf.log_softmax(ex.affine(x, store["router.cls.W"], store["router.cls.b"]))
            loss = -lp[np.arange(len(y)), y].sum() * (1.0 / len(y))
            _check_finite(loss, "router")
            loss.backward()
            trainer.step()
            total += float(loss.data) * len(batch)
        losses.append(total / len(eps))
    record.losses["cls"] = losses
    record.max_clipped_norm = trainer.max_clipped

    # sign + fingerspelling: one shared input tensor per episode -------
    n_sf = max(cfg.epochs.of("sign"), cfg.epochs.of("fs"))
    tr_sign = Trainer(branch_view(store, "sign."), cfg, steps_per_epoch * cfg.epochs.of("sign"))
    tr_fs = Trainer(branch_view(store, "fs."), cfg, steps_per_epoch * cfg.epochs.of("fs"))
    rng = np.random.default_rng([cfg.seed, 22])
    skipped = {"sign": 0, "fs": 0, "lip": 0}
    ls_sign, ls_fs = [], []
    for epoch in range(n_sf):
        do_sign, do_fs = epoch < cfg.epochs.of("sign"), epoch < cfg.epochs.of("fs")
        tot_s = tot_f = 0.0
        for batch in _batches([ep.T for ep in eps], bs, rng):
            loss_s = loss_f = None
            for i in batch:
                ep = eps[i]
                mode = Mode(train=True, rng=rng)
                h = ex.shared_input(ep.manual.frames, ecfg, mode)
                if do_sign:
                    loss_s = _add_ctc(loss_s, lambda: ctc_loss_tensor(ex.sign_head(h, store), ep.sign_target), cfg, skipped, "sign")
                if do_fs:
                    loss_f = _add_ctc(loss_f, lambda: ctc_loss_tensor(ex.fs_head(h, store), ep.letter_target), cfg, skipped, "fs")
            for loss, tr, name in ((loss_s, tr_sign, "sign"), (loss_f, tr_fs, "fs")):
                if loss is None:
                    continue
                loss = loss * (1.0 / len(batch))
                _check_finite(loss, name)
                loss.backward()
                tr.step()
                if name == "sign":
                    tot_s += float(loss.data) * len(batch)
                else:
                    tot_f += float(loss.data) * len(batch)
        if do_sign:
            ls_sign.append(tot_s / len(eps))
        if do_fs:
            ls_fs.append(tot_f / len(eps))
    record.losses["sign"] = ls_sign
    record.losses["fs"] = ls_fs
    record.max_clipped_norm = max(record.max_clipped_norm, tr_sign.max_clipped, tr_fs.max_clipped)

    # lip ---------------------------------------------------------------
    tr_lip = Trainer(branch_view(store, "lip."), cfg, steps_per_epoch * cfg.epochs.of("lip"))
    rng = np.random.default_rng([cfg.seed, 23])
    ls_lip = []
    for _ in range(cfg.epochs.of("lip")):
        tot = 0.0
        for batch in _batches([ep.T for ep in eps], bs, rng):
            loss = None
            for i in batch:
                ep = eps[i]
                loss = _add_ctc(
                    loss,
                    lambda: ctc_loss_tensor(ex.lip_forward(ep.face, store, ecfg, rng, train=True), ep.phoneme_target),
                    cfg,
                    skipped,
                    "lip",
                )
            if loss is None:
                continue
            loss = loss * (1.0 / len(batch))
            _check_finite(loss, "lip")
            loss.backward()
            tr_lip.step()
            tot += float(loss.data) * len(batch)
        ls_lip.append(tot / len(eps))
    record.losses["lip"] = ls_lip
    record.max_clipped_norm = max(record.max_clipped_norm, tr_lip.max_clipped)
    record.skipped = skipped

    correct = total = 0
    for ep in eps:
        c, t = ex.segment_kind_accuracy(ep.manual, store)
        correct, total = correct + c, total + t
    record.metrics["router_train_accuracy"] = correct / total
    return store, record


def _add_ctc(acc, make, cfg: RunConfig, skipped: dict, branch: str):
    try:
        loss = make()
    except InfeasibleTarget as err:
        if not cfg.skip_infeasible:
            raise
        skipped[branch] += 1
        log.warning("%s: skipping infeasible target (%s)", branch, err)
        return acc
    return loss if acc is None else acc + loss


def expert_meta(cfg: RunConfig, gen: GenConfig, ecfg: ex.ExpertConfig) -> dict:
    return {
        "stage": "experts",
        "config_hash": cfg.digest(),
        "generator": gen.to_dict(),
        "experts": asdict(ecfg),
        "run": cfg.to_dict(),
    }


# ---------------------------------------------------------------- fusion


def _expert_store(store: ParamStore) -> ParamStore:
    return ParamStore({n: p for n, p in store.params.items() if n.startswith(ex.PREFIXES)})


def check_expert_checkpoint(meta: dict) -> None:
    if meta.get("stage") not in ("experts", "fusion") or "experts" not in meta:
        raise StageError("checkpoint lacks the experts stage tag; train experts first")


def train_fusion(
    cfg: RunConfig,
    expert_store: ParamStore,
    ecfg: ex.ExpertConfig,
    split: Split,
    shift=0,
    fcfg: fu.FusionConfig | None = None,
) -> tuple[ParamStore, RunRecord]:
    """Fusion parameters trained with gloss CTC on the outputs of frozen experts.

    Experts run live every step; after each backward pass every expert
    gradient must be exactly zero and the expert bytes must be unchanged at the end.
    """
    eps = split.episodes
    if not eps:
        raise ConfigError("no training episodes")
    fcfg = fcfg or fusion_cfg(cfg, split.gen)
    store = ParamStore()
    for p in expert_store:
        store.add(p.name, p.value.data, p.decay_exempt, frozen=True, stage=p.stage or "experts")
    before = store.digest(ex.PREFIXES[0]) + "".join(store.digest(px) for px in ex.PREFIXES[1:])
    fu.init_fusion(store, fcfg, np.random.default_rng([cfg.seed, 31]))
    experts = _expert_store(store)
    record = RunRecord("fusion", cfg.digest())
    bs = cfg.optim.batch_size
    steps = math.ceil(len(eps) / bs) * cfg.epochs.of("fusion")
    trainer = Trainer(branch_view(store, "fusion."), cfg, steps)
    rng = np.random.default_rng([cfg.seed, 32])
    losses = []
    for _ in range(cfg.epochs.of("fusion")):
        tot = 0.0
        for batch in _batches([ep.T for ep in eps], bs, rng):
            outs = [fu.expert_outputs(eps[i], experts, ecfg, shift, fcfg.upsample) for i in batch]
            inputs = fu.collate(outs)
            state = fu.fusion_forward(inputs, store, fcfg, Mode(train=True, rng=rng))
            targets = [eps[i].gloss_target for i in batch]
            loss = ctc_loss_batch(state.log_probs, targets, inputs.lengths) * (1.0 / len(batch))
            _check_finite(loss, "fusion")
            loss.backward()
            leaked = [p.name for p in experts if np.any(p.grad != 0)]
            if leaked:
                raise RuntimeError(f"frozen expert parameters received gradients: {leaked[:5]}")
            trainer.step()
            tot += float(loss.data) * len(batch)
        losses.append(tot / len(eps))
    after = store.digest(ex.PREFIXES[0]) + "".join(store.digest(px) for px in ex.PREFIXES[1:])
    if after != before:
        raise RuntimeError("expert parameters changed during fusion training")
    record.losses["fusion"] = losses
    record.max_clipped_norm = trainer.max_clipped
    return store, record


def fusion_meta(cfg: RunConfig, gen: GenConfig, ecfg: ex.ExpertConfig, fcfg: fu.FusionConfig, shift) -> dict:
    return {
        "stage": "fusion",
        "config_hash": cfg.digest(),
        "generator": gen.to_dict(),
        "experts": asdict(ecfg),
        "fusion": asdict(fcfg),
        "shift": shift,
        "run": cfg.to_dict(),
    }


def save_checkpoint(path, store: ParamStore, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_store(path, store, meta)
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict, ex.ExpertConfig, fu.FusionConfig | None]:
    store, meta = load_store(path)
    check_expert_checkpoint(meta)
    ecfg = ex.ExpertConfig(**meta["experts"])
    fcfg = fu.FusionConfig(**meta["fusion"]) if "fusion" in meta else None
    return store, meta, ecfg, fcfg


# ---------------------------------------------------------------- decoding & evaluation


@dataclass
class Decoded:
    greedy: list[list[int]]
    beam: list[list[int]]
    fs_letters: list[list[int]]


def decode_fusion(
    store: ParamStore,
    ecfg: ex.ExpertConfig,
    fcfg: fu.FusionConfig,
    episodes: Sequence[Episode],
    shift=0,
    beam_width: int = 4,
    batch_size: int = 8,
) -> Decoded:
    experts = _expert_store(store)
    greedy, beam, letters = [], [], []
    for i in range(0, len(episodes), batch_size):
        chunk = episodes[i : i + batch_size]
        outs = [fu.expert_outputs(ep, experts, ecfg, shift, fcfg.upsample) for ep in chunk]
        state = fu.fusion_forward(fu.collate(outs), store, fcfg)
        for b, ep in enumerate(chunk):
            lp = state.log_probs.data[b, : ep.T]
            greedy.append(ctc_greedy_decode(lp))
            beam.append(ctc_beam_decode(lp, beam_width) if beam_width > 0 else greedy[-1])
            letters.append(ctc_greedy_decode(outs[b].fs))
    return Decoded(greedy, beam, letters)


def fused_letter_pairs(world: World, hyps: Sequence[Sequence[int]], episodes: Sequence[Episode]):
    """Spell out the decoded gloss aligned to each fingerspelled reference word."""
    pairs = []
    for hyp, ep in zip(hyps, episodes):
        for hi, ri in align(list(hyp), list(ep.gloss_target)):
            if ri is None or not ep.fingerspelled[ri]:
                continue
            ref = world.spelling(ep.gloss_target[ri])
            pairs.append((world.spelling(hyp[hi]) if hi is not None else (), ref))
    return pairs


@dataclass
class EvalResult:
    greedy: MetricReport
    beam: MetricReport
    fs_expert_letter_accuracy: float
    router_accuracy: float
    decoded: Decoded

    def summary(self) -> dict:
        return {
            "greedy": self.greedy.as_row(),
            "beam": self.beam.as_row(),
            "fs_expert_letter_accuracy": self.fs_expert_letter_accuracy,
            "router_accuracy": self.router_accuracy,
        }


def evaluate(
    store: ParamStore,
    ecfg: ex.ExpertConfig,
    fcfg: fu.FusionConfig,
    split: Split,
    shift=0,
    beam_width: int = 4,
) -> EvalResult:
    eps = split.episodes
    dec = decode_fusion(store, ecfg, fcfg, eps, shift, beam_width)
    refs = [list(ep.gloss_target) for ep in eps]
    reports = []
    for hyps in (dec.greedy, dec.beam):
        reports.append(gloss_report(hyps, refs, fused_letter_pairs(split.world, hyps, eps)))
    fs_pairs = [(h, ep.letter_target) for h, ep in zip(dec.fs_letters, eps) if ep.letter_target]
    if fs_pairs:
        fs_acc = max(0.0, 1.0 - sum(levenshtein(h, r) for h, r in fs_pairs) / sum(len(r) for _, r in fs_pairs))
    else:
        fs_acc = float("nan")
    return EvalResult(reports[0], reports[1], fs_acc, router_accuracy(_expert_store(store), eps), dec)


def router_accuracy(store: ParamStore, episodes: Sequence[Episode]) -> float:
    correct = total = 0
    for ep in episodes:
        c, t = ex.segment_kind_accuracy(ep.manual, store)
        correct, total = correct + c, total + t
    return correct / total if total else float("nan")


def expert_ctc_loss(store: ParamStore, ecfg: ex.ExpertConfig, episodes: Sequence[Episode]) -> float:
    """Mean sign-head CTC loss against the full gloss target (no fusion)."""
    total, n = 0.0, 0
    for ep in episodes:
        sign_lp, _, _ = ex.manual_heads(ep.manual, store, ecfg)
        try:
            total += float(ctc_loss_tensor(sign_lp, ep.gloss_target).data)
            n += 1
        except InfeasibleTarget:
            continue
    return total / max(n, 1)


def fusion_ctc_loss(store: ParamStore, ecfg: ex.ExpertConfig, fcfg: fu.FusionConfig, episodes, shift=0) -> float:
    experts = _expert_store(store)
    total = 0.0
    for i in range(0, len(episodes), 8):
        chunk = episodes[i : i + 8]
        inputs = fu.collate([fu.expert_outputs(ep, experts, ecfg, shift, fcfg.upsample) for ep in chunk])
        state = fu.fusion_forward(inputs, store, fcfg)
        total += float(ctc_loss_batch(state.log_probs, [ep.gloss_target for ep in chunk], inputs.lengths).data)
    return total / len(episodes)
