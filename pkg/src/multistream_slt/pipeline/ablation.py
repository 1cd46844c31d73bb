"""Shift and fusion-variant ablations, plus the per-step timing benchmark."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import fusion as fu
from ..ctc import ctc_loss_batch
from ..numerics.layers import Mode
from ..numerics.params import ParamStore
from . import training as tr
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)

METRICS = ("letter_accuracy", "token_error_rate", "bleu1", "bleu4", "rougeL")
FIELDS = ("variant",) + METRICS + ("seed", "config_hash")


def shift_rows(shifts) -> list:
    """Row labels in report order: ``none``, the non-zero shifts, then ``learned``."""
    rows = ["none"] if 0 in shifts else []
    rows += sorted((int(s) for s in shifts if s != 0), key=lambda s: (abs(s), s))
    return rows + [fu.LEARNED]


@dataclass
class AblationResult:
    kind: str
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)

    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def mean(self, variant, metric: str) -> float:
        vals = [r[metric] for r in self.rows if r["variant"] == str(variant)]
        if not vals:
            raise KeyError(variant)
        return float(np.mean(vals))

    def summary(self) -> list[dict]:
        """One row per variant, metrics averaged over seeds."""
        out = []
        for v in self.variants():
            row = {"variant": v, **{m: self.mean(v, m) for m in METRICS}}
            row["seed"] = "mean"
            row["config_hash"] = self.config_hash
            out.append(row)
        return out

    def ranking(self, metric: str = "letter_accuracy") -> list[str]:
        reverse = metric != "token_error_rate"
        return sorted(self.variants(), key=lambda v: self.mean(v, metric), reverse=reverse)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "summary": _write_csv(out / f"{self.kind}_ablation.csv", self.summary()),
            "seeds": _write_csv(out / f"{self.kind}_ablation_seeds.csv", self.rows),
        }
        meta = {"kind": self.kind, "config_hash": self.config_hash, "ranking": self.ranking()}
        if self.timing:
            meta["step_seconds"] = self.timing
        paths["meta"] = out / f"{self.kind}_ablation.json"
        paths["meta"].write_text(json.dumps(meta, indent=2) + "\n")
        return paths


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(FIELDS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items() if k in FIELDS})
    return path


def _row(label, report, seed: int, cfg_hash: str) -> dict:
    r = report.as_row()
    return {"variant": str(label), **{m: float(r[m]) for m in METRICS}, "seed": seed, "config_hash": cfg_hash}


def _experts_for_seed(cfg: RunConfig, seed: int, overrides: dict):
    scfg = cfg.replace(seed=seed)
    train = tr.load_split(scfg, "train", overrides)
    test = tr.load_split(scfg, "test", overrides)
    store, _ = tr.train_experts(scfg, train)
    return scfg, train, test, store, tr.expert_config(scfg, train.gen)


# ---------------------------------------------------------------- shift


def _shift_seed(cfg: RunConfig, seed: int) -> list[dict]:
    scfg, train, test, experts, ecfg = _experts_for_seed(cfg, seed, {})
    rows = []
    for label in shift_rows(cfg.ablation.shifts):
        if label == fu.LEARNED:
            delta, gate = 0, cfg.fusion.gate
        else:
            delta, gate = (0 if label == "none" else label), cfg.ablation.fixed_gate
        fcfg = tr.fusion_cfg(scfg, train.gen, gate=gate, variant="gated")
        store, _ = tr.train_fusion(scfg, experts, ecfg, train, delta, fcfg)
        res = tr.evaluate(store, ecfg, fcfg, test, delta, beam_width=0)
        rows.append(_row(label, res.greedy, seed, cfg.digest()))
        log.info("shift %s seed %d: %s", label, seed, rows[-1])
    return rows


def ablate_shift(cfg: RunConfig, workers: int = 1) -> AblationResult:
    """Fusion trained and evaluated per shift on paired data (same schedules, shifted face stream).

    Fixed-shift rows, including ``none``, use the fixed gate from the ablation
    config; the ``learned`` row sees unshifted data and the configured adaptive gate.
    """
    if 0 not in cfg.ablation.shifts:
        raise ConfigError("ablation.shifts must contain 0 (the 'none' row)")
    result = AblationResult("shift", cfg.digest())
    for rows in _map(_shift_seed, cfg, workers):
        result.rows.extend(rows)
    return result


# ---------------------------------------------------------------- fusion variants


def _fusion_seed(cfg: RunConfig, seed: int) -> list[dict]:
    scfg, train, test, experts, ecfg = _experts_for_seed(cfg, seed, {"lip_offset_frames": cfg.ablation.lip_offset})
    rows = []
    for variant in cfg.ablation.variants:
        fcfg = tr.fusion_cfg(scfg, train.gen, variant=variant)
        store, _ = tr.train_fusion(scfg, experts, ecfg, train, 0, fcfg)
        res = tr.evaluate(store, ecfg, fcfg, test, 0, beam_width=0)
        rows.append(_row(variant, res.greedy, seed, cfg.digest()))
        log.info("variant %s seed %d: %s", variant, seed, rows[-1])
    return rows


def ablate_fusion(cfg: RunConfig, workers: int = 1, timing: bool = True) -> AblationResult:
    """Each fusion variant trained with the same budget on data whose mouthing lags the hands."""
    result = AblationResult("fusion", cfg.digest())
    for rows in _map(_fusion_seed, cfg, workers):
        result.rows.extend(rows)
    if timing:
        result.timing = step_times(cfg, cfg.ablation.variants, cfg.ablation.timing_T, cfg.ablation.timing_repeats)
    return result


def _map(fn, cfg: RunConfig, workers: int):
    seeds = list(cfg.ablation.seeds)
    if workers <= 1:
        return [fn(cfg, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), seeds))


# ---------------------------------------------------------------- timing


def step_times(cfg: RunConfig, variants, T: int = 256, repeats: int = 5, batch: int = 1) -> dict[str, float]:
    """Median wall time of one fusion forward+backward pass per variant on random expert posteriors."""
    gen = cfg.data.gen_config(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 77])
    out = {}
    for variant in variants:
        fcfg = tr.fusion_cfg(cfg, gen, variant=variant)
        store = ParamStore()
        fu.init_fusion(store, fcfg, np.random.default_rng([cfg.seed, 78]))
        inputs = _random_inputs(fcfg, batch, T, rng)
        target = [list(rng.integers(1, fcfg.n_gloss + 1, size=8)) for _ in range(batch)]
        samples = []
        for _ in range(repeats + 1):
            t0 = time.perf_counter()
            state = fu.fusion_forward(inputs, store, fcfg, Mode(train=True, rng=rng))
            ctc_loss_batch(state.log_probs, target, inputs.lengths).backward()
            samples.append(time.perf_counter() - t0)
            store.zero_grad()
        out[variant] = statistics.median(samples[1:])
    return out


def _random_inputs(fcfg: fu.FusionConfig, B: int, T: int, rng: np.random.Generator) -> fu.ExpertOutputs:
    def lp(K):
        x = rng.normal(size=(B, T, K))
        return x - np.log(np.exp(x).sum(-1, keepdims=True))

    g = np.zeros((B, T, 3))
    g[np.arange(B)[:, None], np.arange(T)[None, :], rng.integers(0, 3, size=(B, T))] = 1.0
    return fu.ExpertOutputs(
        lp(fcfg.k_sign), lp(fcfg.k_fs), lp(fcfg.k_lip), g, (T,) * B, np.ones((B, T), dtype=bool)
    )
