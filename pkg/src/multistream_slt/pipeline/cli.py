"""``mslt`` command line: data generation, text preparation, training, evaluation, ablations."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..numerics.archive import ArchiveError
from ..numerics.optim import NumericalError
from . import training as tr
from .config import ConfigError, RunConfig, bundled_config, config_from_dict, load_config

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("mslt")


def _load(name: str) -> RunConfig:
    # a bare name that is not a file refers to a bundled config
    if not Path(name).exists() and not Path(name).suffix:
        return bundled_config(name)
    return load_config(name)


def _config(args, stage: str | None = None) -> RunConfig:
    cfg = _load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "profile", None):
        over["profile"] = args.profile
    if stage:
        over["stage"] = stage
    return cfg.replace(**over) if over else cfg.validate()


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        path.write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------- gendata


def cmd_gendata(args) -> int:
    from ..synthdata import difficulty_sweep, gen_dataset

    cfg = _config(args)
    gen = cfg.data.gen_config(cfg.seed)
    out = _out(args, "data")
    if args.sweep:
        family = difficulty_sweep(gen, args.sweep, args.n or cfg.data.n_train, out_dir=out)
        _emit({str(k): str(v) for k, v in family.items()})
        return EXIT_OK
    train = gen_dataset(gen, args.n or cfg.data.n_train, out / "train")
    test = gen_dataset(gen, args.n_test or cfg.data.n_test, out / "test", start=tr.TEST_OFFSET)
    _emit({"train": str(train), "test": str(test), "config_hash": gen.digest()})
    return EXIT_OK


# ---------------------------------------------------------------- textprep


def _read_inputs(args) -> list:
    from ..textprep import Sentence, mini_corpus, read_sentences

    if args.text:
        return [Sentence(t, str(i)) for i, t in enumerate(args.text)]
    if args.input:
        return list(read_sentences(args.input))
    return mini_corpus()


def cmd_textprep(args) -> int:
    from .. import textprep as tp

    if args.action == "letters":
        for word in args.text or []:
            print(" ".join(tp.letters(word).letters))
        return EXIT_OK
    if args.action == "phonemize":
        for gloss in args.text or []:
            ph = tp.phonemize(gloss)
            print(" ".join(ph.phonemes) + (f"\t# oov: {' '.join(ph.oov)}" if ph.oov else ""))
        return EXIT_OK
    sentences = _read_inputs(args)
    if args.action == "gloss":
        for s in sentences:
            print(" ".join(tp.pseudo_gloss(s).tokens))
        return EXIT_OK
    glosses = [tp.pseudo_gloss(s) for s in sentences]
    if args.action == "pairs":
        records = []
        for s, g in zip(sentences, glosses):
            rec = tp.process_record(s)
            rec.update(tp.format_llm_pair(g, s).to_dict())
            records.append(rec)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            n = tp.write_jsonl(args.out, records)
            print(f"wrote {n} records to {args.out}")
        else:
            for rec in records:
                print(json.dumps(rec))
        return EXIT_OK
    stats = tp.corpus_stats(list(zip(sentences, glosses)))
    if args.out:
        Path(args.out).write_text(stats.to_csv())
    sys.stdout.write(stats.to_csv())
    print(f"mean removed {stats.mean_removed:.3f}, mean reduction {stats.mean_fraction:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- training


def _generator_matches(cfg: RunConfig, split: tr.Split, meta: dict) -> None:
    if split.gen.to_dict() != meta["generator"]:
        raise ConfigError("dataset generator differs from the one the experts were trained on")


def cmd_train(args) -> int:
    cfg = _config(args, args.stage)
    out = _out(args, "runs")
    train = tr.load_split(cfg, "train")
    if args.stage == "experts":
        store, record = tr.train_experts(cfg, train)
        path = tr.save_checkpoint(out / "experts.ckpt", store, tr.expert_meta(cfg, train.gen, tr.expert_config(cfg, train.gen)))
    else:
        expert_path = Path(args.experts or out / "experts.ckpt")
        if not expert_path.exists():
            raise ConfigError(f"expert checkpoint {expert_path} not found; run 'train experts' first")
        experts, meta, ecfg, _ = tr.load_checkpoint(expert_path)
        _generator_matches(cfg, train, meta)
        fcfg = tr.fusion_cfg(cfg, train.gen)
        store, record = tr.train_fusion(cfg, experts, ecfg, train, cfg.shift, fcfg)
        path = tr.save_checkpoint(out / "fusion.ckpt", store, tr.fusion_meta(cfg, train.gen, ecfg, fcfg, cfg.shift))
    record.checkpoint = str(path)
    _emit(record.to_dict(), out / f"{args.stage}_record.json")
    return EXIT_OK


def _load_fusion(args):
    store, meta, ecfg, fcfg = tr.load_checkpoint(args.checkpoint)
    if fcfg is None:
        raise tr.StageError("checkpoint has no fusion stage; run 'train fusion' first")
    cfg = _config(args) if args.config else config_from_dict(meta["run"])
    if args.seed is not None and not args.config:
        cfg = cfg.replace(seed=args.seed)
    split = tr.load_split(cfg, args.split)
    _generator_matches(cfg, split, meta)
    return store, meta, ecfg, fcfg, cfg, split


def cmd_eval(args) -> int:
    store, meta, ecfg, fcfg, cfg, split = _load_fusion(args)
    res = tr.evaluate(store, ecfg, fcfg, split, meta.get("shift", 0), cfg.beam_width)
    out = _out(args, "eval")
    rows = []
    for name, rep in (("greedy", res.greedy), ("beam", res.beam)):
        rows.append(f"{name}," + rep.to_csv().splitlines()[1] + f",{meta['config_hash']}")
    header = "decoder," + res.greedy.to_csv().splitlines()[0] + ",config_hash"
    (out / "metrics.csv").write_text("\n".join([header, *rows]) + "\n")
    _write_decoded(out / "decoded.jsonl", split, res.decoded)
    print(res.greedy.pretty())
    print(f"beam({cfg.beam_width}) token error rate {res.beam.token_error_rate:.4f}")
    print(f"fingerspelling expert letter accuracy {res.fs_expert_letter_accuracy:.4f}")
    print(f"router accuracy {res.router_accuracy:.4f}")
    return EXIT_OK


def _write_decoded(path: Path, split: tr.Split, dec: tr.Decoded) -> None:
    names = ("",) + split.world.glosses
    with path.open("w") as fh:
        for i, ep in enumerate(split.episodes):
            rec = {
                "index": i,
                "reference": [names[t] for t in ep.gloss_target],
                "greedy": [names[t] for t in dec.greedy[i]],
                "beam": [names[t] for t in dec.beam[i]],
            }
            fh.write(json.dumps(rec) + "\n")


def cmd_decode(args) -> int:
    store, meta, ecfg, fcfg, cfg, split = _load_fusion(args)
    dec = tr.decode_fusion(store, ecfg, fcfg, split.episodes, meta.get("shift", 0), cfg.beam_width)
    if args.out:
        out = _out(args, "decode")
        _write_decoded(out / "decoded.jsonl", split, dec)
    names = ("",) + split.world.glosses
    for hyp in dec.beam if cfg.beam_width > 1 else dec.greedy:
        print(" ".join(names[t] for t in hyp))
    return EXIT_OK


# ---------------------------------------------------------------- ablations & checks


def cmd_ablate(args) -> int:
    from . import ablation

    cfg = _config(args)
    out = _out(args, f"ablation_{args.kind}")
    if args.kind == "shift":
        res = ablation.ablate_shift(cfg, workers=args.workers)
    else:
        res = ablation.ablate_fusion(cfg, workers=args.workers)
    paths = res.write(out)
    for row in res.summary():
        print(
            f"{row['variant']:>16s}  letter_acc={row['letter_accuracy']:.4f}  ter={row['token_error_rate']:.4f}"
            f"  bleu4={row['bleu4']:.4f}"
        )
    if res.timing:
        for v, t in res.timing.items():
            print(f"step time {v:>16s}  {t * 1e3:.1f} ms")
    print(f"wrote {paths['summary']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    res = run_gradcheck(args.profile or "tiny", seeds=range(args.seeds))
    for line in res.lines():
        print(line)
    print(f"worst relative error {res.worst:.2e} (tolerance {res.tol:.0e}): {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration, or a bundled config name")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", help="output directory (or file, for textprep)")
    common.add_argument("--profile", choices=("tiny", "default"), help="fusion model size")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mslt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", parents=[common], help="write synthetic train/test episode datasets")
    g.add_argument("--n", type=int, help="training episodes")
    g.add_argument("--n-test", type=int, help="test episodes")
    g.add_argument("--sweep", choices=("lip_offset_frames", "noise_sigma"), help="write a matched difficulty family")
    g.set_defaults(fn=cmd_gendata)

    t = sub.add_parser("textprep", parents=[common], help="pseudo-glosses, phonemes, letters, LLM pairs, statistics")
    t.add_argument("action", choices=("gloss", "phonemize", "letters", "pairs", "stats"))
    t.add_argument("text", nargs="*", help="inline sentences, glosses or words")
    t.add_argument("--input", help="JSONL file with a 'text' field per line (default: bundled mini-corpus)")
    t.set_defaults(fn=cmd_textprep)

    tr_ = sub.add_parser("train", parents=[common], help="train the experts or the fusion stage")
    tr_.add_argument("stage", choices=("experts", "fusion"))
    tr_.add_argument("--experts", help="expert checkpoint for 'train fusion' (default: OUT/experts.ckpt)")
    tr_.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "score a fusion checkpoint"), ("decode", cmd_decode, "print decoded glosses")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--split", choices=("train", "test"), default="test")
        e.set_defaults(fn=fn)

    a = sub.add_parser("ablate", parents=[common], help="shift or fusion-variant ablation")
    a.add_argument("kind", choices=("shift", "fusion"))
    a.add_argument("--workers", type=int, default=1, help="parallel processes, one per seed")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of all differentiable ops")
    c.add_argument("--seeds", type=int, default=50)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, tr.StageError, ArchiveError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
