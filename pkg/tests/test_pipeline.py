import json

import numpy as np
import pytest

from multistream_slt import experts as ex
from multistream_slt.numerics import NumericalError, ParamStore, save_store
from multistream_slt.pipeline import training as tr
from multistream_slt.pipeline.cli import main
from multistream_slt.pipeline.config import ConfigError, bundled_config, config_from_dict, load_config

TINY = {
    "seed": 4,
    "data": {
        "n_train": 12,
        "n_test": 4,
        "generator": {"gloss_vocab_size": 8, "glosses_per_sentence": [2, 3], "noise_sigma": 0.05},
    },
    "optim": {"lr_max": 3e-3, "warmup": 2, "batch_size": 4},
    "epochs": {"router": 2, "sign": 2, "fs": 2, "lip": 2, "fusion": 2},
}


@pytest.fixture(scope="module")
def cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def trained(cfg):
    split = tr.load_split(cfg)
    experts, erec = tr.train_experts(cfg, split)
    ecfg = tr.expert_config(cfg, split.gen)
    fusion, frec = tr.train_fusion(cfg.replace(stage="fusion"), experts, ecfg, split)
    return split, experts, erec, ecfg, fusion, frec


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"optim": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage": "both"})
    with pytest.raises(ConfigError):
        config_from_dict({"shift": 2.5})
    with pytest.raises(ConfigError, match="generator"):
        config_from_dict({"data": {"generator": {"colour": "red"}}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        bundled_config("nope")


def test_bundled_configs_load():
    smoke = bundled_config("smoke")
    assert smoke.profile == "tiny" and smoke.data.generator["noise_sigma"] == 0.05
    abl = bundled_config("ablation")
    assert len(abl.ablation.seeds) == 3


def test_batches_cover_every_index_once():
    rng = np.random.default_rng(0)
    lengths = rng.integers(10, 100, size=37)
    batches = tr._batches(lengths, 8, rng)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(37))
    spans = [np.ptp(lengths[b]) for b in batches]
    assert max(spans) < np.ptp(lengths)


def test_training_is_deterministic(cfg, trained):
    split, experts, erec, *_ = trained
    again, rec2 = tr.train_experts(cfg, split)
    assert again.digest() == experts.digest()
    assert rec2.losses == erec.losses


def test_frozen_expert_contract(trained):
    _, experts, _, _, fusion, frec = trained
    for prefix in ex.PREFIXES:
        assert fusion.digest(prefix) == experts.digest(prefix)
        assert all(fusion.params[n].frozen for n in fusion.names(prefix))
    assert frec.max_clipped_norm <= 1.0 + 1e-9
    assert len(frec.losses["fusion"]) == 2


def test_checkpoint_roundtrip_and_stage_refusal(tmp_path, cfg, trained):
    split, experts, _, ecfg, fusion, _ = trained
    fcfg = tr.fusion_cfg(cfg, split.gen)
    path = tr.save_checkpoint(tmp_path / "f.ckpt", fusion, tr.fusion_meta(cfg, split.gen, ecfg, fcfg, 0))
    store, meta, ecfg2, fcfg2 = tr.load_checkpoint(path)
    assert store.digest() == fusion.digest() and ecfg2 == ecfg and fcfg2 == fcfg
    assert meta["run"]["seed"] == cfg.seed
    save_store(tmp_path / "raw.ckpt", ParamStore())
    with pytest.raises(tr.StageError):
        tr.load_checkpoint(tmp_path / "raw.ckpt")


def test_evaluate_reports_all_fields(cfg, trained):
    split, _, _, ecfg, fusion, _ = trained
    res = tr.evaluate(fusion, ecfg, tr.fusion_cfg(cfg, split.gen), split, 0, 2)
    summary = res.summary()
    assert set(summary) >= {"greedy", "beam", "router_accuracy", "fs_expert_letter_accuracy"}
    assert len(res.decoded.greedy) == len(split.episodes)
    assert 0.0 <= summary["greedy"]["letter_accuracy"] <= 1.0


# ---------------------------------------------------------------- command line


def test_cli_textprep(capsys, tmp_path):
    assert main(["textprep", "letters", "april"]) == 0
    assert capsys.readouterr().out.strip() == "A P R I L"
    assert main(["textprep", "phonemize", "HAVE DIFFERENT HERE"]) == 0
    assert capsys.readouterr().out.strip() == "hh ae v d ih f er ah n t hh iy r"
    assert main(["textprep", "gloss", "I have a few different ones here."]) == 0
    assert capsys.readouterr().out.strip() == "I HAVE FEW DIFFERENT ONE HERE"
    out = tmp_path / "pairs.jsonl"
    assert main(["textprep", "pairs", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 20
    assert main(["textprep", "stats"]) == 0
    assert "mean reduction" in capsys.readouterr().out
    assert main(["textprep", "gloss", "the"]) == 1


def test_cli_end_to_end(tmp_path, capsys):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps(TINY))
    run = tmp_path / "run"
    assert main(["gendata", "--config", str(conf), "--out", str(tmp_path / "data"), "--n", "3", "--n-test", "2"]) == 0
    assert len(list((tmp_path / "data" / "test").glob("*.bin"))) == 2
    assert main(["train", "fusion", "--config", str(conf), "--out", str(run)]) == 1
    assert main(["train", "experts", "--config", str(conf), "--out", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "experts.ckpt"), "--out", str(run)]) == 1
    assert main(["train", "fusion", "--config", str(conf), "--out", str(run)]) == 0
    rec = json.loads((run / "fusion_record.json").read_text())
    assert rec["stage"] == "fusion" and rec["checkpoint"].endswith("fusion.ckpt")
    assert main(["eval", "--checkpoint", str(run / "fusion.ckpt"), "--out", str(run)]) == 0
    rows = (run / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("decoder,letter_accuracy") and len(rows) == 3
    assert len((run / "decoded.jsonl").read_text().splitlines()) == 4
    assert main(["gendata", "--config", "smoke", "--out", str(tmp_path / "d2"), "--n", "1", "--n-test", "1"]) == 0
    capsys.readouterr()
    assert main(["decode", "--checkpoint", str(run / "fusion.ckpt")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 4
    # a different generator must not be evaluated against these experts
    other = dict(TINY, data={**TINY["data"], "generator": {**TINY["data"]["generator"], "noise_sigma": 0.2}})
    conf.write_text(json.dumps(other))
    assert main(["eval", "--checkpoint", str(run / "fusion.ckpt"), "--config", str(conf)]) == 1


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("surprise: 1\n")
    assert main(["train", "experts", "--config", str(bad)]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1
    assert main(["train", "experts", "--config", "no_such_bundle"]) == 1

    def boom(*_):
        raise NumericalError("loss is not finite")

    monkeypatch.setattr(tr, "train_experts", boom)
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps(TINY))
    assert main(["train", "experts", "--config", str(conf), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["train", "both"])
