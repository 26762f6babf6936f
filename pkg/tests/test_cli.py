import json
import os

import numpy as np
import pytest

from consistmmt.cli import RunConfig, main, split_overrides
from consistmmt.errors import MMTError
from consistmmt.toy import make_toy
from consistmmt.training import load_checkpoint

CFG = """\
# tiny run
data.src = src.bpe
data.tgt = tgt.bpe
data.images = img.txt
data.syn = syn.tsv
data.aut = aut.tsv
data.vocab = vocab.txt
run.out_dir = out
model.layers = 1
model.d_model = 16
model.ffn_dim = 24
model.heads = 2
model.d_feat = 8
train.max_steps = 4
train.update_freq = 1
train.token_budget = 32
train.warmup_steps = 2
train.lr = 1e-3
train.checkpoint_every = 1
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    toy = make_toy(10, seed=0, d_feat=8, n_words=8, syn_noise=0.2)
    (tmp_path / "src.txt").write_text("\n".join(toy.src) + "\n")
    (tmp_path / "tgt.txt").write_text("\n".join(toy.tgt) + "\n")
    (tmp_path / "img.txt").write_text("\n".join(toy.image_ids) + "\n")
    toy.syn.save(str(tmp_path / "syn.tsv"))
    toy.aut.save(str(tmp_path / "aut.tsv"))
    (tmp_path / "run.cfg").write_text(CFG)
    assert main(["learn-bpe", "--input", "src.txt", "tgt.txt", "--output", "codes", "--merges", "30"]) == 0
    for side in ("src", "tgt"):
        assert main(["apply-bpe", "--bpe", "codes", "--input", f"{side}.txt", "--output", f"{side}.bpe"]) == 0
    assert main(["build-vocab", "--input", "src.bpe", "tgt.bpe", "--output", "vocab.txt"]) == 0
    return tmp_path


def decode_args(ckpt, out, *extra):
    return ["translate", "--checkpoint", ckpt, "--vocab", "vocab.txt", "--input", "src.bpe",
            "--images", "img.txt", "--features", "aut.tsv", "--output", out, *extra]


def test_learn_bpe_default_merges():
    from consistmmt.cli import build_parser

    args = build_parser().parse_args(["learn-bpe", "--input", "x", "--output", "y"])
    assert args.merges == 10000


def test_translate_defaults():
    from consistmmt.cli import build_parser

    args = build_parser().parse_args(["translate", "--vocab", "v", "--input", "i", "--images", "m", "--features", "f"])
    assert args.beam == 5 and args.average_last == 10


def test_preprocessing_is_idempotent(workdir):
    first = (workdir / "codes").read_bytes(), (workdir / "src.bpe").read_bytes()
    main(["learn-bpe", "--input", "src.txt", "tgt.txt", "--output", "codes", "--merges", "30"])
    main(["apply-bpe", "--bpe", "codes", "--input", "src.txt", "--output", "src.bpe"])
    assert ((workdir / "codes").read_bytes(), (workdir / "src.bpe").read_bytes()) == first


def test_missing_input_is_data_error(workdir):
    assert main(["learn-bpe", "--input", "nope.txt", "--output", "c"]) == 3
    assert main(["apply-bpe", "--bpe", "codes", "--input", "nope.txt"]) == 3


def test_usage_errors(workdir):
    assert main([]) == 2
    assert main(["learn-bpe"]) == 2
    assert main(["train", "--config", "run.cfg", "--train.bogus", "1"]) == 2
    assert main(["train", "--config", "run.cfg", "--weights.gamma", "-1"]) == 2
    assert main(["train", "--config", "run.cfg", "--data.syn", "missing.tsv"]) == 2
    assert main(["train", "--config", "run.cfg", "--train.lr", "fast"]) == 2
    assert not (workdir / "out").exists()


def test_unknown_key_in_file(workdir):
    (workdir / "bad.cfg").write_text(CFG + "model.colour = blue\n")
    assert main(["train", "--config", "bad.cfg"]) == 2


def test_train_translate_evaluate_probe(workdir):
    assert main(["train", "--config", "run.cfg"]) == 0
    out = workdir / "out"
    assert (out / "config.resolved").exists()
    echoed = (out / "config.resolved").read_text()
    assert "weights.lambda = 0.5" in echoed and "weights.gamma = 0.1" in echoed
    recs = [json.loads(x) for x in (out / "train.jsonl").read_text().splitlines()]
    assert len(recs) == 4 and {"l_syn", "l_aut", "l_trans", "l_kl", "l_ot", "total", "lr", "step"} <= set(recs[0])
    ckpt = str(out / "checkpoint_00000004.mmtb")
    assert main(decode_args(ckpt, "hyp.txt")) == 0
    assert (workdir / "hyp.txt.config").exists()
    lines = (workdir / "hyp.txt").read_text().splitlines()
    assert len(lines) == 10
    first = (workdir / "hyp.txt").read_bytes()
    assert main(decode_args(ckpt, "hyp.txt")) == 0
    assert (workdir / "hyp.txt").read_bytes() == first
    assert main(["evaluate", "--ref", "tgt.txt", "--hyp", "hyp.txt", "--output", "bleu.txt"]) == 0
    assert "bleu=" in (workdir / "bleu.txt").read_text()
    assert main(["probe-similarity", "--checkpoint", ckpt, "--images", "img.txt", "--syn", "syn.tsv",
                 "--aut", "aut.tsv", "--output", "sim.txt"]) == 0
    assert len((workdir / "sim.txt.jsonl").read_text().splitlines()) == 10


def test_zero_features_equals_zero_table(workdir):
    assert main(["train", "--config", "run.cfg"]) == 0
    ckpt = str(workdir / "out" / "checkpoint_00000004.mmtb")
    lines = (workdir / "aut.tsv").read_text().splitlines()
    (workdir / "zero.tsv").write_text("".join(l.split("\t")[0] + "\t" + " ".join(["0"] * 8) + "\n" for l in lines))
    assert main(decode_args(ckpt, "a.txt", "--zero-features", "--beam", "2")) == 0
    args = decode_args(ckpt, "b.txt", "--beam", "2")
    args[args.index("aut.tsv")] = "zero.tsv"
    assert main(args) == 0
    assert (workdir / "a.txt").read_text() == (workdir / "b.txt").read_text()


def test_average_last_and_average_command(workdir):
    assert main(["train", "--config", "run.cfg"]) == 0
    assert main(["average-checkpoints", "--checkpoint-dir", "out", "--average-last", "3", "--output", "avg.mmtb"]) == 0
    ck = load_checkpoint(str(workdir / "avg.mmtb"))
    assert ck.optimizer is None
    args = decode_args(ckpt="x", out="h.txt")
    i = args.index("--checkpoint")
    args[i : i + 2] = ["--checkpoint-dir", "out", "--average-last", "3"]
    assert main(args) == 0


def test_checkpoint_mismatch_exit_code(workdir):
    assert main(["train", "--config", "run.cfg"]) == 0
    ckpt = str(workdir / "out" / "checkpoint_00000004.mmtb")
    (workdir / "v2.txt").write_text("a\nb\n")
    args = decode_args(ckpt, "h.txt")
    args[args.index("vocab.txt")] = "v2.txt"
    assert main(args) == 4
    (workdir / "junk.mmtb").write_bytes(b"MMTB\x01")
    assert main(decode_args("junk.mmtb", "h.txt")) == 4


def test_zero_weights_give_plain_translation_objective(workdir):
    assert main(["train", "--config", "run.cfg", "--weights.gamma", "0", "--weights.lambda", "0"]) == 0
    for line in (workdir / "out" / "train.jsonl").read_text().splitlines():
        r = json.loads(line)
        assert r["total"] == pytest.approx(r["l_trans"], rel=1e-12)


def test_cli_resume_matches_uninterrupted(workdir):
    assert main(["train", "--config", "run.cfg", "--run.out_dir", "full"]) == 0
    assert main(["train", "--config", "run.cfg", "--run.out_dir", "half", "--train.max_steps", "2"]) == 0
    assert main(["train", "--config", "run.cfg", "--run.out_dir", "half",
                 "--resume", "half/checkpoint_00000002.mmtb"]) == 0
    a = load_checkpoint("full/checkpoint_00000004.mmtb")
    b = load_checkpoint("half/checkpoint_00000004.mmtb")
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_run_config_overrides(tmp_path):
    cfg = RunConfig.from_sources(None, split_overrides(["--train.lr", "0.01", "--model.layers=2"]))
    assert cfg.values["train.lr"] == 0.01 and cfg.values["model.layers"] == 2
    with pytest.raises(MMTError):
        split_overrides(["positional"])
