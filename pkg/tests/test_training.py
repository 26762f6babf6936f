import json
import os
import struct

import numpy as np
import pytest

from consistmmt import tensor as T
from consistmmt.data import collate
from consistmmt.errors import FormatError, NumericsError
from consistmmt.losses import LossWeights, compute_losses
from consistmmt.model import ModelConfig, MultimodalTransformer
from consistmmt.toy import make_toy
from consistmmt.training import (
    Adam,
    Trainer,
    TrainerConfig,
    average_checkpoints,
    inverse_sqrt_lr,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)

TINY = dict(layers=1, d_model=16, ffn_dim=24, heads=2, d_feat=12, dropout=0.1)


def tiny_setup(n=12, **overrides):
    toy = make_toy(n, seed=0, d_feat=12, n_words=10, syn_noise=0.2)
    mcfg = ModelConfig(vocab_size=len(toy.vocab), **TINY)
    kw = dict(lr=1e-3, warmup_steps=4, update_freq=2, token_budget=24, max_steps=6)
    kw.update(overrides)
    return toy, mcfg, TrainerConfig(**kw)


def params_of(trainer):
    return {k: p.data.copy() for k, p in trainer.model.params.items()}


def test_schedule():
    assert inverse_sqrt_lr(1, 5e-4, 2000) == pytest.approx(5e-4 / 2000)
    assert inverse_sqrt_lr(2000, 5e-4, 2000) == 5e-4
    assert inverse_sqrt_lr(8000, 5e-4, 2000) == pytest.approx(2.5e-4)
    assert inverse_sqrt_lr(5, 1.0, 0) == 1.0


def test_adam_by_hand():
    with T.default_dtype(np.float64):
        p = T.parameter(np.array([1.0, -2.0]))
    opt = Adam({"w": p}, lr=0.1, betas=(0.9, 0.98), eps=1e-9, warmup=0)
    g1 = np.array([0.5, -1.0])
    opt.step({"w": g1})
    m = 0.1 * g1
    v = 0.02 * g1**2
    want = np.array([1.0, -2.0]) - 0.1 * (m / 0.1) / (np.sqrt(v / 0.02) + 1e-9)
    np.testing.assert_allclose(p.data, want, rtol=1e-12)
    g2 = np.array([0.25, 0.5])
    opt.step({"w": g2})
    m = 0.9 * m + 0.1 * g2
    v = 0.98 * v + 0.02 * g2**2
    want = want - 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.98**2)) + 1e-9)
    np.testing.assert_allclose(p.data, want, rtol=1e-12)


def test_adam_decoupled_weight_decay():
    p = T.parameter(np.array([2.0]))
    opt = Adam({"w": p}, lr=0.1, weight_decay=0.5)
    opt.step({"w": np.array([0.0])})
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_accumulation_is_mean_of_micro_batch_gradients():
    toy, mcfg, _ = tiny_setup()
    mcfg = ModelConfig(vocab_size=mcfg.vocab_size, **{**TINY, "dropout": 0.0})
    exs = toy.examples
    b1 = collate(exs, [0, 1, 2], toy.syn, toy.aut)
    b2 = collate(exs, [3, 4], toy.syn, toy.aut)
    w = LossWeights(0.5, 0.1)
    with T.default_dtype(np.float64):
        model = MultimodalTransformer(mcfg, rng=np.random.default_rng(0))
        grads = []
        for b in (b1, b2):
            b.syn, b.aut = b.syn.astype(np.float64), b.aut.astype(np.float64)
            model.zero_grad()
            T.backward(compute_losses(model, b, w)[0])
            grads.append({k: p.grad.copy() for k, p in model.params.items()})
        model.zero_grad()
        cfg = TrainerConfig(lr=1e-2, warmup_steps=0, update_freq=2, beta1=0.0, beta2=0.0, adam_eps=0.0)
        # with beta1=beta2=0 and eps=0 the Adam update is lr * sign(g), so compare via a plain SGD probe
        tr = Trainer(model, cfg, exs, toy.syn, toy.aut)
        seen = {}

        def capture(g):
            seen.update(g)
            return 0.0

        tr.optimizer.step = capture
        tr.train_step([b1, b2])
    for k in grads[0]:
        np.testing.assert_allclose(seen[k], 0.5 * (grads[0][k] + grads[1][k]), rtol=1e-12, atol=1e-15)


def test_logs_written(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=3)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut, str(tmp_path))
    tr.fit()
    lines = (tmp_path / "train.log").read_text().splitlines()
    steps = [line for line in lines if line.startswith("step=")]
    assert len(steps) == 3
    for key in ("l_syn", "l_aut", "l_trans", "l_kl", "l_ot", "total", "lr"):
        assert f"{key}=" in steps[0]
    recs = [json.loads(x) for x in (tmp_path / "train.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3]


def test_non_finite_step_is_skipped_without_update():
    toy, mcfg, cfg = tiny_setup(max_steps=2)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    tr.model["proj.fc1.w"].data[0, 0] = np.nan
    before = params_of(tr)
    with pytest.raises(NumericsError):
        tr.train_step(tr.next_micro_batches(1))
    after = params_of(tr)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])
    assert tr.step == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_counts_skipped_steps():
    toy, mcfg, cfg = tiny_setup(max_steps=2)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    tr.model["proj.fc1.w"].data[:] = np.inf
    tr.fit(max_epochs=1, max_steps=0)
    assert tr.skipped > 0 and tr.step == 0


def test_resume_is_bitwise(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=6)
    full = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    full.fit()
    part = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    part.fit(max_steps=3)
    path = part.save(str(tmp_path / "mid.mmtb"))
    resumed = Trainer.resume(path, toy.examples, toy.syn, toy.aut)
    resumed.fit(max_steps=6)
    a, b = params_of(full), params_of(resumed)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_checkpoint_roundtrip(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=2)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    tr.fit()
    path = str(tmp_path / "c.mmtb")
    tr.save(path)
    ck = load_checkpoint(path, expected_config=mcfg)
    assert ck.step == 2
    for k, p in tr.model.params.items():
        assert np.array_equal(ck.params[k], p.data)
        assert np.array_equal(ck.optimizer["m"][k], tr.optimizer.m[k])
    with open(path, "rb") as fh:
        head = fh.read(12)
    assert head[:4] == b"MMTB" and struct.unpack("<II", head[4:])[0] == 1


def test_truncated_and_corrupt_checkpoints(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=1)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    path = str(tmp_path / "c.mmtb")
    tr.save(path)
    blob = open(path, "rb").read()
    for i, bad in enumerate([blob[:-5], blob[: len(blob) // 2], blob + b"x", b"XXXX" + blob[4:],
                             blob[:4] + struct.pack("<I", 2) + blob[8:]]):
        p = tmp_path / f"bad{i}.mmtb"
        p.write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(str(p))


def test_config_mismatch(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=1)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    path = tr.save(str(tmp_path / "c.mmtb"))
    other = ModelConfig(vocab_size=mcfg.vocab_size, **{**TINY, "d_model": 32})
    with pytest.raises(FormatError):
        load_checkpoint(path, expected_config=other)


def test_rotation_keeps_last(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=5, checkpoint_every=1, keep_last=2)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut, str(tmp_path))
    tr.fit()
    names = [os.path.basename(p) for p in list_checkpoints(str(tmp_path))]
    assert names == ["checkpoint_00000004.mmtb", "checkpoint_00000005.mmtb"]


def test_average_identical_and_distinct(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=2)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    tr.fit(max_steps=1)
    p1 = tr.save(str(tmp_path / "a.mmtb"))
    tr.fit(max_steps=2)
    p2 = tr.save(str(tmp_path / "b.mmtb"))
    same = average_checkpoints([p1] * 10)
    ref = load_checkpoint(p1)
    for k in ref.params:
        assert np.array_equal(same.params[k], ref.params[k])
    mix = average_checkpoints([p1, p2])
    other = load_checkpoint(p2)
    k = "embed"
    want = ((ref.params[k].astype(np.float64) + other.params[k]) / 2).astype(np.float32)
    assert np.array_equal(mix.params[k], want)
    assert mix.optimizer is None and mix.step == 2
    out = str(tmp_path / "avg.mmtb")
    save_checkpoint(mix, out)
    assert load_checkpoint(out).optimizer is None


def test_average_rejects_mismatched(tmp_path):
    toy, mcfg, cfg = tiny_setup(max_steps=1)
    a = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut).save(str(tmp_path / "a.mmtb"))
    m2 = ModelConfig(vocab_size=mcfg.vocab_size, **{**TINY, "ffn_dim": 8})
    b = Trainer.create(m2, cfg, toy.examples, toy.syn, toy.aut).save(str(tmp_path / "b.mmtb"))
    with pytest.raises(FormatError):
        average_checkpoints([a, b])


def test_training_reduces_loss():
    toy, mcfg, cfg = tiny_setup(max_steps=40, update_freq=1, warmup_steps=5, lr=3e-3)
    tr = Trainer.create(mcfg, cfg, toy.examples, toy.syn, toy.aut)
    hist = tr.fit()
    first = np.mean([b.l_trans for _, _, b in hist[:5]])
    last = np.mean([b.l_trans for _, _, b in hist[-5:]])
    assert last < first - 0.5
