import numpy as np
import pytest

from consistmmt.data import EOS, FeatureTable
from consistmmt.errors import DataError
from consistmmt.inference import (
    beam_search,
    corpus_bleu,
    greedy_decode,
    ids_to_words,
    incongruent_decode,
    sequence_score,
    similarity_probe,
    strip_eos,
    translate_examples,
)
from consistmmt.model import ModelConfig, MultimodalTransformer
from consistmmt.toy import make_toy


@pytest.fixture(scope="module")
def toy_model():
    toy = make_toy(12, seed=4, d_feat=8, n_words=10, syn_noise=0.3)
    cfg = ModelConfig(vocab_size=len(toy.vocab), layers=1, d_model=16, ffn_dim=24, heads=2, d_feat=8)
    return toy, MultimodalTransformer(cfg, rng=np.random.default_rng(3))


def test_bleu_identity():
    refs = ["a b c d e", "the cat sat on the mat"]
    assert corpus_bleu(refs, refs).bleu == pytest.approx(100.0)


def test_bleu_brevity_example():
    rep = corpus_bleu(["a b c d"], ["a b c d e"])
    assert rep.bleu == pytest.approx(77.88, abs=0.01)
    assert rep.brevity_penalty == pytest.approx(np.exp(-0.25))


def test_bleu_missing_fourgram_is_zero():
    rep = corpus_bleu(["a b c x d"], ["a b c d e"])
    assert rep.bleu == 0.0
    assert rep.precisions[0] == pytest.approx(4 / 5)
    assert rep.precisions[3] == 0.0
    assert "p1=80.00" in rep.format()


def test_bleu_clipping():
    rep = corpus_bleu(["the the the the"], ["the cat"])
    assert rep.precisions[0] == pytest.approx(1 / 4)


def test_bleu_errors():
    with pytest.raises(DataError):
        corpus_bleu([], [])
    with pytest.raises(DataError):
        corpus_bleu(["a"], ["a", "b"])


def test_beam_one_equals_greedy(toy_model):
    toy, model = toy_model
    for ex in toy.examples:
        feat = toy.aut[ex.image_id]
        g = greedy_decode(model, ex.src, feat, max_len=8)
        b = beam_search(model, ex.src, feat, beam=1, max_len=8)
        assert g.tokens == b.tokens
        assert g.logprob == pytest.approx(b.logprob, abs=1e-9)


def test_beam_output_ends_with_eos_and_respects_max_len(toy_model):
    toy, model = toy_model
    ex = toy.examples[0]
    hyp = beam_search(model, ex.src, toy.aut[ex.image_id], beam=5, max_len=4)
    assert hyp.tokens[-1] == EOS and len(hyp.tokens) <= 4


def test_beam_score_matches_teacher_forced_score(toy_model):
    toy, model = toy_model
    ex = toy.examples[1]
    feat = toy.aut[ex.image_id]
    hyp = beam_search(model, ex.src, feat, beam=4, max_len=6)
    assert sequence_score(model, ex.src, feat, hyp.tokens) == pytest.approx(hyp.score, abs=1e-4)


def test_beam_not_worse_than_greedy_mostly(toy_model):
    toy, model = toy_model
    wins = 0
    for ex in toy.examples:
        feat = toy.aut[ex.image_id]
        g = greedy_decode(model, ex.src, feat, max_len=8)
        b = beam_search(model, ex.src, feat, beam=5, max_len=8)
        wins += b.score >= g.score - 1e-6
    assert wins >= 0.95 * len(toy.examples)


def test_zero_features_flag_equals_zero_table(toy_model):
    toy, model = toy_model
    exs = toy.examples[:4]
    a = translate_examples(model, exs, toy.aut, beam=3, max_len=6, zero_features=True)
    b = translate_examples(model, exs, toy.aut.zeros_like(), beam=3, max_len=6)
    assert a == b


def test_similarity_probe(toy_model):
    toy, model = toy_model
    same = similarity_probe(model, toy.examples, toy.aut, toy.aut)
    assert same.mean == pytest.approx(1.0, abs=1e-6)
    assert sum(same.histogram) == len(toy.examples)
    rep = similarity_probe(model, toy.examples, toy.syn, toy.aut)
    assert -1.0 <= rep.mean <= 1.0
    zero = similarity_probe(model, toy.examples, toy.aut.zeros_like(), toy.aut)
    assert zero.undefined == len(toy.examples) and np.isnan(zero.mean)


def test_incongruent_report(toy_model):
    toy, model = toy_model
    rep = incongruent_decode(model, toy.examples[:4], toy.aut, toy.vocab, beam=2, max_len=6)
    assert rep.delta == pytest.approx(rep.congruent.bleu - rep.zeroed.bleu)


def test_strip_and_words():
    assert strip_eos([5, 6, EOS, 7]) == [5, 6]
    toy = make_toy(2, d_feat=4)
    words = toy.vocab.symbols[:2]
    assert ids_to_words(toy.vocab, toy.vocab.encode(words)) == words
    assert ids_to_words(toy.vocab, [4, EOS, 5]) == toy.vocab.symbols[:1]


def test_empty_source_rejected(toy_model):
    _, model = toy_model
    with pytest.raises(DataError):
        greedy_decode(model, [], np.zeros(8))


def test_unknown_image_id(toy_model):
    toy, model = toy_model
    with pytest.raises(DataError):
        translate_examples(model, toy.examples[:1], FeatureTable(dim=8))
