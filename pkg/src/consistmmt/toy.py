"""Synthetic parallel corpora with paired feature tables, for smoke runs and tests."""

from dataclasses import dataclass

import numpy as np

from .data import FeatureTable, Vocabulary, make_examples

SRC_WORDS = [f"s{i}" for i in range(24)]
TGT_WORDS = [f"t{i}" for i in range(24)]
AMBIGUOUS = "thing"


@dataclass
class ToyCorpus:
    src: list
    tgt: list
    image_ids: list
    syn: FeatureTable
    aut: FeatureTable
    vocab: Vocabulary

    @property
    def examples(self):
        return make_examples(self.src, self.tgt, self.image_ids, self.vocab)


def _lexical(rng, n, min_len, max_len, words):
    lines = []
    for _ in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        lines.append([words[int(i)] for i in rng.integers(0, len(words), size=k)])
    return lines


def make_toy(
    n=32,
    seed=0,
    d_feat=512,
    min_len=3,
    max_len=7,
    n_words=24,
    syn_noise=0.0,
    syn_shift=0.0,
    feature_dependent=False,
    n_prototypes=4,
):
    """Build a word-for-word toy translation task.

    Source word ``s<i>`` translates to ``t<i>``. With ``feature_dependent``
    each source sentence also contains the word ``thing``, whose translation
    ``obj<k>`` is determined only by which of ``n_prototypes`` prototype
    vectors the authentic feature was drawn around. Synthetic features are
    the authentic ones plus a fixed random offset of scale ``syn_shift``
    (shared by all images) and per-image Gaussian noise of scale ``syn_noise``.
    """
    rng = np.random.default_rng(seed)
    src_words = SRC_WORDS[:n_words]
    lex = dict(zip(src_words, TGT_WORDS[:n_words]))
    src = _lexical(rng, n, min_len, max_len, src_words)
    image_ids = [f"img{i:05d}" for i in range(n)]
    if feature_dependent:
        protos = rng.normal(size=(n_prototypes, d_feat))
        labels = rng.integers(0, n_prototypes, size=n)
        aut_vecs = protos[labels] + 0.1 * rng.normal(size=(n, d_feat))
    else:
        labels = None
        aut_vecs = rng.normal(size=(n, d_feat))
    tgt = []
    for i, words in enumerate(src):
        if feature_dependent:
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, AMBIGUOUS)
        tgt.append([f"obj{labels[i]}" if w == AMBIGUOUS else lex[w] for w in words])
    offset = syn_shift * rng.normal(size=d_feat)
    syn_vecs = aut_vecs + offset + syn_noise * rng.normal(size=aut_vecs.shape)
    aut = FeatureTable(dict(zip(image_ids, aut_vecs)))
    syn = FeatureTable(dict(zip(image_ids, syn_vecs)))
    symbols = sorted({w for line in src + tgt for w in line})
    vocab = Vocabulary(symbols)
    return ToyCorpus(
        [" ".join(s) for s in src], [" ".join(t) for t in tgt], image_ids, syn, aut, vocab
    )
