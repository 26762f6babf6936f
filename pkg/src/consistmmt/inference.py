"""Decoding, BLEU scoring and analysis probes."""

import collections
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS, detokenize
from .errors import DataError

# --------------------------------------------------------------------------
# decoding


@dataclass
class BeamHypothesis:
    tokens: list
    logprob: float = 0.0
    finished: bool = False

    @property
    def score(self):
        """Length-normalized log-probability (length counts generated tokens incl. eos)."""
        return self.logprob / max(len(self.tokens), 1)


def _prepare(model, src, feat):
    src = np.asarray(src, dtype=np.int64).reshape(-1)
    if src.size == 0:
        raise DataError("cannot decode an empty source sentence")
    feat = np.asarray(feat, dtype=T.get_default_dtype()).reshape(1, -1)
    visual = model.project_features(feat)
    memory, memory_mask = model.encode(src[None], np.ones((1, src.size), bool), visual)
    return memory, memory_mask


def _next_logprobs(model, prefixes, memory, memory_mask):
    k = len(prefixes)
    ids = np.asarray(prefixes, dtype=np.int64)
    mem = T.Tensor(np.repeat(memory.data, k, axis=0), dtype=memory.dtype)
    logits = model.decode(ids, mem, np.repeat(memory_mask, k, axis=0))
    return T.log_softmax_array(logits.data[:, -1, :])


def default_max_len(src_len):
    return int(src_len * 1.5) + 10


def greedy_decode(model, src, feat, max_len=None):
    """Argmax decoding; returns a BeamHypothesis whose tokens end with eos."""
    with T.no_grad():
        memory, mmask = _prepare(model, src, feat)
        max_len = max_len or default_max_len(len(src))
        max_len = min(max_len, model.config.max_positions - 1)
        tokens, total = [], 0.0
        while True:
            lp = _next_logprobs(model, [[BOS] + tokens], memory, mmask)[0]
            tok = EOS if len(tokens) + 1 >= max_len else int(np.argmax(lp))
            tokens.append(tok)
            total += float(lp[tok])
            if tok == EOS:
                return BeamHypothesis(tokens, total, True)


def beam_search(model, src, feat, beam=5, max_len=None):
    """Length-normalized beam search for one sentence.

    At each step the ``beam`` best extensions (by cumulative log-prob, ties to
    the lower token id) are kept; those ending in eos are frozen as finished
    and shrink the live set. Search stops when nothing is live, when no live
    hypothesis can still beat the best finished one, or at ``max_len``
    (eos is then forced).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    with T.no_grad():
        memory, mmask = _prepare(model, src, feat)
        max_len = max_len or default_max_len(len(src))
        max_len = min(max_len, model.config.max_positions - 1)
        live = [BeamHypothesis([], 0.0)]
        finished = []
        while live:
            lp = _next_logprobs(model, [[BOS] + h.tokens for h in live], memory, mmask)
            if len(live[0].tokens) + 1 >= max_len:
                for h, row in zip(live, lp):
                    finished.append(BeamHypothesis(h.tokens + [EOS], h.logprob + float(row[EOS]), True))
                break
            width = beam - len(finished) if finished else beam
            width = max(width, 1)
            cands = []
            for hi, (h, row) in enumerate(zip(live, lp)):
                top = np.argsort(-row, kind="stable")[:width]
                for tok in top:
                    cands.append((h.logprob + float(row[tok]), int(tok), hi))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_live = []
            for score, tok, hi in cands[:width]:
                hyp = BeamHypothesis(live[hi].tokens + [tok], score, tok == EOS)
                (finished if hyp.finished else new_live).append(hyp)
            live = new_live
            if len(finished) >= beam:
                break
            if finished and live:
                best_done = max(h.score for h in finished)
                # cumulative log-prob only decreases, so L / max_len bounds any extension
                if best_done >= max(h.logprob / max_len for h in live):
                    break
        return max(finished, key=lambda h: (h.score, [-t for t in h.tokens]))


def sequence_score(model, src, feat, tokens):
    """Teacher-forced length-normalized log-prob of ``tokens`` (ending in eos)."""
    with T.no_grad():
        memory, mmask = _prepare(model, src, feat)
        prefix = np.asarray([[BOS] + list(tokens[:-1])], dtype=np.int64)
        logits = model.decode(prefix, memory, mmask)
        lp = T.log_softmax_array(logits.data[0])
        total = float(lp[np.arange(len(tokens)), tokens].sum())
    return total / len(tokens)


def strip_eos(tokens):
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


def translate_examples(model, examples, table, beam=5, max_len=None, zero_features=False):
    """Decode every example; returns token-id lists without eos, in input order."""
    outputs = []
    for ex in examples:
        feat = table[ex.image_id]
        if zero_features:
            feat = np.zeros_like(feat)
        if beam == 1:
            hyp = greedy_decode(model, ex.src, feat, max_len)
        else:
            hyp = beam_search(model, ex.src, feat, beam, max_len)
        outputs.append(strip_eos(hyp.tokens))
    return outputs


def ids_to_words(vocab, ids):
    """Token ids -> detokenized whitespace words (the BLEU tokenization)."""
    return detokenize(vocab.decode(ids)).split()


# --------------------------------------------------------------------------
# BLEU


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def format(self):
        p = " ".join(f"p{i + 1}={v * 100:.2f}" for i, v in enumerate(self.precisions))
        return (
            f"bleu={self.bleu:.2f} {p} bp={self.brevity_penalty:.4f} "
            f"cand_len={self.candidate_length} ref_len={self.reference_length}"
        )

    def as_dict(self):
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "candidate_length": self.candidate_length,
            "reference_length": self.reference_length,
        }


def _ngrams(tokens, n):
    return collections.Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tok(s):
    return s.split() if isinstance(s, str) else list(s)


def corpus_bleu(candidates, references, max_n=4):
    """Unsmoothed corpus BLEU-4 (0-100) with clipped counts and brevity penalty."""
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise DataError("BLEU of an empty corpus is undefined")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = _tok(cand), _tok(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c_counts = _ngrams(cand, n)
            r_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if c_len == 0:
        bp = 0.0
    elif c_len < r_len:
        bp = math.exp(1.0 - r_len / c_len)
    else:
        bp = 1.0
    if min(precisions) > 0:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    else:
        bleu = 0.0
    return BleuReport(bleu, precisions, bp, c_len, r_len, matches, totals)


# --------------------------------------------------------------------------
# analysis probes


@dataclass
class SimilarityReport:
    values: list
    mean: float
    undefined: int
    histogram: list
    bin_edges: list

    def format(self):
        return f"mean_cosine={self.mean:.6f} n={len(self.values)} undefined={self.undefined}"


def _image_ids(corpus):
    return [getattr(c, "image_id", c) for c in corpus]


def visual_representations(model, feats):
    with T.no_grad():
        return model.project_features(np.asarray(feats, dtype=T.get_default_dtype())).data.astype(np.float64)


def similarity_probe(model, corpus, syn, aut, bins=20):
    """Cosine similarity of projected synthetic vs authentic features per example (eval mode)."""
    ids = _image_ids(corpus)
    hs = visual_representations(model, syn.stack(ids))
    ha = visual_representations(model, aut.stack(ids))
    ns = np.linalg.norm(hs, axis=1)
    na = np.linalg.norm(ha, axis=1)
    ok = (ns > 0) & (na > 0)
    cos = np.full(len(ids), np.nan)
    cos[ok] = np.clip((hs[ok] * ha[ok]).sum(axis=1) / (ns[ok] * na[ok]), -1.0, 1.0)
    values = [float(v) for v in cos]
    defined = cos[ok]
    hist, edges = np.histogram(defined, bins=bins, range=(-1.0, 1.0))
    mean = float(defined.mean()) if defined.size else float("nan")
    return SimilarityReport(values, mean, int((~ok).sum()), hist.tolist(), edges.tolist())


@dataclass
class IncongruentReport:
    congruent: BleuReport
    zeroed: BleuReport
    delta: float

    def format(self):
        return (
            f"congruent_bleu={self.congruent.bleu:.2f} zeroed_bleu={self.zeroed.bleu:.2f} "
            f"delta_bleu={self.delta:.2f}"
        )


def incongruent_decode(model, examples, table, vocab, beam=5, max_len=None, references=None):
    """Decode with real features and with all-zero features; report the BLEU drop.

    Zeroing happens on the raw feature, before the shared projector.
    """
    if references is None:
        references = [ids_to_words(vocab, ex.tgt) for ex in examples]
    real = translate_examples(model, examples, table, beam, max_len)
    zero = translate_examples(model, examples, table, beam, max_len, zero_features=True)
    rep_real = corpus_bleu([ids_to_words(vocab, o) for o in real], references)
    rep_zero = corpus_bleu([ids_to_words(vocab, o) for o in zero], references)
    return IncongruentReport(rep_real, rep_zero, rep_real.bleu - rep_zero.bleu)


def write_report(path, report, per_example=None):
    """Write a key=value report; with ``per_example``, also a JSON-lines sibling."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.format().replace(" ", "\n") + "\n")
    if per_example is not None:
        with open(path + ".jsonl", "w", encoding="utf-8") as fh:
            for i, rec in enumerate(per_example):
                fh.write(json.dumps({"index": i, **rec}) + "\n")
