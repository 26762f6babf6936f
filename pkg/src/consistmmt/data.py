"""Corpus preprocessing, feature tables and token-budget batching."""

import collections
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

EOW = "</w>"
CONT = "@@"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
_MARKER_RANK = 0x110000


# --------------------------------------------------------------------------
# byte-pair encoding


def _symbol_key(sym):
    if sym.endswith(EOW):
        return tuple(map(ord, sym[: -len(EOW)])) + (_MARKER_RANK,)
    return tuple(map(ord, sym))


def _pair_key(pair):
    return (_symbol_key(pair[0]), _symbol_key(pair[1]))


@dataclass
class BpeModel:
    merges: list = field(default_factory=list)
    n_merges: int = 0

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if len(set(self.merges)) != len(self.merges):
            raise FormatError("duplicate merge pair in BPE model")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    def apply(self, word):
        return apply_bpe(self, word)

    def segment_line(self, line):
        """Whitespace-tokenize ``line`` and return ``@@``-continued subword tokens."""
        out = []
        for word in line.split():
            pieces = self.apply(word)
            out.extend(p + CONT for p in pieces[:-1])
            out.append(pieces[-1])
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path):
        merges = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != 2 or not all(parts):
                    raise FormatError(f"{path}:{lineno}: expected '<left> <right>'")
                merges.append(tuple(parts))
        return cls(merges, n_merges=len(merges))


def _word_symbols(word):
    return tuple(word) + (EOW,)


def learn_bpe(words, n_merges):
    """Learn up to ``n_merges`` merges by greedy most-frequent-pair counting.

    ``words`` is any iterable of whitespace-free tokens. Learning stops early
    once no pair occurs at least twice. Ties go to the lexicographically
    smallest pair, with the end-of-word marker ordered after every character.
    """
    counts = collections.Counter(w for w in words if w)
    if not counts:
        raise DataError("cannot learn BPE from an empty corpus")
    vocab = [list(_word_symbols(w)) for w in counts]
    freqs = [counts[w] for w in counts]

    stats = collections.Counter()
    where = collections.defaultdict(set)
    for wi, syms in enumerate(vocab):
        for pair in zip(syms, syms[1:]):
            stats[pair] += freqs[wi]
            where[pair].add(wi)

    merges = []
    while len(merges) < n_merges and stats:
        best_freq = max(stats.values())
        if best_freq < 2:
            break
        best = min((p for p, f in stats.items() if f == best_freq), key=_pair_key)
        merges.append(best)
        merged = best[0] + best[1]
        for wi in sorted(where.pop(best, ())):
            syms = vocab[wi]
            f = freqs[wi]
            for pair in zip(syms, syms[1:]):
                stats[pair] -= f
                if stats[pair] <= 0:
                    del stats[pair]
            new = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == best[0] and syms[i + 1] == best[1]:
                    new.append(merged)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            vocab[wi] = new
            for pair in zip(new, new[1:]):
                stats[pair] += f
                where[pair].add(wi)
        stats.pop(best, None)
    return BpeModel(merges, n_merges=n_merges)


def apply_bpe(model, word):
    """Segment one word; returns subword strings without markers."""
    if not word:
        raise DataError("cannot segment an empty word")
    cached = model._cache.get(word)
    if cached is not None:
        return list(cached)
    syms = list(_word_symbols(word))
    ranks = model._ranks
    while len(syms) > 1:
        pairs = [(ranks.get(p), i) for i, p in enumerate(zip(syms, syms[1:]))]
        ranked = [r for r, _ in pairs if r is not None]
        if not ranked:
            break
        best = model.merges[min(ranked)]
        new = []
        i = 0
        while i < len(syms):
            if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                new.append(syms[i] + syms[i + 1])
                i += 2
            else:
                new.append(syms[i])
                i += 1
        syms = new
    if syms[-1] == EOW:
        syms = syms[:-1]
    else:
        syms[-1] = syms[-1][: -len(EOW)]
    model._cache[word] = tuple(syms)
    return syms


def detokenize(tokens):
    """Undo ``@@`` continuation: ``['aa@@', 'a', 'b'] -> 'aaa b'``."""
    text = " ".join(tokens)
    return text.replace(CONT + " ", "").removesuffix(CONT)


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Shared source/target symbol table; ids 0-3 are pad, bos, eos, unk."""

    def __init__(self, symbols=()):
        self.itos = list(RESERVED)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        for s in symbols:
            self.add(s)

    def add(self, sym):
        if sym not in self.stoi:
            self.stoi[sym] = len(self.itos)
            self.itos.append(sym)
        return self.stoi[sym]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, sym):
        return sym in self.stoi

    @property
    def symbols(self):
        return self.itos[len(RESERVED):]

    def encode(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids, strip=True):
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return out

    @classmethod
    def build(cls, token_lines):
        counts = collections.Counter(t for line in token_lines for t in line)
        for r in RESERVED:
            counts.pop(r, None)
        ordered = sorted(counts, key=lambda s: (-counts[s], s))
        return cls(ordered)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.symbols:
                fh.write(s + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            symbols = [line.rstrip("\n") for line in fh]
        if len(set(symbols)) != len(symbols):
            raise FormatError(f"{path}: duplicate vocabulary symbol")
        return cls(symbols)


# --------------------------------------------------------------------------
# visual features


class FeatureTable:
    """image_id -> feature vector, all of one dimension."""

    def __init__(self, vectors=None, dim=None):
        self.vectors = {}
        self.dim = dim
        self.duplicates = 0
        for key, vec in (vectors or {}).items():
            self[key] = vec

    def __setitem__(self, key, vec):
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if self.dim is None:
            self.dim = vec.shape[0]
        elif vec.shape[0] != self.dim:
            raise FormatError(f"feature {key!r} has dimension {vec.shape[0]}, expected {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"feature {key!r} has non-finite values")
        self.vectors[key] = vec

    def __getitem__(self, key):
        try:
            return self.vectors[key]
        except KeyError:
            raise DataError(f"unresolvable image_id {key!r}") from None

    def __contains__(self, key):
        return key in self.vectors

    def __len__(self):
        return len(self.vectors)

    def stack(self, ids):
        return np.stack([self[i] for i in ids]) if ids else np.zeros((0, self.dim or 0), np.float32)

    def zeros_like(self):
        return FeatureTable({k: np.zeros(self.dim, np.float32) for k in self.vectors}, dim=self.dim)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key, vec in self.vectors.items():
                fh.write(key + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def load_features(path):
    """Parse a ``<image_id>\\t<v1> ... <vd>`` file; duplicates keep the last record."""
    table = FeatureTable()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, sep, values = line.partition("\t")
            if not sep or not key:
                raise FormatError(f"{path}:{lineno}: expected '<image_id><TAB><values>'")
            try:
                vec = np.array(values.split(), dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: unparseable number") from None
            if vec.size == 0:
                raise FormatError(f"{path}:{lineno}: empty feature vector")
            if key in table:
                table.duplicates += 1
            try:
                table[key] = vec
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if table.duplicates:
        log.warning("%s: %d duplicate image ids (last record kept)", path, table.duplicates)
    return table


def read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


# --------------------------------------------------------------------------
# examples and batches


@dataclass
class ParallelExample:
    src: list
    tgt: list
    image_id: str

    def __post_init__(self):
        if not self.src or len(self.tgt) < 2:
            raise DataError(f"empty sequence for image {self.image_id!r}")


def make_examples(src_lines, tgt_lines, image_ids, vocab):
    """Turn aligned token lists into examples.

    Source gets a trailing eos; target is framed as bos ... eos.
    """
    if not (len(src_lines) == len(tgt_lines) == len(image_ids)):
        raise DataError(
            f"misaligned corpus: {len(src_lines)} src, {len(tgt_lines)} tgt, {len(image_ids)} images"
        )
    out = []
    for src, tgt, img in zip(src_lines, tgt_lines, image_ids):
        if isinstance(src, str):
            src = src.split()
        if isinstance(tgt, str):
            tgt = tgt.split()
        if not src or not tgt:
            raise DataError(f"empty sentence paired with image {img!r}")
        out.append(ParallelExample(vocab.encode(src) + [EOS], [BOS] + vocab.encode(tgt) + [EOS], img))
    return out


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray
    syn: np.ndarray
    aut: np.ndarray
    indices: list

    @property
    def tgt_in(self):
        return self.tgt[:, :-1]

    @property
    def tgt_out(self):
        return self.tgt[:, 1:]

    @property
    def out_mask(self):
        return self.tgt_mask[:, 1:]

    @property
    def size(self):
        return self.src.shape[0]

    @property
    def n_tokens(self):
        return int(self.out_mask.sum())


def pad_sequences(seqs, pad_to=None):
    width = max(len(s) for s in seqs) if pad_to is None else pad_to
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def collate(examples, indices, syn, aut, extra_pad=0):
    chosen = [examples[i] for i in indices]
    src_w = max(len(e.src) for e in chosen) + extra_pad
    tgt_w = max(len(e.tgt) for e in chosen) + extra_pad
    src, src_mask = pad_sequences([e.src for e in chosen], src_w)
    tgt, tgt_mask = pad_sequences([e.tgt for e in chosen], tgt_w)
    ids = [e.image_id for e in chosen]
    return Batch(src, src_mask, tgt, tgt_mask, syn.stack(ids), aut.stack(ids), list(indices))


def example_tokens(ex):
    return max(len(ex.src), len(ex.tgt))


def pack_indices(examples, token_budget):
    """Length-sorted greedy packing; returns lists of example indices."""
    order = sorted(range(len(examples)), key=lambda i: (example_tokens(examples[i]), i))
    groups, cur, used = [], [], 0
    for i in order:
        n = example_tokens(examples[i])
        if cur and used + n > token_budget:
            groups.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        groups.append(cur)
    return groups


def make_batches(examples, token_budget, rng, syn, aut):
    """Pack examples into batches and shuffle the batch order with ``rng``.

    ``rng`` is a numpy Generator, or an int seed.
    """
    for ex in examples:
        for table in (syn, aut):
            if ex.image_id not in table:
                raise DataError(f"unresolvable image_id {ex.image_id!r}")
    groups = pack_indices(examples, token_budget)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    perm = rng.permutation(len(groups))
    return [collate(examples, groups[k], syn, aut) for k in perm]
