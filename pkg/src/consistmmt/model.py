"""Multimodal Transformer with a shared visual projector.

The encoder input is the embedded source text with one extra visual
position appended: ``[embed(x) + pos ; H W_a]`` where ``H`` is the projected
image feature. In every encoder layer all ``N + 1`` positions act as
queries while only the ``N`` text positions serve as keys and values, so the
visual token reads from the text but is never attended to by it. The decoder
is a standard causal Transformer decoder that cross-attends to all ``N + 1``
encoder outputs.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import PAD
from .errors import MaskError, ShapeError


@dataclass
class ModelConfig:
    vocab_size: int = 10000
    layers: int = 4
    d_model: int = 128
    ffn_dim: int = 256
    heads: int = 4
    dropout: float = 0.3
    d_feat: int = 512
    max_positions: int = 256
    pad_id: int = PAD

    def __post_init__(self):
        for name in ("vocab_size", "layers", "d_model", "ffn_dim", "heads", "d_feat", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return table


class Forward:
    """Per-call dropout settings: which RNG stream and whether training."""

    def __init__(self, rng=None, train=False):
        self.rng = rng
        self.train = bool(train and rng is not None)
        self.attn_log = None


EVAL = Forward()


class MultimodalTransformer:
    def __init__(self, config, rng=None):
        self.config = config
        self.params = {}
        if rng is not None:
            self.init_params(rng)
        self._pos = sinusoidal_positions(config.max_positions, config.d_model)

    # ---------------------------------------------------------------- params

    def init_params(self, rng):
        """Uniform fan-in linear init with zero biases; normal(0, d^-1/2) embeddings."""
        c = self.config
        d, f = c.d_model, c.ffn_dim
        p = {}

        def lin(name, n_in, n_out, bias=True):
            bound = 1.0 / math.sqrt(n_in)
            p[name + ".w"] = rng.uniform(-bound, bound, size=(n_in, n_out))
            if bias:
                p[name + ".b"] = np.zeros(n_out)

        def norm(name):
            p[name + ".g"] = np.ones(d)
            p[name + ".b"] = np.zeros(d)

        def attn(name):
            for proj in ("q", "k", "v", "o"):
                lin(f"{name}.{proj}", d, d)

        p["embed"] = rng.normal(0.0, d ** -0.5, size=(c.vocab_size, d))
        lin("proj.fc1", c.d_feat, f)
        lin("proj.fc2", f, d)
        lin("enc.visual", d, d, bias=False)
        for i in range(c.layers):
            attn(f"enc.{i}.attn")
            norm(f"enc.{i}.ln1")
            lin(f"enc.{i}.ffn.fc1", d, f)
            lin(f"enc.{i}.ffn.fc2", f, d)
            norm(f"enc.{i}.ln2")
        norm("enc.ln")
        for i in range(c.layers):
            attn(f"dec.{i}.self")
            norm(f"dec.{i}.ln1")
            attn(f"dec.{i}.cross")
            norm(f"dec.{i}.ln2")
            lin(f"dec.{i}.ffn.fc1", d, f)
            lin(f"dec.{i}.ffn.fc2", f, d)
            norm(f"dec.{i}.ln3")
        norm("dec.ln")
        self.params = {k: T.parameter(v, name=k) for k, v in p.items()}

    def load_arrays(self, arrays):
        expected = MultimodalTransformer(self.config, rng=np.random.default_rng(0)).param_shapes()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for k, v in arrays.items():
            if tuple(v.shape) != expected[k]:
                raise ShapeError(f"{k}: shape {tuple(v.shape)} != {expected[k]}")
        self.params = {k: T.parameter(np.array(arrays[k]), name=k) for k in expected}

    def param_shapes(self):
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def __getitem__(self, name):
        return self.params[name]

    # ---------------------------------------------------------------- blocks

    def _linear(self, x, name):
        return T.linear(x, self.params[name + ".w"], self.params.get(name + ".b"))

    def _norm(self, x, name):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _drop(self, x, fwd):
        return T.dropout(x, self.config.dropout, fwd.rng, fwd.train)

    def _ffn(self, x, name, fwd):
        h = T.relu(self._linear(x, name + ".fc1"))
        return self._linear(self._drop(h, fwd), name + ".fc2")

    def _split_heads(self, x):
        b, n, d = x.shape
        h = self.config.heads
        return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        b, h, n, dk = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)

    def attention(self, query, kv, key_mask, name, fwd, causal=False):
        """Multi-head attention; ``key_mask`` is [B, Nk] (True = attendable)."""
        dk = self.config.d_model // self.config.heads
        q = self._split_heads(self._linear(query, name + ".q"))
        k = self._split_heads(self._linear(kv, name + ".k"))
        v = self._split_heads(self._linear(kv, name + ".v"))
        scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dk))
        mask = key_mask[:, None, None, :]
        if causal:
            nq, nk = query.shape[1], kv.shape[1]
            mask = mask & np.tril(np.ones((nq, nk), dtype=bool))[None, None]
        weights = T.masked_softmax(scores, mask)
        if fwd.attn_log is not None:
            fwd.attn_log.append((name, weights.data))
        ctx = T.matmul(self._drop(weights, fwd), v)
        return self._linear(self._merge_heads(ctx), name + ".o")

    # ---------------------------------------------------------------- public

    def project_features(self, feats, fwd=EVAL):
        """Shared FFN from raw features [B, d_feat] to visual representations [B, d_model]."""
        feats = T.as_tensor(feats, dtype=T.get_default_dtype())
        if feats.ndim == 1:
            feats = feats.reshape(1, -1)
        if feats.shape[-1] != self.config.d_feat:
            raise ShapeError(f"feature dimension {feats.shape[-1]} != d_feat {self.config.d_feat}")
        return self._ffn(feats, "proj", fwd)

    def embed(self, ids, offset=0):
        ids = np.asarray(ids)
        n = ids.shape[1]
        if offset + n > self.config.max_positions:
            raise ShapeError(f"sequence length {offset + n} exceeds max_positions")
        x = T.embedding_lookup(self.params["embed"], ids)
        x = T.scale(x, math.sqrt(self.config.d_model))
        return T.add(x, self._pos[offset : offset + n].astype(x.dtype))

    def encode(self, src, src_mask, visual, fwd=EVAL):
        """Return encoder states [B, N+1, d] and the memory mask [B, N+1].

        ``visual`` holds the projected features [B, d]; it enters as the last
        position through ``W_a`` and never serves as a key or value.
        """
        src = np.asarray(src)
        src_mask = np.asarray(src_mask, dtype=bool)
        if src.ndim == 1:
            src, src_mask = src[None], src_mask[None]
        if src.shape[1] < 1:
            raise MaskError("empty source")
        if not src_mask.any(axis=1).all():
            raise MaskError("source with no real tokens")
        b, n = src.shape
        text = self._drop(self.embed(src), fwd)
        vis = T.matmul(visual, self.params["enc.visual.w"]).reshape(b, 1, -1)
        x = T.concat([text, vis], axis=1)
        for i in range(self.config.layers):
            h = self._norm(x, f"enc.{i}.ln1")
            kv = h[:, :n]
            x = T.add(x, self._drop(self.attention(h, kv, src_mask, f"enc.{i}.attn", fwd), fwd))
            h = self._norm(x, f"enc.{i}.ln2")
            x = T.add(x, self._drop(self._ffn(h, f"enc.{i}.ffn", fwd), fwd))
        memory_mask = np.concatenate([src_mask, np.ones((b, 1), dtype=bool)], axis=1)
        return self._norm(x, "enc.ln"), memory_mask

    def decode(self, tgt_in, memory, memory_mask, fwd=EVAL):
        """Teacher-forced decoder logits [B, T, V] for prefix ids ``tgt_in``."""
        tgt_in = np.asarray(tgt_in)
        if tgt_in.ndim == 1:
            tgt_in = tgt_in[None]
        t = tgt_in.shape[1]
        self_mask = np.ones((tgt_in.shape[0], t), dtype=bool)
        y = self._drop(self.embed(tgt_in), fwd)
        for i in range(self.config.layers):
            h = self._norm(y, f"dec.{i}.ln1")
            y = T.add(y, self._drop(self.attention(h, h, self_mask, f"dec.{i}.self", fwd, causal=True), fwd))
            h = self._norm(y, f"dec.{i}.ln2")
            y = T.add(y, self._drop(self.attention(h, memory, memory_mask, f"dec.{i}.cross", fwd), fwd))
            h = self._norm(y, f"dec.{i}.ln3")
            y = T.add(y, self._drop(self._ffn(h, f"dec.{i}.ffn", fwd), fwd))
        y = self._norm(y, "dec.ln")
        return T.matmul(y, T.transpose(self.params["embed"]))

    def forward(self, src, src_mask, feats, tgt_in, fwd=EVAL):
        """One full pass with a single visual stream; returns (logits, visual repr)."""
        visual = self.project_features(feats, fwd)
        memory, memory_mask = self.encode(src, src_mask, visual, fwd)
        return self.decode(tgt_in, memory, memory_mask, fwd), visual

    def forward_pair(self, batch, fwd_syn=EVAL, fwd_aut=EVAL):
        """Run the batch once per image stream with shared parameters.

        Returns ``(logits_syn, logits_aut, h_syn, h_aut)``.
        """
        logits_s, h_s = self.forward(batch.src, batch.src_mask, batch.syn, batch.tgt_in, fwd_syn)
        logits_a, h_a = self.forward(batch.src, batch.src_mask, batch.aut, batch.tgt_in, fwd_aut)
        return logits_s, logits_a, h_s, h_a
