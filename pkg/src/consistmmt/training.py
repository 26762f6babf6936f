"""Optimization loop, checkpoint persistence and checkpoint averaging."""

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import make_batches
from .errors import FormatError, NumericsError, ShapeError
from .losses import LossBreakdown, LossWeights, compute_losses
from .model import Forward, ModelConfig, MultimodalTransformer
from .rng import RngStreams, stream

log = logging.getLogger(__name__)

MAGIC = b"MMTB"
FORMAT_VERSION = 1


@dataclass
class TrainerConfig:
    seed: int = 1
    max_epochs: int = 0
    max_steps: int = 0
    lr: float = 5e-4
    warmup_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    weight_decay: float = 0.0
    update_freq: int = 4
    token_budget: int = 2048
    checkpoint_every: int = 0
    keep_last: int = 10
    label_smoothing: float = 0.1
    kl_weight: float = 0.5
    ot_weight: float = 0.1

    def __post_init__(self):
        if self.update_freq < 1:
            raise ValueError("update_freq must be >= 1")
        if self.keep_last < 1:
            raise ValueError("keep_last must be >= 1")
        if self.kl_weight < 0 or self.ot_weight < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def weights(self):
        return LossWeights(kl=self.kl_weight, ot=self.ot_weight)

    def to_dict(self):
        return asdict(self)


def inverse_sqrt_lr(step, peak, warmup):
    """Linear warmup to ``peak`` at ``warmup`` updates, then ``peak * sqrt(warmup / step)``."""
    step = max(int(step), 1)
    if warmup <= 0:
        return peak
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.98), eps=1e-9, weight_decay=0.0, warmup=0):
        self.params = params
        self.peak_lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, step):
        return inverse_sqrt_lr(step, self.peak_lr, self.warmup)

    def step(self, grads):
        """Apply one update from ``grads`` (name -> array); returns the lr used."""
        self.step_count += 1
        t = self.step_count
        lr = self.lr_at(t)
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"{k}: gradient shape {g.shape} != {p.shape}")
            g64 = g.astype(np.float64)
            m = b1 * self.m[k].astype(np.float64) + (1.0 - b1) * g64
            v = b2 * self.v[k].astype(np.float64) + (1.0 - b2) * g64 * g64
            self.m[k] = m.astype(p.dtype)
            self.v[k] = v.astype(p.dtype)
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            w = p.data.astype(np.float64)
            if self.weight_decay:
                w = w - lr * self.weight_decay * w
            p.data = (w - upd).astype(p.dtype)
        return lr


# --------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns a model, its optimizer and the data order; one instance per run."""

    def __init__(self, model, config, examples, syn, aut, out_dir=None):
        self.model = model
        self.config = config
        self.examples = examples
        self.syn = syn
        self.aut = aut
        self.out_dir = out_dir
        self.rngs = RngStreams(config.seed)
        self.optimizer = Adam(
            model.params,
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
            warmup=config.warmup_steps,
        )
        self.epoch = 0
        self.cursor = 0
        self.history = []
        self._epoch_cache = None
        self.skipped = 0

    @classmethod
    def create(cls, model_config, config, examples, syn, aut, out_dir=None):
        model = MultimodalTransformer(model_config, rng=stream(config.seed, "init"))
        return cls(model, config, examples, syn, aut, out_dir)

    @property
    def step(self):
        return self.optimizer.step_count

    # ---------------------------------------------------------------- data

    def epoch_batches(self, epoch):
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            rng = stream(self.config.seed, f"shuffle:{epoch}")
            batches = make_batches(self.examples, self.config.token_budget, rng, self.syn, self.aut)
            self._epoch_cache = (epoch, batches)
        return self._epoch_cache[1]

    def next_micro_batches(self, n):
        out = []
        while len(out) < n:
            batches = self.epoch_batches(self.epoch)
            out.append(batches[self.cursor])
            self.cursor += 1
            if self.cursor >= len(batches):
                self.epoch += 1
                self.cursor = 0
        return out

    # ---------------------------------------------------------------- step

    def train_step(self, micro_batches, weights=None):
        """Accumulate gradients over ``micro_batches`` and apply one update.

        Gradients are averaged over the micro-batches. On a non-finite loss
        or gradient, nothing is applied and :class:`NumericsError` is raised.
        """
        if not micro_batches:
            raise ValueError("train_step needs at least one micro-batch")
        weights = weights or self.config.weights
        params = self.model.params
        acc = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
        parts = []
        drop_syn = Forward(self.rngs["dropout-syn"], train=True)
        drop_aut = Forward(self.rngs["dropout-aut"], train=True)
        try:
            for batch in micro_batches:
                self.model.zero_grad()
                total, breakdown = compute_losses(
                    self.model, batch, weights, self.config.label_smoothing, drop_syn, drop_aut
                )
                T.backward(total)
                for k, p in params.items():
                    if p.grad is not None:
                        acc[k] += p.grad
                parts.append(breakdown)
        finally:
            self.model.zero_grad()
        n = len(micro_batches)
        grads = {k: (a / n).astype(params[k].dtype) for k, a in acc.items()}
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NumericsError(f"non-finite gradient in {bad[0]} (and {len(bad) - 1} more)")
        lr = self.optimizer.step(grads)
        result = LossBreakdown.mean(parts)
        self.history.append((self.step, lr, result))
        self._log_step(lr, result)
        return result

    def _log_step(self, lr, b):
        if not self.out_dir:
            return
        fields_ = b.as_dict()
        line = " ".join(f"{k}={v:.6f}" for k, v in fields_.items())
        with open(os.path.join(self.out_dir, "train.log"), "a", encoding="utf-8") as fh:
            fh.write(f"step={self.step} epoch={self.epoch} lr={lr:.8g} {line}\n")
        with open(os.path.join(self.out_dir, "train.jsonl"), "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": self.step, "epoch": self.epoch, "lr": lr, **fields_}) + "\n")

    def fit(self, max_steps=None, max_epochs=None, on_step=None):
        """Train until ``max_steps`` updates or ``max_epochs`` epochs (absolute counts)."""
        cfg = self.config
        max_steps = cfg.max_steps if max_steps is None else max_steps
        max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
        if not max_steps and not max_epochs:
            raise ValueError("set max_steps or max_epochs")
        while True:
            if max_steps and self.step >= max_steps:
                break
            if max_epochs and self.epoch >= max_epochs:
                break
            epoch_before = self.epoch
            micro = self.next_micro_batches(cfg.update_freq)
            try:
                self.train_step(micro)
            except NumericsError as exc:
                self.skipped += 1
                log.warning("step %d skipped: %s", self.step + 1, exc)
                self._log_event(f"skipped step={self.step + 1} reason={exc}")
            if on_step is not None:
                on_step(self)
            if self.out_dir:
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save_rotating()
                elif not cfg.checkpoint_every and self.epoch != epoch_before:
                    self.save_rotating()
        return self.history

    def _log_event(self, text):
        if self.out_dir:
            with open(os.path.join(self.out_dir, "train.log"), "a", encoding="utf-8") as fh:
                fh.write(text + "\n")

    # ---------------------------------------------------------------- persistence

    def state_dict(self):
        return {"step": self.step, "epoch": self.epoch, "cursor": self.cursor, "skipped": self.skipped}

    def to_checkpoint(self, with_optimizer=True):
        optim = None
        if with_optimizer:
            optim = {"m": dict(self.optimizer.m), "v": dict(self.optimizer.v)}
        return Checkpoint(
            model_config=self.model.config.to_dict(),
            params={k: p.data for k, p in self.model.params.items()},
            optimizer=optim,
            step=self.step,
            rng_state=self.rngs.get_state(),
            trainer={"config": self.config.to_dict(), "state": self.state_dict()},
        )

    def save(self, path):
        save_checkpoint(self.to_checkpoint(), path)
        return path

    def save_rotating(self):
        path = os.path.join(self.out_dir, f"checkpoint_{self.step:08d}.mmtb")
        self.save(path)
        old = list_checkpoints(self.out_dir)[: -self.config.keep_last]
        for p in old:
            os.remove(p)
        return path

    @classmethod
    def resume(cls, path, examples, syn, aut, out_dir=None, config=None):
        ckpt = load_checkpoint(path)
        mcfg = ModelConfig(**ckpt.model_config)
        tcfg = config or TrainerConfig(**ckpt.trainer["config"])
        model = MultimodalTransformer(mcfg)
        model.load_arrays(ckpt.params)
        trainer = cls(model, tcfg, examples, syn, aut, out_dir)
        if ckpt.optimizer is None:
            raise FormatError(f"{path}: checkpoint carries no optimizer state")
        trainer.optimizer.m = {k: np.array(v) for k, v in ckpt.optimizer["m"].items()}
        trainer.optimizer.v = {k: np.array(v) for k, v in ckpt.optimizer["v"].items()}
        state = ckpt.trainer["state"]
        trainer.optimizer.step_count = int(state["step"])
        trainer.epoch = int(state["epoch"])
        trainer.cursor = int(state["cursor"])
        trainer.skipped = int(state.get("skipped", 0))
        trainer.rngs.set_state(ckpt.rng_state)
        return trainer


# --------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    model_config: dict
    params: dict
    optimizer: dict = None
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def build_model(self):
        model = MultimodalTransformer(ModelConfig(**self.model_config))
        model.load_arrays(self.params)
        return model


def _tensor_entries(ckpt):
    entries = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.optimizer is not None:
        entries += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer["m"].items()]
        entries += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer["v"].items()]
    return entries


def save_checkpoint(ckpt, path):
    """Write the little-endian ``MMTB`` container; tensors are stored as float32."""
    entries = _tensor_entries(ckpt)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor name in checkpoint")
    config_block = json.dumps(
        {"model": ckpt.model_config, "step": ckpt.step, "trainer": ckpt.trainer}, sort_keys=True
    ).encode("utf-8")
    rng_block = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(entries)))
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        for block in (config_block, rng_block):
            fh.write(struct.pack("<Q", len(block)))
            fh.write(block)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config=None):
    """Read an ``MMTB`` checkpoint; optionally verify it against a ModelConfig."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an MMTB checkpoint")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name}")
        tensors[name] = data
    blocks = []
    for _ in range(2):
        (n,) = r.unpack("<Q")
        try:
            blocks.append(json.loads(r.take(n).decode("utf-8")))
        except ValueError:
            raise FormatError(f"{path}: corrupt metadata block") from None
    if r.pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after checkpoint")
    meta, rng_state = blocks
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    optimizer = {"m": m, "v": v} if m else None
    ckpt = Checkpoint(
        model_config=meta["model"],
        params=params,
        optimizer=optimizer,
        step=int(meta["step"]),
        rng_state=rng_state,
        trainer=meta.get("trainer", {}),
        version=version,
    )
    try:
        mcfg = ModelConfig(**ckpt.model_config)
        if expected_config is not None and mcfg != expected_config:
            raise FormatError(f"{path}: model config differs from the expected one")
        ckpt.build_model()
    except (ShapeError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: parameters do not match config ({exc})") from None
    return ckpt


def list_checkpoints(directory):
    names = sorted(n for n in os.listdir(directory) if n.startswith("checkpoint_") and n.endswith(".mmtb"))
    return [os.path.join(directory, n) for n in names]


def average_checkpoints(paths):
    """Elementwise mean of parameters (computed in float64); optimizer state is dropped."""
    if not paths:
        raise FormatError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in paths]
    ref = ckpts[0]
    shapes = {k: v.shape for k, v in ref.params.items()}
    for p, c in zip(paths, ckpts):
        if {k: v.shape for k, v in c.params.items()} != shapes:
            raise FormatError(f"{p}: parameter names/shapes differ from {paths[0]}")
        if c.model_config != ref.model_config:
            raise FormatError(f"{p}: model config differs from {paths[0]}")
    avg = {}
    for k in shapes:
        total = np.zeros(shapes[k], dtype=np.float64)
        for c in ckpts:
            total += c.params[k]
        avg[k] = (total / len(ckpts)).astype(np.float32)
    return Checkpoint(
        model_config=dict(ref.model_config),
        params=avg,
        optimizer=None,
        step=max(c.step for c in ckpts),
        rng_state=ref.rng_state,
        trainer=ref.trainer,
    )


def trainer_config_fields():
    return [f.name for f in fields(TrainerConfig)]
