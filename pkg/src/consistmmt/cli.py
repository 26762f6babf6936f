"""Command-line entry points.

Every subcommand maps toolkit errors to exit codes: 0 ok, 2 usage or
config, 3 data, 4 checkpoint mismatch, 5 numerics.
"""

import argparse
import dataclasses
import logging
import os
import sys

from . import data as D
from .errors import (
    DataError,
    DegenerateMassError,
    FormatError,
    MaskError,
    MMTError,
    NumericsError,
    ShapeError,
    VocabError,
)
from .inference import (
    corpus_bleu,
    ids_to_words,
    incongruent_decode,
    similarity_probe,
    translate_examples,
    write_report,
)
from .model import ModelConfig
from .training import (
    Trainer,
    TrainerConfig,
    average_checkpoints,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("consistmmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERICS = 0, 2, 3, 4, 5


class ConfigError(MMTError, ValueError):
    exit_code = EXIT_USAGE


def exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, (NumericsError, DegenerateMassError)):
        return EXIT_NUMERICS
    if isinstance(exc, (FormatError, ShapeError)):
        return EXIT_CHECKPOINT
    if isinstance(exc, (DataError, VocabError, MaskError)):
        return EXIT_DATA
    return 1


# --------------------------------------------------------------------------
# run configuration

PATH_KEYS = ("data.src", "data.tgt", "data.images", "data.syn", "data.aut", "data.vocab")
_TRAIN_SKIP = ("seed", "kl_weight", "ot_weight")


def _defaults():
    out = {f"data.{k.split('.')[1]}": "" for k in PATH_KEYS}
    out["run.out_dir"] = ""
    out["run.seed"] = TrainerConfig.seed
    out["weights.lambda"] = TrainerConfig.kl_weight
    out["weights.gamma"] = TrainerConfig.ot_weight
    for f in dataclasses.fields(ModelConfig):
        out[f"model.{f.name}"] = f.default
    out["model.vocab_size"] = 0  # 0 = size of data.vocab
    for f in dataclasses.fields(TrainerConfig):
        if f.name not in _TRAIN_SKIP:
            out[f"train.{f.name}"] = f.default
    return out


def _coerce(key, raw, default):
    if isinstance(default, bool):
        low = str(raw).lower()
        if low not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw)


@dataclasses.dataclass
class RunConfig:
    values: dict

    @classmethod
    def from_sources(cls, path=None, overrides=()):
        """Defaults, then the key=value file at ``path``, then ``(key, value)`` overrides."""
        defaults = _defaults()
        values = dict(defaults)
        items = []
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    lines = fh.read().splitlines()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for lineno, line in enumerate(lines, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, raw = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                items.append((key.strip(), raw.strip()))
        items.extend(overrides)
        for key, raw in items:
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, defaults[key])
        cfg = cls(values)
        if path is not None:
            base = os.path.dirname(os.path.abspath(path))
            for k in PATH_KEYS + ("run.out_dir",):
                v = cfg.values[k]
                if v and not os.path.isabs(v) and (k, v) not in overrides:
                    cfg.values[k] = os.path.join(base, v)
        return cfg

    def validate(self):
        v = self.values
        for k in PATH_KEYS:
            if not v[k]:
                raise ConfigError(f"{k} is required")
            if not os.path.exists(v[k]):
                raise ConfigError(f"{k}: path does not exist: {v[k]}")
        if not v["run.out_dir"]:
            raise ConfigError("run.out_dir is required")
        if v["weights.lambda"] < 0 or v["weights.gamma"] < 0:
            raise ConfigError("weights.lambda and weights.gamma must be >= 0")
        if not v["train.max_steps"] and not v["train.max_epochs"]:
            raise ConfigError("set train.max_steps or train.max_epochs")
        try:
            self.trainer_config()
            self.model_config(max(v["model.vocab_size"], 1))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def trainer_config(self):
        v = self.values
        kw = {k[6:]: val for k, val in v.items() if k.startswith("train.")}
        return TrainerConfig(
            seed=v["run.seed"], kl_weight=v["weights.lambda"], ot_weight=v["weights.gamma"], **kw
        )

    def model_config(self, vocab_size=None):
        kw = {k[6:]: val for k, val in self.values.items() if k.startswith("model.")}
        if vocab_size is not None and not kw["vocab_size"]:
            kw["vocab_size"] = vocab_size
        return ModelConfig(**kw)

    def dumps(self):
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))


def split_overrides(extra):
    """``['--train.lr', '1e-3', ...]`` -> ``[('train.lr', '1e-3'), ...]``."""
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok} needs a value")
            val = extra[i + 1]
            i += 2
        out.append((key, val))
    return out


def echo_config(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# helpers


def _read_tokens(path):
    return [line.split() for line in D.read_lines(path)]


def _load_table(path):
    try:
        return D.load_features(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except FormatError as exc:
        raise DataError(str(exc)) from None


def _load_vocab(path):
    try:
        return D.Vocabulary.load(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except FormatError as exc:
        raise DataError(str(exc)) from None


def _write_lines(path, lines):
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _resolve_checkpoint(args):
    """Load ``--checkpoint``, or average the newest ``--average-last`` files of ``--checkpoint-dir``."""
    if args.checkpoint and args.checkpoint_dir:
        raise ConfigError("give either --checkpoint or --checkpoint-dir")
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    if not args.checkpoint_dir:
        raise ConfigError("--checkpoint or --checkpoint-dir is required")
    if not os.path.isdir(args.checkpoint_dir):
        raise ConfigError(f"not a directory: {args.checkpoint_dir}")
    paths = list_checkpoints(args.checkpoint_dir)[-args.average_last :]
    if not paths:
        raise FormatError(f"no checkpoints in {args.checkpoint_dir}")
    return average_checkpoints(paths)


def _check_compat(model, vocab, table=None):
    if model.config.vocab_size != len(vocab):
        raise FormatError(
            f"checkpoint vocab_size={model.config.vocab_size} but vocabulary has {len(vocab)} entries"
        )
    if table is not None and table.dim is not None and table.dim != model.config.d_feat:
        raise FormatError(f"checkpoint d_feat={model.config.d_feat} but features have dim {table.dim}")


def _decode_inputs(args):
    ckpt = _resolve_checkpoint(args)
    model = ckpt.build_model()
    vocab = _load_vocab(args.vocab)
    table = _load_table(args.features)
    _check_compat(model, vocab, table)
    src = _read_tokens(args.input)
    images = [line.strip() for line in D.read_lines(args.images)]
    if len(images) != len(src):
        raise DataError(f"{len(src)} source lines but {len(images)} image ids")
    for s in src:
        if not s:
            raise DataError("empty source line")
    examples = [D.ParallelExample(vocab.encode(s) + [D.EOS], [D.BOS, D.EOS], img) for s, img in zip(src, images)]
    return model, vocab, table, examples


# --------------------------------------------------------------------------
# commands


def cmd_learn_bpe(args):
    words = [w for path in args.input for line in D.read_lines(path) for w in line.split()]
    model = D.learn_bpe(words, args.merges)
    model.save(args.output)
    log.info("learned %d merges -> %s", len(model.merges), args.output)
    return EXIT_OK


def cmd_apply_bpe(args):
    try:
        model = D.BpeModel.load(args.bpe)
    except OSError as exc:
        raise DataError(f"cannot read {args.bpe}: {exc}") from None
    except FormatError as exc:
        raise DataError(str(exc)) from None
    lines = D.read_lines(args.input)
    _write_lines(args.output, [" ".join(model.segment_line(line)) for line in lines])
    return EXIT_OK


def cmd_build_vocab(args):
    lines = [tokens for path in args.input for tokens in _read_tokens(path)]
    vocab = D.Vocabulary.build(lines)
    vocab.save(args.output)
    log.info("vocabulary of %d symbols -> %s", len(vocab), args.output)
    return EXIT_OK


def cmd_train(args, overrides):
    cfg = RunConfig.from_sources(args.config, overrides).validate()
    v = cfg.values
    vocab = _load_vocab(v["data.vocab"])
    mcfg = cfg.model_config(len(vocab))
    if mcfg.vocab_size != len(vocab):
        raise ConfigError(f"model.vocab_size={mcfg.vocab_size} but vocabulary has {len(vocab)} entries")
    tcfg = cfg.trainer_config()
    syn = _load_table(v["data.syn"])
    aut = _load_table(v["data.aut"])
    for name, table in (("syn", syn), ("aut", aut)):
        if table.dim != mcfg.d_feat:
            raise DataError(f"data.{name} has dimension {table.dim}, model.d_feat={mcfg.d_feat}")
    images = [line.strip() for line in D.read_lines(v["data.images"])]
    examples = D.make_examples(_read_tokens(v["data.src"]), _read_tokens(v["data.tgt"]), images, vocab)
    for ex in examples:
        syn[ex.image_id], aut[ex.image_id]  # fail early on unresolvable ids
    out = v["run.out_dir"]
    os.makedirs(out, exist_ok=True)
    echo_config(os.path.join(out, "config.resolved"), cfg.dumps())
    if args.resume:
        trainer = Trainer.resume(args.resume, examples, syn, aut, out, tcfg)
        if trainer.model.config != mcfg:
            raise FormatError(f"{args.resume}: model config differs from the run config")
    else:
        trainer = Trainer.create(mcfg, tcfg, examples, syn, aut, out)
    trainer.fit()
    final = os.path.join(out, f"checkpoint_{trainer.step:08d}.mmtb")
    if not os.path.exists(final):
        trainer.save_rotating()
    if trainer.history:
        step, lr, b = trainer.history[-1]
        print(f"step={step} lr={lr:.6g} " + " ".join(f"{k}={x:.4f}" for k, x in b.as_dict().items()))
    if trainer.skipped:
        log.warning("%d steps skipped for non-finite values", trainer.skipped)
    return EXIT_OK


def cmd_average(args):
    if args.inputs:
        paths = args.inputs
    else:
        if not args.checkpoint_dir:
            raise ConfigError("give checkpoint files or --checkpoint-dir")
        paths = list_checkpoints(args.checkpoint_dir)[-args.average_last :]
    ckpt = average_checkpoints(paths)
    save_checkpoint(ckpt, args.output)
    log.info("averaged %d checkpoints -> %s", len(paths), args.output)
    return EXIT_OK


def cmd_translate(args):
    model, vocab, table, examples = _decode_inputs(args)
    outs = translate_examples(model, examples, table, args.beam, args.max_len, args.zero_features)
    _write_lines(args.output, [" ".join(ids_to_words(vocab, o)) for o in outs])
    if args.output not in (None, "-"):
        echo_config(args.output + ".config", _echo_args(args))
    return EXIT_OK


def cmd_evaluate(args):
    refs = [line.split() for line in D.read_lines(args.ref)]
    if args.hyp:
        hyps = [line.split() for line in D.read_lines(args.hyp)]
    else:
        model, vocab, table, examples = _decode_inputs(args)
        if args.incongruent:
            report = incongruent_decode(model, examples, table, vocab, args.beam, args.max_len, refs)
            print(report.format())
            if args.output:
                write_report(args.output, report)
            return EXIT_OK
        outs = translate_examples(model, examples, table, args.beam, args.max_len, args.zero_features)
        hyps = [ids_to_words(vocab, o) for o in outs]
    report = corpus_bleu(hyps, refs)
    print(report.format())
    if args.output:
        write_report(args.output, report)
        echo_config(args.output + ".config", _echo_args(args))
    return EXIT_OK


def cmd_probe(args):
    ckpt = _resolve_checkpoint(args)
    model = ckpt.build_model()
    syn = _load_table(args.syn)
    aut = _load_table(args.aut)
    for t in (syn, aut):
        if t.dim != model.config.d_feat:
            raise FormatError(f"checkpoint d_feat={model.config.d_feat} but features have dim {t.dim}")
    images = [line.strip() for line in D.read_lines(args.images)]
    if not images:
        raise DataError(f"{args.images}: no image ids")
    report = similarity_probe(model, images, syn, aut, bins=args.bins)
    print(report.format())
    if args.output:
        per = [{"image_id": i, "cosine": c} for i, c in zip(images, report.values)]
        write_report(args.output, report, per)
        echo_config(args.output + ".config", _echo_args(args))
    return EXIT_OK


def _echo_args(args):
    skip = ("func", "log_level")
    return "".join(f"{k} = {v}\n" for k, v in sorted(vars(args).items()) if k not in skip)


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_checkpoint_args(p):
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--checkpoint-dir", help="directory of rotating checkpoints")
    p.add_argument("--average-last", type=int, default=10, help="with --checkpoint-dir, average the newest N")


def _add_decode_args(p, required=True):
    _add_checkpoint_args(p)
    p.add_argument("--vocab", required=required)
    p.add_argument("--input", required=required, help="BPE-segmented source, one sentence per line")
    p.add_argument("--images", required=required, help="image ids aligned with --input")
    p.add_argument("--features", required=required, help="feature table used at decode time")
    p.add_argument("--zero-features", action="store_true", help="replace every feature with zeros")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)


def build_parser():
    parser = _Parser(prog="consistmmt", description="Multimodal translation with consistency training.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("learn-bpe", help="learn BPE merges from corpora")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--merges", type=int, default=10000)
    p.set_defaults(func=cmd_learn_bpe)

    p = sub.add_parser("apply-bpe", help="segment a corpus with learned merges")
    p.add_argument("--bpe", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_apply_bpe)

    p = sub.add_parser("build-vocab", help="joint vocabulary from segmented corpora")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train from a key=value config; --section.key value overrides")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a corpus")
    _add_decode_args(p)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file or of a checkpoint's output")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp")
    _add_decode_args(p, required=False)
    p.add_argument("--incongruent", action="store_true", help="also decode with zeroed features and report the drop")
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe-similarity", help="cosine similarity of projected syn vs aut features")
    _add_checkpoint_args(p)
    p.add_argument("--images", required=True)
    p.add_argument("--syn", required=True)
    p.add_argument("--aut", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--output")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("average-checkpoints", help="elementwise parameter mean")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--average-last", type=int, default=10)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_average)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.command == "train":
            return args.func(args, split_overrides(extra))
        if extra:
            raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
        if getattr(args, "beam", 1) < 1:
            raise ConfigError("--beam must be >= 1")
        return args.func(args)
    except MMTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
