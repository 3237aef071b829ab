"""Command-line entry point: ``c2w2c {build-vocab,train,params,score,eval,sample}``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import corpus as C
from . import inference as I
from . import model as M
from . import report
from .training import CheckpointError, TrainConfig, Trainer, checkpoint_trainer, load_checkpoint

log = logging.getLogger("c2w2c")

CHECKPOINT_NAME = "checkpoint.ckpt"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob of a run. Defaults are the full-scale training setup."""

    learning_rate: float = 1e-4
    clip_norm: float = 2.0
    dropout: float = 0.5
    batch_size: int = 150
    bptt_window: int = 1
    max_word_len: int = 20
    epochs: int = 1
    seed: int = 0
    precision: str = "float32"
    log_every: int = 100
    model: str = "c2w2c"
    d_c: int = 50
    d_wi: int = 150
    d_w: int = 50
    d_l: int = 500
    decoder_hidden: int = 500
    bottleneck: int = 150
    max_word_vocab: int | None = None
    corpus: str | None = None
    vocab: str | None = None
    word_vocab: str | None = None
    checkpoint: str | None = None
    output: str | None = None
    valid: str | None = None
    word_k: int = 20
    sentence_k: int = 10
    max_words: int = 50
    include_markers: bool = False
    deterministic: bool = True
    lowercase: bool = True

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(asdict(self)).validate()

    def dims(self, char_vocab: int, word_vocab: int = 0) -> M.Dims:
        return M.Dims(
            char_vocab=char_vocab,
            word_vocab=word_vocab,
            d_c=self.d_c,
            d_wi=self.d_wi,
            d_w=self.d_w,
            d_l=self.d_l,
            decoder_hidden=self.decoder_hidden,
            bottleneck=self.bottleneck,
            max_word_len=self.max_word_len,
        ).validate(self.model)


# flag name -> RunConfig field
FLAGS = {
    "--lr": ("learning_rate", float),
    "--clip-norm": ("clip_norm", float),
    "--dropout": ("dropout", float),
    "--batch-size": ("batch_size", int),
    "--bptt-window": ("bptt_window", int),
    "--max-word-len": ("max_word_len", int),
    "--epochs": ("epochs", int),
    "--seed": ("seed", int),
    "--precision": ("precision", str),
    "--log-every": ("log_every", int),
    "--d-c": ("d_c", int),
    "--d-wi": ("d_wi", int),
    "--d-w": ("d_w", int),
    "--d-l": ("d_l", int),
    "--decoder-hidden": ("decoder_hidden", int),
    "--bottleneck": ("bottleneck", int),
    "--max-word-vocab": ("max_word_vocab", int),
    "--corpus": ("corpus", str),
    "--vocab": ("vocab", str),
    "--word-vocab": ("word_vocab", str),
    "--checkpoint": ("checkpoint", str),
    "--output": ("output", str),
    "--valid": ("valid", str),
    "--word-k": ("word_k", int),
    "--sentence-k": ("sentence_k", int),
    "--max-words": ("max_words", int),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file or a run manifest (defaults < config < flags)")
    p.add_argument("--model", choices=M.MODEL_KINDS, default=None)
    for flag, (dest, typ) in FLAGS.items():
        p.add_argument(flag, dest=dest, type=typ, default=None)
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("--include-markers", dest="include_markers", action="store_true", default=None)
    p.add_argument("--no-lowercase", dest="lowercase", action="store_false", default=None)
    p.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2w2c", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="character/word vocabularies and corpus statistics")
    _add_common(p)

    p = sub.add_parser("train", help="train C2W2C or the Word-LSTM baseline")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint (or OUTPUT/checkpoint.ckpt)")
    p.add_argument("--max-steps", type=int, default=None, help="stop (and checkpoint) after this many updates")

    p = sub.add_parser("params", help="parameter counts per sub-model")
    _add_common(p)
    p.add_argument("--char-vocab-size", type=int, default=100)
    p.add_argument("--word-vocab-size", type=int, default=88000)

    p = sub.add_parser("score", help="length-normalised sentence scores")
    _add_common(p)
    p.add_argument("--sentences", required=True)

    p = sub.add_parser("eval", help="test-set perplexity")
    _add_common(p)
    p.add_argument("--test", required=True)

    p = sub.add_parser("sample", help="generate text character by character")
    _add_common(p)
    p.add_argument("--seed-words", required=True, help="space-separated context words")
    p.add_argument("--strategy", choices=("greedy", "stochastic", "beam"), default="beam")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = asdict(RunConfig())
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        raw = raw.get("config", raw)
        unknown = set(raw) - set(values)
        if unknown:
            raise UsageError(f"unknown config keys in {args.config}: {', '.join(sorted(unknown))}")
        values.update(raw)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, **extra) -> None:
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config": asdict(cfg),
        "seed": cfg.seed,
        **extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(_require(cfg.output, "--output"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------


def cmd_build_vocab(cfg: RunConfig, args) -> int:
    sentences = C.load_sentences(_require(cfg.corpus, "--corpus"), cfg.lowercase)
    out = _out_dir(cfg)
    vocab = C.build_char_vocab(sentences)
    words = C.build_word_vocab(sentences, cfg.max_word_vocab)
    stats = C.compute_stats(sentences)
    vocab.save(out / "chars.txt")
    words.save(out / "words.txt")
    rows = report.stats_rows(stats) + [("char_vocab_size", str(len(vocab))), ("word_vocab_size", str(len(words)))]
    report.write_tsv(out / "stats.tsv", ("statistic", "value"), rows)
    if not args.no_plots:
        report.plot_length_histogram(stats, out / "length_histogram.png")
        report.plot_coverage(stats, out / "coverage.png")
    write_manifest(out, "build-vocab", cfg, char_vocab_sha256=vocab.digest(), word_vocab_sha256=words.digest())
    for name, value in rows:
        print(f"{name}\t{value}")
    return 0


def _vocabs_for_training(cfg: RunConfig, sentences):
    vocab = C.CharVocab.load(cfg.vocab) if cfg.vocab else C.build_char_vocab(sentences)
    words = None
    if cfg.model == "wordlstm":
        words = C.WordVocab.load(cfg.word_vocab) if cfg.word_vocab else C.build_word_vocab(sentences, cfg.max_word_vocab)
    return vocab, words


def cmd_train(cfg: RunConfig, args) -> int:
    tcfg = cfg.train_config()
    sentences = C.load_sentences(_require(cfg.corpus, "--corpus"), cfg.lowercase)
    if not sentences:
        raise UsageError(f"{cfg.corpus} contains no sentences")
    valid = C.load_sentences(cfg.valid, cfg.lowercase) if cfg.valid else None
    out = _out_dir(cfg)
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out / CHECKPOINT_NAME
    vocab, words = _vocabs_for_training(cfg, sentences)
    if args.resume:
        ck = load_checkpoint(
            ckpt_path,
            expected_char_vocab=vocab.digest() if cfg.vocab else None,
            expected_word_vocab=words.digest() if (words is not None and cfg.word_vocab) else None,
        )
        if ck.model.kind != cfg.model:
            raise UsageError(f"checkpoint holds a {ck.model.kind} model, --model is {cfg.model}")
        trainer = ck.trainer(sentences)
        trainer.cfg = TrainConfig.from_dict({**asdict(ck.cfg), "epochs": tcfg.epochs}).validate()
        vocab, words = ck.vocab, ck.word_vocab
        log.info("resumed %s at epoch %d step %d", ckpt_path, ck.epoch, ck.cursor)
    else:
        dims = cfg.dims(len(vocab), len(words) if words else 0)
        model = M.new_model(cfg.model, dims, seed=tcfg.seed, dtype=tcfg.dtype)
        trainer = Trainer(model, tcfg, sentences, vocab if cfg.model == "c2w2c" else None, words)
    write_manifest(
        out,
        "train",
        cfg,
        char_vocab_sha256=vocab.digest() if vocab else None,
        word_vocab_sha256=words.digest() if words else None,
    )
    scoring_vocab = vocab if cfg.model == "c2w2c" else words

    log_fh = open(out / "train.log", "a", encoding="utf-8")
    trace_fh = open(out / "loss_trace.tsv", "a", encoding="utf-8")
    metrics_path = out / "metrics.tsv"
    history = _read_metrics(metrics_path)

    def log_line(line: str) -> None:
        log_fh.write(line + "\n")
        log_fh.flush()
        log.info(line)

    def on_step(start: int, r) -> None:
        trace_fh.write(f"{trainer.epoch}\t{start}\t{r.loss!r}\n")

    interrupted = False

    def on_sigint(signum, frame):
        nonlocal interrupted
        interrupted = True

    old_handler = signal.signal(signal.SIGINT, on_sigint)
    steps_left = args.max_steps
    try:
        while trainer.epoch < trainer.cfg.epochs:
            m = trainer.run_epoch(log_line, on_step, max_steps=steps_left, stop=lambda: interrupted)
            if steps_left is not None:
                steps_left -= m.steps
            if not m.complete:
                checkpoint_trainer(ckpt_path, trainer)
                trace_fh.flush()
                print(f"stopped at epoch {trainer.epoch} step {trainer.cursor}; checkpoint {ckpt_path}", file=sys.stderr)
                return 130 if interrupted else 0
            vpp = I.corpus_perplexity(valid, trainer.model, scoring_vocab) if valid else float("nan")
            history.append((m.epoch, m.mean_loss, m.perplexity, vpp, m.words, m.words_per_sec))
            report.write_tsv(
                metrics_path,
                ("epoch", "train_loss", "train_perplexity", "valid_perplexity", "words", "words_per_sec"),
                history,
            )
            checkpoint_trainer(ckpt_path, trainer)
            trace_fh.flush()
            print(f"epoch {m.epoch}\tloss {m.mean_loss:.6f}\ttrain_pp {m.perplexity:.4f}\tvalid_pp {vpp:.4f}")
            if interrupted:
                return 130
            if steps_left == 0:
                return 0
    finally:
        signal.signal(signal.SIGINT, old_handler)
        log_fh.close()
        trace_fh.close()
        if history and not args.no_plots:
            ep = [int(h[0]) for h in history]
            vp = [float(h[3]) for h in history] if valid else None
            report.plot_training(ep, [float(h[1]) for h in history], out / "training.png", vp)
    return 0


def _read_metrics(path: Path) -> list[tuple]:
    if not path.exists():
        return []
    rows = path.read_text(encoding="utf-8").splitlines()[1:]
    return [tuple(r.split("\t")) for r in rows if r]


def param_tables(cfg: RunConfig, char_vocab: int, word_vocab: int) -> dict[str, dict[str, int]]:
    if char_vocab <= 0 or word_vocab <= 0:
        raise UsageError("vocabulary sizes must be positive")
    base = RunConfig(**{**asdict(cfg), "model": "c2w2c"})
    tables = {"C2W2C": M.count_params("c2w2c", M.param_shapes("c2w2c", base.dims(char_vocab, word_vocab)))}
    base.model = "wordlstm"
    tables["Word-LSTM"] = M.count_params("wordlstm", M.param_shapes("wordlstm", base.dims(char_vocab, word_vocab)))
    return tables


def param_itemization(cfg: RunConfig, char_vocab: int, word_vocab: int) -> list[tuple[str, str, int]]:
    rows = []
    base = RunConfig(**asdict(cfg))
    for kind, label in (("c2w2c", "C2W2C"), ("wordlstm", "Word-LSTM")):
        base.model = kind
        for name, shape in M.param_shapes(kind, base.dims(char_vocab, word_vocab)).items():
            rows.append((label, name, int(np.prod(shape))))
    return rows


def cmd_params(cfg: RunConfig, args) -> int:
    tables = param_tables(cfg, args.char_vocab_size, args.word_vocab_size)
    print("model\tcomponent\tparameters")
    for model, counts in tables.items():
        for part, n in counts.items():
            print(f"{model}\t{part}\t{n}")
    if cfg.output:
        out = _out_dir(cfg)
        report.write_tsv(
            out / "params.tsv",
            ("model", "component", "parameters"),
            [(m, k, n) for m, c in tables.items() for k, n in c.items()],
        )
        report.write_tsv(out / "params_itemized.tsv", ("model", "tensor", "parameters"), param_itemization(cfg, args.char_vocab_size, args.word_vocab_size))
        if not args.no_plots:
            report.plot_params(tables, out / "params.png")
    return 0


def _load_for_inference(cfg: RunConfig):
    ck = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    vocab = ck.vocab if ck.model.kind == "c2w2c" else ck.word_vocab
    return ck, vocab


def cmd_score(cfg: RunConfig, args) -> int:
    ck, vocab = _load_for_inference(cfg)
    lines = [ln.split() for ln in Path(args.sentences).read_text(encoding="utf-8").splitlines()]
    failed = []
    for toks in lines:
        if not toks:
            continue
        if cfg.lowercase:
            toks = [t if t in C.MARKERS else t.lower() for t in toks]
        try:
            rep = I.score_sentence(toks, ck.model, vocab, cfg.include_markers)
        except I.ScoringError as exc:
            failed.extend(exc.words)
            print(f"error: {exc}", file=sys.stderr)
            continue
        print(rep.format())
    if failed:
        print(f"error: {len(failed)} word(s) with unknown characters: {' '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ck, vocab = _load_for_inference(cfg)
    sentences = C.load_sentences(args.test, cfg.lowercase)
    if not sentences:
        raise UsageError(f"{args.test} contains no sentences; perplexity is undefined")
    try:
        pp = I.corpus_perplexity(sentences, ck.model, vocab, cfg.include_markers)
    except I.ScoringError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"perplexity\t{pp:.6f}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    ck, vocab = _load_for_inference(cfg)
    if ck.model.kind != "c2w2c":
        raise UsageError("sampling generates characters and needs a c2w2c checkpoint")
    seed_words = args.seed_words.split()
    if cfg.lowercase:
        seed_words = [w if w in C.MARKERS else w.lower() for w in seed_words]
    if args.strategy == "beam":
        hyps = I.sample_beam(seed_words, ck.model, vocab, cfg.word_k, cfg.sentence_k, cfg.max_words)
    else:
        rng = np.random.default_rng(cfg.seed) if args.strategy == "stochastic" else None
        hyps = [I.sample_stochastic(seed_words, ck.model, vocab, cfg.max_words, rng)]
    for rank, h in enumerate(hyps, start=1):
        print(f"{rank}\t{h.logp:.6f}\t{' '.join(h.tokens)}")
    return 0


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "params": cmd_params,
    "score": cmd_score,
    "eval": cmd_eval,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command in ("train", "params"):
            cfg.train_config()
        limits = threadpool_limits(1) if cfg.deterministic else None
        try:
            return COMMANDS[args.command](cfg, args)
        finally:
            if limits is not None:
                limits.restore_original_limits()
    except (UsageError, ValueError, CheckpointError, OSError) as exc:
        print(f"c2w2c {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
