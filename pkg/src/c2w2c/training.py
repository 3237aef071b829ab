"""Stateful stream training: Adam, global-norm clipping, dropout, checkpoints.

Hidden states of the language model run across the whole epoch; gradients are
cut every ``bptt_window`` steps, when the parameters are updated and the
carried state is detached.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import model as M
from . import numkernel as nk
from .corpus import CharVocab, WordVocab, make_streams
from .numkernel import DTYPES, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "C2W2C-CHECKPOINT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
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

    def validate(self) -> "TrainConfig":
        for name in ("learning_rate", "clip_norm", "batch_size", "bptt_window", "max_word_len", "epochs", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")
        return self

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- optimiser pieces ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def update(self, params: dict[str, Tensor], lr: float) -> None:
        """One bias-corrected Adam step using ``p.grad`` (missing grads count as zero)."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step
        c2 = 1 - b2**self.step
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype, copy=False)


def global_norm(grads: Sequence[np.ndarray | None]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. Gradients already inside the ball are untouched.
    """
    norm = global_norm([p.grad for p in params])
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


def apply_dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at training time,
    identity at inference."""
    if not training or rate == 0:
        return x
    keep = rng.random(x.shape) >= rate
    return nk.dropout_mask(x, keep / (1 - rate))


# -- data plumbing -------------------------------------------------------------------


@dataclass
class EncodedCorpus:
    """Word types of a corpus with their character encodings (C2W2C) or word ids (baseline)."""

    types: list[str]
    type_index: dict[str, int]
    char_ids: np.ndarray | None
    lengths: np.ndarray | None
    word_ids: np.ndarray | None

    @classmethod
    def build(cls, sentences, vocab: CharVocab | None, word_vocab: WordVocab | None, maxlen: int) -> "EncodedCorpus":
        types = list(dict.fromkeys(tok for s in sentences for tok in s))
        char_ids = lengths = word_ids = None
        if vocab is not None:
            enc = [vocab.encode(t, maxlen) for t in types]
            char_ids = np.array([e.char_ids for e in enc], dtype=np.int64).reshape(len(types), maxlen)
            lengths = np.array([e.true_length for e in enc], dtype=np.int64)
        if word_vocab is not None:
            word_ids = np.array([word_vocab.id(t) for t in types], dtype=np.int64)
        return cls(types, {t: i for i, t in enumerate(types)}, char_ids, lengths, word_ids)

    def stream_matrix(self, streams: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
        """``(B, T)`` type ids padded with -1, plus per-stream lengths."""
        lens = np.array([len(s) for s in streams], dtype=np.int64)
        mat = np.full((len(streams), int(lens.max())), -1, dtype=np.int64)
        for i, s in enumerate(streams):
            mat[i, : len(s)] = [self.type_index[t] for t in s]
        return mat, lens


@dataclass
class StepResult:
    loss: float  # mean NLL per scored character (per word for the baseline)
    nll_sum: float
    n_units: float
    words: int
    grad_norm: float


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    perplexity: float  # per character for C2W2C, per word for the baseline
    words: int
    words_per_sec: float
    steps: int
    step_losses: list[float] = field(default_factory=list)
    complete: bool = True


def _first_non_finite(model: M.Model) -> str:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name}"
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"gradient of {name}"
    return "loss only (all parameters and gradients finite)"


class Trainer:
    """Owns the model, optimiser state and epoch bookkeeping for one training run."""

    def __init__(
        self,
        model: M.Model,
        cfg: TrainConfig,
        sentences: Sequence[Sequence[str]],
        vocab: CharVocab | None = None,
        word_vocab: WordVocab | None = None,
        adam: AdamState | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.model = model
        self.cfg = cfg.validate()
        self.sentences = sentences
        self.vocab = vocab
        self.word_vocab = word_vocab
        if model.kind == "c2w2c" and vocab is None:
            raise ValueError("the c2w2c model needs a character vocabulary")
        if model.kind == "wordlstm" and word_vocab is None:
            raise ValueError("the wordlstm model needs a word vocabulary")
        self.adam = adam or AdamState.for_params(model.params)
        self.rng = rng or np.random.default_rng([cfg.seed, 1])
        self.data = EncodedCorpus.build(
            sentences, vocab if model.kind == "c2w2c" else None, word_vocab if model.kind == "wordlstm" else None, cfg.max_word_len
        )
        self.epoch = 0
        self.cursor = 0
        self.states: M.RecurrentState | None = None
        self.streams = None
        self._matrix = None
        self._lens = None
        self.training = True

    # -- epoch layout --

    def start_epoch(self, epoch: int | None = None, cursor: int = 0, states: M.RecurrentState | None = None) -> None:
        """Reshuffle the sentences for this epoch and reset (or restore) the LM state."""
        if epoch is not None:
            self.epoch = epoch
        self.streams = make_streams(self.sentences, self.cfg.batch_size, self.cfg.seed, self.epoch)
        self._matrix, self._lens = self.data.stream_matrix(self.streams.streams)
        self.cursor = cursor
        dtype = next(iter(self.model.params.values())).dtype
        self.states = states or M.RecurrentState.zeros(self.cfg.batch_size, self.model.dims.d_l, dtype=dtype)

    @property
    def steps_per_epoch(self) -> int:
        return int(self._matrix.shape[1]) - 1

    @property
    def epoch_done(self) -> bool:
        return self.cursor >= self.steps_per_epoch

    def _drop(self) -> Callable[[Tensor], Tensor] | None:
        if not self.training or self.cfg.dropout == 0:
            return None
        return lambda x: apply_dropout(x, self.cfg.dropout, True, self.rng)

    # -- one update --

    def forward_window(self, start: int, stop: int, states: M.RecurrentState):
        """Forward pass over steps ``start..stop-1``. Returns (loss_sum, nll_sum, units, new_states)."""
        p = self.model.params
        kind = self.model.kind
        maxlen = self.cfg.max_word_len
        drop = self._drop()
        loss = None
        nll_sum = units = 0.0
        for t in range(start, stop):
            inp = self._matrix[:, t]
            tgt = self._matrix[:, t + 1]
            valid = (tgt >= 0).astype(np.float64)
            inp = np.where(inp >= 0, inp, 0)
            tgt = np.where(tgt >= 0, tgt, 0)
            if kind == "c2w2c":
                w = M.c2w_embed_batch(p, self.data.char_ids[inp], self.data.lengths[inp], drop)
                states, c = M.lm_advance(states, w, p)
                if drop:
                    c = drop(c)
                out = M.word_nll_batch(p, c, self.data.char_ids[tgt], self.data.lengths[tgt], valid, maxlen, drop)
                term, per_word, n = out.loss, out.word_nll, out.n_chars
            else:
                w = M.wordlstm_embed(p, self.data.word_ids[inp], drop)
                states, c = M.lm_advance(states, w, p)
                if drop:
                    c = drop(c)
                term, per_word = M.wordlstm_nll_batch(c, self.data.word_ids[tgt], p, valid)
                n = float(valid.sum())
            loss = term if loss is None else nk.add(loss, term)
            nll_sum += float((per_word * valid).sum())
            units += n
        return loss, nll_sum, units, states

    def train_step(self) -> StepResult:
        """Forward over the next window, backward, clip, Adam update, detach state."""
        start = self.cursor
        stop = min(start + self.cfg.bptt_window, self.steps_per_epoch)
        params = self.model.params
        nk.zero_grads(params.values())
        loss_sum, nll_sum, units, states = self.forward_window(start, stop, self.states)
        loss = nk.scale(loss_sum, 1.0 / max(units, 1.0))
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"non-finite loss at epoch {self.epoch} step {start}: {_first_non_finite(self.model)}")
        loss.backward()
        norm = clip_grad_norm(list(params.values()), self.cfg.clip_norm)
        if not math.isfinite(norm):
            raise NonFiniteError(f"non-finite gradient at epoch {self.epoch} step {start}: {_first_non_finite(self.model)}")
        self.adam.update(params, self.cfg.learning_rate)
        self.states = states.detach()
        words = int((self._matrix[:, start + 1 : stop + 1] >= 0).sum())
        if start == 0:
            words += int((self._lens > 0).sum())
        self.cursor = stop
        return StepResult(loss.item(), nll_sum, units, words, norm)

    def run_epoch(
        self,
        log_fn: Callable[[str], None] | None = None,
        on_step: Callable[[int, StepResult], None] | None = None,
        max_steps: int | None = None,
        stop: Callable[[], bool] | None = None,
    ) -> EpochMetrics:
        """Train through the rest of the current epoch, then advance the epoch counter.

        With ``max_steps`` or a ``stop`` predicate the loop may end early; the
        epoch then stays open (``metrics.complete`` is False) and a later call
        continues it.
        """
        if self.streams is None:
            self.start_epoch(self.epoch)
        t0 = time.perf_counter()
        nll = units = 0.0
        words = steps = 0
        trace = []
        while not self.epoch_done and (max_steps is None or steps < max_steps) and not (stop and stop()):
            start = self.cursor
            r = self.train_step()
            nll += r.nll_sum
            units += r.n_units
            words += r.words
            steps += 1
            trace.append(r.loss)
            if on_step:
                on_step(start, r)
            if log_fn and steps % self.cfg.log_every == 0:
                wps = words / max(time.perf_counter() - t0, 1e-9)
                log_fn(f"{self.epoch} {self.cursor} {r.loss:.6f} {wps:.1f}")
        elapsed = max(time.perf_counter() - t0, 1e-9)
        mean = nll / max(units, 1.0)
        complete = self.epoch_done
        metrics = EpochMetrics(self.epoch, mean, math.exp(mean), words, words / elapsed, steps, trace, complete)
        if complete:
            if log_fn:
                log_fn(f"{self.epoch} {self.cursor} {mean:.6f} {metrics.words_per_sec:.1f}")
            self.epoch += 1
            self.streams = None
        return metrics


# -- checkpoints ------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: M.Model
    adam: AdamState
    cfg: TrainConfig
    vocab: CharVocab | None
    word_vocab: WordVocab | None
    rng_state: dict | None
    epoch: int
    cursor: int
    states: M.RecurrentState | None
    manifest: dict

    def trainer(self, sentences) -> Trainer:
        """Rebuild a trainer positioned exactly where the checkpoint was taken."""
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        tr = Trainer(self.model, self.cfg, sentences, self.vocab, self.word_vocab, self.adam, rng)
        tr.epoch = self.epoch
        if self.states is not None:
            tr.start_epoch(self.epoch, self.cursor, self.states)
        return tr


def _to_le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def save_checkpoint(
    path,
    model: M.Model,
    adam: AdamState,
    cfg: TrainConfig,
    vocab: CharVocab | None = None,
    word_vocab: WordVocab | None = None,
    rng: np.random.Generator | None = None,
    epoch: int = 0,
    cursor: int = 0,
    states: M.RecurrentState | None = None,
) -> None:
    """Write a versioned text manifest followed by little-endian raw payloads.

    The write is atomic (temporary file, then rename).
    """
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.params.items():
        entries.append((f"param/{name}", p.data))
    for name in model.params:
        entries.append((f"adam.m/{name}", adam.m[name]))
        entries.append((f"adam.v/{name}", adam.v[name]))
    if states is not None:
        for i, arr in enumerate(states.arrays()):
            entries.append((f"state/{i}", arr))
    payload = io.BytesIO()
    tensors = []
    for name, arr in entries:
        raw = _to_le(arr)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str, "nbytes": len(raw)})
        payload.write(raw)
    body = payload.getvalue()
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "artifact_version": __version__,
        "kind": model.kind,
        "dims": asdict(model.dims),
        "config": asdict(cfg),
        "precision": cfg.precision,
        "char_vocab_size": model.dims.char_vocab,
        "word_vocab_size": model.dims.word_vocab,
        "char_vocab": vocab.symbols if vocab else None,
        "word_vocab": word_vocab.words if word_vocab else None,
        "char_vocab_sha256": vocab.digest() if vocab else None,
        "word_vocab_sha256": word_vocab.digest() if word_vocab else None,
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "progress": {"epoch": epoch, "cursor": cursor, "has_states": states is not None},
        "tensors": tensors,
        "payload_bytes": len(body),
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True, indent=1, ensure_ascii=False).encode("utf-8")
    header = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{len(text)}\n".encode("ascii")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(text)
        fh.write(b"\n")
        fh.write(body)
    os.replace(tmp, path)


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.decode("ascii").split()
        size_line, rest = rest.split(b"\n", 1)
        size = int(size_line)
    except ValueError:
        raise CheckpointError(f"{path}: not a checkpoint file") from None
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(version) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    if len(rest) < size + 1:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(rest[:size].decode("utf-8"))
    body = rest[size + 1 :]
    if len(body) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, manifest says {manifest['payload_bytes']} (truncated file?)")
    if hashlib.sha256(body).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return manifest, body


def load_checkpoint(path, expected_char_vocab: str | None = None, expected_word_vocab: str | None = None) -> Checkpoint:
    """Inverse of :func:`save_checkpoint`. Vocabulary digests, when given, must match."""
    manifest, body = read_manifest(path)
    if expected_char_vocab is not None and manifest["char_vocab_sha256"] != expected_char_vocab:
        raise CheckpointError(f"{path}: character vocabulary hash does not match the supplied vocabulary")
    if expected_word_vocab is not None and manifest["word_vocab_sha256"] != expected_word_vocab:
        raise CheckpointError(f"{path}: word vocabulary hash does not match the supplied vocabulary")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for t in manifest["tensors"]:
        n = t["nbytes"]
        arr = np.frombuffer(body, dtype=np.dtype(t["dtype"]), count=n // np.dtype(t["dtype"]).itemsize, offset=offset)
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.dtype(t["dtype"]).newbyteorder("="))
        offset += n
    dims = M.Dims(**manifest["dims"])
    params = {
        name[len("param/") :]: Tensor(arr, requires_grad=True, name=name[len("param/") :], dtype=arr.dtype)
        for name, arr in arrays.items()
        if name.startswith("param/")
    }
    expected = M.param_shapes(manifest["kind"], dims)
    if list(expected) != list(params) or any(tuple(params[k].shape) != v for k, v in expected.items()):
        raise CheckpointError(f"{path}: parameter layout does not match a {manifest['kind']} model with dims {dims}")
    a = manifest["adam"]
    adam = AdamState(
        {k: arrays[f"adam.m/{k}"].copy() for k in params},
        {k: arrays[f"adam.v/{k}"].copy() for k in params},
        a["step"],
        a["beta1"],
        a["beta2"],
        a["eps"],
    )
    states = None
    if manifest["progress"]["has_states"]:
        flat = [Tensor(arrays[f"state/{i}"], dtype=arrays[f"state/{i}"].dtype) for i in range(sum(k.startswith("state/") for k in arrays))]
        states = M.RecurrentState([(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)])
    return Checkpoint(
        model=M.Model(manifest["kind"], dims, params),
        adam=adam,
        cfg=TrainConfig.from_dict(manifest["config"]),
        vocab=CharVocab(manifest["char_vocab"]) if manifest["char_vocab"] else None,
        word_vocab=WordVocab(manifest["word_vocab"]) if manifest["word_vocab"] else None,
        rng_state=manifest["rng_state"],
        epoch=manifest["progress"]["epoch"],
        cursor=manifest["progress"]["cursor"],
        states=states,
        manifest=manifest,
    )


def checkpoint_trainer(path, trainer: Trainer) -> None:
    """Save everything needed to resume ``trainer`` bit-exactly."""
    save_checkpoint(
        path,
        trainer.model,
        trainer.adam,
        trainer.cfg,
        trainer.vocab,
        trainer.word_vocab,
        trainer.rng,
        trainer.epoch,
        trainer.cursor,
        trainer.states if trainer.streams is not None else None,
    )
